"""
IPVT weight snapshots for the frozen backbone and learned prompts.

Layout (little-endian)::

    magic "IPVT" | u32 version | u32 kind | u32 config_len | config JSON
    | u32 tensor_count | tensors... | u32 chunk_count | u32 chunk_of[chunk_count]
    | u32 crc32

Each tensor is ``u32 name_len | name | u32 ndim | u32 dims[ndim] | f64 data``
in declaration order. The chunk table maps pool prompt index to task and is
empty for backbone snapshots.
"""

import json
import logging
import struct
import zlib
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from iprompt_lab.config import EncoderConfig
from iprompt_lab.encoder import EncoderParams
from iprompt_lab.exceptions import FormatError, UsageError
from iprompt_lab.numerics import Tensor

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"IPVT"
SNAPSHOT_VERSION = 1
_U32 = struct.Struct("<I")
_PREAMBLE = struct.Struct("<4s3I")


class SnapshotKind(IntEnum):
    ENCODER = 0
    PROMPTS = 1


@dataclass
class Snapshot:
    kind: SnapshotKind
    config: dict[str, Any]
    tensors: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    chunk_of: list[int] = field(default_factory=list)


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("snapshot truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return int(_U32.unpack(self.take(4))[0])


def encode_snapshot(
    kind: SnapshotKind,
    config: dict[str, Any],
    tensors: Sequence[tuple[str, Tensor]],
    chunk_of: Sequence[int] = (),
) -> bytes:
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [_PREAMBLE.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, int(kind), len(config_bytes)), config_bytes]
    parts.append(_U32.pack(len(tensors)))
    for name, tensor in tensors:
        encoded = name.encode("utf-8")
        parts += [_U32.pack(len(encoded)), encoded, _U32.pack(tensor.ndim)]
        parts += [_U32.pack(dim) for dim in tensor.shape]
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    parts.append(_U32.pack(len(chunk_of)))
    parts += [_U32.pack(t) for t in chunk_of]
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def decode_snapshot(blob: bytes) -> Snapshot:
    """
    Raises:
        FormatError: On bad magic, unsupported version or kind, truncation,
                     trailing bytes or CRC mismatch.
    """
    if len(blob) < _PREAMBLE.size + 4:
        raise FormatError("snapshot truncated (header)")
    (crc,) = _U32.unpack_from(blob, len(blob) - 4)
    body = blob[:-4]
    magic, version, kind, config_len = _PREAMBLE.unpack_from(body)
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"unsupported snapshot version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("snapshot CRC mismatch")
    try:
        snapshot_kind = SnapshotKind(kind)
    except ValueError as exc:
        raise FormatError(f"unknown snapshot kind {kind}") from exc

    reader = _Reader(body)
    reader.pos = _PREAMBLE.size
    try:
        config = json.loads(reader.take(config_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("snapshot config block is not valid JSON") from exc

    snapshot = Snapshot(kind=snapshot_kind, config=config)
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        snapshot.tensors[name] = data
    snapshot.chunk_of = [reader.u32() for _ in range(reader.u32())]
    if reader.pos != len(body):
        raise FormatError("trailing bytes after snapshot tables")
    return snapshot


def write_snapshot(path: Path | str, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    logger.info("Wrote snapshot %s", path, extra={"bytes": len(blob)})


def read_snapshot(path: Path | str) -> Snapshot:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise UsageError(f"snapshot file not found: {path}") from exc
    return decode_snapshot(blob)


def encode_encoder(params: EncoderParams) -> bytes:
    return encode_snapshot(SnapshotKind.ENCODER, params.config.model_dump(mode="json"), params.named_tensors())


def decode_encoder(blob: bytes) -> EncoderParams:
    """Rebuild a frozen EncoderParams from IPVT bytes."""
    snapshot = decode_snapshot(blob)
    if snapshot.kind is not SnapshotKind.ENCODER:
        raise FormatError("snapshot does not hold an encoder")
    config = EncoderConfig.model_validate(snapshot.config)
    params = EncoderParams.initialize(config, seed=0)
    named = params.named_tensors()
    if [name for name, _ in named] != list(snapshot.tensors):
        raise FormatError("snapshot tensors do not match the encoder layout")
    for name, tensor in named:
        data = snapshot.tensors[name]
        if data.shape != tensor.shape:
            raise FormatError(f"tensor {name} has shape {data.shape}, expected {tensor.shape}")
        tensor.data = data.copy()
    params.freeze()
    return params


def save_encoder(path: Path | str, params: EncoderParams) -> None:
    write_snapshot(path, encode_encoder(params))


def load_encoder(path: Path | str) -> EncoderParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise UsageError(f"backbone snapshot not found: {path}") from exc
    params = decode_encoder(blob)
    logger.info("Loaded backbone %s", path, extra={"parameters": params.parameter_count()})
    return params
