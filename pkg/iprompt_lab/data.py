"""
Seeded synthetic image classes and the IPDS binary dataset format.

Every class is a recipe of Gaussian colour blobs over a tinted background.
Recipes depend only on the master seed and the class id, so the pretrain,
train and test splits draw from the same class distributions; samples
differ by jittered blob positions, scales, amplitudes and pixel noise.

IPDS layout (little-endian)::

    magic "IPDS" | u32 version | u32 N | u32 C | u32 H | u32 W | u32 num_classes
    | u32 split | u8 pixels[N*C*H*W] | u32 labels[N] | u32 crc32
"""

import logging
import struct
import zlib
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from iprompt_lab.config import ExperimentConfig
from iprompt_lab.exceptions import FormatError, UsageError

logger = logging.getLogger(__name__)

Split = Literal["pretrain", "train", "test"]

DATASET_MAGIC = b"IPDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4s7I")
_CRC = struct.Struct("<I")
_SPLIT_CODES: dict[Split, int] = {"pretrain": 0, "train": 1, "test": 2}
_SPLIT_NAMES: dict[int, Split] = {code: name for name, code in _SPLIT_CODES.items()}

DATASET_FILES: dict[Split, str] = {
    "pretrain": "pretrain.ipds",
    "train": "train.ipds",
    "test": "test.ipds",
}


def class_name(class_id: int) -> str:
    return f"class_{class_id:02d}"


@dataclass
class Dataset:
    """
    An immutable labelled image set.

    Attributes:
        images: ``[N, C, H, W]`` u8 pixels.
        labels: ``[N]`` class ids, each ``< len(class_names)``.
        class_names: Names of every class id of the generating world.
        split: pretrain, train or test.
    """

    images: NDArray[np.uint8]
    labels: NDArray[np.int64]
    class_names: list[str]
    split: Split

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise UsageError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise UsageError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def class_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(n) for i, n in zip(ids, counts, strict=True)}

    def float_images(self) -> NDArray[np.float64]:
        """Pixels rescaled to [-1, 1]."""
        return (self.images.astype(np.float64) / 255.0 - 0.5) / 0.5

    def take(self, index: NDArray[np.int64]) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.class_names, self.split)


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Recipe for one generated split.

    ``classes`` selects which class ids of the ``num_classes`` world are
    emitted (default: all of them).
    """

    num_classes: int
    per_class_count: int
    image_size: int = 32
    channels: int = 3
    rng_seed: int = 0
    noise_sigma: float = 12.0
    classes: tuple[int, ...] | None = None
    split: Split = "train"
    min_blobs: int = 2
    max_blobs: int = 4

    def class_ids(self) -> tuple[int, ...]:
        ids = tuple(range(self.num_classes)) if self.classes is None else tuple(self.classes)
        if any(not 0 <= c < self.num_classes for c in ids):
            raise UsageError(f"class ids must lie in [0, {self.num_classes})")
        return ids


@dataclass(frozen=True)
class _ClassRecipe:
    background: NDArray[np.float64]
    centers: NDArray[np.float64]
    scales: NDArray[np.float64]
    colors: NDArray[np.float64]
    amplitudes: NDArray[np.float64]


def _recipe(spec: SyntheticSpec, class_id: int) -> _ClassRecipe:
    rng = np.random.default_rng((spec.rng_seed, 7919, class_id))
    count = int(rng.integers(spec.min_blobs, spec.max_blobs + 1))
    return _ClassRecipe(
        background=rng.uniform(0.05, 0.35, size=spec.channels),
        centers=rng.uniform(0.15, 0.85, size=(count, 2)) * spec.image_size,
        scales=rng.uniform(0.06, 0.18, size=count) * spec.image_size,
        colors=rng.uniform(0.2, 1.0, size=(count, spec.channels)),
        amplitudes=rng.uniform(0.4, 0.7, size=count),
    )


def _render(recipe: _ClassRecipe, spec: SyntheticSpec, rng: np.random.Generator) -> NDArray[np.uint8]:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    canvas = np.broadcast_to(recipe.background[:, None, None], (spec.channels, size, size)).copy()
    n = recipe.centers.shape[0]
    centers = recipe.centers + rng.normal(0.0, 0.04 * size, size=(n, 2))
    scales = recipe.scales * (1.0 + rng.normal(0.0, 0.1, size=n)).clip(0.5, 1.5)
    amplitudes = recipe.amplitudes * (1.0 + rng.normal(0.0, 0.1, size=n))
    for (cy, cx), s, a, color in zip(centers, scales, amplitudes, recipe.colors, strict=True):
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s * s))
        canvas += a * color[:, None, None] * blob[None]
    pixels = canvas * 255.0 + rng.normal(0.0, spec.noise_sigma, size=canvas.shape)
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def generate(spec: SyntheticSpec) -> Dataset:
    """
    Generate a split; identical spec and seed give bit-identical datasets.

    Samples are ordered class by class in ``spec.classes`` order.
    """
    ids = spec.class_ids()
    jitter = np.random.default_rng((spec.rng_seed, _SPLIT_CODES[spec.split] + 1))
    total = len(ids) * spec.per_class_count
    images = np.zeros((total, spec.channels, spec.image_size, spec.image_size), dtype=np.uint8)
    labels = np.zeros(total, dtype=np.int64)
    row = 0
    for class_id in ids:
        recipe = _recipe(spec, class_id)
        for _ in range(spec.per_class_count):
            images[row] = _render(recipe, spec, jitter)
            labels[row] = class_id
            row += 1
    logger.info(
        "Generated %s split",
        spec.split,
        extra={"samples": total, "classes": len(ids), "seed": spec.rng_seed},
    )
    return Dataset(images, labels, [class_name(i) for i in range(spec.num_classes)], spec.split)


def continual_class_ids(config: ExperimentConfig) -> list[int]:
    """Class ids ``[0, n_continual)`` used by the continual tasks."""
    return list(range(config.data.continual_classes))


def pretrain_class_ids(config: ExperimentConfig) -> list[int]:
    return list(range(config.data.continual_classes, config.data.num_classes))


def build_datasets(config: ExperimentConfig) -> dict[Split, Dataset]:
    """Generate the pretrain, train and test splits an experiment uses."""
    enc, data = config.encoder, config.data

    def spec(split: Split, classes: list[int], count: int) -> SyntheticSpec:
        return SyntheticSpec(
            num_classes=data.num_classes,
            per_class_count=count,
            image_size=enc.image_size,
            channels=enc.channels,
            rng_seed=config.seed,
            noise_sigma=data.noise_sigma,
            classes=tuple(classes),
            split=split,
        )

    continual = continual_class_ids(config)
    return {
        "pretrain": generate(spec("pretrain", pretrain_class_ids(config), data.train_per_class + data.test_per_class)),
        "train": generate(spec("train", continual, data.train_per_class)),
        "test": generate(spec("test", continual, data.test_per_class)),
    }


def subset_by_classes(dataset: Dataset, classes: Iterable[int]) -> Dataset:
    """
    Keep samples of the given classes, preserving label ids and order.

    Raises:
        UsageError: If a class id does not exist in the dataset's world.
    """
    wanted = {int(c) for c in classes}
    unknown = sorted(c for c in wanted if not 0 <= c < dataset.num_classes)
    if unknown:
        raise UsageError(f"unknown class ids {unknown}")
    keep = np.flatnonzero(np.isin(dataset.labels, sorted(wanted)))
    return dataset.take(keep.astype(np.int64))


def iterate_batches(
    dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[tuple[NDArray[np.float64], NDArray[np.int64]]]:
    """Yield ``(float images, labels)`` batches, shuffled when ``rng`` is given."""
    order = np.arange(len(dataset)) if rng is None else rng.permutation(len(dataset))
    pixels = dataset.float_images()
    for start in range(0, len(order), batch_size):
        index = order[start : start + batch_size]
        yield pixels[index], dataset.labels[index]


def encode_dataset(dataset: Dataset) -> bytes:
    n, c, h, w = dataset.images.shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, h, w, dataset.num_classes, _SPLIT_CODES[dataset.split])
    body = header + np.ascontiguousarray(dataset.images).tobytes() + dataset.labels.astype("<u4").tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def decode_dataset(blob: bytes) -> Dataset:
    """
    Parse IPDS bytes.

    Raises:
        FormatError: On bad magic, unsupported version, truncation, trailing
                     bytes, CRC mismatch or out-of-range labels.
    """
    if len(blob) < _HEADER.size + _CRC.size:
        raise FormatError("dataset file truncated (header)")
    magic, version, n, c, h, w, num_classes, split_code = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if split_code not in _SPLIT_NAMES:
        raise FormatError(f"unknown split code {split_code}")
    pixel_bytes = n * c * h * w
    expected = _HEADER.size + pixel_bytes + 4 * n + _CRC.size
    if len(blob) != expected:
        raise FormatError(f"dataset file has {len(blob)} bytes, expected {expected}")
    body, (crc,) = blob[: -_CRC.size], _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if zlib.crc32(body) != crc:
        raise FormatError("dataset CRC mismatch")
    offset = _HEADER.size
    images = np.frombuffer(blob, dtype=np.uint8, count=pixel_bytes, offset=offset).reshape(n, c, h, w).copy()
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=offset + pixel_bytes).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise FormatError("label outside the class range")
    return Dataset(images, labels, [class_name(i) for i in range(num_classes)], _SPLIT_NAMES[split_code])


def save_dataset(path: Path | str, dataset: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(dataset))
    logger.info("Wrote dataset %s", path, extra={"samples": len(dataset), "split": dataset.split})


def load_dataset(path: Path | str) -> Dataset:
    """
    Raises:
        FormatError: If the file is malformed.
        UsageError: If the file does not exist.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise UsageError(f"dataset file not found: {path}") from exc
    return decode_dataset(blob)


def load_datasets(directory: Path | str) -> dict[Split, Dataset]:
    directory = Path(directory)
    return {split: load_dataset(directory / name) for split, name in DATASET_FILES.items()}
