"""
Miniature Vision Transformer backbone for iprompt-lab.

Pre-LN ViT: patch tokenisation with a class token and learned positional
embeddings, stacked transformer layers (MHSA + GELU MLP with residuals) and a
final LayerNorm. Prompted layers expose their self-attention keys
``h_k = W_k LN(h) + b_k`` to a prompt hook *before* any prompt is applied, and
accept additive key/value offsets or key/value prefixes in return.

Example::

    params = EncoderParams.initialize(EncoderConfig(), seed=0)
    trace = forward(images, params)
    trace.cls_output  # [B, d]
"""

import functools
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, fields
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from iprompt_lab.config import EncoderConfig
from iprompt_lab.exceptions import DimensionError
from iprompt_lab.numerics import (
    Tensor,
    add,
    concat,
    gelu,
    layernorm,
    matmul,
    reshape,
    softmax,
    swap_last,
    transpose,
)

logger = logging.getLogger(__name__)

OffsetMode = Literal["split", "input"]


@dataclass
class LayerPrompt:
    """
    What a prompt hook hands back to one transformer layer.

    Offsets are ``[B, N, d]`` (or ``[N, d]``) and are added to the projected
    keys/values in model dimension before the head split. Prefixes are
    ``[B, L, d]`` (or ``[L, d]``) rows appended to keys/values only.
    """

    key_offset: Tensor | None = None
    value_offset: Tensor | None = None
    key_prefix: Tensor | None = None
    value_prefix: Tensor | None = None

    @property
    def has_offsets(self) -> bool:
        return self.key_offset is not None or self.value_offset is not None

    def summed_offset(self) -> Tensor | None:
        """Key and value offsets added together (single input-side offset)."""
        if self.key_offset is None:
            return self.value_offset
        if self.value_offset is None:
            return self.key_offset
        return add(self.key_offset, self.value_offset)

    def prefixes_only(self) -> "LayerPrompt":
        return LayerPrompt(key_prefix=self.key_prefix, value_prefix=self.value_prefix)


PromptHook = Callable[[int, Tensor], LayerPrompt | None]
LayerPromptSource = LayerPrompt | Callable[[Tensor], LayerPrompt | None] | None


@dataclass
class LayerParams:
    """Weights of one pre-LN transformer layer. Linear maps act as ``x @ W + b``."""

    ln1_gain: Tensor
    ln1_bias: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_fc1: Tensor
    b_fc1: Tensor
    w_fc2: Tensor
    b_fc2: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass
class EncoderParams:
    """
    Backbone weights.

    ``w_k`` of every layer is the self-attention key projection whose output
    feeds semantic prompt matching. When ``frozen`` is true no tensor holds a
    gradient buffer and every data buffer is read-only.
    """

    config: EncoderConfig
    patch_weight: Tensor
    patch_bias: Tensor
    pos_embed: Tensor
    cls_token: Tensor
    layers: list[LayerParams]
    final_gain: Tensor
    final_bias: Tensor
    frozen: bool = False

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int, frozen: bool = False) -> "EncoderParams":
        """Xavier-uniform linear weights, N(0, 0.02) embeddings, unit LayerNorm gains."""
        rng = np.random.default_rng(seed)
        d, m = config.embed_dim, config.mlp_dim
        trainable = not frozen

        def linear(n_in: int, n_out: int, name: str) -> Tensor:
            bound = math.sqrt(6.0 / (n_in + n_out))
            return Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), trainable, name)

        def const(value: float, size: int, name: str) -> Tensor:
            return Tensor(np.full(size, value), trainable, name)

        layers = []
        for i in range(config.num_layers):
            p = f"layers.{i}."
            layers.append(
                LayerParams(
                    ln1_gain=const(1.0, d, p + "ln1_gain"),
                    ln1_bias=const(0.0, d, p + "ln1_bias"),
                    w_q=linear(d, d, p + "w_q"),
                    b_q=const(0.0, d, p + "b_q"),
                    w_k=linear(d, d, p + "w_k"),
                    b_k=const(0.0, d, p + "b_k"),
                    w_v=linear(d, d, p + "w_v"),
                    b_v=const(0.0, d, p + "b_v"),
                    w_o=linear(d, d, p + "w_o"),
                    b_o=const(0.0, d, p + "b_o"),
                    ln2_gain=const(1.0, d, p + "ln2_gain"),
                    ln2_bias=const(0.0, d, p + "ln2_bias"),
                    w_fc1=linear(d, m, p + "w_fc1"),
                    b_fc1=const(0.0, m, p + "b_fc1"),
                    w_fc2=linear(m, d, p + "w_fc2"),
                    b_fc2=const(0.0, d, p + "b_fc2"),
                )
            )
        params = cls(
            config=config,
            patch_weight=linear(config.patch_dim, d, "patch_weight"),
            patch_bias=const(0.0, d, "patch_bias"),
            pos_embed=Tensor(rng.normal(0.0, 0.02, size=(config.num_tokens, d)), trainable, "pos_embed"),
            cls_token=Tensor(rng.normal(0.0, 0.02, size=d), trainable, "cls_token"),
            layers=layers,
            final_gain=const(1.0, d, "final_gain"),
            final_bias=const(0.0, d, "final_bias"),
        )
        if frozen:
            params.freeze()
        return params

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """All tensors in declaration order (the snapshot order)."""
        named = [
            ("patch_weight", self.patch_weight),
            ("patch_bias", self.patch_bias),
            ("pos_embed", self.pos_embed),
            ("cls_token", self.cls_token),
        ]
        for i, layer in enumerate(self.layers):
            named.extend((f"layers.{i}.{name}", t) for name, t in layer.named_tensors())
        named.extend([("final_gain", self.final_gain), ("final_bias", self.final_bias)])
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def freeze(self) -> None:
        for t in self.parameters():
            t.freeze()
        self.frozen = True

    def clone(self, trainable: bool = False) -> "EncoderParams":
        """Deep copy; ``trainable=True`` yields an unfrozen copy with gradient buffers."""
        copies = {name: Tensor(t.data, requires_grad=trainable, name=name) for name, t in self.named_tensors()}
        layers = [
            LayerParams(**{f.name: copies[f"layers.{i}.{f.name}"] for f in fields(LayerParams)})
            for i in range(len(self.layers))
        ]
        params = EncoderParams(
            config=self.config,
            patch_weight=copies["patch_weight"],
            patch_bias=copies["patch_bias"],
            pos_embed=copies["pos_embed"],
            cls_token=copies["cls_token"],
            layers=layers,
            final_gain=copies["final_gain"],
            final_bias=copies["final_bias"],
        )
        if not trainable:
            params.freeze()
        return params

    def fingerprint(self) -> bytes:
        """Concatenated raw bytes of every tensor, for bit-stability checks."""
        return b"".join(t.data.tobytes() for t in self.parameters())


@dataclass
class EncoderTrace:
    """
    Activation record of one encoder invocation.

    Only prompted layers are recorded: their input ``h_l`` and the pre-prompt
    attention keys ``h_k`` (heads concatenated), plus the final tokens.
    """

    hidden: dict[int, Tensor] = field(default_factory=dict)
    keys: dict[int, Tensor] = field(default_factory=dict)
    tokens: Tensor | None = None
    num_patches: int = 0
    forward_passes: int = 1

    @property
    def output(self) -> Tensor:
        if self.tokens is None:
            raise DimensionError("trace has no output tokens")
        return self.tokens

    @property
    def cls_output(self) -> Tensor:
        """``[B, d]`` class-token output."""
        return self.output[:, 0, :]

    @property
    def image_outputs(self) -> Tensor:
        """``[B, p, d]`` image-token outputs (appended prompt tokens excluded)."""
        return self.output[:, 1 : self.num_patches + 1, :]


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def extract_patches(images: NDArray[np.float64], config: EncoderConfig) -> NDArray[np.float64]:
    """``[B, C, H, W]`` pixels to ``[B, p, C*P*P]`` row-major patches."""
    b, c, h, w = images.shape
    if (c, h, w) != (config.channels, config.image_size, config.image_size):
        raise DimensionError(
            f"image shape {(c, h, w)} does not match encoder "
            f"{(config.channels, config.image_size, config.image_size)}"
        )
    ps, g = config.patch_size, config.image_size // config.patch_size
    grid = images.reshape(b, c, g, ps, g, ps).transpose(0, 2, 4, 1, 3, 5)
    return grid.reshape(b, g * g, config.patch_dim)


def tokenize(images: Tensor | NDArray[np.float64], params: EncoderParams) -> Tensor:
    """
    Build ``h_0 = [CLS; IMG_1..IMG_p] + pos``.

    Args:
        images: ``[C, H, W]`` or ``[B, C, H, W]`` float pixels.
        params: Backbone weights.

    Returns:
        ``[B, p+1, d]`` tokens (``[p+1, d]`` for a single image).

    Raises:
        DimensionError: If the image does not match the encoder config.
    """
    pixels = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    single = pixels.ndim == 3
    if single:
        pixels = pixels[None]
    if pixels.ndim != 4:
        raise DimensionError(f"expected [B, C, H, W] images, got shape {pixels.shape}")
    config = params.config
    patches = Tensor(extract_patches(pixels, config))
    img_tokens = add(matmul(patches, params.patch_weight), params.patch_bias)
    batch = pixels.shape[0]
    cls_rows = add(Tensor(np.zeros((batch, 1, config.embed_dim))), reshape(params.cls_token, (1, 1, -1)))
    h0 = add(concat([cls_rows, img_tokens], axis=1), params.pos_embed)
    return h0[0] if single else h0


def _promote(h: Tensor) -> tuple[Tensor, bool]:
    if h.ndim == 2:
        return reshape(h, (1, *h.shape)), True
    if h.ndim != 3:
        raise DimensionError(f"expected [B, N, d] tokens, got {h.shape}")
    return h, False


def _check_rows(name: str, t: Tensor, tokens: int | None, dim: int) -> Tensor:
    if t.ndim not in (2, 3) or t.shape[-1] != dim or (tokens is not None and t.shape[-2] != tokens):
        want = f"[..., {tokens}, {dim}]" if tokens is not None else f"[..., L, {dim}]"
        raise DimensionError(f"{name} has shape {t.shape}, expected {want}")
    return t


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _append_rows(x: Tensor, rows: Tensor) -> Tensor:
    if rows.ndim == 2:
        rows = add(Tensor(np.zeros((x.shape[0], *rows.shape))), reshape(rows, (1, *rows.shape)))
    if rows.shape[0] != x.shape[0]:
        raise DimensionError(f"prefix batch {rows.shape[0]} != token batch {x.shape[0]}")
    return concat([x, rows], axis=1)


def attention_keys(x: Tensor, layer: LayerParams) -> Tensor:
    """Self-attention keys ``h_k = x @ W_k + b_k`` of LayerNorm-ed tokens ``x``."""
    return add(matmul(x, layer.w_k), layer.b_k)


def mhsa(
    x: Tensor,
    layer: LayerParams,
    config: EncoderConfig,
    prompt: LayerPrompt | None = None,
    keys: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """
    Multi-head self-attention on LayerNorm-ed tokens.

    Args:
        x: ``[B, N, d]`` (or ``[N, d]``) normalised tokens, i.e. ``LN(h)``.
        layer: Layer weights.
        config: Encoder shape.
        prompt: Optional key/value offsets (added in model dimension before the
                head reshape) and key/value prefixes (appended rows).
        keys: Precomputed ``attention_keys(x, layer)``, reused when given.

    Returns:
        ``(attention output before residual, h_k)`` where ``h_k`` is taken
        before any offset is applied.

    Raises:
        DimensionError: If an offset or prefix is mis-shaped.
    """
    x, single = _promote(x)
    _, n, d = x.shape
    h_k = keys if keys is not None else attention_keys(x, layer)
    h_k, _ = _promote(h_k)
    q = add(matmul(x, layer.w_q), layer.b_q)
    k = h_k
    v = add(matmul(x, layer.w_v), layer.b_v)

    if prompt is not None:
        if prompt.key_offset is not None:
            k = add(k, _check_rows("key_offset", prompt.key_offset, n, d))
        if prompt.value_offset is not None:
            v = add(v, _check_rows("value_offset", prompt.value_offset, n, d))
        if prompt.key_prefix is not None:
            k = _append_rows(k, _check_rows("key_prefix", prompt.key_prefix, None, d))
        if prompt.value_prefix is not None:
            v = _append_rows(v, _check_rows("value_prefix", prompt.value_prefix, None, d))
        if k.shape[1] != v.shape[1]:
            raise DimensionError("key and value prefixes must have the same length")

    heads = config.num_heads
    scale = 1.0 / math.sqrt(config.head_dim)
    scores = matmul(_split_heads(q, heads), swap_last(_split_heads(k, heads))) * scale
    context = matmul(softmax(scores, axis=-1), _split_heads(v, heads))
    merged = reshape(transpose(context, (0, 2, 1, 3)), (x.shape[0], n, d))
    out = add(matmul(merged, layer.w_o), layer.b_o)
    if single:
        return out[0], h_k[0]
    return out, h_k


def mlp(x: Tensor, layer: LayerParams) -> Tensor:
    hidden = gelu(add(matmul(x, layer.w_fc1), layer.b_fc1))
    return add(matmul(hidden, layer.w_fc2), layer.b_fc2)


def transformer_layer(
    h: Tensor,
    layer: LayerParams,
    config: EncoderConfig,
    prompt: LayerPromptSource = None,
    offset_mode: OffsetMode = "split",
) -> tuple[Tensor, Tensor]:
    """
    One pre-LN layer: ``z = MHSA(LN(h)) + h``; ``h' = MLP(LN(z)) + z``.

    Args:
        h: ``[B, N, d]`` layer input.
        layer: Layer weights.
        config: Encoder shape.
        prompt: A LayerPrompt, or a callable receiving this layer's
                pre-prompt keys ``h_k`` and returning one (or None).
        offset_mode: ``split`` adds offsets to attention keys/values;
                     ``input`` adds their sum to ``h`` before LN.

    Returns:
        ``(h_{l+1}, h_k)``.
    """
    eps = config.layernorm_eps
    x = layernorm(h, layer.ln1_gain, layer.ln1_bias, eps)
    h_k = attention_keys(x, layer)
    resolved = prompt(h_k) if callable(prompt) else prompt

    if resolved is not None and offset_mode == "input" and resolved.has_offsets:
        offset = resolved.summed_offset()
        assert offset is not None
        shifted = layernorm(add(h, _check_rows("offset", offset, h.shape[-2], h.shape[-1])),
                            layer.ln1_gain, layer.ln1_bias, eps)
        attn, _ = mhsa(shifted, layer, config, resolved.prefixes_only())
    else:
        attn, _ = mhsa(x, layer, config, resolved, keys=h_k)

    z = add(attn, h)
    out = add(mlp(layernorm(z, layer.ln2_gain, layer.ln2_bias, eps), layer), z)
    return out, h_k


def forward(
    images: Tensor | NDArray[np.float64],
    params: EncoderParams,
    prompt_hook: PromptHook | None = None,
    token_transform: Callable[[Tensor], Tensor] | None = None,
    offset_mode: OffsetMode = "split",
) -> EncoderTrace:
    """
    Run the full encoder once.

    Args:
        images: ``[B, C, H, W]`` (or ``[C, H, W]``) float pixels.
        params: Backbone weights.
        prompt_hook: Called as ``hook(layer_idx, h_k)`` for prompted layers
                     only; returns a LayerPrompt or None.
        token_transform: Applied to ``h_0`` before the first layer (input
                         prompt tuning appends rows here).
        offset_mode: See transformer_layer().

    Returns:
        EncoderTrace counting exactly one encoder invocation.
    """
    config = params.config
    h = tokenize(images, params)
    h, _ = _promote(h)
    if token_transform is not None:
        h = token_transform(h)

    trace = EncoderTrace(num_patches=config.num_patches)
    prompted = set(config.prompted_layers)
    for idx, layer in enumerate(params.layers):
        source: LayerPromptSource = None
        if prompt_hook is not None and idx in prompted:
            source = functools.partial(prompt_hook, idx)
        layer_input = h
        h, h_k = transformer_layer(h, layer, config, source, offset_mode)
        if idx in prompted:
            trace.hidden[idx] = layer_input
            trace.keys[idx] = h_k

    trace.tokens = layernorm(h, params.final_gain, params.final_bias, config.layernorm_eps)
    logger.debug("Encoder forward", extra={"batch": h.shape[0], "tokens": h.shape[1]})
    return trace


def images_to_tensor(pixels: NDArray[np.uint8]) -> NDArray[np.float64]:
    """Scale u8 pixels to roughly zero-mean unit-range floats."""
    return (pixels.astype(np.float64) / 255.0 - 0.5) / 0.5
