"""
Classifier head with importance-weighted token aggregation and the
logit-masked objective.

The logit input is ``h = CLS + sum_i S(x)_i IMG_i`` where the token
importance ``S(x) = softmax(W_s . cos(h_k, k))`` is computed from one prompted
layer's attention keys against that layer's prompt keys. During training,
logits of classes outside the current task are replaced by -inf, which stops
the gradient into their classifier rows exactly.
"""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray

from iprompt_lab.encoder import EncoderTrace
from iprompt_lab.exceptions import DimensionError, InvalidMaskError
from iprompt_lab.numerics import (
    Tensor,
    add,
    cosine_matrix,
    cross_entropy,
    masked_fill,
    matmul,
    reshape,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)


@dataclass
class HeadParams:
    """
    Linear classifier ``logits = h @ W^T + b`` plus importance weights ``W_s``.

    ``W_s`` holds one scalar per pool entry and starts at zero, so token
    importance starts uniform. With ``zero_weight`` the classifier rows start
    at zero too, so rows of classes not yet trained keep zero logits.
    """

    weight: Tensor
    bias: Tensor
    importance: Tensor

    @classmethod
    def initialize(
        cls, num_classes: int, embed_dim: int, pool_size: int, seed: int, zero_weight: bool = False
    ) -> "HeadParams":
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(embed_dim)
        if zero_weight:
            weight = np.zeros((num_classes, embed_dim))
        else:
            weight = rng.uniform(-bound, bound, size=(num_classes, embed_dim))
        return cls(
            weight=Tensor(weight, True, "head.weight"),
            bias=Tensor(np.zeros(num_classes), True, "head.bias"),
            importance=Tensor(np.zeros(pool_size), True, "head.importance"),
        )

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def classifier_parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias, self.importance]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(t.name, t) for t in self.parameters()]


@dataclass(frozen=True)
class LogitMask:
    """Set of classes whose logits stay finite."""

    allowed: frozenset[int]
    num_classes: int

    @classmethod
    def of(cls, classes: Iterable[int], num_classes: int) -> "LogitMask":
        allowed = frozenset(int(c) for c in classes)
        if any(not 0 <= c < num_classes for c in allowed):
            raise DimensionError(f"mask classes must lie in [0, {num_classes})")
        return cls(allowed, num_classes)

    @classmethod
    def full(cls, num_classes: int) -> "LogitMask":
        return cls(frozenset(range(num_classes)), num_classes)

    @property
    def keep(self) -> NDArray[np.bool_]:
        keep = np.zeros(self.num_classes, dtype=bool)
        keep[sorted(self.allowed)] = True
        return keep

    def check_labels(self, labels: NDArray[np.integer[Any]] | Sequence[int]) -> None:
        outside = sorted({int(y) for y in np.asarray(labels)} - self.allowed)
        if outside:
            raise InvalidMaskError(f"labels {outside} fall outside the logit mask")


def importance_weights(h_k: Tensor, keys: Tensor, w_s: Tensor) -> Tensor:
    """
    Softmax token importance over the image tokens.

    Args:
        h_k: ``[B, p+1, d]`` (or ``[p+1, d]``) attention keys; row 0 is CLS.
        keys: ``[S, d]`` prompt keys of the same layer.
        w_s: ``[S]`` importance weights.

    Returns:
        ``[B, p]`` (or ``[p]``) weights summing to 1 per sample.
    """
    single = h_k.ndim == 2
    if single:
        h_k = reshape(h_k, (1, *h_k.shape))
    if keys.shape[0] != w_s.shape[0]:
        raise DimensionError(f"{keys.shape[0]} prompt keys but {w_s.shape[0]} importance weights")
    batch, tokens, _ = h_k.shape
    image_keys = h_k[:, 1:, :]
    if keys.shape[0] == 0:
        uniform = Tensor(np.full((batch, tokens - 1), 1.0 / (tokens - 1)))
        return uniform[0] if single else uniform
    scores = matmul(cosine_matrix(image_keys, keys), reshape(w_s, (-1, 1)))
    weights = softmax(reshape(scores, (batch, tokens - 1)), axis=-1)
    return weights[0] if single else weights


def aggregate_logit_input(trace: EncoderTrace, weights: Tensor | None) -> Tensor:
    """
    ``CLS + sum_i weights_i IMG_i`` over the final encoder outputs.

    Args:
        trace: Encoder trace with final tokens.
        weights: ``[B, p]`` token importance, or None for the class token only.

    Returns:
        ``[B, d]`` classifier input.
    """
    cls_out = trace.cls_output
    if weights is None:
        return cls_out
    images = trace.image_outputs
    batch, p, d = images.shape
    if weights.shape != (batch, p):
        raise DimensionError(f"importance weights {weights.shape} do not match image tokens {(batch, p)}")
    pooled = matmul(reshape(weights, (batch, 1, p)), images)
    return add(cls_out, reshape(pooled, (batch, d)))


def logits(h: Tensor, head: HeadParams) -> Tensor:
    return add(matmul(h, transpose(head.weight)), head.bias)


def masked_logits(h: Tensor, head: HeadParams, mask: LogitMask) -> Tensor:
    if mask.num_classes != head.num_classes:
        raise DimensionError(f"mask covers {mask.num_classes} classes, head has {head.num_classes}")
    return masked_fill(logits(h, head), mask.keep[None, :])


def masked_loss(
    h: Tensor,
    head: HeadParams,
    mask: LogitMask,
    labels: NDArray[np.integer[Any]] | Sequence[int],
) -> Tensor:
    """
    Cross-entropy over masked logits.

    Classifier rows of masked classes receive exactly zero gradient.

    Raises:
        InvalidMaskError: If a label lies outside the mask.
    """
    mask.check_labels(labels)
    return cross_entropy(masked_logits(h, head, mask), labels)


def predict(h: Tensor, head: HeadParams, mask: LogitMask) -> NDArray[np.int64]:
    """Arg-max class under the mask; ties go to the lowest class id."""
    return np.argmax(masked_logits(h, head, mask).data, axis=1).astype(np.int64)
