"""
Dense tensor arithmetic with reverse-mode automatic differentiation.

Provides Tensor (a float64 numpy buffer plus an optional gradient buffer),
the differentiable ops the encoder, prompt pool and head are built from,
the Adam optimizer with a cosine learning-rate schedule, and a central
finite-difference gradient checker.

Every op returns a new Tensor. When any operand requires a gradient the
result records its parents and a backward closure; ``Tensor.backward()``
walks the recorded graph in reverse topological order and accumulates into
each ``grad`` buffer.

Example::

    from iprompt_lab.numerics import Tensor, matmul

    w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    x = Tensor([[1.0], [1.0]])
    loss = matmul(w, x).sum()
    loss.backward()
    w.grad  # [[1, 1], [1, 1]]
"""

import logging
import math
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from iprompt_lab.exceptions import DimensionError, InvalidMaskError, NumericError, UsageError

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]
BackwardFn = Callable[[Array], None]

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (read-only evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """
    Dense n-dimensional float64 array with an optional gradient accumulator.

    Attributes:
        data: Row-major float64 buffer.
        requires_grad: Whether gradients are accumulated into ``grad``.
        grad: Same-shape float64 buffer, present iff ``requires_grad``.
        name: Optional label used in logs and snapshots.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = "") -> None:
        self.data: Array = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        """Return a copy of the data buffer."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Return a graph-free copy that does not require gradients."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # ------------------------------------------------------------------
    # Gradient management
    # ------------------------------------------------------------------

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def freeze(self) -> None:
        """Drop the gradient buffer and make the data buffer read-only."""
        self.requires_grad = False
        self.grad = None
        self.data.flags.writeable = False

    def unfreeze(self) -> None:
        """Make the tensor trainable with a fresh writable buffer."""
        self.data = self.data.copy()
        self.requires_grad = True
        self.grad = np.zeros_like(self.data)

    def backward(self, grad: ArrayLike | None = None) -> None:
        """
        Accumulate gradients of this tensor into every upstream ``grad``.

        Args:
            grad: Seed gradient. Defaults to 1 for single-element tensors.

        Raises:
            UsageError: If the tensor does not require gradients, or no seed
                        is given for a non-scalar tensor.
        """
        if not self.requires_grad or self.grad is None:
            raise UsageError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a seed gradient for shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.data.shape)
        self.grad += seed

        for node in reversed(_topological_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # Operator sugar
    # ------------------------------------------------------------------

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: float) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: float) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: float) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: "Tensor | float") -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; deep transformer graphs overflow the recursion limit
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as_tensor(value: "Tensor | ArrayLike") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    op: str,
    data: Array,
    parents: Sequence[Tensor],
    backward: BackwardFn,
    allow_inf: bool = False,
) -> Tensor:
    if not allow_inf and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.name = ""
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.grad = np.zeros_like(out.data)
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.grad = None
        out._parents = ()
        out._backward = None
    return out


def _accumulate(target: Tensor, grad: Array) -> None:
    if target.requires_grad and target.grad is not None:
        target.grad += _unbroadcast(grad, target.data.shape)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand_reduced(grad: Array, axis: int | tuple[int, ...] | None, keepdims: bool, ndim: int) -> Array:
    if axis is None or keepdims:
        return grad
    axes = (axis,) if isinstance(axis, int) else axis
    for ax in sorted(a % ndim for a in axes):
        grad = np.expand_dims(grad, ax)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)

    def backward(g: Array) -> None:
        _accumulate(ta, g)
        _accumulate(tb, g)

    return _result("add", ta.data + tb.data, (ta, tb), backward)


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)

    def backward(g: Array) -> None:
        _accumulate(ta, g)
        _accumulate(tb, -g)

    return _result("sub", ta.data - tb.data, (ta, tb), backward)


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)

    def backward(g: Array) -> None:
        _accumulate(ta, g * tb.data)
        _accumulate(tb, g * ta.data)

    return _result("mul", ta.data * tb.data, (ta, tb), backward)


def div(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)

    def backward(g: Array) -> None:
        _accumulate(ta, g / tb.data)
        _accumulate(tb, -g * ta.data / (tb.data * tb.data))

    return _result("div", ta.data / tb.data, (ta, tb), backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g: Array) -> None:
        _accumulate(x, g * out_data)

    return _result("exp", out_data, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        _accumulate(x, g / x.data)

    return _result("log", np.log(x.data), (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU activation (tanh approximation)."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)

    def backward(g: Array) -> None:
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x.data**2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _result("gelu", 0.5 * x.data * (1.0 + t), (x,), backward)


def clamp_min(x: Tensor, low: float) -> Tensor:
    """Elementwise ``max(x, low)``; gradient is zero where the clamp is active."""
    passthrough = x.data >= low

    def backward(g: Array) -> None:
        _accumulate(x, np.where(passthrough, g, 0.0))

    return _result("clamp_min", np.maximum(x.data, low), (x,), backward)


def masked_fill(x: Tensor, keep: NDArray[np.bool_], value: float = -math.inf) -> Tensor:
    """
    Replace entries where ``keep`` is False with ``value``.

    Replaced entries receive exactly zero gradient. This is the only op
    allowed to emit infinities (masked logits).
    """
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.data.shape)

    def backward(g: Array) -> None:
        _accumulate(x, np.where(keep, g, 0.0))

    return _result("masked_fill", np.where(keep, x.data, value), (x,), backward, allow_inf=True)


# ---------------------------------------------------------------------------
# Shape ops and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, broadcasting leading axes.

    Raises:
        DimensionError: If an operand has fewer than two axes or the inner
                        dimensions disagree.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result("matmul", np.matmul(a.data, b.data), (a, b), backward)


def tsum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    def backward(g: Array) -> None:
        _accumulate(x, np.broadcast_to(_expand_reduced(g, axis, keepdims, x.ndim), x.data.shape))

    return _result("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return div(tsum(x, axis=axis, keepdims=keepdims), float(max(count, 1)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out_data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc

    def backward(g: Array) -> None:
        _accumulate(x, g.reshape(x.data.shape))

    return _result("reshape", out_data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    perm = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(perm))

    def backward(g: Array) -> None:
        _accumulate(x, np.transpose(g, inverse))

    return _result("transpose", np.transpose(x.data, perm), (x,), backward)


def swap_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, index: Any) -> Tensor:
    out_data = np.array(x.data[index])

    def backward(g: Array) -> None:
        if x.requires_grad and x.grad is not None:
            np.add.at(x.grad, index, g)

    return _result("getitem", out_data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concat shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: Array) -> None:
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis), strict=True):
            _accumulate(t, piece)

    return _result("concat", out_data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Normalisation, similarity and losses
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        _accumulate(x, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return _result("softmax", y, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """
    Normalise the last axis to zero mean / unit variance, then apply gain and bias.

    Raises:
        DimensionError: If the last axis is empty or gain/bias do not match it.
    """
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layernorm over an empty axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm affine shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g: Array) -> None:
        if x.requires_grad:
            dxhat = g * gain.data
            _accumulate(
                x,
                inv_std
                * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                ),
            )
        _accumulate(gain, g * xhat)
        _accumulate(bias, g)

    return _result("layernorm", xhat * gain.data + bias.data, (x, gain, bias), backward)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def backward(g: Array) -> None:
        g_full = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(norm > 0.0, norm, 1.0)
        _accumulate(x, np.where(norm > 0.0, g_full * x.data / safe, 0.0))

    out_data = norm if keepdims else np.squeeze(norm, axis=axis)
    return _result("l2_norm", out_data, (x,), backward)


def cosine_matrix(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """
    Pairwise cosine similarity between the rows of ``a`` and ``b``.

    Args:
        a: ``[..., n, d]`` tensor.
        b: ``[m, d]`` tensor.
        eps: Lower bound on the norm product; zero vectors yield similarity 0.

    Returns:
        ``[..., n, m]`` tensor with values in [-1, 1].
    """
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_matrix shape mismatch: {a.shape} vs {b.shape}")
    numerator = matmul(a if a.ndim >= 2 else reshape(a, (1, -1)), transpose(b))
    norm_a = l2_norm(a if a.ndim >= 2 else reshape(a, (1, -1)), axis=-1, keepdims=True)
    norm_b = l2_norm(b, axis=-1, keepdims=False)
    return div(numerator, clamp_min(mul(norm_a, norm_b), eps))


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of two vectors, returned as a scalar tensor."""
    if a.ndim != 1 or a.shape != b.shape or a.shape[0] == 0:
        raise DimensionError(f"cosine_similarity needs equal non-empty vectors: {a.shape}, {b.shape}")
    return reshape(cosine_matrix(reshape(a, (1, -1)), reshape(b, (1, -1)), eps), ())


def cross_entropy(logits: Tensor, labels: NDArray[np.integer[Any]] | Sequence[int]) -> Tensor:
    """
    Mean negative log-softmax at the label over a batch.

    Logits may hold ``-inf`` for masked classes; those entries receive exactly
    zero gradient.

    Raises:
        DimensionError: If logits are not ``[B, C]`` or labels disagree.
        InvalidMaskError: If a label sits at a masked (non-finite) logit.
    """
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy needs [B, C] logits and [B] labels, got {logits.shape}, {y.shape}")
    batch, classes = logits.shape
    if batch == 0:
        raise UsageError("cross_entropy over an empty batch")
    if np.any(y < 0) or np.any(y >= classes):
        raise DimensionError(f"labels must lie in [0, {classes})")
    rows = np.arange(batch)
    if not np.all(np.isfinite(logits.data[rows, y])):
        raise InvalidMaskError("label falls on a masked logit")

    row_max = np.max(logits.data, axis=1, keepdims=True)
    e = np.exp(logits.data - row_max)
    total = e.sum(axis=1, keepdims=True)
    lse = np.log(total) + row_max
    loss = float(np.mean(lse[:, 0] - logits.data[rows, y]))

    def backward(g: Array) -> None:
        probs = e / total
        probs[rows, y] -= 1.0
        _accumulate(logits, g * probs / batch)

    return _result("cross_entropy", np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """
    Adam moment buffers for a fixed, ordered list of parameters.

    Attributes:
        first_moment: Running mean of gradients, one buffer per parameter.
        second_moment: Running mean of squared gradients.
        step_count: Number of applied updates.
        base_lr: Initial learning rate fed to the cosine schedule.
    """

    first_moment: list[Array]
    second_moment: list[Array]
    step_count: int = 0
    base_lr: float = 1e-3
    betas: tuple[float, float] = field(default=ADAM_BETAS)
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params: Sequence[Tensor], base_lr: float = 1e-3) -> "AdamState":
        if base_lr <= 0:
            raise UsageError(f"base_lr must be positive, got {base_lr}")
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            base_lr=base_lr,
        )


def adam_step(params: Sequence[Tensor], state: AdamState, lr_t: float) -> None:
    """
    Apply one bias-corrected Adam update and zero the gradients.

    Raises:
        UsageError: If a parameter has no gradient buffer or the parameter
                    list does not match the state.
    """
    if len(params) != len(state.first_moment):
        raise UsageError(f"{len(params)} params but state tracks {len(state.first_moment)}")
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p.name or p.shape} has no gradient")
    beta1, beta2 = state.betas
    state.step_count += 1
    t = state.step_count
    for p, m, v in zip(params, state.first_moment, state.second_moment, strict=True):
        g = p.grad
        assert g is not None
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr_t * m_hat / (np.sqrt(v_hat) + state.eps)
        g.fill(0.0)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine-annealed learning rate: ``base_lr * (1 + cos(pi * step / total)) / 2``."""
    if total_steps <= 0:
        raise UsageError("cosine_lr needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckResult:
    """
    Agreement between autodiff and central differences.

    Attributes:
        max_abs: Largest ``|analytic - numeric|`` over every entry.
        max_rel: Largest ``|analytic - numeric| / max(|analytic|, |numeric|)``
                 over the entries whose magnitude reaches ``rel_threshold``.
        rel_checked: Number of entries that entered ``max_rel``.
        size: Number of entries compared.
    """

    max_abs: float
    max_rel: float
    rel_checked: int
    size: int


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    rel_threshold: float = 1e-4,
) -> GradCheckResult:
    """
    Compare the autodiff gradient of ``f`` at ``x`` with central differences.

    Args:
        f: Closure mapping ``x`` to a single-element tensor.
        x: Point of evaluation; must require gradients.
        h: Finite-difference step.
        rel_threshold: Entries where both gradients stay below this magnitude
                       only count towards the absolute error.

    Raises:
        UsageError: If ``x`` does not require gradients.
        NumericError: If ``f`` evaluates to a non-finite value.
    """
    if not x.requires_grad or x.grad is None:
        raise UsageError("grad_check needs x with requires_grad=True")
    if rel_threshold <= 0:
        raise UsageError(f"rel_threshold must be positive, got {rel_threshold}")
    x.zero_grad()
    out = f(x)
    if not math.isfinite(out.item()):
        raise NumericError("grad_check: f(x) is not finite")
    out.backward()
    analytic = x.grad.copy()
    x.zero_grad()

    numeric = np.zeros_like(x.data)
    with no_grad():
        for idx in np.ndindex(x.data.shape):
            original = x.data[idx]
            x.data[idx] = original + h
            f_plus = f(x).item()
            x.data[idx] = original - h
            f_minus = f(x).item()
            x.data[idx] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(f"grad_check: f not finite near index {idx}")
            numeric[idx] = (f_plus - f_minus) / (2.0 * h)

    diff = np.abs(analytic - numeric)
    magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
    large = magnitude >= rel_threshold
    result = GradCheckResult(
        max_abs=float(diff.max()) if diff.size else 0.0,
        max_rel=float(np.max(diff[large] / magnitude[large])) if large.any() else 0.0,
        rel_checked=int(large.sum()),
        size=int(diff.size),
    )
    logger.debug(
        "grad_check max abs %.3e, max rel %.3e",
        result.max_abs,
        result.max_rel,
        extra={"size": result.size, "rel_checked": result.rel_checked},
    )
    return result
