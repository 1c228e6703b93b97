"""
Prompt pools, semantic prompt matching and the baseline selection strategies.

PromptPool holds learnable prompt keys and prompt blocks per prompted layer,
partitioned into per-task chunks. Starting task ``t`` freezes chunk ``t-1``
(gradient buffers dropped, bytes snapshotted) and allocates chunk ``t``.
Every image token is then matched against all allocated keys by cosine
similarity with its self-attention key, and the weighted sum of current and
frozen prompts becomes an additive key/value offset.

BaselineMatcherParams carries one key (and optionally one attention vector)
per task for the query-key and attention-weighted baselines, whose prompts
are inserted by prefix tuning or input prompt tuning.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from iprompt_lab.encoder import LayerPrompt
from iprompt_lab.exceptions import DimensionError, ProtocolError, StateError, UsageError
from iprompt_lab.numerics import (
    Tensor,
    add,
    concat,
    cosine_matrix,
    getitem,
    matmul,
    mul,
    reshape,
    tsum,
)

logger = logging.getLogger(__name__)

PROMPT_INIT_BOUND = 0.02

Insertion = Literal["prefix", "prompt"]


def chunk_sizes(pool_size: int, num_tasks: int) -> list[int]:
    """Equal per-task chunk sizes; the remainder goes to the final task."""
    if num_tasks <= 0:
        raise UsageError("a prompt pool needs at least one task")
    base, remainder = divmod(pool_size, num_tasks)
    sizes = [base] * num_tasks
    sizes[-1] += remainder
    return sizes


def _init_keys(rng: np.random.Generator, n: int, d: int) -> NDArray[np.float64]:
    keys = rng.normal(size=(n, d))
    norms = np.linalg.norm(keys, axis=1, keepdims=True)
    return keys / np.where(norms > 0.0, norms, 1.0)


@dataclass
class PromptChunk:
    """The keys ``[n, d]`` and prompts ``[n, 2L_p, d]`` one task owns in one pool."""

    task: int
    keys: Tensor
    prompts: Tensor
    snapshot: bytes | None = None

    @property
    def frozen(self) -> bool:
        return self.snapshot is not None

    def freeze(self) -> None:
        self.keys.freeze()
        self.prompts.freeze()
        self.snapshot = self.keys.data.tobytes() + self.prompts.data.tobytes()

    def is_intact(self) -> bool:
        return self.snapshot == self.keys.data.tobytes() + self.prompts.data.tobytes()


class PromptPool:
    """
    Task-partitioned prompt pool for every prompted layer.

    ``frozen_upto`` is the task currently being learned: chunks with a lower
    task index are frozen, the chunk of ``frozen_upto`` is trainable, later
    chunks are not yet allocated. It is -1 before the first task.

    With ``shared=True`` one pool serves all prompted layers.
    """

    def __init__(
        self,
        pool_size: int,
        prompt_length: int,
        embed_dim: int,
        layers: Sequence[int],
        num_tasks: int,
        shared: bool = False,
        seed: int = 0,
    ) -> None:
        if pool_size < 0 or prompt_length < 1 or embed_dim < 1:
            raise UsageError("pool_size must be >= 0 and prompt_length, embed_dim >= 1")
        if not layers:
            raise UsageError("a prompt pool needs at least one prompted layer")
        self.pool_size = pool_size
        self.prompt_length = prompt_length
        self.embed_dim = embed_dim
        self.layers = tuple(sorted(layers))
        self.num_tasks = num_tasks
        self.shared = shared
        self.seed = seed
        self.chunk_sizes = chunk_sizes(pool_size, num_tasks)
        self.chunk_of: list[int] = [t for t, n in enumerate(self.chunk_sizes) for _ in range(n)]
        self.frozen_upto = -1
        groups = (-1,) if shared else self.layers
        self._chunks: dict[int, list[PromptChunk]] = {g: [] for g in groups}

    @property
    def rows_per_prompt(self) -> int:
        return 2 * self.prompt_length

    @property
    def groups(self) -> tuple[int, ...]:
        return tuple(self._chunks)

    def _group(self, layer: int) -> int:
        if layer not in self.layers:
            raise StateError(f"layer {layer} carries no prompts")
        return -1 if self.shared else layer

    def chunks(self, layer: int) -> list[PromptChunk]:
        return self._chunks[self._group(layer)]

    def start_task(self, t: int, rng_seed: int | None = None) -> None:
        """
        Freeze chunk ``t-1`` and allocate chunk ``t``.

        Raises:
            ProtocolError: If ``t`` is not the next task.
        """
        if t != self.frozen_upto + 1:
            raise ProtocolError(f"start_task({t}) out of order: current task is {self.frozen_upto}")
        if t >= self.num_tasks:
            raise ProtocolError(f"pool planned for {self.num_tasks} tasks, cannot start task {t}")
        seed = self.seed if rng_seed is None else rng_seed
        n, d = self.chunk_sizes[t], self.embed_dim
        for position, (group, chunks) in enumerate(self._chunks.items()):
            if chunks:
                chunks[-1].freeze()
            rng = np.random.default_rng((seed, t, position))
            chunks.append(
                PromptChunk(
                    task=t,
                    keys=Tensor(_init_keys(rng, n, d), requires_grad=True, name=f"pool.{group}.{t}.keys"),
                    prompts=Tensor(
                        rng.uniform(-PROMPT_INIT_BOUND, PROMPT_INIT_BOUND, size=(n, self.rows_per_prompt, d)),
                        requires_grad=True,
                        name=f"pool.{group}.{t}.prompts",
                    ),
                )
            )
        self.frozen_upto = t
        logger.info("Started prompt task %d", t, extra={"task": t, "chunk_size": n, "groups": len(self._chunks)})

    def freeze_all(self) -> None:
        """Freeze the current chunk too (end of the final task)."""
        for chunks in self._chunks.values():
            if chunks and not chunks[-1].frozen:
                chunks[-1].freeze()

    def active_keys(self, layer: int) -> Tensor:
        """Keys of every allocated prompt of ``layer`` in pool order, ``[S_a, d]``."""
        chunks = self.chunks(layer)
        if not chunks:
            raise StateError("no prompt task has been started")
        return chunks[0].keys if len(chunks) == 1 else concat([c.keys for c in chunks], axis=0)

    def active_prompts(self, layer: int) -> Tensor:
        chunks = self.chunks(layer)
        if not chunks:
            raise StateError("no prompt task has been started")
        return chunks[0].prompts if len(chunks) == 1 else concat([c.prompts for c in chunks], axis=0)

    @property
    def active_size(self) -> int:
        return sum(self.chunk_sizes[: self.frozen_upto + 1])

    def trainable_parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for chunks in self._chunks.values():
            for chunk in chunks:
                if not chunk.frozen:
                    out.extend([chunk.keys, chunk.prompts])
        return out

    def planned_parameter_count(self) -> int:
        """``S * (2L_p + 1) * d`` per pool, over all pools."""
        return self.pool_size * (self.rows_per_prompt + 1) * self.embed_dim * len(self._chunks)

    def frozen_intact(self) -> bool:
        """True iff every frozen chunk still matches its snapshot byte for byte."""
        return all(c.is_intact() for chunks in self._chunks.values() for c in chunks if c.frozen)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for chunks in self._chunks.values():
            for chunk in chunks:
                out.extend([(chunk.keys.name, chunk.keys), (chunk.prompts.name, chunk.prompts)])
        return out


def semantic_match(h_k: Tensor, pool: PromptPool, layer: int) -> Tensor:
    """
    Cosine similarity of every token key with every allocated prompt key.

    Args:
        h_k: ``[..., N, d]`` pre-prompt self-attention keys of ``layer``.
        pool: Prompt pool with at least one started task.
        layer: Prompted layer index.

    Returns:
        ``[..., N, S_a]`` weights in [-1, 1], where ``S_a`` counts the
        prompts of the current and all frozen chunks. Gradients reach both
        the keys and the ``h_k`` path.

    Raises:
        StateError: If ``layer`` is not prompted or no task has started.
    """
    return cosine_matrix(h_k, pool.active_keys(layer))


def _cls_mask(tokens: int) -> Tensor:
    mask = np.ones((tokens, 1))
    mask[0, 0] = 0.0
    return Tensor(mask)


def compose_prompt(weights: Tensor, pool: PromptPool, t: int, layer: int) -> LayerPrompt:
    """
    Boosted prompt: similarity-weighted sum of current and frozen prompts.

    Each prompt's first ``L_p`` rows are summed into its key offset and the
    last ``L_p`` rows into its value offset. The CLS row receives zero.

    Returns:
        LayerPrompt with ``key_offset`` and ``value_offset`` shaped like the
        token rows of ``weights`` (``[..., N, d]``).

    Raises:
        StateError: If ``t`` is not the pool's current task.
        DimensionError: If ``weights`` does not cover the allocated prompts.
    """
    if pool.frozen_upto != t:
        raise StateError(f"pool is at task {pool.frozen_upto}; earlier chunks are not frozen for task {t}")
    prompts = pool.active_prompts(layer)
    if weights.shape[-1] != prompts.shape[0]:
        raise DimensionError(f"weights cover {weights.shape[-1]} prompts, pool has {prompts.shape[0]}")
    lp = pool.prompt_length
    key_rows = tsum(prompts[:, :lp, :], axis=1)
    value_rows = tsum(prompts[:, lp:, :], axis=1)
    cls_mask = _cls_mask(weights.shape[-2])
    return LayerPrompt(
        key_offset=mul(matmul(weights, key_rows), cls_mask),
        value_offset=mul(matmul(weights, value_rows), cls_mask),
    )


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass
class BaselineMatcherParams:
    """
    Per-task keys, attention vectors and prompt blocks for the baselines.

    ``blocks[layer][t]`` is ``[2L_p, d]`` for prefix insertion (key rows then
    value rows) or ``[L_p, d]`` for input prompt tuning, where the single
    block is stored under layer -1. Tasks before the current one are frozen.
    """

    prompt_length: int
    embed_dim: int
    layers: tuple[int, ...]
    insertion: Insertion = "prefix"
    attention: bool = False
    seed: int = 0
    keys: list[Tensor] = field(default_factory=list)
    attn_vectors: list[Tensor] = field(default_factory=list)
    blocks: dict[int, list[Tensor]] = field(default_factory=dict)
    snapshots: list[bytes] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.blocks:
            self.blocks = {layer: [] for layer in self.block_layers}

    @property
    def block_layers(self) -> tuple[int, ...]:
        return self.layers if self.insertion == "prefix" else (-1,)

    @property
    def block_rows(self) -> int:
        return 2 * self.prompt_length if self.insertion == "prefix" else self.prompt_length

    @property
    def tasks_started(self) -> int:
        return len(self.keys)

    def _task_tensors(self, t: int) -> list[Tensor]:
        out = [self.keys[t]]
        if self.attention:
            out.append(self.attn_vectors[t])
        out.extend(self.blocks[layer][t] for layer in self.block_layers)
        return out

    def start_task(self, t: int) -> None:
        """
        Freeze task ``t-1`` and allocate key, vector and blocks for task ``t``.

        Raises:
            ProtocolError: If ``t`` is not the next task.
        """
        if t != self.tasks_started:
            raise ProtocolError(f"start_task({t}) out of order: {self.tasks_started} tasks started")
        if t > 0:
            previous = self._task_tensors(t - 1)
            for tensor in previous:
                tensor.freeze()
            self.snapshots.append(b"".join(x.data.tobytes() for x in previous))
        rng = np.random.default_rng((self.seed, t))
        d = self.embed_dim
        self.keys.append(Tensor(_init_keys(rng, 1, d)[0], requires_grad=True, name=f"matcher.{t}.key"))
        if self.attention:
            self.attn_vectors.append(Tensor(np.ones(d), requires_grad=True, name=f"matcher.{t}.attn"))
        for layer in self.block_layers:
            self.blocks[layer].append(
                Tensor(
                    rng.uniform(-PROMPT_INIT_BOUND, PROMPT_INIT_BOUND, size=(self.block_rows, d)),
                    requires_grad=True,
                    name=f"matcher.{layer}.{t}.block",
                )
            )

    def trainable_parameters(self) -> list[Tensor]:
        if not self.keys:
            return []
        return [x for x in self._task_tensors(self.tasks_started - 1) if x.requires_grad]

    def frozen_intact(self) -> bool:
        return all(
            snap == b"".join(x.data.tobytes() for x in self._task_tensors(t))
            for t, snap in enumerate(self.snapshots)
        )

    def parameter_count(self, num_tasks: int) -> int:
        """Parameters of ``num_tasks`` fully allocated tasks."""
        per_task = self.embed_dim * (2 if self.attention else 1)
        per_task += len(self.block_layers) * self.block_rows * self.embed_dim
        return per_task * num_tasks

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(x.name, x) for t in range(self.tasks_started) for x in self._task_tensors(t)]


def _check_seen(matcher: BaselineMatcherParams, tasks_seen: int) -> None:
    if tasks_seen <= 0:
        raise UsageError("prompt selection needs at least one seen task")
    if tasks_seen > matcher.tasks_started:
        raise StateError(f"{tasks_seen} tasks requested, {matcher.tasks_started} started")


def _as_batch(q: Tensor) -> tuple[Tensor, bool]:
    if q.ndim == 1:
        return reshape(q, (1, -1)), True
    if q.ndim != 2:
        raise DimensionError(f"query must be [d] or [B, d], got {q.shape}")
    return q, False


def querykey_scores(q: Tensor, matcher: BaselineMatcherParams, tasks_seen: int) -> Tensor:
    """``[B, tasks_seen]`` cosine similarity of each query with each task key."""
    _check_seen(matcher, tasks_seen)
    batch, _ = _as_batch(q)
    keys = concat([reshape(k, (1, -1)) for k in matcher.keys[:tasks_seen]], axis=0)
    return cosine_matrix(batch, keys)


def querykey_select(q: Tensor, matcher: BaselineMatcherParams, tasks_seen: int) -> NDArray[np.int64]:
    """
    Task index whose key is most similar to the query; ties go to the lowest index.

    Args:
        q: ``[d]`` or ``[B, d]`` class-token output of an unprompted pass.

    Returns:
        ``[B]`` task indices (``[1]`` for a single query).

    Raises:
        UsageError: If ``tasks_seen`` is zero.
    """
    scores = querykey_scores(q, matcher, tasks_seen).data
    return np.argmax(scores, axis=1).astype(np.int64)


def attention_weights(q: Tensor, matcher: BaselineMatcherParams, tasks_seen: int) -> Tensor:
    """``[B, tasks_seen]`` weights ``cos(q * A_i, k_i)``."""
    _check_seen(matcher, tasks_seen)
    if not matcher.attention:
        raise StateError("matcher was built without attention vectors")
    batch, _ = _as_batch(q)
    columns = [
        cosine_matrix(mul(batch, matcher.attn_vectors[i]), reshape(matcher.keys[i], (1, -1)))
        for i in range(tasks_seen)
    ]
    return columns[0] if tasks_seen == 1 else concat(columns, axis=1)


def _stacked_blocks(matcher: BaselineMatcherParams, layer: int, tasks: int) -> Tensor:
    blocks = matcher.blocks[layer][:tasks]
    rows, d = matcher.block_rows, matcher.embed_dim
    return concat([reshape(b, (1, rows, d)) for b in blocks], axis=0)


def attention_select(
    q: Tensor, matcher: BaselineMatcherParams, tasks_seen: int, layer: int = -1
) -> Tensor:
    """
    Soft prompt ``P_a = sum_i cos(q * A_i, k_i) P_i`` over seen tasks.

    Returns:
        ``[B, rows, d]`` prompt blocks (``[rows, d]`` for a single query).
    """
    q_batch, single = _as_batch(q)
    weights = attention_weights(q_batch, matcher, tasks_seen)
    stacked = _stacked_blocks(matcher, layer, tasks_seen)
    rows, d = matcher.block_rows, matcher.embed_dim
    flat = reshape(stacked, (tasks_seen, rows * d))
    out = reshape(matmul(weights, flat), (q_batch.shape[0], rows, d))
    return out[0] if single else out


def gather_blocks(matcher: BaselineMatcherParams, layer: int, task_ids: NDArray[np.int64]) -> Tensor:
    """``[B, rows, d]`` blocks of the selected task per sample."""
    tasks = int(task_ids.max()) + 1 if task_ids.size else 1
    return getitem(_stacked_blocks(matcher, layer, tasks), task_ids)


def insert_prompt_tuning(h0: Tensor, prompt: Tensor) -> Tensor:
    """
    Append prompt rows after the image tokens of ``h_0``.

    Args:
        h0: ``[B, p+1, d]`` input tokens.
        prompt: ``[B, L_p, d]`` or ``[L_p, d]`` prompt rows.

    Returns:
        ``[B, p+1+L_p, d]`` extended sequence.
    """
    if prompt.ndim == 2:
        prompt = add(Tensor(np.zeros((h0.shape[0], *prompt.shape))), reshape(prompt, (1, *prompt.shape)))
    if prompt.ndim != 3 or prompt.shape[0] != h0.shape[0] or prompt.shape[-1] != h0.shape[-1]:
        raise DimensionError(f"prompt {prompt.shape} cannot extend tokens {h0.shape}")
    return concat([h0, prompt], axis=1)


def insert_prefix_tuning(block: Tensor, prompt_length: int) -> LayerPrompt:
    """Split a ``[..., 2L_p, d]`` block into key and value prefixes."""
    if block.shape[-2] != 2 * prompt_length:
        raise DimensionError(f"prefix block has {block.shape[-2]} rows, expected {2 * prompt_length}")
    if block.ndim == 2:
        return LayerPrompt(key_prefix=block[:prompt_length], value_prefix=block[prompt_length:])
    return LayerPrompt(key_prefix=block[:, :prompt_length], value_prefix=block[:, prompt_length:])
