"""
Per-method continual learners.

A learner owns everything a method trains on top of the frozen backbone and
knows how to turn a batch into a training loss and into predictions, while
counting every encoder invocation:

- IPromptLearner: semantic matching on attention keys, boosted pool, additive
  key/value offsets, importance-weighted logit input. One encoder pass.
- QueryKeyLearner: an extra unprompted pass gives ``q(x)``; the arg-max task
  key selects a prompt inserted by prefix or prompt tuning. Two passes.
- AttentionLearner: as above with soft, attention-weighted prompt mixing.
- FinetuneLearner: a trainable copy of the backbone plus a linear head.
"""

import logging
from abc import ABC, abstractmethod
from typing import Any

import numpy as np
from numpy.typing import NDArray

from iprompt_lab.config import ExperimentConfig
from iprompt_lab.encoder import EncoderParams, EncoderTrace, LayerPrompt, forward
from iprompt_lab.exceptions import ProtocolError, StateError, UsageError
from iprompt_lab.head import (
    HeadParams,
    LogitMask,
    aggregate_logit_input,
    importance_weights,
    masked_loss,
    predict,
)
from iprompt_lab.models import ForwardPassCounter
from iprompt_lab.numerics import Tensor, add, cosine_matrix, mean, no_grad, sub
from iprompt_lab.prompts import (
    BaselineMatcherParams,
    PromptPool,
    attention_select,
    compose_prompt,
    gather_blocks,
    insert_prefix_tuning,
    insert_prompt_tuning,
    querykey_select,
    semantic_match,
)

logger = logging.getLogger(__name__)

Images = NDArray[np.float64]
Labels = NDArray[np.integer[Any]]


class Learner(ABC):
    """
    Base class for all methods.

    Subclasses implement ``_train_forward`` (training loss of one batch) and
    ``_logit_input`` (classifier input at inference).
    """

    method: str = ""
    passes_per_step: int = 1

    def __init__(
        self,
        backbone: EncoderParams,
        config: ExperimentConfig,
        num_tasks: int,
        counter: ForwardPassCounter | None = None,
        importance_slots: int = 0,
    ) -> None:
        if not backbone.frozen:
            raise StateError("learners need a frozen backbone")
        self.backbone = backbone
        self.config = config
        self.num_tasks = num_tasks
        self.num_classes = config.data.continual_classes
        self.counter = counter or ForwardPassCounter()
        self.current_task = -1
        self.head = HeadParams.initialize(
            self.num_classes, backbone.config.embed_dim, importance_slots, seed=config.seed + 101, zero_weight=True
        )

    # ------------------------------------------------------------------
    # Task protocol
    # ------------------------------------------------------------------

    def start_task(self, t: int) -> None:
        """
        Raises:
            ProtocolError: If ``t`` is not the next task of the schedule.
        """
        if t != self.current_task + 1 or t >= self.num_tasks:
            raise ProtocolError(f"cannot start task {t} after task {self.current_task}")
        self._start_task(t)
        self.current_task = t
        logger.info("Learner %s starts task %d", self.method, t, extra={"method": self.method, "task": t})

    def _start_task(self, t: int) -> None:
        return None

    def mask_frozen_gradients(self) -> None:
        """Zero gradient entries that must stay fixed while the current task trains."""
        return None

    def finish(self) -> None:
        """Called after the final task."""
        return None

    def _require_started(self) -> int:
        if self.current_task < 0:
            raise ProtocolError("no task has been started")
        return self.current_task

    # ------------------------------------------------------------------
    # Training and inference
    # ------------------------------------------------------------------

    def training_loss(self, images: Images, labels: Labels, mask: LogitMask) -> Tensor:
        """Loss of one batch under ``mask``; counts this step's encoder passes."""
        self._require_started()
        return self._train_forward(images, labels, mask)

    @abstractmethod
    def _train_forward(self, images: Images, labels: Labels, mask: LogitMask) -> Tensor: ...

    @abstractmethod
    def _logit_input(self, images: Images) -> Tensor: ...

    def predict(self, images: Images, mask: LogitMask) -> NDArray[np.int64]:
        """Masked arg-max predictions; counts evaluation passes."""
        self._require_started()
        with no_grad():
            h = self._logit_input(images)
        return predict(h, self.head, mask)

    @abstractmethod
    def trainable_parameters(self) -> list[Tensor]: ...

    # ------------------------------------------------------------------
    # Accounting
    # ------------------------------------------------------------------

    @abstractmethod
    def learnable_parameter_count(self) -> int:
        """Parameters the method learns over the whole schedule."""

    def total_parameter_count(self) -> int:
        return self.backbone.parameter_count() + self.learnable_parameter_count()

    def head_parameter_count(self) -> int:
        return sum(t.size for t in self.head.parameters())

    def frozen_intact(self) -> bool:
        """True iff every frozen prompt tensor still matches its snapshot."""
        return True

    def prompt_tensors(self) -> list[tuple[str, Tensor]]:
        return []

    def chunk_table(self) -> list[int]:
        return []


# ---------------------------------------------------------------------------
# I-Prompt
# ---------------------------------------------------------------------------


class IPromptLearner(Learner):
    """Semantic prompt matching with a boosted, task-partitioned pool."""

    method = "iprompt"

    def __init__(
        self,
        backbone: EncoderParams,
        config: ExperimentConfig,
        num_tasks: int,
        counter: ForwardPassCounter | None = None,
    ) -> None:
        prompt = config.prompt
        super().__init__(backbone, config, num_tasks, counter, importance_slots=prompt.pool_size)
        layers = backbone.config.prompted_layers
        if not layers:
            raise UsageError("iprompt needs at least one prompted layer")
        self.pool = PromptPool(
            pool_size=prompt.pool_size,
            prompt_length=prompt.prompt_length,
            embed_dim=backbone.config.embed_dim,
            layers=layers,
            num_tasks=num_tasks,
            shared=prompt.shared_pool,
            seed=config.seed + 211,
        )
        self.importance_layer = layers[-1] if prompt.importance_layer == "last" else layers[0]
        self.use_importance = prompt.use_importance
        if not self.use_importance:
            self.head.importance.freeze()
        self._importance_snapshot = np.zeros(0)

    def _start_task(self, t: int) -> None:
        self.pool.start_task(t)
        self._importance_snapshot = self.head.importance.data[: self._frozen_importance()].copy()

    def _frozen_importance(self) -> int:
        """Leading ``W_s`` entries paired with frozen chunks."""
        return sum(self.pool.chunk_sizes[: self.pool.frozen_upto])

    def mask_frozen_gradients(self) -> None:
        grad = self.head.importance.grad
        if grad is not None:
            grad[: self._frozen_importance()] = 0.0

    def finish(self) -> None:
        self.pool.freeze_all()

    def _hook(self, layer: int, h_k: Tensor) -> LayerPrompt | None:
        if self.pool.pool_size == 0:
            return None
        weights = semantic_match(h_k, self.pool, layer)
        return compose_prompt(weights, self.pool, self.current_task, layer)

    def encode(self, images: Images) -> EncoderTrace:
        return forward(images, self.backbone, self._hook, offset_mode=self.config.prompt.offset_mode)

    def logit_input_from(self, trace: EncoderTrace) -> Tensor:
        if not self.use_importance:
            return aggregate_logit_input(trace, None)
        keys = self.pool.active_keys(self.importance_layer)
        w_s = self.head.importance[: keys.shape[0]]
        weights = importance_weights(trace.keys[self.importance_layer], keys, w_s)
        return aggregate_logit_input(trace, weights)

    def _train_forward(self, images: Images, labels: Labels, mask: LogitMask) -> Tensor:
        trace = self.encode(images)
        self.counter.add("train", trace.forward_passes)
        return masked_loss(self.logit_input_from(trace), self.head, mask, labels)

    def _logit_input(self, images: Images) -> Tensor:
        trace = self.encode(images)
        self.counter.add("eval", trace.forward_passes)
        return self.logit_input_from(trace)

    def trainable_parameters(self) -> list[Tensor]:
        params = self.pool.trainable_parameters() + self.head.classifier_parameters()
        if self.use_importance:
            params.append(self.head.importance)
        return params

    def learnable_parameter_count(self) -> int:
        count = self.pool.planned_parameter_count() + self.head.weight.size + self.head.bias.size
        if self.use_importance:
            count += self.head.importance.size
        return count

    def frozen_intact(self) -> bool:
        frozen = self.head.importance.data[: len(self._importance_snapshot)]
        return self.pool.frozen_intact() and np.array_equal(frozen, self._importance_snapshot)

    def prompt_tensors(self) -> list[tuple[str, Tensor]]:
        return self.pool.named_tensors() + self.head.named_tensors()

    def chunk_table(self) -> list[int]:
        return list(self.pool.chunk_of)


# ---------------------------------------------------------------------------
# Query-function baselines
# ---------------------------------------------------------------------------


class _QueryLearner(Learner):
    """Baselines that spend an extra unprompted pass on ``q(x) = f(x)[CLS]``."""

    passes_per_step = 2
    attention = False

    def __init__(
        self,
        backbone: EncoderParams,
        config: ExperimentConfig,
        num_tasks: int,
        counter: ForwardPassCounter | None = None,
    ) -> None:
        super().__init__(backbone, config, num_tasks, counter)
        self.matcher = BaselineMatcherParams(
            prompt_length=config.prompt.prompt_length,
            embed_dim=backbone.config.embed_dim,
            layers=backbone.config.prompted_layers,
            insertion=config.prompt.baseline_insertion,
            attention=self.attention,
            seed=config.seed + 307,
        )

    def _start_task(self, t: int) -> None:
        self.matcher.start_task(t)

    def query(self, images: Images, phase: str) -> Tensor:
        with no_grad():
            trace = forward(images, self.backbone)
        self.counter.add(phase, trace.forward_passes)
        return trace.cls_output

    def prompted_forward(self, images: Images, blocks: dict[int, Tensor]) -> EncoderTrace:
        """Encoder pass with ``[B, rows, d]`` prompt blocks per layer (-1 = input)."""
        lp = self.matcher.prompt_length
        if self.matcher.insertion == "prompt":
            block = blocks[-1]
            return forward(images, self.backbone, token_transform=lambda h0: insert_prompt_tuning(h0, block))

        def hook(layer: int, h_k: Tensor) -> LayerPrompt:
            return insert_prefix_tuning(blocks[layer], lp)

        return forward(images, self.backbone, hook)

    @abstractmethod
    def _blocks(self, q: Tensor, training: bool) -> dict[int, Tensor]: ...

    def _train_forward(self, images: Images, labels: Labels, mask: LogitMask) -> Tensor:
        q = self.query(images, "query")
        trace = self.prompted_forward(images, self._blocks(q, training=True))
        self.counter.add("train", trace.forward_passes)
        loss = masked_loss(trace.cls_output, self.head, mask, labels)
        return add(loss, self._key_loss(q))

    def _key_loss(self, q: Tensor) -> Tensor:
        """Pull the current task key towards the queries: ``mean(1 - cos(q, k_t))``."""
        key = self.matcher.keys[self.current_task]
        return mean(sub(1.0, cosine_matrix(q, key.reshape(1, -1))))

    def _logit_input(self, images: Images) -> Tensor:
        q = self.query(images, "eval")
        trace = self.prompted_forward(images, self._blocks(q, training=False))
        self.counter.add("eval", trace.forward_passes)
        return trace.cls_output

    def trainable_parameters(self) -> list[Tensor]:
        return self.matcher.trainable_parameters() + self.head.classifier_parameters()

    def learnable_parameter_count(self) -> int:
        return self.matcher.parameter_count(self.num_tasks) + self.head.weight.size + self.head.bias.size

    def frozen_intact(self) -> bool:
        return self.matcher.frozen_intact()

    def prompt_tensors(self) -> list[tuple[str, Tensor]]:
        return self.matcher.named_tensors() + [(t.name, t) for t in self.head.classifier_parameters()]


class QueryKeyLearner(_QueryLearner):
    """Hard selection: the arg-max task key picks one prompt per sample."""

    method = "querykey_baseline"

    def _blocks(self, q: Tensor, training: bool) -> dict[int, Tensor]:
        if training:
            task_ids = np.full(q.shape[0], self.current_task, dtype=np.int64)
        else:
            task_ids = querykey_select(q, self.matcher, self.current_task + 1)
        return {layer: gather_blocks(self.matcher, layer, task_ids) for layer in self.matcher.block_layers}


class AttentionLearner(_QueryLearner):
    """Soft selection: prompts mixed by ``cos(q * A_i, k_i)`` over seen tasks."""

    method = "attention_baseline"
    attention = True

    def _blocks(self, q: Tensor, training: bool) -> dict[int, Tensor]:
        seen = self.current_task + 1
        return {layer: attention_select(q, self.matcher, seen, layer) for layer in self.matcher.block_layers}

    def _key_loss(self, q: Tensor) -> Tensor:
        # soft weights already train keys and attention vectors end to end
        return Tensor(0.0)


# ---------------------------------------------------------------------------
# Finetuning lower bound
# ---------------------------------------------------------------------------


class FinetuneLearner(Learner):
    """Every backbone weight trains; no regularization beyond the logit mask."""

    method = "finetune"

    def __init__(
        self,
        backbone: EncoderParams,
        config: ExperimentConfig,
        num_tasks: int,
        counter: ForwardPassCounter | None = None,
    ) -> None:
        super().__init__(backbone, config, num_tasks, counter)
        self.encoder = backbone.clone(trainable=True)

    def _train_forward(self, images: Images, labels: Labels, mask: LogitMask) -> Tensor:
        trace = forward(images, self.encoder)
        self.counter.add("train", trace.forward_passes)
        return masked_loss(trace.cls_output, self.head, mask, labels)

    def _logit_input(self, images: Images) -> Tensor:
        trace = forward(images, self.encoder)
        self.counter.add("eval", trace.forward_passes)
        return trace.cls_output

    def trainable_parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.head.classifier_parameters()

    def learnable_parameter_count(self) -> int:
        return self.encoder.parameter_count() + self.head.weight.size + self.head.bias.size

    def total_parameter_count(self) -> int:
        return self.learnable_parameter_count()


LEARNERS: dict[str, type[Learner]] = {
    "iprompt": IPromptLearner,
    "joint": IPromptLearner,
    "querykey_baseline": QueryKeyLearner,
    "attention_baseline": AttentionLearner,
    "finetune": FinetuneLearner,
}


def build_learner(
    backbone: EncoderParams,
    config: ExperimentConfig,
    num_tasks: int,
    counter: ForwardPassCounter | None = None,
) -> Learner:
    """Instantiate the learner for ``config.prompt.method``."""
    try:
        cls = LEARNERS[config.prompt.method]
    except KeyError as exc:
        raise UsageError(f"unknown method {config.prompt.method!r}") from exc
    learner = cls(backbone, config, num_tasks, counter)
    if config.prompt.method == "joint":
        learner.method = "joint"
    return learner
