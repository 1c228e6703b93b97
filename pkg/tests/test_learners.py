"""Tests for iprompt_lab/learners.py"""

from typing import TypeVar

import numpy as np
import pytest

from iprompt_lab.config import ExperimentConfig
from iprompt_lab.encoder import EncoderParams
from iprompt_lab.exceptions import ProtocolError, StateError
from iprompt_lab.head import LogitMask
from iprompt_lab.learners import (
    AttentionLearner,
    FinetuneLearner,
    IPromptLearner,
    Learner,
    QueryKeyLearner,
    build_learner,
)
from iprompt_lab.models import ForwardPassCounter
from iprompt_lab.numerics import AdamState, adam_step
from iprompt_lab.verify import toy_config

LABELS = np.array([0, 1, 0])
MASK = LogitMask.of([0, 1], 8)
AnyLearner = TypeVar("AnyLearner", bound=Learner)


def _random_head(learner: AnyLearner) -> AnyLearner:
    """Classifier rows start at zero, which blocks gradient into ``h``; move them."""
    rng = np.random.default_rng(0)
    learner.head.weight.data[:] = rng.normal(scale=0.3, size=learner.head.weight.shape)
    return learner


class TestIPromptLearner:
    def test_needs_frozen_backbone(self, config: ExperimentConfig) -> None:
        with pytest.raises(StateError):
            IPromptLearner(EncoderParams.initialize(config.encoder, seed=0), config, num_tasks=2)

    def test_task_protocol(self, config: ExperimentConfig, backbone: EncoderParams, images: np.ndarray) -> None:
        learner = IPromptLearner(backbone, config, num_tasks=2)
        with pytest.raises(ProtocolError):
            learner.training_loss(images, LABELS, MASK)
        with pytest.raises(ProtocolError):
            learner.start_task(1)
        learner.start_task(0)
        learner.start_task(1)
        with pytest.raises(ProtocolError):
            learner.start_task(2)

    def test_one_encoder_pass_per_step(
        self, config: ExperimentConfig, backbone: EncoderParams, images: np.ndarray
    ) -> None:
        counter = ForwardPassCounter()
        learner = IPromptLearner(backbone, config, num_tasks=2, counter=counter)
        learner.start_task(0)
        learner.training_loss(images, LABELS, MASK)
        assert counter["train"] == 1
        assert counter["query"] == 0
        learner.predict(images, MASK)
        assert counter["eval"] == 1

    def test_gradients_reach_current_chunk_only(
        self, config: ExperimentConfig, backbone: EncoderParams, images: np.ndarray
    ) -> None:
        learner = _random_head(IPromptLearner(backbone, config, num_tasks=2))
        learner.start_task(0)
        learner.start_task(1)
        learner.training_loss(images, np.array([2, 3, 2]), LogitMask.of([2, 3], 8)).backward()
        old, current = learner.pool.chunks(0)
        assert old.prompts.grad is None
        assert current.prompts.grad is not None and np.any(current.prompts.grad != 0.0)
        assert learner.head.importance.grad is not None
        weight_grad = learner.head.weight.grad
        assert weight_grad is not None
        assert np.all(weight_grad[[0, 1, 4, 5, 6, 7]] == 0.0)

    def test_classifier_starts_at_zero(self, config: ExperimentConfig, backbone: EncoderParams) -> None:
        learner = IPromptLearner(backbone, config, num_tasks=2)
        assert not np.any(learner.head.weight.data)
        assert not np.any(learner.head.bias.data)

    def test_frozen_importance_gradients_are_masked(
        self, config: ExperimentConfig, backbone: EncoderParams, images: np.ndarray
    ) -> None:
        learner = _random_head(IPromptLearner(backbone, config, num_tasks=2))
        learner.start_task(0)
        learner.start_task(1)
        frozen = learner.pool.chunk_sizes[0]
        active = learner.pool.active_size
        learner.training_loss(images, np.array([2, 3, 2]), LogitMask.of([2, 3], 8)).backward()
        grad = learner.head.importance.grad
        assert grad is not None
        assert np.any(grad[:frozen] != 0.0)
        learner.mask_frozen_gradients()
        assert np.all(grad[:frozen] == 0.0)
        assert np.any(grad[frozen:active] != 0.0)

    def test_frozen_importance_survives_updates(
        self, config: ExperimentConfig, backbone: EncoderParams, images: np.ndarray
    ) -> None:
        learner = _random_head(IPromptLearner(backbone, config, num_tasks=2))
        learner.start_task(0)
        params = learner.trainable_parameters()
        state = AdamState.for_params(params, 0.01)
        learner.training_loss(images, LABELS, MASK).backward()
        adam_step(params, state, 0.01)
        learner.start_task(1)
        frozen = learner.pool.chunk_sizes[0]
        before = learner.head.importance.data.copy()
        params = learner.trainable_parameters()
        state = AdamState.for_params(params, 0.01)
        for _ in range(3):
            learner.training_loss(images, np.array([2, 3, 2]), LogitMask.of([2, 3], 8)).backward()
            learner.mask_frozen_gradients()
            adam_step(params, state, 0.01)
        after = learner.head.importance.data
        np.testing.assert_array_equal(after[:frozen], before[:frozen])
        assert not np.array_equal(after[frozen:], before[frozen:])
        assert learner.frozen_intact()

    def test_moving_frozen_importance_breaks_intactness(
        self, config: ExperimentConfig, backbone: EncoderParams
    ) -> None:
        learner = IPromptLearner(backbone, config, num_tasks=2)
        learner.start_task(0)
        learner.start_task(1)
        assert learner.frozen_intact()
        learner.head.importance.data[0] += 1.0
        assert not learner.frozen_intact()

    def test_trainable_parameters_exclude_frozen_chunks(
        self, config: ExperimentConfig, backbone: EncoderParams
    ) -> None:
        learner = IPromptLearner(backbone, config, num_tasks=2)
        learner.start_task(0)
        learner.start_task(1)
        names = {t.name for t in learner.trainable_parameters()}
        assert "pool.0.1.prompts" in names
        assert "pool.0.0.prompts" not in names
        assert learner.frozen_intact()

    def test_learnable_count(self, config: ExperimentConfig, backbone: EncoderParams) -> None:
        learner = IPromptLearner(backbone, config, num_tasks=4)
        pool = 4 * (2 * 1 + 1) * 16 * 2
        head = 8 * 16 + 8
        assert learner.learnable_parameter_count() == pool + head + 4
        assert learner.total_parameter_count() == backbone.parameter_count() + pool + head + 4

    def test_without_importance(self, backbone: EncoderParams, images: np.ndarray) -> None:
        config = toy_config(prompt={"pool_size": 4, "prompt_length": 1, "use_importance": False})
        learner = IPromptLearner(backbone, config, num_tasks=2)
        learner.start_task(0)
        assert learner.head.importance not in learner.trainable_parameters()
        assert learner.learnable_parameter_count() == 4 * 3 * 16 * 2 + 8 * 16 + 8
        assert np.isfinite(learner.training_loss(images, LABELS, MASK).item())

    def test_empty_pool(self, backbone: EncoderParams, images: np.ndarray) -> None:
        config = toy_config(prompt={"pool_size": 0, "prompt_length": 1})
        learner = IPromptLearner(backbone, config, num_tasks=2)
        learner.start_task(0)
        assert np.isfinite(learner.training_loss(images, LABELS, MASK).item())

    @pytest.mark.parametrize("mode", ["split", "input"])
    def test_offset_modes(self, backbone: EncoderParams, images: np.ndarray, mode: str) -> None:
        config = toy_config(prompt={"pool_size": 4, "prompt_length": 1, "offset_mode": mode})
        learner = IPromptLearner(backbone, config, num_tasks=2)
        learner.start_task(0)
        assert learner.predict(images, MASK).shape == (3,)

    def test_shared_pool(self, backbone: EncoderParams) -> None:
        config = toy_config(prompt={"pool_size": 4, "prompt_length": 1, "shared_pool": True})
        learner = IPromptLearner(backbone, config, num_tasks=2)
        assert learner.pool.planned_parameter_count() == 4 * 3 * 16

    def test_prompt_tensors_and_chunk_table(self, config: ExperimentConfig, backbone: EncoderParams) -> None:
        learner = IPromptLearner(backbone, config, num_tasks=2)
        learner.start_task(0)
        assert learner.chunk_table() == [0, 0, 1, 1]
        names = [name for name, _ in learner.prompt_tensors()]
        assert "head.importance" in names
        assert "pool.0.0.keys" in names


def _baseline(method: str, **prompt: object) -> ExperimentConfig:
    return toy_config(prompt={"method": method, "prompt_length": 1, **prompt})


class TestQueryKeyLearner:
    def test_two_passes_per_step(self, backbone: EncoderParams, images: np.ndarray) -> None:
        counter = ForwardPassCounter()
        learner = QueryKeyLearner(backbone, _baseline("querykey_baseline"), num_tasks=2, counter=counter)
        learner.start_task(0)
        learner.training_loss(images, LABELS, MASK)
        assert counter["train"] == 1
        assert counter["query"] == 1
        learner.predict(images, MASK)
        assert counter["eval"] == 2

    def test_key_is_pulled_towards_queries(self, backbone: EncoderParams, images: np.ndarray) -> None:
        learner = QueryKeyLearner(backbone, _baseline("querykey_baseline"), num_tasks=2)
        learner.start_task(0)
        learner.training_loss(images, LABELS, MASK).backward()
        key_grad = learner.matcher.keys[0].grad
        assert key_grad is not None and np.any(key_grad != 0.0)

    def test_previous_task_prompt_stays_frozen(self, backbone: EncoderParams, images: np.ndarray) -> None:
        learner = QueryKeyLearner(backbone, _baseline("querykey_baseline"), num_tasks=2)
        learner.start_task(0)
        learner.start_task(1)
        params = learner.trainable_parameters()
        state = AdamState.for_params(params, 0.01)
        learner.training_loss(images, np.array([2, 3, 2]), LogitMask.of([2, 3], 8)).backward()
        adam_step(params, state, 0.01)
        assert learner.frozen_intact()

    def test_prompt_insertion(self, backbone: EncoderParams, images: np.ndarray) -> None:
        learner = QueryKeyLearner(
            backbone, _baseline("querykey_baseline", baseline_insertion="prompt"), num_tasks=2
        )
        learner.start_task(0)
        assert np.isfinite(learner.training_loss(images, LABELS, MASK).item())
        assert learner.matcher.block_layers == (-1,)

    def test_learnable_count(self, backbone: EncoderParams) -> None:
        learner = QueryKeyLearner(backbone, _baseline("querykey_baseline"), num_tasks=4)
        per_task = 16 + 2 * 2 * 16
        assert learner.learnable_parameter_count() == 4 * per_task + 8 * 16 + 8


class TestAttentionLearner:
    def test_attention_vectors_train(self, backbone: EncoderParams, images: np.ndarray) -> None:
        learner = _random_head(AttentionLearner(backbone, _baseline("attention_baseline"), num_tasks=2))
        learner.start_task(0)
        learner.training_loss(images, LABELS, MASK).backward()
        grad = learner.matcher.attn_vectors[0].grad
        assert grad is not None and np.any(grad != 0.0)

    def test_two_passes_per_step(self, backbone: EncoderParams, images: np.ndarray) -> None:
        counter = ForwardPassCounter()
        learner = AttentionLearner(backbone, _baseline("attention_baseline"), num_tasks=2, counter=counter)
        learner.start_task(0)
        learner.training_loss(images, LABELS, MASK)
        assert counter["train"] + counter["query"] == 2


class TestFinetuneLearner:
    def test_trains_a_copy_of_the_backbone(self, backbone: EncoderParams, images: np.ndarray) -> None:
        learner = _random_head(FinetuneLearner(backbone, _baseline("finetune"), num_tasks=2))
        learner.start_task(0)
        before = backbone.fingerprint()
        params = learner.trainable_parameters()
        state = AdamState.for_params(params, 0.01)
        learner.training_loss(images, LABELS, MASK).backward()
        adam_step(params, state, 0.01)
        assert backbone.fingerprint() == before
        assert learner.encoder.fingerprint() != before

    def test_everything_is_learnable(self, backbone: EncoderParams) -> None:
        learner = FinetuneLearner(backbone, _baseline("finetune"), num_tasks=2)
        assert learner.learnable_parameter_count() == learner.total_parameter_count()
        assert learner.learnable_parameter_count() == backbone.parameter_count() + 8 * 16 + 8


class TestBuildLearner:
    @pytest.mark.parametrize(
        ("method", "cls"),
        [
            ("iprompt", IPromptLearner),
            ("querykey_baseline", QueryKeyLearner),
            ("attention_baseline", AttentionLearner),
            ("finetune", FinetuneLearner),
        ],
    )
    def test_dispatch(self, backbone: EncoderParams, method: str, cls: type) -> None:
        learner = build_learner(backbone, _baseline(method), num_tasks=2)
        assert type(learner) is cls
        assert learner.method == method

    def test_joint_reports_its_own_method(self, backbone: EncoderParams) -> None:
        learner = build_learner(backbone, _baseline("joint"), num_tasks=1)
        assert isinstance(learner, IPromptLearner)
        assert learner.method == "joint"
