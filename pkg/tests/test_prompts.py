"""Tests for iprompt_lab/prompts.py"""

import numpy as np
import pytest

from iprompt_lab.exceptions import DimensionError, ProtocolError, StateError, UsageError
from iprompt_lab.numerics import Tensor, tsum
from iprompt_lab.prompts import (
    BaselineMatcherParams,
    PromptPool,
    attention_select,
    attention_weights,
    chunk_sizes,
    compose_prompt,
    gather_blocks,
    insert_prefix_tuning,
    insert_prompt_tuning,
    querykey_scores,
    querykey_select,
    semantic_match,
)


def _pool(**overrides: object) -> PromptPool:
    values: dict[str, object] = {
        "pool_size": 6,
        "prompt_length": 2,
        "embed_dim": 4,
        "layers": [0, 1],
        "num_tasks": 3,
        "seed": 9,
    }
    values.update(overrides)
    return PromptPool(**values)  # type: ignore[arg-type]


class TestChunkSizes:
    def test_even_split(self) -> None:
        assert chunk_sizes(20, 4) == [5, 5, 5, 5]

    def test_remainder_goes_last(self) -> None:
        assert chunk_sizes(20, 3) == [6, 6, 8]

    def test_more_tasks_than_prompts(self) -> None:
        assert chunk_sizes(2, 3) == [0, 0, 2]

    def test_zero_tasks_raises(self) -> None:
        with pytest.raises(UsageError):
            chunk_sizes(4, 0)


class TestPromptPool:
    def test_starts_before_first_task(self) -> None:
        pool = _pool()
        assert pool.frozen_upto == -1
        assert pool.active_size == 0
        with pytest.raises(StateError):
            pool.active_keys(0)

    def test_chunk_table(self) -> None:
        assert _pool().chunk_of == [0, 0, 1, 1, 2, 2]

    def test_keys_are_unit_norm_and_prompts_small(self) -> None:
        pool = _pool()
        pool.start_task(0)
        np.testing.assert_allclose(np.linalg.norm(pool.active_keys(0).data, axis=1), 1.0)
        assert np.all(np.abs(pool.active_prompts(0).data) <= 0.02)
        assert pool.active_prompts(0).shape == (2, 4, 4)

    def test_start_task_freezes_previous_chunk(self) -> None:
        pool = _pool()
        pool.start_task(0)
        first = pool.chunks(0)[0]
        pool.start_task(1)
        assert first.frozen
        assert first.keys.grad is None
        assert pool.frozen_upto == 1
        assert pool.active_size == 4
        assert len(pool.trainable_parameters()) == 4  # keys and prompts for two layers

    def test_out_of_order_raises(self) -> None:
        pool = _pool()
        with pytest.raises(ProtocolError):
            pool.start_task(1)
        pool.start_task(0)
        with pytest.raises(ProtocolError):
            pool.start_task(0)

    def test_cannot_exceed_planned_tasks(self) -> None:
        pool = _pool(num_tasks=1)
        pool.start_task(0)
        with pytest.raises(ProtocolError):
            pool.start_task(1)

    def test_frozen_intact_detects_tampering(self) -> None:
        pool = _pool()
        pool.start_task(0)
        pool.start_task(1)
        assert pool.frozen_intact()
        chunk = pool.chunks(0)[0]
        chunk.prompts.data = chunk.prompts.data.copy()
        chunk.prompts.data[0, 0, 0] += 1.0
        assert not pool.frozen_intact()

    def test_allocation_is_seeded(self) -> None:
        a, b = _pool(), _pool()
        a.start_task(0)
        b.start_task(0)
        np.testing.assert_array_equal(a.active_keys(1).data, b.active_keys(1).data)

    def test_shared_pool_serves_every_layer(self) -> None:
        pool = _pool(shared=True)
        pool.start_task(0)
        assert pool.active_keys(0) is pool.active_keys(1)
        assert pool.planned_parameter_count() == 6 * 5 * 4

    def test_per_layer_parameter_count(self) -> None:
        assert _pool().planned_parameter_count() == 2 * 6 * (2 * 2 + 1) * 4

    def test_unprompted_layer_raises(self) -> None:
        pool = _pool()
        pool.start_task(0)
        with pytest.raises(StateError):
            pool.active_keys(5)

    def test_freeze_all(self) -> None:
        pool = _pool()
        pool.start_task(0)
        pool.freeze_all()
        assert pool.trainable_parameters() == []


class TestSemanticMatch:
    def test_covers_allocated_prompts(self, rng: np.random.Generator) -> None:
        pool = _pool()
        pool.start_task(0)
        pool.start_task(1)
        weights = semantic_match(Tensor(rng.normal(size=(2, 5, 4))), pool, 0)
        assert weights.shape == (2, 5, 4)
        assert np.all(np.abs(weights.data) <= 1.0 + 1e-12)

    def test_gradient_reaches_keys(self, rng: np.random.Generator) -> None:
        pool = _pool()
        pool.start_task(0)
        tsum(semantic_match(Tensor(rng.normal(size=(5, 4))), pool, 0)).backward()
        grad = pool.chunks(0)[0].keys.grad
        assert grad is not None
        assert np.any(grad != 0.0)


class TestComposePrompt:
    def test_cls_row_receives_zero(self, rng: np.random.Generator) -> None:
        pool = _pool()
        pool.start_task(0)
        weights = semantic_match(Tensor(rng.normal(size=(5, 4))), pool, 0)
        prompt = compose_prompt(weights, pool, 0, 0)
        assert prompt.key_offset is not None and prompt.value_offset is not None
        np.testing.assert_array_equal(prompt.key_offset.data[0], np.zeros(4))
        np.testing.assert_array_equal(prompt.value_offset.data[0], np.zeros(4))

    def test_sums_key_and_value_rows(self) -> None:
        pool = _pool(pool_size=3, num_tasks=1)
        pool.start_task(0)
        weights = Tensor(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.5]]))
        prompt = compose_prompt(weights, pool, 0, 1)
        prompts = pool.active_prompts(1).data
        expected_key = prompts[0, :2].sum(axis=0) + 0.5 * prompts[2, :2].sum(axis=0)
        expected_value = prompts[0, 2:].sum(axis=0) + 0.5 * prompts[2, 2:].sum(axis=0)
        assert prompt.key_offset is not None and prompt.value_offset is not None
        np.testing.assert_allclose(prompt.key_offset.data[1], expected_key, atol=1e-12)
        np.testing.assert_allclose(prompt.value_offset.data[1], expected_value, atol=1e-12)

    def test_stale_task_raises(self, rng: np.random.Generator) -> None:
        pool = _pool()
        pool.start_task(0)
        pool.start_task(1)
        weights = semantic_match(Tensor(rng.normal(size=(5, 4))), pool, 0)
        with pytest.raises(StateError):
            compose_prompt(weights, pool, 0, 0)

    def test_weight_width_mismatch_raises(self) -> None:
        pool = _pool()
        pool.start_task(0)
        with pytest.raises(DimensionError):
            compose_prompt(Tensor(np.ones((5, 3))), pool, 0, 0)

    def test_frozen_chunk_gets_no_gradient(self, rng: np.random.Generator) -> None:
        pool = _pool()
        pool.start_task(0)
        pool.start_task(1)
        weights = semantic_match(Tensor(rng.normal(size=(5, 4))), pool, 0)
        prompt = compose_prompt(weights, pool, 1, 0)
        assert prompt.key_offset is not None
        tsum(prompt.key_offset).backward()
        frozen, current = pool.chunks(0)
        assert frozen.prompts.grad is None
        assert current.prompts.grad is not None
        assert np.any(current.prompts.grad != 0.0)

    def test_invariant_to_chunk_order(self, rng: np.random.Generator) -> None:
        pool = _pool()
        for t in range(3):
            pool.start_task(t)
        h_k = Tensor(rng.normal(size=(2, 5, 4)))
        before = compose_prompt(semantic_match(h_k, pool, 0), pool, 2, 0)
        chunks = pool.chunks(0)
        chunks[0], chunks[1] = chunks[1], chunks[0]
        after = compose_prompt(semantic_match(h_k, pool, 0), pool, 2, 0)
        assert before.key_offset is not None and after.key_offset is not None
        assert before.value_offset is not None and after.value_offset is not None
        np.testing.assert_allclose(after.key_offset.data, before.key_offset.data, atol=1e-12)
        np.testing.assert_allclose(after.value_offset.data, before.value_offset.data, atol=1e-12)


def _matcher(attention: bool = True, insertion: str = "prefix", tasks: int = 3) -> BaselineMatcherParams:
    matcher = BaselineMatcherParams(
        prompt_length=2,
        embed_dim=4,
        layers=(0, 1),
        insertion=insertion,  # type: ignore[arg-type]
        attention=attention,
        seed=2,
    )
    for t in range(tasks):
        matcher.start_task(t)
    return matcher


class TestBaselineMatcher:
    def test_previous_task_is_frozen(self) -> None:
        matcher = _matcher()
        assert matcher.keys[0].grad is None
        assert matcher.blocks[0][1].grad is None
        assert len(matcher.trainable_parameters()) == 4  # key, attention vector, two blocks
        assert matcher.frozen_intact()

    def test_out_of_order_raises(self) -> None:
        with pytest.raises(ProtocolError):
            _matcher(tasks=0).start_task(1)

    def test_prompt_insertion_uses_single_block(self) -> None:
        matcher = _matcher(insertion="prompt", tasks=1)
        assert matcher.block_layers == (-1,)
        assert matcher.blocks[-1][0].shape == (2, 4)

    def test_parameter_count(self) -> None:
        assert _matcher().parameter_count(5) == 5 * (2 * 4 + 2 * 4 * 4)
        assert _matcher(attention=False).parameter_count(5) == 5 * (4 + 2 * 4 * 4)


class TestSelection:
    def test_querykey_picks_most_similar_key(self) -> None:
        matcher = _matcher(attention=False)
        q = Tensor(np.stack([matcher.keys[2].data, matcher.keys[0].data]))
        np.testing.assert_array_equal(querykey_select(q, matcher, 3), [2, 0])

    def test_querykey_ignores_unseen_tasks(self) -> None:
        matcher = _matcher(attention=False)
        assert querykey_scores(Tensor(matcher.keys[2].data), matcher, 2).shape == (1, 2)

    def test_zero_tasks_raises(self) -> None:
        with pytest.raises(UsageError):
            querykey_select(Tensor(np.ones(4)), _matcher(), 0)

    def test_attention_weights_need_vectors(self) -> None:
        with pytest.raises(StateError):
            attention_weights(Tensor(np.ones(4)), _matcher(attention=False), 1)

    def test_attention_select_matches_weighted_sum(self, rng: np.random.Generator) -> None:
        matcher = _matcher()
        q = Tensor(rng.normal(size=4))
        weights = attention_weights(q, matcher, 3).data[0]
        expected = sum(weights[i] * matcher.blocks[1][i].data for i in range(3))
        np.testing.assert_allclose(attention_select(q, matcher, 3, 1).data, expected, atol=1e-12)

    def test_gather_blocks(self) -> None:
        matcher = _matcher()
        out = gather_blocks(matcher, 0, np.array([1, 0, 1]))
        assert out.shape == (3, 4, 4)
        np.testing.assert_array_equal(out.data[1], matcher.blocks[0][0].data)


class TestInsertion:
    def test_prompt_tuning_appends_rows(self) -> None:
        h0 = Tensor(np.zeros((2, 5, 4)))
        out = insert_prompt_tuning(h0, Tensor(np.ones((3, 4))))
        assert out.shape == (2, 8, 4)
        np.testing.assert_array_equal(out.data[:, 5:], np.ones((2, 3, 4)))

    def test_prompt_tuning_width_mismatch_raises(self) -> None:
        with pytest.raises(DimensionError):
            insert_prompt_tuning(Tensor(np.zeros((2, 5, 4))), Tensor(np.ones((3, 5))))

    def test_prefix_split(self) -> None:
        block = Tensor(np.arange(16.0).reshape(4, 4))
        prompt = insert_prefix_tuning(block, 2)
        assert prompt.key_prefix is not None and prompt.value_prefix is not None
        np.testing.assert_array_equal(prompt.key_prefix.data, block.data[:2])
        np.testing.assert_array_equal(prompt.value_prefix.data, block.data[2:])

    def test_prefix_wrong_rows_raises(self) -> None:
        with pytest.raises(DimensionError):
            insert_prefix_tuning(Tensor(np.ones((3, 4))), 2)
