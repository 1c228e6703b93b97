"""Tests for iprompt_lab/numerics.py"""

import math

import numpy as np
import pytest

from iprompt_lab.exceptions import DimensionError, InvalidMaskError, NumericError, UsageError
from iprompt_lab.numerics import (
    AdamState,
    GradCheckResult,
    Tensor,
    adam_step,
    concat,
    cosine_lr,
    cosine_matrix,
    cosine_similarity,
    cross_entropy,
    exp,
    gelu,
    getitem,
    grad_check,
    layernorm,
    log,
    masked_fill,
    matmul,
    no_grad,
    softmax,
    tsum,
)


def _param(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _assert_agrees(result: GradCheckResult) -> None:
    assert result.max_rel < 1e-5
    assert result.max_abs < 1e-7
    assert result.rel_checked > 0


class TestTensor:
    def test_stores_float64(self) -> None:
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64
        assert t.shape == (3,)
        assert t.grad is None

    def test_requires_grad_allocates_buffer(self) -> None:
        t = Tensor(np.ones((2, 3)), requires_grad=True)
        assert t.grad is not None
        assert t.grad.shape == (2, 3)

    def test_item_rejects_multi_element(self) -> None:
        with pytest.raises(DimensionError):
            Tensor([1.0, 2.0]).item()

    def test_backward_needs_seed_for_non_scalar(self) -> None:
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            (t * 2.0).backward()

    def test_backward_on_constant_raises(self) -> None:
        with pytest.raises(UsageError):
            Tensor(1.0).backward()

    def test_freeze_makes_data_read_only(self) -> None:
        t = Tensor(np.ones(3), requires_grad=True)
        t.freeze()
        assert t.grad is None
        assert t.requires_grad is False
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_unfreeze_restores_training(self) -> None:
        t = Tensor(np.ones(3))
        t.freeze()
        t.unfreeze()
        t.data[0] = 2.0
        assert t.requires_grad is True
        assert t.grad is not None

    def test_non_finite_result_raises(self) -> None:
        with pytest.raises(NumericError):
            log(Tensor([0.0]))


class TestGradients:
    def test_broadcast_add_sums_gradient(self) -> None:
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        tsum(a + b).backward()
        assert b.grad is not None
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_reused_node_accumulates(self) -> None:
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad is not None
        assert x.grad == pytest.approx(6.0)

    def test_no_grad_records_nothing(self) -> None:
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert y.requires_grad is False

    @pytest.mark.parametrize(
        "op",
        [
            lambda x: tsum(exp(x)),
            lambda x: tsum(gelu(x)),
            lambda x: tsum(softmax(x, axis=-1) * softmax(x, axis=0)),
            lambda x: tsum(getitem(x, (slice(None), 1)) * 3.0),
            lambda x: tsum(concat([x, x * 2.0], axis=0)),
        ],
    )
    def test_elementwise_ops_match_finite_differences(self, op: object, rng: np.random.Generator) -> None:
        x = _param(rng, 3, 4)
        _assert_agrees(grad_check(op, x))  # type: ignore[arg-type]

    def test_matmul_gradient(self, rng: np.random.Generator) -> None:
        w = _param(rng, 4, 5)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        _assert_agrees(grad_check(lambda p: tsum(matmul(x, p) * Tensor(np.arange(5.0))), w))

    def test_layernorm_gradient(self, rng: np.random.Generator) -> None:
        x = _param(rng, 5, 6)
        gain = Tensor(rng.normal(size=6))
        bias = Tensor(rng.normal(size=6))
        weights = Tensor(rng.normal(size=(5, 6)))
        _assert_agrees(grad_check(lambda p: tsum(layernorm(p, gain, bias) * weights), x))

    def test_cosine_matrix_gradient(self, rng: np.random.Generator) -> None:
        a = _param(rng, 4, 6)
        b = Tensor(rng.normal(size=(3, 6)))
        weights = Tensor(rng.normal(size=(4, 3)))
        _assert_agrees(grad_check(lambda p: tsum(cosine_matrix(p, b) * weights), a))


class TestSoftmax:
    def test_large_equal_logits(self) -> None:
        np.testing.assert_array_equal(softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_large_logits_stay_finite(self) -> None:
        out = softmax(Tensor([[1000.0, 999.0, -1000.0]]), axis=-1).data
        assert np.all(np.isfinite(out))
        assert out.sum() == pytest.approx(1.0)
        assert out[0, 0] / out[0, 1] == pytest.approx(math.e)

    def test_shift_invariant(self, rng: np.random.Generator) -> None:
        x = rng.normal(size=(3, 5))
        np.testing.assert_allclose(softmax(Tensor(x)).data, softmax(Tensor(x + 500.0)).data, atol=1e-12)


class TestCosine:
    @pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
    def test_invariant_to_rescaling(self, alpha: float, rng: np.random.Generator) -> None:
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(3, 4))
        base = cosine_matrix(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(cosine_matrix(Tensor(alpha * a), Tensor(b)).data, base, atol=1e-12)
        np.testing.assert_allclose(cosine_matrix(Tensor(a), Tensor(alpha * b)).data, base, atol=1e-12)

    def test_matches_numpy(self, rng: np.random.Generator) -> None:
        a = rng.normal(size=(2, 5, 4))
        b = rng.normal(size=(3, 4))
        got = cosine_matrix(Tensor(a), Tensor(b)).data
        expected = (a / np.linalg.norm(a, axis=-1, keepdims=True)) @ (b / np.linalg.norm(b, axis=-1, keepdims=True)).T
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_zero_vector_gives_zero(self) -> None:
        got = cosine_matrix(Tensor(np.zeros((1, 3))), Tensor(np.ones((2, 3)))).data
        np.testing.assert_array_equal(got, np.zeros((1, 2)))

    def test_shape_mismatch_raises(self) -> None:
        with pytest.raises(DimensionError):
            cosine_matrix(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    def test_similarity_of_parallel_vectors(self) -> None:
        assert cosine_similarity(Tensor([1.0, 2.0]), Tensor([2.0, 4.0])).item() == pytest.approx(1.0)

    def test_similarity_rejects_empty(self) -> None:
        with pytest.raises(DimensionError):
            cosine_similarity(Tensor(np.zeros(0)), Tensor(np.zeros(0)))


class TestCrossEntropy:
    def test_uniform_logits(self) -> None:
        loss = cross_entropy(Tensor(np.zeros((2, 4))), [0, 3])
        assert loss.item() == pytest.approx(math.log(4))

    def test_masked_logits_get_zero_gradient(self, rng: np.random.Generator) -> None:
        logits = _param(rng, 3, 5)
        keep = np.array([False, True, True, False, False])
        cross_entropy(masked_fill(logits, keep), [1, 2, 1]).backward()
        assert logits.grad is not None
        assert np.all(logits.grad[:, ~keep] == 0.0)
        assert np.any(logits.grad[:, keep] != 0.0)

    def test_masked_matches_restricted_softmax(self, rng: np.random.Generator) -> None:
        raw = rng.normal(size=(2, 4))
        keep = np.array([True, True, False, False])
        masked = cross_entropy(masked_fill(Tensor(raw), keep), [0, 1]).item()
        restricted = cross_entropy(Tensor(raw[:, :2]), [0, 1]).item()
        assert masked == pytest.approx(restricted, abs=1e-12)

    def test_label_on_masked_class_raises(self) -> None:
        logits = masked_fill(Tensor(np.zeros((1, 3))), np.array([True, False, True]))
        with pytest.raises(InvalidMaskError):
            cross_entropy(logits, [1])

    def test_label_out_of_range_raises(self) -> None:
        with pytest.raises(DimensionError):
            cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_empty_batch_raises(self) -> None:
        with pytest.raises(UsageError):
            cross_entropy(Tensor(np.zeros((0, 3))), np.zeros(0, dtype=np.int64))


class TestAdam:
    def test_first_step_moves_by_lr(self) -> None:
        p = Tensor([1.0, -1.0], requires_grad=True)
        state = AdamState.for_params([p], base_lr=0.1)
        assert p.grad is not None
        p.grad[:] = [0.5, -2.0]
        adam_step([p], state, 0.1)
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)
        assert state.step_count == 1

    def test_zeroes_gradients(self) -> None:
        p = Tensor([1.0], requires_grad=True)
        state = AdamState.for_params([p])
        assert p.grad is not None
        p.grad[:] = 3.0
        adam_step([p], state, 1e-3)
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_zero_gradient_row_does_not_move(self) -> None:
        p = Tensor(np.ones((2, 2)), requires_grad=True)
        state = AdamState.for_params([p])
        for _ in range(3):
            assert p.grad is not None
            p.grad[0] = 1.0
            adam_step([p], state, 0.01)
        np.testing.assert_array_equal(p.data[1], [1.0, 1.0])

    def test_parameter_without_grad_raises(self) -> None:
        p = Tensor([1.0])
        with pytest.raises(UsageError):
            adam_step([p], AdamState.for_params([p]), 0.1)

    def test_mismatched_state_raises(self) -> None:
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(UsageError):
            adam_step([p, p], AdamState.for_params([p]), 0.1)

    def test_non_positive_lr_raises(self) -> None:
        with pytest.raises(UsageError):
            AdamState.for_params([], base_lr=0.0)


class TestCosineLr:
    def test_endpoints(self) -> None:
        assert cosine_lr(0, 10, 0.5) == pytest.approx(0.5)
        assert cosine_lr(10, 10, 0.5) == pytest.approx(0.0)
        assert cosine_lr(5, 10, 0.5) == pytest.approx(0.25)

    @pytest.mark.parametrize("total", [2, 100, 1000])
    def test_half_peak_at_midpoint(self, total: int) -> None:
        assert cosine_lr(total // 2, total, 3e-3) == pytest.approx(1.5e-3, abs=1e-15)

    def test_monotone_decay(self) -> None:
        rates = [cosine_lr(step, 50, 1e-3) for step in range(51)]
        assert all(a >= b for a, b in zip(rates, rates[1:], strict=False))

    def test_out_of_range_step_raises(self) -> None:
        with pytest.raises(UsageError):
            cosine_lr(11, 10, 0.5)

    def test_zero_total_raises(self) -> None:
        with pytest.raises(UsageError):
            cosine_lr(0, 0, 0.5)


class TestGradCheck:
    def test_requires_grad(self) -> None:
        with pytest.raises(UsageError):
            grad_check(lambda x: tsum(x), Tensor([1.0]))

    def test_detects_wrong_gradient(self) -> None:
        x = Tensor([0.5, 1.5], requires_grad=True)

        def wrong(p: Tensor) -> Tensor:
            # value is sum(p^2) but the graph only sees sum(p)
            return tsum(p) + Tensor(float(np.sum(p.data**2) - np.sum(p.data)))

        result = grad_check(wrong, x)
        assert result.max_rel > 0.1
        assert result.max_abs > 0.1
        assert result.rel_checked == result.size == 2

    def test_small_entries_only_count_absolutely(self) -> None:
        x = Tensor([0.5, 1.5], requires_grad=True)

        def half_wrong(p: Tensor) -> Tensor:
            # d/dp0 is 1e-9 in value but 2e-9 in the graph
            return tsum(p * Tensor([2e-9, 3.0])) + Tensor(float(-1e-9 * p.data[0]))

        result = grad_check(half_wrong, x)
        assert result.rel_checked == 1
        assert result.max_rel < 1e-6
        assert result.max_abs == pytest.approx(1e-9, abs=1e-10)

        strict = grad_check(half_wrong, x, rel_threshold=1e-10)
        assert strict.rel_checked == 2
        assert strict.max_rel == pytest.approx(0.5, abs=0.05)

    def test_non_positive_threshold_raises(self) -> None:
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(UsageError):
            grad_check(lambda p: tsum(p), x, rel_threshold=0.0)

    def test_sum_of_squares(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        result = grad_check(lambda p: tsum(p * p), x)
        assert result.max_rel < 1e-8
        assert result.rel_checked == 2

    def test_constant_function(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        result = grad_check(lambda p: tsum(p * 0.0) + Tensor(4.0), x)
        assert result.max_abs == 0.0
        assert result.rel_checked == 0
