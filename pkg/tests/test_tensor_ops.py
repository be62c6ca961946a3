"""
tests/test_tensor_ops.py
텐서 primitive 연산과 역전파 테이프 테스트
"""

import math

import numpy as np
import pytest

from app.core import ops
from app.core.exceptions import (
    ConfigError,
    EmbeddingLookupError,
    MaskError,
    NonFiniteError,
    ShapeError,
    TapeError,
)
from app.core.gradcheck import gradient_check, relative_error
from app.core.tensor import Tape, Tensor, precision, validation

GRAD_TOLERANCE = 1e-3


def param(array) -> Tensor:
    """그래디언트가 필요한 64비트 텐서"""
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


def weighted_sum(x: Tensor, seed: int = 0) -> Tensor:
    """무작위 가중합 스칼라 (그래디언트가 상수 1 이 되지 않도록)"""
    weights = np.random.default_rng(seed).normal(size=x.shape)
    return ops.reduce_sum(ops.mul(x, weights))


class TestForwardExamples:
    """연산별 forward 예시 값"""

    def test_matmul_identity(self):
        a = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(ops.matmul(a, b).data, [[3.0, 4.0], [5.0, 6.0]])

    def test_matmul_hand_arithmetic(self):
        a = Tensor(np.array([[1.0, 2.0]]))
        b = Tensor(np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(ops.matmul(a, b).data, [[11.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError, match="내부 차원"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_add_bias_and_mismatch(self):
        out = ops.add(Tensor(np.zeros((2, 3))), Tensor(np.array([1.0, 2.0, 3.0])))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0]] * 2)
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_softmax_uniform(self):
        out = ops.masked_softmax(Tensor(np.zeros((1, 3))), np.ones((1, 3), dtype=bool))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_softmax_single_unmasked_position(self):
        out = ops.masked_softmax(Tensor(np.array([[4.2, 4.2]])), np.array([[True, False]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_softmax_matches_direct_formula(self):
        x = np.array([[1.0, 2.0, 3.0]])
        out = ops.masked_softmax(Tensor(x), np.ones_like(x, dtype=bool))
        expected = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 6, 7))
        mask = rng.random((4, 6, 7)) > 0.4
        mask[..., 0] = True
        out = ops.masked_softmax(Tensor(x), mask)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out.data[~mask] == 0.0)

    def test_softmax_fully_masked_row(self):
        with pytest.raises(MaskError):
            ops.masked_softmax(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False] * 3]))

    def test_layer_norm_constant_row(self):
        out = ops.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_layer_norm_two_points(self):
        out = ops.layer_norm(Tensor(np.array([[1.0, 3.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-3)

    @pytest.mark.parametrize("shape", [(1, 8), (16, 32), (4, 20, 32), (3, 5, 7)])
    def test_layer_norm_random_rows(self, shape):
        rng = np.random.default_rng(sum(shape))
        x = Tensor(rng.normal(loc=3.0, scale=5.0, size=shape))
        width = shape[-1]
        with precision(np.float64):
            out = ops.layer_norm(x, Tensor(np.ones(width)), Tensor(np.zeros(width))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-5
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-3

    def test_leaky_relu(self):
        out = ops.leaky_relu(Tensor(np.array([2.0, -1.0])), 0.01)
        np.testing.assert_allclose(out.data, [2.0, -0.01])

    def test_leaky_relu_invalid_slope(self):
        with pytest.raises(ConfigError):
            ops.leaky_relu(Tensor(np.array([1.0])), 1.5)

    def test_dropout_identity_cases(self):
        x = Tensor(np.arange(6.0))
        assert ops.dropout(x, 0.0, training=True, rng=np.random.default_rng(0)) is x
        assert ops.dropout(x, 0.2, training=False) is x

    def test_dropout_preserves_expectation(self):
        x = Tensor(np.ones(100_000))
        out = ops.dropout(x, 0.2, training=True, rng=np.random.default_rng(0))
        assert abs(out.data.mean() - 1.0) < 0.02
        kept = out.data[out.data != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.8)

    def test_dropout_invalid_rate(self):
        with pytest.raises(ConfigError):
            ops.dropout(Tensor(np.ones(3)), 1.0, training=True, rng=np.random.default_rng(0))

    def test_dropout_requires_rng_in_training(self):
        with pytest.raises(ConfigError):
            ops.dropout(Tensor(np.ones(3)), 0.2, training=True)

    def test_sigmoid_values(self):
        out = ops.sigmoid(Tensor(np.array([0.0, 1.0, 50.0, -50.0])))
        assert out.data[0] == 0.5
        assert abs(out.data[1] - 0.731059) < 1e-5
        assert out.data[2] == ops.SIGMOID_CEIL
        assert out.data[3] == ops.SIGMOID_FLOOR

    def test_gather_identical_rows(self):
        table = Tensor(np.array([[0.5, 1.5], [2.0, 3.0]]))
        out = ops.gather_rows(table, np.array([0, 0]), "item_id")
        np.testing.assert_array_equal(out.data[0], out.data[1])

    def test_gather_out_of_range_names_column(self):
        table = Tensor(np.zeros((3, 2)))
        with pytest.raises(EmbeddingLookupError) as excinfo:
            ops.gather_rows(table, np.array([1, 3]), "category_id")
        assert excinfo.value.column == "category_id"
        assert excinfo.value.bad_id == 3
        assert "category_id" in str(excinfo.value)

    def test_concat_last_axis(self):
        out = ops.concat([Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0]))], axis=-1)
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_masked_mean_empty_rows_are_zero(self):
        x = Tensor(np.arange(12.0).reshape(2, 3, 2))
        mask = np.array([[True, False, True], [False, False, False]])
        out = ops.masked_mean(x, mask)
        np.testing.assert_allclose(out.data[0], (x.data[0, 0] + x.data[0, 2]) / 2)
        np.testing.assert_array_equal(out.data[1], [0.0, 0.0])

    def test_cross_entropy_examples(self):
        half = ops.binary_cross_entropy(Tensor(np.array([0.5, 0.5])), np.array([1, 0]))
        assert abs(float(half.data) - math.log(2)) < 1e-6
        loss = ops.binary_cross_entropy(Tensor(np.array([0.9, 0.1])), np.array([1, 0]))
        assert abs(float(loss.data) - 0.105361) < 1e-6

    def test_cross_entropy_length_mismatch(self):
        with pytest.raises(ShapeError):
            ops.binary_cross_entropy(Tensor(np.array([0.5, 0.5])), np.array([1]))


class TestTape:
    """역전파 테이프 규약"""

    def test_sum_gradient_is_ones(self):
        x = param(np.random.default_rng(0).normal(size=(2, 3, 4)))
        with Tape() as tape:
            loss = ops.reduce_sum(x)
        grads = tape.backward(loss, {"x": x})
        np.testing.assert_array_equal(grads["x"], np.ones((2, 3, 4)))

    def test_sigmoid_closed_form_gradient(self):
        x = np.array([[0.3], [-1.2], [0.7]])
        w = param([[0.5, -0.25, 1.0]])
        with Tape() as tape:
            loss = ops.reduce_sum(ops.sigmoid(ops.matmul(w, Tensor(x))))
        grads = tape.backward(loss, {"w": w})
        z = float(w.data @ x)
        s = 1.0 / (1.0 + math.exp(-z))
        np.testing.assert_allclose(grads["w"], s * (1 - s) * x.T, rtol=1e-10)

    def test_non_scalar_loss(self):
        x = param(np.ones(3))
        with Tape() as tape:
            out = ops.scale(x, 2.0)
        with pytest.raises(TapeError, match="스칼라"):
            tape.backward(out, {"x": x})

    def test_tape_replays_once(self):
        x = param(np.ones(3))
        with Tape() as tape:
            loss = ops.reduce_sum(x)
        tape.backward(loss, {"x": x})
        with pytest.raises(TapeError):
            tape.backward(loss, {"x": x})
        with pytest.raises(TapeError):
            with tape:
                pass

    def test_loss_from_other_tape(self):
        x = param(np.ones(3))
        with Tape():
            loss = ops.reduce_sum(x)
        with Tape() as other:
            ops.reduce_sum(x)
        with pytest.raises(TapeError):
            other.backward(loss, {"x": x})

    def test_no_recording_without_tape_or_grad(self):
        x = param(np.ones(3))
        ops.reduce_sum(x)
        constant = Tensor(np.ones(3))
        with Tape() as tape:
            ops.reduce_sum(constant)
        assert len(tape) == 0

    def test_unused_parameter_gets_zero_gradient(self):
        x, unused = param(np.ones(2)), param(np.ones(4))
        with Tape() as tape:
            loss = ops.reduce_sum(x)
        grads = tape.backward(loss, {"x": x, "unused": unused})
        np.testing.assert_array_equal(grads["unused"], np.zeros(4))

    def test_validation_mode_rejects_non_finite(self):
        with validation():
            with pytest.raises(NonFiniteError):
                Tensor(np.array([1.0, np.nan]), name="bad")
        Tensor(np.array([np.inf]))

    def test_precision_context(self):
        with precision(np.float64):
            assert Tensor([1.0, 2.0]).dtype == np.float64
        assert Tensor([1.0, 2.0]).dtype == np.float32
        with pytest.raises(ConfigError):
            with precision(np.float16):
                pass


class TestGradientCheck:
    """중앙 유한차분 대비 연산별 그래디언트 검증 (64비트)"""

    @pytest.mark.parametrize("seed", range(5))
    def test_matmul_shared_weight(self, seed):
        rng = np.random.default_rng(seed)
        a, w = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(4, 5)))
        errors = gradient_check(lambda: weighted_sum(ops.matmul(a, w), seed), {"a": a, "w": w})
        assert max(errors.values()) < GRAD_TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_matmul_batched(self, seed):
        rng = np.random.default_rng(seed)
        a, b = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(2, 4, 3)))
        errors = gradient_check(lambda: weighted_sum(ops.matmul(a, b), seed), {"a": a, "b": b})
        assert max(errors.values()) < GRAD_TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_add_bias_mul_scale(self, seed):
        rng = np.random.default_rng(seed)
        x, b, y = param(rng.normal(size=(3, 4))), param(rng.normal(size=4)), param(rng.normal(size=(3, 4)))

        def fn():
            return weighted_sum(ops.scale(ops.mul(ops.add(x, b), y), 0.5), seed)

        errors = gradient_check(fn, {"x": x, "b": b, "y": y})
        assert max(errors.values()) < GRAD_TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_shape_ops(self, seed):
        rng = np.random.default_rng(seed)
        x, y = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(2, 3, 2)))

        def fn():
            joined = ops.concat([x, y], axis=-1)
            moved = ops.transpose(ops.reshape(joined, (2, 3, 3, 2)), (0, 2, 3, 1))
            return weighted_sum(ops.select(moved, axis=1, index=2), seed)

        errors = gradient_check(fn, {"x": x, "y": y})
        assert max(errors.values()) < GRAD_TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_gather_rows_scatter_add(self, seed):
        rng = np.random.default_rng(seed)
        table = param(rng.normal(size=(6, 3)))
        ids = rng.integers(0, 6, size=(4, 5))
        errors = gradient_check(lambda: weighted_sum(ops.gather_rows(table, ids), seed), {"table": table})
        assert errors["table"] < GRAD_TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_masked_softmax(self, seed):
        rng = np.random.default_rng(seed)
        x = param(rng.normal(size=(3, 5)))
        mask = rng.random((3, 5)) > 0.3
        mask[:, -1] = True
        errors = gradient_check(lambda: weighted_sum(ops.masked_softmax(x, mask), seed), {"x": x})
        assert errors["x"] < GRAD_TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        x = param(rng.normal(size=(2, 3, 6)))
        gain, bias = param(rng.normal(size=6)), param(rng.normal(size=6))
        errors = gradient_check(
            lambda: weighted_sum(ops.layer_norm(x, gain, bias), seed), {"x": x, "gain": gain, "bias": bias}
        )
        assert max(errors.values()) < GRAD_TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_activations_and_reductions(self, seed):
        rng = np.random.default_rng(seed)
        # 0 근처의 꺾임점을 피함
        x = param(rng.uniform(0.1, 1.0, size=(4, 3)) * rng.choice([-1.0, 1.0], size=(4, 3)))
        seq = param(rng.normal(size=(2, 4, 3)))
        mask = np.array([[True, True, False, False], [False, True, True, True]])

        def fn():
            activated = ops.sigmoid(ops.leaky_relu(x, 0.01))
            pooled = ops.masked_mean(seq, mask)
            return ops.add(
                ops.reduce_mean(ops.mul(activated, activated)),
                weighted_sum(pooled, seed),
            )

        errors = gradient_check(fn, {"x": x, "seq": seq})
        assert max(errors.values()) < GRAD_TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_cross_entropy_logit_identity(self, seed):
        """d loss / d logit = (p - y) / B"""
        rng = np.random.default_rng(seed)
        logits = param(rng.normal(size=8))
        labels = rng.integers(0, 2, size=8)
        with Tape() as tape:
            p = ops.sigmoid(logits)
            loss = ops.binary_cross_entropy(p, labels)
        grads = tape.backward(loss, {"logits": logits})
        np.testing.assert_allclose(grads["logits"], (p.data - labels) / 8, atol=1e-6)

        errors = gradient_check(
            lambda: ops.binary_cross_entropy(ops.sigmoid(logits), labels), {"logits": logits}
        )
        assert errors["logits"] < GRAD_TOLERANCE

    def test_dropout_gradient_uses_same_mask(self):
        x = param(np.random.default_rng(1).normal(size=(4, 5)))
        errors = gradient_check(
            lambda: weighted_sum(ops.dropout(x, 0.3, training=True, rng=np.random.default_rng(9))),
            {"x": x},
        )
        assert errors["x"] < GRAD_TOLERANCE

    def test_requires_float64(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(ConfigError):
            gradient_check(lambda: ops.reduce_sum(x), {"x": x})

    def test_relative_error_zero_scale(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0
