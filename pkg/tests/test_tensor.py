"""Tensor core: forward oracles, exclusion masking, and gradient checks."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memvit import tensor as T

from helpers import bits_equal, check_grads_fd


def t64(data, requires_grad=False):
    return T.tensor(data, requires_grad=requires_grad, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        a = T.tensor([[1, 2], [3, 4]])
        out = T.matmul(a, T.tensor(np.eye(2)))
        npt.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_zero(self):
        a = T.tensor([[1, 2], [3, 4]])
        out = T.matmul(a, T.tensor(np.zeros((2, 2))))
        npt.assert_array_equal(out.data, [[0, 0], [0, 0]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        expect = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expect[i, j] += a[i, k] * b[k, j]
        out = T.matmul(t64(a), t64(b))
        npt.assert_allclose(out.data, expect, rtol=0, atol=1e-12)

    def test_batched_against_loop(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))
        out = T.matmul(t64(a), t64(b))
        for i in range(2):
            npt.assert_allclose(out.data[i], a[i] @ b, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))

    def test_grads_both_inputs(self):
        rng = np.random.default_rng(9)
        a = t64(rng.standard_normal((3, 4)), requires_grad=True)
        b = t64(rng.standard_normal((4, 2)), requires_grad=True)
        check_grads_fd(lambda: T.sum_all(T.matmul(a, b)), {"a": a, "b": b}, rng)

    def test_shared_weight_grad_sums_over_batch(self):
        rng = np.random.default_rng(10)
        a = t64(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = t64(rng.standard_normal((4, 2)), requires_grad=True)
        check_grads_fd(lambda: T.sum_all(T.matmul(a, b)), {"a": a, "b": b}, rng)


class TestSoftmaxMasked:
    def test_symmetric_pair(self):
        out = T.softmax_masked(T.tensor([[0.0, 0.0]]), np.array([[True, True]]))
        npt.assert_array_equal(out.data, [[0.5, 0.5]])

    def test_single_allowed_key_exact(self):
        out = T.softmax_masked(T.tensor([[5.0, 100.0]]), np.array([[True, False]]))
        assert out.data[0, 0] == 1.0
        assert out.data[0, 1] == 0.0

    def test_exp_normalize_oracle(self):
        logits = np.array([[1.0, 2.0, 3.0]])
        e = np.exp(logits - logits.max())
        expect = e / e.sum()
        out = T.softmax_masked(t64(logits), np.ones((1, 3), bool))
        npt.assert_allclose(out.data, expect, atol=1e-12)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ValueError):
            T.softmax_masked(T.tensor([[1.0, 2.0]]), np.array([[False, False]]))

    def test_denied_weight_is_bit_zero(self):
        rng = np.random.default_rng(11)
        logits = T.tensor(rng.standard_normal((4, 2, 6)))
        mask = rng.random((2, 6)) < 0.6
        mask[:, 0] = True
        out = T.softmax_masked(logits, mask)
        denied = out.data[:, ~mask]
        assert np.all(denied.view(np.uint32) == np.float32(0.0).view(np.uint32))

    def test_exclusion_matches_key_removal_bitwise(self):
        # Removing a denied key entirely must reproduce the allowed
        # weights bit for bit: masking is exclusion, not -inf arithmetic.
        rng = np.random.default_rng(12)
        for _ in range(20):
            k = int(rng.integers(2, 12))
            logits = rng.standard_normal((3, 1, k)).astype(np.float32)
            mask = rng.random(k) < 0.5
            if not mask.any():
                mask[int(rng.integers(k))] = True
            full = T.softmax_masked(T.tensor(logits), mask[None, :]).data
            compact = T.softmax_masked(
                T.tensor(logits[..., mask]), np.ones((1, int(mask.sum())), bool)
            ).data
            assert bits_equal(full[..., mask], compact)

    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one_over_allowed(self, k, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((2, k)) * 5
        mask = rng.random((2, k)) < 0.5
        for r in range(2):
            if not mask[r].any():
                mask[r, int(rng.integers(k))] = True
        out = T.softmax_masked(t64(logits), mask)
        npt.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_grad_fd(self):
        rng = np.random.default_rng(13)
        x = t64(rng.standard_normal((2, 3, 5)), requires_grad=True)
        mask = rng.random((3, 5)) < 0.7
        mask[:, 0] = True
        w = t64(rng.standard_normal((2, 3, 5)))

        def loss():
            return T.sum_all(T.mul(T.softmax_masked(x, mask), w))

        check_grads_fd(loss, {"x": x}, rng)


class TestLayernorm:
    def test_constant_vector_zeroed(self):
        x = T.tensor(np.full((2, 4), 3.7))
        out = T.layernorm(x, T.tensor(np.ones(4)), T.tensor(np.zeros(4)))
        npt.assert_allclose(out.data, 0.0, atol=1e-4)

    def test_already_normalized(self):
        x = t64([[1.0, -1.0]])
        out = T.layernorm(x, t64(np.ones(2)), t64(np.zeros(2)), eps=1e-14)
        npt.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_output_statistics(self):
        rng = np.random.default_rng(14)
        x = t64(rng.standard_normal((8, 32)) * 3 + 1)
        out = T.layernorm(x, t64(np.ones(32)), t64(np.zeros(32)), eps=1e-6).data
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
        assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-3)

    def test_biased_variance_convention(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal(5)
        eps = 1e-6
        expect = (x - x.mean()) / np.sqrt(x.var() + eps)  # np.var is biased
        out = T.layernorm(t64(x[None]), t64(np.ones(5)), t64(np.zeros(5)), eps=eps)
        npt.assert_allclose(out.data[0], expect, atol=1e-12)

    def test_grad_fd(self):
        rng = np.random.default_rng(16)
        x = t64(rng.standard_normal((3, 6)), requires_grad=True)
        g = t64(rng.standard_normal(6), requires_grad=True)
        b = t64(rng.standard_normal(6), requires_grad=True)
        w = t64(rng.standard_normal((3, 6)))

        def loss():
            return T.sum_all(T.mul(T.layernorm(x, g, b), w))

        check_grads_fd(loss, {"x": x, "gamma": g, "beta": b}, rng)


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.tensor([0.0])).data[0] == 0.0

    def test_large_positive_asymptote(self):
        x = np.array([12.0])
        npt.assert_allclose(T.gelu(t64(x)).data, x, atol=1e-10)

    def test_erf_oracle(self):
        xs = np.array([1.0, -0.5, 2.3, -3.1])
        expect = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in xs])
        npt.assert_allclose(T.gelu(t64(xs)).data, expect, atol=1e-10)

    def test_float32_stays_float32(self):
        out = T.gelu(T.tensor([0.5, -0.5]))
        assert out.data.dtype == np.float32

    def test_grad_fd(self):
        rng = np.random.default_rng(17)
        x = t64(rng.standard_normal(40), requires_grad=True)
        check_grads_fd(lambda: T.sum_all(T.gelu(x)), {"x": x}, rng)


class TestTokenOps:
    def test_concat_with_empty(self):
        x = T.tensor(np.ones((2, 3, 4)))
        out = T.concat_tokens(x, T.tensor(np.zeros((2, 0, 4))))
        assert out is x

    def test_concat_order(self):
        a = T.tensor(np.full((1, 1, 2), 1.0))
        b = T.tensor(np.full((1, 2, 2), 2.0))
        out = T.concat_tokens(a, b)
        assert out.shape == (1, 3, 2)
        npt.assert_array_equal(out.data[0, :, 0], [1, 2, 2])

    def test_concat_backward_splits(self):
        a = t64(np.random.default_rng(0).standard_normal((2, 2, 3)), requires_grad=True)
        b = t64(np.random.default_rng(1).standard_normal((2, 1, 3)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.concat_tokens(a, b))
        T.backward(tape, loss)
        npt.assert_array_equal(a.grad, np.ones_like(a.data))
        npt.assert_array_equal(b.grad, np.ones_like(b.data))

    def test_concat_feature_mismatch(self):
        with pytest.raises(ValueError):
            T.concat_tokens(T.tensor(np.ones((1, 2, 3))), T.tensor(np.ones((1, 2, 4))))

    def test_truncate_identity_and_empty(self):
        x = T.tensor(np.arange(12, dtype=np.float32).reshape(1, 3, 4))
        npt.assert_array_equal(T.truncate_tokens(x, 3).data, x.data)
        assert T.truncate_tokens(x, 0).shape == (1, 0, 4)

    def test_truncate_over_limit(self):
        with pytest.raises(ValueError):
            T.truncate_tokens(T.tensor(np.ones((1, 2, 3))), 5)

    def test_truncate_dropped_region_zero_grad(self):
        x = t64(np.random.default_rng(2).standard_normal((2, 4, 3)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.truncate_tokens(x, 2))
        T.backward(tape, loss)
        npt.assert_array_equal(x.grad[:, 2:, :], 0.0)
        npt.assert_array_equal(x.grad[:, :2, :], 1.0)

    def test_split_roundtrip(self):
        rng = np.random.default_rng(3)
        x = t64(rng.standard_normal((2, 5, 3)), requires_grad=True)
        parts = T.split_tokens(x, [2, 1, 2])
        out = T.concat_tokens(*parts)
        assert bits_equal(out.data, x.data)

    def test_heads_roundtrip(self):
        rng = np.random.default_rng(4)
        x = t64(rng.standard_normal((2, 5, 8)), requires_grad=True)
        h = T.split_heads(x, 4)
        assert h.shape == (2, 4, 5, 2)
        assert bits_equal(T.merge_heads(h).data, x.data)
        check_grads_fd(lambda: T.sum_all(T.mul(T.merge_heads(T.split_heads(x, 4)), x)),
                       {"x": x}, rng)

    def test_gather_grad_accumulates_duplicates(self):
        x = t64(np.zeros((1, 3, 2)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.gather_tokens(x, [0, 0, 2]))
        T.backward(tape, loss)
        npt.assert_array_equal(x.grad[0, :, 0], [2, 0, 1])

    def test_tile_leading_grad_sums(self):
        x = t64(np.ones((2, 3)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.tile_leading(x, 5))
        T.backward(tape, loss)
        npt.assert_array_equal(x.grad, np.full((2, 3), 5.0))


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = t64(np.zeros((2, 4)))
        out = T.cross_entropy_logits(logits, np.array([0, 3]))
        npt.assert_allclose(out.data, math.log(4), atol=1e-12)

    def test_confident_correct(self):
        logits = t64([[100.0, 0.0, 0.0]])
        out = T.cross_entropy_logits(logits, np.array([0]))
        assert out.data < 1e-10

    def test_log_sum_exp_oracle(self):
        rng = np.random.default_rng(18)
        logits = rng.standard_normal((3, 5)) * 4
        labels = rng.integers(0, 5, size=3)
        expect = 0.0
        for i in range(3):
            expect += -(logits[i, labels[i]] - math.log(np.exp(logits[i]).sum()))
        expect /= 3
        out = T.cross_entropy_logits(t64(logits), labels)
        npt.assert_allclose(out.data, expect, atol=1e-10)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy_logits(T.tensor(np.zeros((1, 3))), np.array([3]))

    def test_grad_fd(self):
        rng = np.random.default_rng(19)
        x = t64(rng.standard_normal((4, 6)), requires_grad=True)
        labels = rng.integers(0, 6, size=4)
        check_grads_fd(lambda: T.cross_entropy_logits(x, labels), {"x": x}, rng)


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.random.default_rng(20).standard_normal((3, 4)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(x)
        T.backward(tape, loss)
        npt.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_half_square_gives_identity(self):
        x = t64(np.random.default_rng(21).standard_normal(6), requires_grad=True)
        with T.Tape() as tape:
            loss = T.scale(T.sum_all(T.mul(x, x)), 0.5)
        T.backward(tape, loss)
        npt.assert_allclose(x.grad, x.data, atol=1e-12)

    def test_double_backward_rejected(self):
        x = t64(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(x)
        T.backward(tape, loss)
        with pytest.raises(RuntimeError):
            T.backward(tape, loss)

    def test_loss_not_on_tape_rejected(self):
        x = t64(np.ones(3), requires_grad=True)
        with T.Tape():
            pass
        other = T.sum_all(x)  # recorded on no tape
        tape = T.Tape()
        with pytest.raises(ValueError):
            T.backward(tape, other)

    def test_grad_accumulates_across_uses(self):
        x = t64(np.ones(2), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.add(x, x))
        T.backward(tape, loss)
        npt.assert_array_equal(x.grad, [2.0, 2.0])


class TestDeterminismAndPrecision:
    def test_sequential_cumsum_matches_left_to_right_loop(self):
        rng = np.random.default_rng(22)
        x = rng.standard_normal(257).astype(np.float32)
        seq = np.cumsum(x)[-1]
        acc = np.float32(0.0)
        for v in x:
            acc = np.float32(acc + v)
        assert seq.view(np.uint32) == acc.view(np.uint32)

    def test_same_inputs_same_bits(self):
        def run():
            rng = np.random.default_rng(23)
            x = T.tensor(rng.standard_normal((4, 6, 8)), requires_grad=True,
                         dtype=np.float32)
            w = T.tensor(rng.standard_normal((8, 8)), requires_grad=True,
                         dtype=np.float32)
            with T.Tape() as tape:
                h = T.gelu(T.matmul(x, w))
                logits = T.drop_token_axis(T.truncate_tokens(h, 1))
                loss = T.cross_entropy_logits(logits, np.array([1, 2, 3, 4]))
            T.backward(tape, loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert bits_equal(np.atleast_1d(l1), np.atleast_1d(l2))
        assert bits_equal(gx1, gx2)
        assert bits_equal(gw1, gw2)

    def test_mixed_precision_rejected(self):
        a = T.tensor(np.ones((2, 2)), dtype=np.float32)
        b = T.tensor(np.ones((2, 2)), dtype=np.float64)
        with pytest.raises(TypeError):
            T.matmul(a, b)
