import numpy as np
import pytest

import ecgjepa.tensor as T
from helpers import assert_grads_close, central_diff_grad


def _gradcheck(build_loss, *arrays, rel=1e-4):
    """Check analytic grads of build_loss(*tensors) against central
    differences for every input array, at float64."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    params = [T.parameter(a) for a in arrays]
    loss = build_loss(*params)
    T.backward(loss)
    for i, p in enumerate(params):
        def f(x, i=i):
            probe = [T.as_tensor(a) for a in arrays]
            probe[i] = T.as_tensor(x)
            return float(build_loss(*probe).data)

        numeric = central_diff_grad(f, arrays[i])
        assert p.grad is not None
        assert_grads_close(p.grad, numeric, rel=rel)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(T.as_tensor(np.eye(2)), T.as_tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_row_times_column(self):
        out = T.matmul(T.as_tensor([[1.0, 2.0]]), T.as_tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(T.as_tensor(np.zeros((2, 3))), T.as_tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        _gradcheck(lambda x, y: T.tsum(T.matmul(x, y)), a, b, rel=1e-5)

    def test_batched_gradient(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 6))
        probe = rng.normal(size=(2, 3, 6))
        _gradcheck(lambda x, y: T.tsum(T.matmul(x, y) * T.as_tensor(probe)), a, w)


class TestConv1d:
    def test_summing_kernel(self):
        x = T.as_tensor([[1.0, 2.0, 3.0, 4.0]])
        k = T.as_tensor([[[1.0, 1.0]]])
        out = T.conv1d(x, k, stride=2)
        np.testing.assert_array_equal(out.data, [[3.0, 7.0]])

    def test_token_count_for_ten_seconds(self):
        rng = np.random.default_rng(2)
        x = T.as_tensor(rng.normal(size=(12, 5000)))
        k = T.as_tensor(rng.normal(size=(8, 12, 25)))
        assert T.conv1d(x, k, stride=25).shape == (8, 200)

    def test_rejects_bad_geometry(self):
        x = T.as_tensor(np.zeros((12, 5001)))
        k = T.as_tensor(np.zeros((8, 12, 25)))
        with pytest.raises(T.TokenizationError):
            T.conv1d(x, k, stride=25)
        with pytest.raises(T.TokenizationError):
            T.conv1d(T.as_tensor(np.zeros((12, 5000))), k, stride=5)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 20))
        k = rng.normal(size=(4, 3, 5))
        weights = rng.normal(size=(4, 4))
        _gradcheck(
            lambda xx, kk: T.tsum(T.conv1d(xx, kk, stride=5) * T.as_tensor(weights)),
            x,
            k,
            rel=1e-5,
        )

    def test_batched_matches_stacked(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 10))
        k = T.as_tensor(rng.normal(size=(4, 3, 5)))
        batched = T.conv1d(T.as_tensor(x), k, stride=5).data
        for b in range(2):
            single = T.conv1d(T.as_tensor(x[b]), k, stride=5).data
            np.testing.assert_allclose(batched[b], single, rtol=1e-12)


class TestLayerNorm:
    def test_constant_row_is_zeroed(self):
        out = T.layer_norm(T.as_tensor([5.0, 5.0, 5.0, 5.0]), T.as_tensor(np.ones(4)))
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-9)

    def test_unit_variance_preserved(self):
        out = T.layer_norm(T.as_tensor([1.0, -1.0]), T.as_tensor(np.ones(2)))
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-3)

    def test_output_statistics(self):
        rng = np.random.default_rng(5)
        # variance well above epsilon=1e-6 so the bias it adds stays < 1e-6
        x = rng.normal(scale=4.0, size=(3, 8))
        out = T.layer_norm(T.as_tensor(x), T.as_tensor(np.ones(8))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-12
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 7))
        s = rng.normal(size=7)
        w = rng.normal(size=(2, 7))
        _gradcheck(lambda xx, ss: T.tsum(T.layer_norm(xx, ss) * T.as_tensor(w)), x, s)


class TestSoftmax:
    def test_uniform_logits(self):
        out = T.softmax(T.as_tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), rtol=1e-15)

    def test_no_overflow(self):
        out = T.softmax(T.as_tensor([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        out = T.softmax(T.as_tensor(rng.normal(size=7) * 3))
        assert abs(out.data.sum() - 1.0) < 1e-12
        assert (out.data > 0).all()

    def test_gradients(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=7)
        w = rng.normal(size=7)
        _gradcheck(lambda xx: T.tsum(T.softmax(xx) * T.as_tensor(w)), x, rel=1e-5)


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.as_tensor(np.array(0.0))).data == 0.0

    def test_asymptote(self):
        assert abs(T.gelu(T.as_tensor(np.array(10.0))).data - 10.0) < 1e-6

    def test_gradients(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=11)
        _gradcheck(lambda xx: T.tsum(T.gelu(xx)), x, rel=1e-5)


class TestL1Loss:
    def test_zero_at_equality(self):
        p = T.as_tensor([1.0, 2.0, 3.0])
        assert T.l1_loss(p, p.data).data == 0.0

    def test_mean_abs(self):
        assert float(T.l1_loss(T.as_tensor([1.0, 2.0]), [0.0, 0.0]).data) == 1.5

    def test_gradient_is_sign_over_count(self):
        p = T.parameter([1.0, -2.0, 3.0, -4.0])
        tgt = np.zeros(4)
        T.backward(T.l1_loss(p, tgt))
        np.testing.assert_allclose(p.grad, np.array([1.0, -1.0, 1.0, -1.0]) / 4.0)

    def test_gradient_matches_fd_away_from_ties(self):
        rng = np.random.default_rng(10)
        p = rng.normal(size=6) + 2.0  # keep well away from the target
        tgt = rng.normal(size=6) - 2.0
        _gradcheck(lambda pp: T.l1_loss(pp, tgt), p)

    def test_target_carries_no_gradient(self):
        tgt = T.parameter([1.0, 1.0])
        p = T.parameter([3.0, 3.0])
        T.backward(T.l1_loss(p, tgt))
        assert p.grad is not None
        assert tgt.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.l1_loss(T.as_tensor([1.0, 2.0]), [1.0, 2.0, 3.0])


class TestBackward:
    def test_sum_gives_ones(self):
        w = T.parameter([1.0, 2.0, 3.0])
        T.backward(T.tsum(w))
        np.testing.assert_array_equal(w.grad, np.ones(3))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError):
            T.backward(T.parameter([1.0, 2.0]))

    def test_diamond_graph_counts_each_path(self):
        # y = x*x + x*x reuses x; each use contributes, each node runs once.
        x = T.parameter(np.array(3.0).reshape(1))
        sq = T.mul(x, x)
        T.backward(T.tsum(T.add(sq, sq)))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_accumulation_without_reset(self):
        w = T.parameter([1.0, 1.0])
        T.backward(T.tsum(w))
        T.backward(T.tsum(w))
        np.testing.assert_array_equal(w.grad, [2.0, 2.0])
        T.zero_grads([w])
        assert w.grad is None

    def test_two_layer_mlp_gradients(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(4, 6))
        w1 = rng.normal(size=(6, 8)) * 0.5
        w2 = rng.normal(size=(8, 3)) * 0.5
        tgt = rng.normal(size=(4, 3))

        def loss(w1t, w2t):
            h = T.gelu(T.matmul(T.as_tensor(x), w1t))
            return T.l1_loss(T.matmul(h, w2t), tgt)

        _gradcheck(loss, w1, w2, rel=1e-4)

    def test_detached_branch_gets_no_gradient(self):
        w = T.parameter([2.0, 3.0])
        out = T.mul(w, w).detach()
        loss = T.tsum(T.mul(out, T.as_tensor([1.0, 1.0])))
        T.backward(loss)
        assert w.grad is None


class TestPlumbingOps:
    def test_gather_tokens_forward(self):
        x = np.arange(24.0).reshape(2, 4, 3)
        idx = np.array([[0, 2], [3, 1]])
        out = T.gather_tokens(T.as_tensor(x), idx)
        np.testing.assert_array_equal(out.data[0], x[0, [0, 2]])
        np.testing.assert_array_equal(out.data[1], x[1, [3, 1]])

    def test_gather_tokens_gradient_with_duplicates(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 5, 3))
        idx = np.array([[1, 1, 4], [0, 2, 2]])
        w = rng.normal(size=(2, 3, 3))
        _gradcheck(lambda xx: T.tsum(T.gather_tokens(xx, idx) * T.as_tensor(w)), x)

    @pytest.mark.parametrize(
        "build",
        [
            lambda x: T.tsum(T.reshape(x, (6, 2)) * T.as_tensor(np.arange(12.0).reshape(6, 2))),
            lambda x: T.tsum(T.transpose(x, (1, 0, 2)) * T.as_tensor(np.ones((4, 3, 1)))),
            lambda x: T.tsum(T.narrow(x, 1, 1, 2) * T.as_tensor(np.full((3, 2, 1), 2.0))),
            lambda x: T.tsum(T.broadcast_to(T.narrow(x, 0, 0, 1), (3, 4, 1)) * T.as_tensor(np.ones((3, 4, 1)) * 1.5)),
        ],
    )
    def test_shape_op_gradients(self, build):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(3, 4, 1))
        _gradcheck(build, x)

    def test_concat_gradients(self):
        rng = np.random.default_rng(14)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 2))
        w = rng.normal(size=(2, 5))
        _gradcheck(lambda aa, bb: T.tsum(T.concat([aa, bb], axis=1) * T.as_tensor(w)), a, b)

    def test_broadcast_arithmetic_gradients(self):
        rng = np.random.default_rng(15)
        a = rng.normal(size=(3, 1, 4))
        b = rng.normal(size=(2, 4))
        probe = rng.normal(size=(3, 2, 4))
        _gradcheck(lambda aa, bb: T.tsum(T.mul(T.add(aa, bb), T.as_tensor(probe))), a, b)

    def test_bce_with_logits_gradients(self):
        rng = np.random.default_rng(16)
        logits = rng.normal(size=(4, 3)) * 2
        tgt = (rng.random((4, 3)) > 0.5).astype(float)
        _gradcheck(lambda ll: T.bce_with_logits(ll, tgt), logits)

    def test_sigmoid_stable_and_correct(self):
        x = T.as_tensor(np.array([-500.0, 0.0, 500.0]))
        out = T.sigmoid(x).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-12)

    def test_dropout_zero_rate_is_identity(self):
        x = T.parameter(np.ones((2, 3)))
        out = T.dropout(x, 0.0, np.random.default_rng(0), train=True)
        assert out is x

    def test_dropout_scales_kept_units(self):
        rng = np.random.default_rng(17)
        x = T.as_tensor(np.ones(10000))
        out = T.dropout(x, 0.25, rng, train=True).data
        assert set(np.round(np.unique(out), 6)) <= {0.0, round(1 / 0.75, 6)}
        assert abs(out.mean() - 1.0) < 0.02


class TestDeterminism:
    def test_same_inputs_bit_identical(self):
        rng1 = np.random.default_rng(99)
        rng2 = np.random.default_rng(99)
        x1, x2 = rng1.normal(size=(8, 8)), rng2.normal(size=(8, 8))
        f = lambda x: T.softmax(T.gelu(T.matmul(T.as_tensor(x), T.as_tensor(x)))).data
        assert np.array_equal(f(x1), f(x2))
