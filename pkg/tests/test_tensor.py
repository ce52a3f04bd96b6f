"""Tensor engine tests: forward oracles and finite-difference gradients."""

import numpy as np
import pytest

from dimnas import tensor as T
from conftest import fdgrad


def conv_nested_loop(x, w, b, stride=1):
    """Independent cross-correlation oracle (rank 1, "same" zero padding)."""
    batch, c_in, length = x.shape
    c_out, _, k = w.shape
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + k - length, 0)
    lo = total // 2
    out = np.zeros((batch, c_out, out_len))
    for bi in range(batch):
        for co in range(c_out):
            for o in range(out_len):
                acc = 0.0
                for ci in range(c_in):
                    for j in range(k):
                        src = o * stride + j - lo
                        if 0 <= src < length:
                            acc += x[bi, ci, src] * w[co, ci, j]
                out[bi, co, o] = acc + b[co]
    return out


class TestConv:
    def test_identity_kernel(self):
        x = T.Tensor(np.arange(8, dtype=np.float32).reshape(1, 1, 8))
        p = T.ConvParams(kernel=T.param(np.ones((1, 1, 1))), bias=T.param(np.zeros(1)))
        assert np.array_equal(T.conv(x, p).data, x.data)

    def test_hand_computed_cross_correlation(self):
        x = T.Tensor(np.array([[[0, 0, 1, 0, 0]]], dtype=np.float32))
        w = T.param(np.array([[[1, 2, 3]]], dtype=np.float32))
        p = T.ConvParams(kernel=w, bias=T.param(np.zeros(1)))
        out = T.conv(x, p)
        assert np.allclose(out.data.ravel(), [0, 3, 2, 1, 0])
        oracle = conv_nested_loop(x.data, w.data, np.zeros(1))
        assert np.allclose(out.data, oracle)

    def test_shape_arithmetic_stride2(self, rng):
        x = T.Tensor(rng.standard_normal((2, 3, 16, 16)))
        p = T.ConvParams(kernel=T.param(rng.standard_normal((4, 3, 3, 3))),
                         bias=T.param(np.zeros(4)), stride=2)
        assert T.conv(x, p).shape == (2, 4, 8, 8)

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_nested_loop_oracle(self, rng, stride, k):
        x = rng.standard_normal((2, 3, 11)).astype(np.float32)
        w = rng.standard_normal((4, 3, k)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        p = T.ConvParams(kernel=T.param(w), bias=T.param(b), stride=stride)
        out = T.conv(T.Tensor(x), p)
        assert np.allclose(out.data, conv_nested_loop(x, w, b, stride), atol=1e-5)

    def test_channel_mismatch_rejected(self, rng):
        x = T.Tensor(rng.standard_normal((1, 2, 8)))
        p = T.ConvParams(kernel=T.param(rng.standard_normal((4, 3, 3))),
                         bias=T.param(np.zeros(4)))
        with pytest.raises(T.ShapeError, match="channels"):
            T.conv(x, p)

    def test_rank_mismatch_rejected(self, rng):
        x = T.Tensor(rng.standard_normal((1, 3, 8, 8)))
        p = T.ConvParams(kernel=T.param(rng.standard_normal((4, 3, 3))),
                         bias=T.param(np.zeros(4)))
        with pytest.raises(T.ShapeError, match="rank"):
            T.conv(x, p)

    def test_kernel_size_validation(self, rng):
        with pytest.raises(T.ShapeError, match="kernel size"):
            T.ConvParams(kernel=T.param(rng.standard_normal((2, 2, 7))),
                         bias=T.param(np.zeros(2)))
        with pytest.raises(T.ShapeError, match="square"):
            T.ConvParams(kernel=T.param(rng.standard_normal((2, 2, 3, 5))),
                         bias=T.param(np.zeros(2)))

    def test_rank1_rank2_degenerate_equivalence(self, rng):
        # a single-row image with the 1D kernel placed in the center row of a
        # zero 2D kernel must reproduce the 1D result
        x1 = rng.standard_normal((2, 3, 9)).astype(np.float32)
        w1 = rng.standard_normal((4, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out1 = T.conv(T.Tensor(x1), T.ConvParams(kernel=T.param(w1), bias=T.param(b)))
        x2 = x1[:, :, None, :]
        w2 = np.zeros((4, 3, 3, 3), dtype=np.float32)
        w2[:, :, 1, :] = w1
        out2 = T.conv(T.Tensor(x2), T.ConvParams(kernel=T.param(w2), bias=T.param(b)))
        assert np.allclose(out1.data, out2.data[:, :, 0, :], atol=1e-5)

    def test_forward_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 12)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3)).astype(np.float32)
        p = T.ConvParams(kernel=T.param(w), bias=T.param(np.zeros(4)))
        a = T.conv(T.Tensor(x), p).data
        b = T.conv(T.Tensor(x), p).data
        assert np.array_equal(a, b)


class TestPool:
    def test_max_windowed_oracle(self):
        x = T.Tensor(np.array([[[1, 5, 2, 0]]], dtype=np.float32))
        assert np.allclose(T.pool(x, "max").data.ravel(), [5, 5, 5, 2])

    def test_avg_constant_invariance(self):
        x = T.Tensor(np.full((1, 2, 6), 3.5, dtype=np.float32))
        assert np.allclose(T.pool(x, "avg").data, 3.5)

    @pytest.mark.parametrize("kind", ["avg", "max"])
    @pytest.mark.parametrize("shape", [(2, 3, 9), (1, 2, 5, 7)])
    def test_shape_preserved(self, rng, kind, shape):
        x = T.Tensor(rng.standard_normal(shape))
        assert T.pool(x, kind).shape == shape

    def test_max_matches_brute_force(self, rng):
        x = rng.standard_normal((2, 2, 8)).astype(np.float32)
        out = T.pool(T.Tensor(x), "max").data
        for b in range(2):
            for c in range(2):
                for i in range(8):
                    window = x[b, c, max(0, i - 1): i + 2]
                    assert out[b, c, i] == window.max()

    def test_avg_counts_valid_elements(self, rng):
        x = rng.standard_normal((1, 1, 5)).astype(np.float32)
        out = T.pool(T.Tensor(x), "avg").data.ravel()
        v = x.ravel()
        assert np.isclose(out[0], (v[0] + v[1]) / 2)
        assert np.isclose(out[2], (v[1] + v[2] + v[3]) / 3)
        assert np.isclose(out[4], (v[3] + v[4]) / 2)

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError, match="kind"):
            T.pool(T.Tensor(rng.standard_normal((1, 1, 4))), "median")

    def test_max_grad_routes_to_strict_max(self):
        x = T.param(np.array([[[1.0, 5.0, 2.0, 0.0]]]))
        out = T.pool(x, "max")
        out.sum().backward()
        # element 1 (value 5) is the max of windows 0..2; element 2 (value 2)
        # wins the last window
        assert np.allclose(x.grad.ravel(), [0, 3, 1, 0])

    def test_max_grad_tie_goes_to_first(self):
        x = T.param(np.array([[[2.0, 2.0]]]))
        out = T.pool(x, "max")
        out.sum().backward()
        # both windows see the tie; the lower index wins both times
        assert np.allclose(x.grad.ravel(), [2, 0])


class TestElementwise:
    def test_add_zero_and_commutativity(self, rng):
        a = T.Tensor(rng.standard_normal((2, 3)))
        z = T.Tensor(np.zeros((2, 3)))
        assert np.array_equal(T.add(a, z).data, a.data)
        b = T.Tensor(rng.standard_normal((2, 3)))
        assert np.allclose(T.add(a, b).data, T.add(b, a).data)

    def test_add_shape_mismatch(self, rng):
        with pytest.raises(T.ShapeError, match="identical shapes"):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 2))))

    def test_add_gradient_is_identity(self, rng):
        a = T.param(rng.standard_normal((2, 3)))
        b = T.param(rng.standard_normal((2, 3)))
        T.add(a, b).sum().backward()
        assert np.allclose(a.grad, 1.0) and np.allclose(b.grad, 1.0)

    def test_relu_values(self):
        x = T.Tensor(np.array([-1.0, 2.0]))
        assert np.allclose(T.relu(x).data, [0.0, 2.0])

    def test_softmax_channels_normalizes(self, rng):
        x = T.Tensor(rng.standard_normal((2, 4, 5)))
        s = T.softmax_channels(x).data.sum(axis=1)
        assert np.allclose(s, 1.0, atol=1e-6)

    def test_upsample_repeats(self):
        x = T.Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
        up = T.upsample(x)
        assert up.shape == (1, 1, 8)
        assert np.allclose(up.data.ravel(), [1, 1, 2, 2, 3, 3, 4, 4])

    def test_upsample_2d_doubles_both(self, rng):
        x = T.Tensor(rng.standard_normal((1, 2, 3, 4)))
        assert T.upsample(x).shape == (1, 2, 6, 8)


class TestBackward:
    def test_sum_grad_all_ones(self, rng):
        x = T.param(rng.standard_normal((3, 4)))
        x.sum().backward()
        assert np.allclose(x.grad, 1.0)

    def test_backward_requires_scalar(self, rng):
        x = T.param(rng.standard_normal((3,)))
        with pytest.raises(T.ShapeError):
            (x * 2.0).backward()

    def test_backward_twice_rejected(self, rng):
        x = T.param(rng.standard_normal((3,)))
        loss = x.sum()
        loss.backward()
        with pytest.raises(RuntimeError, match="already"):
            loss.backward()

    def test_unreached_param_keeps_zero_grad(self, rng):
        used = T.param(rng.standard_normal((3,)))
        unused = T.param(rng.standard_normal((3,)))
        used.sum().backward()
        assert np.array_equal(unused.grad, np.zeros(3))

    def test_grad_accumulates_across_graphs(self, rng):
        x = T.param(np.ones(3))
        x.sum().backward()
        x.sum().backward()
        assert np.allclose(x.grad, 2.0)


class TestNorm:
    def _params(self, c):
        return T.NormParams(gamma=T.param(np.ones(c)), beta=T.param(np.zeros(c)),
                            running_mean=T.buffer(np.zeros(c)),
                            running_var=T.buffer(np.ones(c)))

    def test_train_normalizes_batch(self, rng):
        x = T.Tensor(rng.standard_normal((8, 3, 16)) * 3 + 2)
        p = self._params(3)
        out = T.norm(x, p, training=True)
        assert abs(out.data.mean()) < 1e-5
        assert abs(out.data.var() - 1.0) < 1e-2

    def test_running_stats_update_and_freeze(self, rng):
        x = T.Tensor(rng.standard_normal((8, 3, 16)) * 2 + 1)
        p = self._params(3)
        T.norm(x, p, training=True)
        rm = p.running_mean.data.copy()
        assert not np.allclose(rm, 0)
        T.norm(x, p, training=False)
        assert np.array_equal(p.running_mean.data, rm)
        T.norm(x, p, training=True, update_running=False)
        assert np.array_equal(p.running_mean.data, rm)

    def test_momentum_blend(self, rng):
        x = T.Tensor(rng.standard_normal((4, 2, 8)))
        p = self._params(2)
        mu = x.data.mean(axis=(0, 2))
        T.norm(x, p, training=True)
        assert np.allclose(p.running_mean.data, 0.9 * 0.0 + 0.1 * mu, atol=1e-6)

    def test_invalid_params(self):
        with pytest.raises(ValueError, match="epsilon"):
            T.NormParams(gamma=T.param(np.ones(2)), beta=T.param(np.zeros(2)),
                         running_mean=T.buffer(np.zeros(2)),
                         running_var=T.buffer(np.ones(2)), epsilon=0.0)
        with pytest.raises(ValueError, match="running_var"):
            T.NormParams(gamma=T.param(np.ones(2)), beta=T.param(np.zeros(2)),
                         running_mean=T.buffer(np.zeros(2)),
                         running_var=T.buffer(-np.ones(2)))


class TestFiniteDifferences:
    """Analytic vs central-difference gradients in the float64 check mode."""

    def test_conv_grads(self, rng):
        with T.precision(np.float64):
            cases = [(1, (2, 2, 7), (3, 2, 3)), (2, (1, 3, 8), (2, 3, 3)),
                     (1, (1, 2, 5, 6), (2, 2, 3, 3)), (2, (1, 2, 6, 6), (2, 2, 5, 5))]
            for stride, xs, ws in cases:
                xa = rng.standard_normal(xs)
                wa = rng.standard_normal(ws)
                ba = rng.standard_normal(ws[0])

                def build():
                    x, w, b = T.param(xa), T.param(wa), T.param(ba)
                    y = T.conv(x, T.ConvParams(kernel=w, bias=b, stride=stride))
                    return (y * y).sum(), (x, w, b)

                loss, params = build()
                loss.backward()
                numeric = fdgrad(lambda: build()[0].item(), [xa, wa, ba])
                for p, n in zip(params, numeric):
                    assert np.allclose(p.grad, n, rtol=1e-3, atol=1e-7)

    @pytest.mark.parametrize("kind", ["avg", "max"])
    def test_pool_grads(self, rng, kind):
        with T.precision(np.float64):
            for shape in [(2, 2, 7), (1, 2, 4, 5)]:
                xa = rng.standard_normal(shape)

                def build():
                    x = T.param(xa)
                    y = T.pool(x, kind)
                    return (y * y).sum(), x

                loss, x = build()
                loss.backward()
                numeric = fdgrad(lambda: build()[0].item(), [xa])[0]
                assert np.allclose(x.grad, numeric, rtol=1e-3, atol=1e-7)

    @pytest.mark.parametrize("training", [True, False])
    def test_norm_grads(self, rng, training):
        with T.precision(np.float64):
            xa = rng.standard_normal((3, 2, 5))
            ga = rng.standard_normal(2) + 1.0
            ba = rng.standard_normal(2)

            def build():
                x, g, b = T.param(xa), T.param(ga), T.param(ba)
                p = T.NormParams(gamma=g, beta=b, running_mean=T.buffer(np.zeros(2)),
                                 running_var=T.buffer(np.ones(2) * 0.7))
                y = T.norm(x, p, training=training)
                return (y * y).sum(), (x, g, b)

            loss, params = build()
            loss.backward()
            numeric = fdgrad(lambda: build()[0].item(), [xa, ga, ba])
            for p, n in zip(params, numeric):
                assert np.allclose(p.grad, n, rtol=1e-3, atol=1e-7)

    def test_misc_op_grads(self, rng):
        with T.precision(np.float64):
            xa = rng.standard_normal((2, 6))
            ca = rng.standard_normal((2, 6))

            builders = {
                "relu": lambda x: (T.relu(x) * T.Tensor(ca)).sum(),
                "sigmoid": lambda x: (T.sigmoid(x) * T.Tensor(ca)).sum(),
                "tanh": lambda x: (T.tanh(x) * T.Tensor(ca)).sum(),
                "exp": lambda x: (T.exp(x) * T.Tensor(ca)).sum(),
                "softmax": lambda x: (T.softmax(x) * T.Tensor(ca)).sum(),
                "log_softmax": lambda x: (T.log_softmax(x) * T.Tensor(ca)).sum(),
                "mean": lambda x: (x * x).mean(),
                "div": lambda x: (x / 3.0).sum(),
            }
            for name, fn in builders.items():
                def build():
                    x = T.param(xa)
                    return fn(x), x

                loss, x = build()
                loss.backward()
                numeric = fdgrad(lambda: build()[0].item(), [xa])[0]
                assert np.allclose(x.grad, numeric, rtol=1e-3, atol=1e-7), name

    def test_upsample_and_matmul_grads(self, rng):
        with T.precision(np.float64):
            xa = rng.standard_normal((1, 2, 3, 4))
            ca = rng.standard_normal((1, 2, 6, 8))

            def build_up():
                x = T.param(xa)
                return (T.upsample(x) * T.Tensor(ca)).sum(), x

            loss, x = build_up()
            loss.backward()
            assert np.allclose(x.grad, fdgrad(lambda: build_up()[0].item(), [xa])[0],
                               rtol=1e-3, atol=1e-7)

            aa = rng.standard_normal((3, 4))
            bb = rng.standard_normal((4, 2))

            def build_mm():
                a, b = T.param(aa), T.param(bb)
                y = T.matmul(a, b)
                return (y * y).sum(), (a, b)

            loss, params = build_mm()
            loss.backward()
            numeric = fdgrad(lambda: build_mm()[0].item(), [aa, bb])
            for p, n in zip(params, numeric):
                assert np.allclose(p.grad, n, rtol=1e-3, atol=1e-7)


class TestPrecisionMode:
    def test_default_is_float32(self):
        assert T.Tensor(np.zeros(3, dtype=np.float64)).data.dtype == np.float32

    def test_context_switches_and_restores(self):
        with T.precision(np.float64):
            assert T.Tensor([1.0]).data.dtype == np.float64
        assert T.Tensor([1.0]).data.dtype == np.float32

    def test_rejects_other_dtypes(self):
        with pytest.raises(ValueError):
            with T.precision(np.int32):
                pass
