"""Autodiff core: forward values against numpy, gradients against central
differences, broadcasting, tape bookkeeping, and the module registry."""

import numpy as np
import pytest

from conftest import central_diff, rel_err
from emnet.errors import ShapeError
from emnet.tensor import (Module, Tensor, add, backward, clear_tape, concat,
                          conv3d, deconv3d, div, gelu, getitem, instance_norm,
                          layer_norm, leaky_relu, linear, matmul, mul, neg,
                          no_grad, param, powc, reshape, sigmoid, silu,
                          softplus, sub, tape_size, texp, tlog, tmean,
                          transpose, tsum, ttanh)


def grad_of(build, x0, eps=1e-6, tol=1e-7):
    """Compare analytic grad wrt a single leaf against central differences."""
    leaf = param(np.array(x0, dtype=np.float64))
    out = build(leaf)
    backward(out)

    def f(x):
        with no_grad():
            return float(build(Tensor(x)).data)

    num = central_diff(f, np.array(x0, dtype=np.float64), eps)
    assert rel_err(leaf.grad, num) < tol, (leaf.grad, num)


class TestElementwise:
    def test_forward_values(self, rng):
        x = rng.standard_normal((3, 4))
        t = Tensor(x)
        assert np.allclose(texp(t).data, np.exp(x))
        assert np.allclose(tlog(Tensor(np.abs(x) + 1)).data, np.log(np.abs(x) + 1))
        assert np.allclose(sigmoid(t).data, 1 / (1 + np.exp(-x)))
        assert np.allclose(silu(t).data, x / (1 + np.exp(-x)))
        assert np.allclose(softplus(t).data, np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0))
        assert np.allclose(ttanh(t).data, np.tanh(x))
        assert np.allclose(leaky_relu(t, 0.01).data, np.where(x > 0, x, 0.01 * x))
        assert np.allclose(powc(t, 2.0).data, x**2)

    @pytest.mark.parametrize("op", [
        lambda t: tsum(texp(t)),
        lambda t: tsum(tlog(add(mul(t, t), Tensor(np.float64(1.0))))),
        lambda t: tsum(sigmoid(t)),
        lambda t: tsum(silu(t)),
        lambda t: tsum(softplus(t)),
        lambda t: tsum(ttanh(t)),
        lambda t: tsum(gelu(t)),
        lambda t: tsum(leaky_relu(t)),
        lambda t: tsum(powc(t, 3.0)),
        lambda t: tsum(neg(t)),
        lambda t: tmean(mul(t, t)),
    ])
    def test_gradients(self, op, rng):
        grad_of(op, rng.standard_normal((2, 3)) * 0.7)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        t = Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
        s = sigmoid(t).data
        assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[-1] == 1.0
        sp = softplus(t).data
        assert np.all(np.isfinite(sp)) and sp[-1] == 1e4


class TestArithmeticAndBroadcast:
    def test_binary_grads(self, rng):
        a0 = rng.standard_normal((2, 3))
        b0 = rng.standard_normal((2, 3)) + 2.0
        for op in (add, sub, mul, div):
            a = param(a0.copy())
            b = param(b0.copy())
            backward(tsum(op(a, b)))
            fa = central_diff(lambda x: float(op(Tensor(x), Tensor(b0)).data.sum()), a0)
            fb = central_diff(lambda x: float(op(Tensor(a0), Tensor(x)).data.sum()), b0)
            assert rel_err(a.grad, fa) < 1e-8
            assert rel_err(b.grad, fb) < 1e-8

    def test_broadcast_unbroadcast(self, rng):
        a = param(rng.standard_normal((4, 1, 3)))
        b = param(rng.standard_normal((5, 3)))
        out = mul(a, b)
        assert out.data.shape == (4, 5, 3)
        backward(tsum(out))
        assert a.grad.shape == a.data.shape
        assert b.grad.shape == b.data.shape
        # each broadcast element contributes once per replication
        assert np.allclose(a.grad, np.broadcast_to(b.data, (4, 5, 3)).sum(1, keepdims=True))

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_operator_sugar_matches_functions(self, rng):
        x = rng.standard_normal((2, 2))
        t = Tensor(x)
        assert np.allclose((t + 1.0).data, x + 1)
        assert np.allclose((1.0 - t).data, 1 - x)
        assert np.allclose((t * 2.0).data, 2 * x)
        assert np.allclose((t / 2.0).data, x / 2)
        assert np.allclose((2.0 / (t + 5.0)).data, 2 / (x + 5))
        assert np.allclose((-t).data, -x)


class TestReductionsAndShape:
    def test_tsum_axis_tuple_grad(self, rng):
        x0 = rng.standard_normal((2, 3, 4))
        x = param(x0.copy())
        out = tsum(mul(x, x), axis=(1, 2))
        assert out.data.shape == (2,)
        backward(tsum(out))
        assert np.allclose(x.grad, 2 * x0)

    def test_tmean_keepdims(self, rng):
        x0 = rng.standard_normal((2, 3, 4))
        x = param(x0.copy())
        out = tmean(x, axis=1, keepdims=True)
        assert out.data.shape == (2, 1, 4)
        backward(tsum(out))
        assert np.allclose(x.grad, np.full_like(x0, 1 / 3))

    def test_reshape_transpose_getitem_concat(self, rng):
        x0 = rng.standard_normal((2, 3, 4))
        x = param(x0.copy())
        y = transpose(reshape(x, (6, 4)), (1, 0))
        z = concat([getitem(y, (slice(None), slice(0, 3))),
                    getitem(y, (slice(None), slice(3, 6)))], axis=1)
        assert np.allclose(z.data, x0.reshape(6, 4).T)
        backward(tsum(mul(z, z)))
        assert np.allclose(x.grad, 2 * x0)

    def test_matmul_linear(self, rng):
        a0 = rng.standard_normal((5, 3))
        w0 = rng.standard_normal((3, 2))
        b0 = rng.standard_normal(2)
        a, w, b = param(a0.copy()), param(w0.copy()), param(b0.copy())
        out = linear(a, w, b)
        assert np.allclose(out.data, a0 @ w0 + b0)
        backward(tsum(out))
        assert np.allclose(a.grad, np.ones((5, 2)) @ w0.T)
        assert np.allclose(w.grad, a0.T @ np.ones((5, 2)))
        assert np.allclose(b.grad, np.full(2, 5.0))


class TestSpatialOps:
    def test_conv3d_matches_loop(self, rng):
        x = rng.standard_normal((2, 5, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        want = np.zeros_like(out)
        for co in range(3):
            for ix in range(out.shape[1]):
                for iy in range(out.shape[2]):
                    for iz in range(out.shape[3]):
                        patch = xp[:, 2*ix:2*ix+3, 2*iy:2*iy+3, 2*iz:2*iz+3]
                        want[co, ix, iy, iz] = (patch * w[co]).sum() + b[co]
        assert rel_err(out, want) < 1e-12

    def test_deconv3d_matches_scatter_loop(self, rng):
        x = rng.standard_normal((2, 3, 3, 3))
        w = rng.standard_normal((2, 4, 2, 2, 2))  # [cin, cout, k,k,k]
        b = rng.standard_normal(4)
        out = deconv3d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
        want = np.zeros((4, 6, 6, 6)) + b[:, None, None, None]
        for ci in range(2):
            for ix in range(3):
                for iy in range(3):
                    for iz in range(3):
                        want[:, 2*ix:2*ix+2, 2*iy:2*iy+2, 2*iz:2*iz+2] += (
                            x[ci, ix, iy, iz] * w[ci])
        assert rel_err(out, want) < 1e-12

    def test_norm_layers_normalize(self, rng):
        x = rng.standard_normal((3, 4, 4, 4)) * 5 + 2
        g = Tensor(np.ones(3))
        b = Tensor(np.zeros(3))
        out = instance_norm(Tensor(x), g, b).data
        assert np.allclose(out.mean(axis=(1, 2, 3)), 0, atol=1e-10)
        assert np.allclose(out.std(axis=(1, 2, 3)), 1, atol=1e-3)
        seq = rng.standard_normal((6, 5)) * 3 + 1
        out2 = layer_norm(Tensor(seq), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
        assert np.allclose(out2.mean(axis=1), 0, atol=1e-10)


class TestTapeAndModules:
    def test_no_grad_records_nothing(self):
        clear_tape()
        with no_grad():
            t = mul(Tensor(np.ones(3)), Tensor(np.ones(3)))
        assert tape_size() == 0
        assert t.data.shape == (3,)

    def test_backward_clears_tape_and_accumulates(self, rng):
        x = param(rng.standard_normal(4))
        y = add(mul(x, x), x)  # x appears twice: both paths accumulate
        backward(tsum(y))
        assert np.allclose(x.grad, 2 * x.data + 1)
        assert tape_size() == 0

    def test_module_registry_and_naming(self):
        class Leafy(Module):
            def __init__(self):
                self.w = param(np.zeros((2, 2)), name="w")

        class Nest(Module):
            def __init__(self):
                self.a = Leafy()
                self.bs = [Leafy(), Leafy()]
                self.shared = self.a  # alias must not double count

        net = Nest()
        names = [n for n, _ in net.named_params()]
        assert names == ["a.w", "bs.0.w", "bs.1.w"]
        assert net.num_params() == 12

    def test_grad_for_0d_params(self):
        w = param(np.array(2.0))
        backward(mul(w, w))
        assert float(w.grad) == pytest.approx(4.0)
