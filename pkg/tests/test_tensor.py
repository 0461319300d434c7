"""Tests for the autodiff tensor engine: forward values against hand oracles,
gradients against central finite differences."""

import math

import numpy as np
import pytest

from focalaudio import tensor as T
from focalaudio.tensor import (
    Tensor,
    backward,
    bilinear_resize,
    dwconv2d,
    gelu,
    global_avg_pool,
    gradient_check,
    layernorm,
    linear,
    no_grad,
    relative_error,
    softmax,
)

RNG = np.random.default_rng(1234)


def randt(*shape, dtype=np.float64, requires_grad=True):
    return Tensor(RNG.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


class TestLinear:
    def test_identity_transform(self):
        y = linear(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1.0, 2.0])

    def test_hand_multiply_accumulate(self):
        y = linear(Tensor([1.0, 1.0]), Tensor([[2.0, 3.0]]), Tensor([1.0]))
        np.testing.assert_allclose(y.data, [6.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            linear(Tensor([1.0, 2.0, 3.0]), Tensor(np.eye(2)))

    def test_weight_gradient_vs_finite_differences(self):
        x = randt(3, 4)
        W = randt(5, 4)
        b = randt(5)
        errs = gradient_check(lambda: linear(x, W, b).sum(), {"x": x, "W": W, "b": b})
        assert max(errs.values()) < 1e-4

    def test_batched_leading_dims(self):
        x = randt(2, 3, 4)
        W = randt(5, 4)
        y = linear(x, W)
        assert y.shape == (2, 3, 5)
        np.testing.assert_allclose(y.data[1, 2], x.data[1, 2] @ W.data.T)


class TestDwconv2d:
    def test_delta_kernel_is_identity(self):
        x = randt(3, 6, 7, requires_grad=False)
        k = np.zeros((3, 3, 3))
        k[:, 1, 1] = 1.0
        y = dwconv2d(x, Tensor(k))
        np.testing.assert_allclose(y.data, x.data)

    def test_constant_input_all_ones_kernel(self):
        c = 2.5
        x = Tensor(np.full((1, 5, 5), c))
        y = dwconv2d(x, Tensor(np.ones((1, 3, 3))))
        np.testing.assert_allclose(y.data[0, 1:-1, 1:-1], 9 * c)

    def test_depthwise_independence(self):
        x = RNG.standard_normal((4, 8, 8))
        k = Tensor(RNG.standard_normal((4, 3, 3)))
        y0 = dwconv2d(Tensor(x), k).data
        x2 = x.copy()
        x2[0] += RNG.standard_normal((8, 8))
        y1 = dwconv2d(Tensor(x2), k).data
        np.testing.assert_allclose(y0[1:], y1[1:])
        assert np.abs(y0[0] - y1[0]).max() > 0

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            dwconv2d(randt(2, 5, 5), randt(2, 2, 2))

    def test_translation_equivariance_interior(self):
        x = RNG.standard_normal((2, 10, 10))
        k = Tensor(RNG.standard_normal((2, 3, 3)))
        dy, dx = 2, 1
        xs = np.roll(x, (dy, dx), axis=(1, 2))
        y = dwconv2d(Tensor(x), k).data
        ys = dwconv2d(Tensor(xs), k).data
        m = 3  # margin covering padding plus shift
        np.testing.assert_allclose(
            ys[:, m:-m, m:-m], np.roll(y, (dy, dx), axis=(1, 2))[:, m:-m, m:-m], atol=1e-12
        )

    def test_gradients_vs_finite_differences(self):
        x = randt(2, 5, 6)
        k = randt(2, 3, 3)
        errs = gradient_check(lambda: (dwconv2d(x, k) * dwconv2d(x, k)).sum(), {"x": x, "k": k})
        assert max(errs.values()) < 1e-5


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_value_at_one(self):
        # x * Phi(x) at x=1: Phi(1) = 0.841344746...
        np.testing.assert_allclose(gelu(Tensor([1.0])).data[0], 0.8413447460685429, rtol=1e-7)

    def test_asymptote(self):
        np.testing.assert_allclose(gelu(Tensor([10.0])).data[0], 10.0, atol=1e-6)

    def test_gradient(self):
        x = randt(4, 3)
        errs = gradient_check(lambda: gelu(x).sum(), {"x": x})
        assert errs["x"] < 1e-5


class TestLayernorm:
    def test_constant_input_collapses_to_beta(self):
        x = Tensor(np.full((5,), 3.3))
        y = layernorm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), eps=1e-5)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-6)

    def test_mean_zero_var_one(self):
        x = randt(7, 4, 4, requires_grad=False)
        y = layernorm(x, T.ones_param(7, dtype=np.float64), T.zeros_param(7, dtype=np.float64), axis=0).data
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-4)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            layernorm(randt(3), randt(3), randt(3), eps=0.0)

    def test_gradient(self):
        x = randt(6, 3, 3)
        g = randt(6)
        b = randt(6)
        errs = gradient_check(
            lambda: (layernorm(x, g, b, axis=0) * layernorm(x, g, b, axis=0)).sum(),
            {"x": x, "g": g, "b": b},
        )
        assert max(errs.values()) < 1e-4


class TestGlobalAvgPool:
    def test_constant_channels(self):
        x = Tensor(np.stack([np.full((3, 3), 1.0), np.full((3, 3), -2.0)]))
        np.testing.assert_allclose(global_avg_pool(x).data, [1.0, -2.0])

    def test_hand_mean(self):
        x = Tensor(np.array([[[1.0, 3.0], [5.0, 7.0]]]))
        np.testing.assert_allclose(global_avg_pool(x).data, [4.0])

    def test_permutation_invariance(self):
        x = RNG.standard_normal((3, 4, 4))
        perm = RNG.permutation(16)
        xp = x.reshape(3, 16)[:, perm].reshape(3, 4, 4)
        np.testing.assert_allclose(
            global_avg_pool(Tensor(x)).data, global_avg_pool(Tensor(xp)).data, rtol=1e-12
        )


class TestBilinearResize:
    def test_constant_stays_constant(self):
        x = Tensor(np.full((2, 5, 7), 4.2))
        y = bilinear_resize(x, 9, 3)
        assert y.shape == (2, 9, 3)
        np.testing.assert_allclose(y.data, 4.2, rtol=1e-12)

    def test_same_size_is_identity(self):
        x = randt(1, 6, 8, requires_grad=False)
        np.testing.assert_allclose(bilinear_resize(x, 6, 8).data, x.data, atol=1e-6)

    def test_row_midpoint(self):
        x = Tensor(np.array([[[0.0, 1.0]]]))
        y = bilinear_resize(x, 1, 3)
        np.testing.assert_allclose(y.data[0, 0], [0.0, 0.5, 1.0])

    def test_resize_roundtrip_constant_exact(self):
        x = Tensor(np.full((1, 4, 4), 1.7))
        y = bilinear_resize(bilinear_resize(x, 11, 5), 4, 4)
        np.testing.assert_allclose(y.data, 1.7, rtol=0)

    def test_gradient(self):
        x = randt(2, 4, 5)
        errs = gradient_check(lambda: (bilinear_resize(x, 7, 3) * bilinear_resize(x, 7, 3)).sum(), {"x": x})
        assert errs["x"] < 1e-5


class TestSoftmax:
    def test_uniform(self):
        y = softmax(Tensor(np.zeros(5)))
        np.testing.assert_allclose(y.data, 0.2)

    def test_shift_invariance(self):
        x = RNG.standard_normal(6)
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 123.4)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_closed_form(self):
        y = softmax(Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(y.data, [0.25, 0.75], rtol=1e-7)

    def test_sums_to_one_entries_in_range(self):
        for _ in range(10):
            x = RNG.standard_normal((3, 7)) * 10
            y = softmax(Tensor(x)).data
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
            assert (y >= 0).all() and (y <= 1).all()

    def test_gradient(self):
        x = randt(2, 5)
        w = Tensor(RNG.standard_normal((2, 5)))
        errs = gradient_check(lambda: (softmax(x) * w).sum(), {"x": x})
        assert errs["x"] < 1e-5


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = randt(3, 4)
        backward(x.sum())
        np.testing.assert_allclose(x.grad, np.ones((3, 4)))

    def test_product_rule(self):
        x = randt(5)
        y = Tensor(RNG.standard_normal(5))
        backward((x * y).sum())
        np.testing.assert_allclose(x.grad, y.data)

    def test_backward_on_non_scalar_raises(self):
        with pytest.raises(ValueError):
            backward(randt(3))

    def test_tape_reusable_per_step(self):
        x = randt(4)
        for _ in range(3):
            x.grad = None
            backward((x * x).sum())
            np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_repeated_parent_accumulates(self):
        x = randt(3)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_composite_graph_finite_differences_64bit(self):
        x = randt(2, 6, 6)
        W = randt(2, 2)
        k = randt(2, 3, 3)

        def f():
            h = linear(T.moveaxis(x, 0, 2), W)     # channel mix
            h = gelu(T.moveaxis(h, 2, 0))
            h = dwconv2d(h, k)
            return global_avg_pool(h).sum()

        errs = gradient_check(f, {"x": x, "W": W, "k": k})
        assert max(errs.values()) < 1e-5

    def test_composite_graph_finite_differences_32bit(self):
        x = randt(2, 6, 6, dtype=np.float32)
        W = randt(2, 2, dtype=np.float32)
        k = randt(2, 3, 3, dtype=np.float32)

        def f():
            h = linear(T.moveaxis(x, 0, 2), W)
            h = gelu(T.moveaxis(h, 2, 0))
            h = dwconv2d(h, k)
            return global_avg_pool(h).sum()

        # larger step: float32 roundoff dominates below ~1e-3
        errs = gradient_check(f, {"x": x, "W": W, "k": k}, step=1e-2)
        assert max(errs.values()) < 1e-3


class TestOperatorFiniteDifferenceSweep:
    """Every differentiable operator on randomly shaped small tensors (dims <= 8)."""

    def test_sweep(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            c = int(rng.integers(1, 5))
            h = int(rng.integers(2, 8))
            w = int(rng.integers(2, 8))
            x = Tensor(rng.standard_normal((c, h, w)), requires_grad=True)
            k = Tensor(rng.standard_normal((c, 3, 3)), requires_grad=True)
            Wm = Tensor(rng.standard_normal((3, w)), requires_grad=True)
            gam = Tensor(rng.standard_normal(c), requires_grad=True)
            bet = Tensor(rng.standard_normal(c), requires_grad=True)
            cases = {
                "linear": (lambda: (linear(x, Wm) * linear(x, Wm)).sum(), {"x": x, "W": Wm}),
                "dwconv2d": (lambda: gelu(dwconv2d(x, k)).sum(), {"x": x, "k": k}),
                "gelu": (lambda: (gelu(x) * gelu(x)).sum(), {"x": x}),
                "layernorm": (lambda: (layernorm(x, gam, bet, axis=0) * x).sum(), {"x": x, "gam": gam, "bet": bet}),
                "pool": (lambda: (global_avg_pool(x) * global_avg_pool(x)).sum(), {"x": x}),
                "resize": (lambda: (bilinear_resize(x, 5, 6) * bilinear_resize(x, 5, 6)).sum(), {"x": x}),
                "softmax": (lambda: (softmax(x) * x).sum(), {"x": x}),
            }
            for name, (f, params) in cases.items():
                errs = gradient_check(f, params, step=1e-5)
                assert max(errs.values()) < 1e-5, f"{name} trial {trial}: {errs}"


class TestPlumbingOps:
    def test_getitem_grad(self):
        x = randt(4, 5)
        errs = gradient_check(lambda: (x[1:3, ::2] * x[1:3, ::2]).sum(), {"x": x})
        assert errs["x"] < 1e-5

    def test_transpose_reshape_grad(self):
        x = randt(2, 3, 4)
        errs = gradient_check(lambda: (x.transpose((2, 0, 1)).reshape(4, 6) * 2.0).sum(), {"x": x})
        assert errs["x"] < 1e-5

    def test_broadcast_to_grad(self):
        x = randt(3, 1, 1)
        errs = gradient_check(lambda: (T.broadcast_to(x, (3, 4, 5)) * 1.5).sum(), {"x": x})
        assert errs["x"] < 1e-5

    def test_pad_grad(self):
        x = randt(2, 3, 3)
        y = T.pad_bottom_right(x, 2, 1)
        assert y.shape == (2, 5, 4)
        errs = gradient_check(lambda: (T.pad_bottom_right(x, 2, 1) * T.pad_bottom_right(x, 2, 1)).sum(), {"x": x})
        assert errs["x"] < 1e-5

    def test_concat_grad(self):
        a, b = randt(2, 3), randt(4, 3)
        errs = gradient_check(lambda: (T.concat([a, b], axis=0) * T.concat([a, b], axis=0)).sum(), {"a": a, "b": b})
        assert max(errs.values()) < 1e-5

    def test_no_grad_blocks_tape(self):
        x = randt(3)
        with no_grad():
            y = (x * x).sum()
        assert y._backward is None and not y.requires_grad

    def test_finite_guard(self):
        with pytest.raises(T.NumericalError):
            T.check_finite(np.array([1.0, np.nan]), "unit test")


class TestModule:
    def test_named_parameters_traversal(self):
        class Leaf(T.Module):
            def __init__(self):
                self.w = T.zeros_param((2, 2))
                self.frozen = Tensor(np.zeros(2))

        class Root(T.Module):
            def __init__(self):
                self.a = Leaf()
                self.items = [Leaf(), Leaf()]
                self.bias = T.zeros_param(3)

        names = [n for n, _ in Root().named_parameters()]
        assert names == ["a.w", "items.0.w", "items.1.w", "bias"]

    def test_zero_grad(self):
        class M(T.Module):
            def __init__(self):
                self.w = T.zeros_param(3)

        m = M()
        backward((m.w * m.w).sum())
        assert m.w.grad is not None
        m.zero_grad()
        assert m.w.grad is None

    def test_trunc_normal_bounds(self):
        p = T.trunc_normal((1000,), np.random.default_rng(0), std=0.02)
        assert np.abs(p.data).max() <= 0.04 + 1e-9
        assert p.data.std() > 0.005


def test_relative_error_zero_for_zero_grads():
    assert relative_error(np.zeros(4), np.zeros(4)) == 0.0
