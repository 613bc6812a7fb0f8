"""Kernel-level tests: forward oracles and gradient checks.

Reference implementations here are deliberately naive (nested loops,
explicit operator matrices, exhaustive window scans) and independent of
the vectorized kernels they check.
"""

import numpy as np
import numpy.testing as npt
import pytest

from stsnet import ops
from stsnet.errors import GeometryError, ShapeError
from stsnet.gradcheck import grad_check
from stsnet.ops import ConvParams, LRNParams


# ---------------------------------------------------------------------------
# reference implementations (oracles)
# ---------------------------------------------------------------------------

def conv2d_loops(x, w, b, padding, stride):
    """Nested-loop cross-correlation, double precision."""
    n, c_in, h, wd = x.shape
    d_out, _, f, _ = w.shape
    h_out = (h + 2 * padding - f) // stride + 1
    w_out = (wd + 2 * padding - f) // stride + 1
    xp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((n, d_out, h_out, w_out))
    for ni in range(n):
        for do in range(d_out):
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for ci in range(c_in):
                        for a in range(f):
                            for bb in range(f):
                                acc += xp[ni, ci, i * stride + a, j * stride + bb] * w[do, ci, a, bb]
                    out[ni, do, i, j] = acc + b[do]
    return out


def conv_matrix(params, h, w):
    """Dense matrix M with conv2d(x) = M @ x.ravel() (single sample, no bias)."""
    d_in = params.d_in
    n_in = d_in * h * w
    basis = np.zeros((1, d_in, h, w))
    cols = []
    for i in range(n_in):
        basis.ravel()[i] = 1.0
        cols.append(ops.conv2d(basis, params).ravel())
        basis.ravel()[i] = 0.0
    return np.stack(cols, axis=1)


def maxpool_loops(x, k, stride):
    n, c, h, w = x.shape
    h_out = -((h - k) // -stride) + 1
    w_out = -((w - k) // -stride) + 1
    out = np.empty((n, c, h_out, w_out))
    for ni in range(n):
        for ci in range(c):
            for i in range(h_out):
                for j in range(w_out):
                    rows = slice(i * stride, min(i * stride + k, h))
                    cols = slice(j * stride, min(j * stride + k, w))
                    out[ni, ci, i, j] = x[ni, ci, rows, cols].max()
    return out


def lrn_scalar(x, size=5, alpha=1e-4, beta=0.75, k=2.0):
    """Direct per-element formula over the clamped channel window."""
    n, c, h, w = x.shape
    half = size // 2
    out = np.empty_like(x)
    for ni in range(n):
        for ci in range(c):
            lo, hi = max(0, ci - half), min(c, ci + half + 1)
            s = k + alpha * (x[ni, lo:hi] ** 2).sum(axis=0)
            out[ni, ci] = x[ni, ci] / s ** beta
    return out


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_all_ones_3x3(self):
        x = np.ones((1, 1, 3, 3))
        p = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), padding=1, stride=1)
        out = ops.conv2d(x, p)
        npt.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_1x1_identity(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = ops.conv2d(x, ConvParams(w, np.zeros(3)))
        npt.assert_array_equal(out, x)

    def test_matches_nested_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = ops.conv2d(x, ConvParams(w, b, padding=2, stride=1))
        want = conv2d_loops(x, w, b, padding=2, stride=1)
        npt.assert_allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("shape,f,pad,stride", [
        ((1, 2, 6, 6), 3, 0, 2),
        ((3, 4, 9, 9), 5, 2, 1),
        ((4, 8, 9, 9), 3, 1, 3),
        ((2, 1, 7, 5), 1, 0, 1),
    ])
    def test_loop_oracle_grid(self, rng, shape, f, pad, stride):
        x = rng.standard_normal(shape)
        w = rng.standard_normal((3, shape[1], f, f))
        b = rng.standard_normal(3)
        got = ops.conv2d(x, ConvParams(w, b, padding=pad, stride=stride))
        want = conv2d_loops(x, w, b, padding=pad, stride=stride)
        npt.assert_allclose(got, want, atol=1e-12)

    def test_channel_mismatch(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        p = ConvParams(rng.standard_normal((1, 3, 3, 3)), np.zeros(1), padding=1)
        with pytest.raises(ShapeError):
            ops.conv2d(x, p)

    def test_too_small_input(self, rng):
        x = rng.standard_normal((1, 1, 2, 2))
        p = ConvParams(rng.standard_normal((1, 1, 5, 5)), np.zeros(1))
        with pytest.raises(GeometryError):
            ops.conv2d(x, p)

    def test_gradients(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3)) * 0.5
        b = rng.standard_normal(4)
        g = rng.standard_normal((2, 4, 6, 6))
        p = ConvParams(w, b, padding=1, stride=1)

        def loss():
            return float((ops.conv2d(x, p) * g).sum())

        dx, dw, db = ops.conv2d_backward(x, p, g)
        err = grad_check(loss, [x, w, b], [dx, dw, db], sample=60)
        assert err < 1e-4

    def test_linear_op_gradient_exact(self, rng):
        # 1x1 conv is linear, so the finite-difference error is machine noise
        x = rng.standard_normal((1, 2, 4, 4))
        p = ConvParams(rng.standard_normal((3, 2, 1, 1)), rng.standard_normal(3))
        g = rng.standard_normal((1, 3, 4, 4))

        def loss():
            return float((ops.conv2d(x, p) * g).sum())

        dx, dw, db = ops.conv2d_backward(x, p, g)
        err = grad_check(loss, [x], [dx])
        assert err < 1e-9


# ---------------------------------------------------------------------------
# deconv2d
# ---------------------------------------------------------------------------

class TestDeconv2d:
    def test_upscale_geometry_60_80(self, rng):
        x = rng.standard_normal((1, 1, 60, 80))
        p = ConvParams(rng.standard_normal((1, 1, 8, 8)), np.zeros(1), padding=2, stride=4)
        out = ops.deconv2d(x, p)
        assert out.shape == (1, 1, 240, 320)

    def test_1x1_identity(self, rng):
        x = rng.standard_normal((2, 1, 3, 3))
        p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
        npt.assert_array_equal(ops.deconv2d(x, p), x)

    def test_is_transpose_of_conv(self, rng):
        # build the explicit conv matrix, transpose it, compare;
        # sizes chosen so the stride tiles the padded input exactly
        w = rng.standard_normal((3, 2, 3, 3))
        conv_p = ConvParams(w, np.zeros(3), padding=1, stride=2)
        h, wd = 5, 7
        m = conv_matrix(conv_p, h, wd)
        h_out = (h + 2 - 3) // 2 + 1
        w_out = (wd + 2 - 3) // 2 + 1
        y = rng.standard_normal((1, 3, h_out, w_out))
        deconv_p = ConvParams(w.transpose(1, 0, 2, 3), np.zeros(2), padding=1, stride=2)
        got = ops.deconv2d(y, deconv_p).ravel()
        want = m.T @ y.ravel()
        npt.assert_allclose(got, want, atol=1e-12)

    def test_adjoint_inner_product(self, rng):
        # <conv(x), y> == <x, deconv(y)> for matched params
        w = rng.standard_normal((4, 3, 5, 5))
        conv_p = ConvParams(w, np.zeros(4), padding=2, stride=3)
        x = rng.standard_normal((2, 3, 10, 10))
        cx = ops.conv2d(x, conv_p)
        y = rng.standard_normal(cx.shape)
        deconv_p = ConvParams(w.transpose(1, 0, 2, 3), np.zeros(3), padding=2, stride=3)
        lhs = float((cx * y).sum())
        rhs = float((x * ops.deconv2d(y, deconv_p)).sum())
        assert abs(lhs - rhs) <= 1e-10

    def test_negative_output_dim(self, rng):
        x = rng.standard_normal((1, 1, 1, 1))
        p = ConvParams(rng.standard_normal((1, 1, 3, 3)), np.zeros(1), padding=2, stride=1)
        with pytest.raises(GeometryError):
            ops.deconv2d(x, p)

    def test_gradients(self, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        w = rng.standard_normal((3, 2, 4, 4)) * 0.5
        b = rng.standard_normal(3)
        p = ConvParams(w, b, padding=1, stride=2)
        g = rng.standard_normal(ops.deconv2d(x, p).shape)

        def loss():
            return float((ops.deconv2d(x, p) * g).sum())

        dx, dw, db = ops.deconv2d_backward(x, p, g)
        err = grad_check(loss, [x, w, b], [dx, dw, db], sample=60)
        assert err < 1e-4


# ---------------------------------------------------------------------------
# maxpool
# ---------------------------------------------------------------------------

class TestMaxpool:
    def test_constant_input(self):
        x = np.full((1, 1, 4, 4), 3.25)
        out, _ = ops.maxpool(x, k=3, stride=2)
        assert out.shape == (1, 1, 2, 2)
        npt.assert_array_equal(out, np.full((1, 1, 2, 2), 3.25))

    def test_sizing_320_to_160_to_80(self, rng):
        x = rng.standard_normal((1, 1, 320, 320))
        once, _ = ops.maxpool(x)
        assert once.shape[2:] == (160, 160)
        twice, _ = ops.maxpool(once)
        assert twice.shape[2:] == (80, 80)

    def test_matches_window_scan(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        out, _ = ops.maxpool(x, k=3, stride=2)
        npt.assert_array_equal(out, maxpool_loops(x, 3, 2))

    def test_window_scan_odd_sizes(self, rng):
        for h, w in [(5, 7), (9, 4), (3, 3), (10, 11)]:
            x = rng.standard_normal((1, 2, h, w))
            out, _ = ops.maxpool(x, k=3, stride=2)
            npt.assert_array_equal(out, maxpool_loops(x, 3, 2))

    def test_input_smaller_than_kernel(self, rng):
        with pytest.raises(GeometryError):
            ops.maxpool(rng.standard_normal((1, 1, 2, 5)), k=3, stride=2)

    def test_backward_routes_to_argmax(self, rng):
        x = rng.standard_normal((2, 2, 6, 6))
        out, argmax = ops.maxpool(x)
        g = rng.standard_normal(out.shape)

        def loss():
            y, _ = ops.maxpool(x)
            return float((y * g).sum())

        dx = ops.maxpool_backward(x.shape, argmax, g)
        err = grad_check(loss, [x], [dx], sample=50)
        assert err < 1e-4

    def test_backward_gradient_mass_conserved(self, rng):
        x = rng.standard_normal((1, 1, 7, 7))
        out, argmax = ops.maxpool(x)
        g = np.ones(out.shape)
        dx = ops.maxpool_backward(x.shape, argmax, g)
        assert dx.sum() == pytest.approx(g.sum())


# ---------------------------------------------------------------------------
# lrn
# ---------------------------------------------------------------------------

class TestLrn:
    def test_zero_input(self):
        x = np.zeros((1, 8, 3, 3))
        npt.assert_array_equal(ops.lrn(x), x)

    def test_single_channel_unit_value(self):
        # one channel, a=1: window sum is 1, so b = 1/(k + alpha)^beta
        x = np.ones((1, 1, 1, 1))
        want = 1.0 / (2.0 + 1e-4) ** 0.75
        out = ops.lrn(x)
        npt.assert_allclose(out[0, 0, 0, 0], want, rtol=1e-15)

    def test_matches_scalar_formula(self, rng):
        x = rng.standard_normal((2, 9, 4, 4))
        npt.assert_allclose(ops.lrn(x), lrn_scalar(x), atol=1e-13)

    def test_gradients(self, rng):
        x = rng.standard_normal((1, 7, 3, 3))
        g = rng.standard_normal(x.shape)

        def loss():
            return float((ops.lrn(x) * g).sum())

        dx = ops.lrn_backward(x, g)
        err = grad_check(loss, [x], [dx], sample=60)
        assert err < 1e-4


# ---------------------------------------------------------------------------
# relu / elementwise max / concat
# ---------------------------------------------------------------------------

class TestRelu:
    def test_basic(self):
        npt.assert_array_equal(
            ops.relu(np.array([[[[-1.0, 0.0, 2.0]]]])),
            np.array([[[[0.0, 0.0, 2.0]]]]),
        )

    def test_nonnegative_unchanged(self, rng):
        x = np.abs(rng.standard_normal((1, 2, 3, 3)))
        npt.assert_array_equal(ops.relu(x), x)

    def test_gradient_mask(self, rng):
        x = rng.standard_normal((1, 3, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5  # keep finite differences away from the kink
        g = rng.standard_normal(x.shape)
        dx = ops.relu_backward(x, g)
        npt.assert_array_equal(dx, g * (x > 0))

        def loss():
            return float((ops.relu(x) * g).sum())

        assert grad_check(loss, [x], [dx], sample=48) < 1e-4


class TestElementwiseMax:
    def test_tie_selects_first(self, rng):
        a = rng.standard_normal((1, 2, 3, 3))
        out, sel = ops.elementwise_max(a, a.copy())
        npt.assert_array_equal(out, a)
        assert sel.all()
        g = rng.standard_normal(a.shape)
        da, db = ops.elementwise_max_backward(sel, g)
        npt.assert_array_equal(da, g)
        npt.assert_array_equal(db, np.zeros_like(g))

    def test_commutative_values(self, rng):
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((2, 3, 4, 4))
        out_ab, _ = ops.elementwise_max(a, b)
        out_ba, _ = ops.elementwise_max(b, a)
        npt.assert_array_equal(out_ab, out_ba)

    def test_matches_elementwise_oracle(self, rng):
        a = rng.standard_normal((2, 2, 5, 5))
        b = rng.standard_normal((2, 2, 5, 5))
        out, _ = ops.elementwise_max(a, b)
        npt.assert_array_equal(out, np.maximum(a, b))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ops.elementwise_max(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 2)))

    def test_gradients(self, rng):
        a = rng.standard_normal((1, 2, 4, 4))
        b = rng.standard_normal((1, 2, 4, 4))
        g = rng.standard_normal(a.shape)
        _, sel = ops.elementwise_max(a, b)
        da, db = ops.elementwise_max_backward(sel, g)

        def loss():
            out, _ = ops.elementwise_max(a, b)
            return float((out * g).sum())

        assert grad_check(loss, [a, b], [da, db], sample=40) < 1e-4


class TestChannelConcat:
    def test_order_preserved(self):
        a = np.full((1, 1, 2, 2), 1.0)
        b = np.full((1, 1, 2, 2), 2.0)
        out = ops.channel_concat(a, b)
        assert out.shape == (1, 2, 2, 2)
        npt.assert_array_equal(out[:, :1], a)
        npt.assert_array_equal(out[:, 1:], b)

    def test_concat_slice_roundtrip(self, rng):
        a = rng.standard_normal((2, 3, 4, 5))
        b = rng.standard_normal((2, 2, 4, 5))
        out = ops.channel_concat(a, b)
        npt.assert_array_equal(out[:, :3], a)
        npt.assert_array_equal(out[:, 3:], b)

    def test_gradient_roundtrip(self, rng):
        a = rng.standard_normal((1, 3, 3, 3))
        b = rng.standard_normal((1, 4, 3, 3))
        g = rng.standard_normal((1, 7, 3, 3))
        da, db = ops.channel_concat_backward(g, 3)
        npt.assert_array_equal(np.concatenate([da, db], axis=1), g)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            ops.channel_concat(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


class TestDeterminism:
    def test_conv_bitwise_repeatable(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        p = ConvParams(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), padding=1)
        first = ops.conv2d(x, p)
        second = ops.conv2d(x, p)
        assert np.array_equal(first, second)

    def test_lrn_config_is_used(self, rng):
        x = np.abs(rng.standard_normal((1, 6, 2, 2))) + 0.5
        loose = ops.lrn(x, LRNParams(alpha=0.0))
        npt.assert_allclose(loose, x / 2.0 ** 0.75, rtol=1e-14)
