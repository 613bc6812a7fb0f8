"""Dense tensor kernels with analytic forward and backward passes.

Every operation here is a pure function over channels-first arrays of
shape (N, C, H, W). Nothing keeps global state, so identical inputs give
bit-identical outputs and calls are safe to run concurrently on disjoint
data.

Convolution is cross-correlation (no kernel flip). Deconvolution is the
exact adjoint of the matching convolution: for filters w of shape
(d_out, d_in, f, f), `deconv2d` with w' = w.transpose(1, 0, 2, 3) applied
to y equals M.T @ y where M is the dense matrix of `conv2d` with w.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import GeometryError, ShapeError


@dataclass
class ConvParams:
    """Filterbank, bias and geometry for conv2d/deconv2d.

    filters has shape (d_out, d_in, f, f); bias has shape (d_out,).
    d_in is always the channel count of the operation's input and d_out
    that of its output, for deconv2d as well as conv2d.
    """

    filters: np.ndarray
    bias: np.ndarray
    padding: int = 0
    stride: int = 1

    def __post_init__(self):
        w = np.asarray(self.filters)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"filters must have shape (d_out, d_in, f, f), got {w.shape}")
        if w.shape[2] < 1:
            raise GeometryError(f"kernel size must be >= 1, got {w.shape[2]}")
        if self.stride < 1:
            raise GeometryError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise GeometryError(f"padding must be >= 0, got {self.padding}")
        b = np.asarray(self.bias)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match d_out={w.shape[0]}")

    @property
    def d_out(self) -> int:
        return self.filters.shape[0]

    @property
    def d_in(self) -> int:
        return self.filters.shape[1]

    @property
    def kernel(self) -> int:
        return self.filters.shape[2]


@dataclass
class LRNParams:
    """Across-channel response normalization constants.

    b = a / (k + alpha * sum_{c' in window(c)} a_{c'}^2) ** beta, where the
    window spans `size` channels centered on c and is clamped at the
    channel boundaries. This is the classic setting; alpha multiplies the
    raw window sum (no division by the window size).
    """

    size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 2.0


def _require_4d(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-d (N, C, H, W), got shape {x.shape}")
    return x


@lru_cache(maxsize=128)
def _patch_indices(d_in, h, w, f, stride):
    """Gather indices turning a padded (C, Hp, Wp) plane into patch columns.

    Returns (chan, row, col) index arrays of shape (d_in*f*f, n_patches)
    plus the output spatial dims. Row-major over output positions; the
    per-column order is (channel, kernel-row, kernel-col).
    """
    h_out = (h - f) // stride + 1
    w_out = (w - f) // stride + 1
    k_rows = np.repeat(np.arange(f), f)
    k_cols = np.tile(np.arange(f), f)
    chan = np.repeat(np.arange(d_in), f * f)[:, None]
    base_r = np.tile(k_rows, d_in)[:, None]
    base_c = np.tile(k_cols, d_in)[:, None]
    out_r = stride * np.repeat(np.arange(h_out), w_out)[None, :]
    out_c = stride * np.tile(np.arange(w_out), h_out)[None, :]
    return chan, base_r + out_r, base_c + out_c, h_out, w_out


def _im2col(x_padded, d_in, f, stride):
    n, _, hp, wp = x_padded.shape
    chan, rows, cols, h_out, w_out = _patch_indices(d_in, hp, wp, f, stride)
    return x_padded[:, chan, rows, cols], h_out, w_out


def _col2im(cols, n, d_in, hp, wp, f, stride):
    """Scatter-add patch columns back onto (N, C, Hp, Wp) planes."""
    chan, rows, cols_idx, _, _ = _patch_indices(d_in, hp, wp, f, stride)
    flat = (chan * hp + rows) * wp + cols_idx
    flat = flat.ravel()
    out = np.empty((n, d_in * hp * wp), dtype=cols.dtype)
    for i in range(n):
        out[i] = np.bincount(flat, weights=cols[i].ravel(), minlength=d_in * hp * wp)
    return out.reshape(n, d_in, hp, wp)


def conv_output_dim(size: int, f: int, padding: int, stride: int) -> int:
    out = (size + 2 * padding - f) // stride + 1
    if size + 2 * padding < f or out < 1:
        raise GeometryError(
            f"convolution over size {size} with f={f}, p={padding}, s={stride} "
            f"yields non-positive output dim"
        )
    return out


def deconv_output_dim(size: int, f: int, padding: int, stride: int) -> int:
    out = stride * (size - 1) + f - 2 * padding
    if out < 1:
        raise GeometryError(
            f"deconvolution over size {size} with f={f}, p={padding}, s={stride} "
            f"yields output dim {out}"
        )
    return out


def _pad_spatial(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Cross-correlate x (N, d_in, H, W) with the filterbank, add bias."""
    x = _require_4d(x)
    if x.shape[1] != params.d_in:
        raise ShapeError(f"input has {x.shape[1]} channels, filters expect {params.d_in}")
    f, s, p = params.kernel, params.stride, params.padding
    conv_output_dim(x.shape[2], f, p, s)
    conv_output_dim(x.shape[3], f, p, s)
    xp = _pad_spatial(x, p)
    cols, h_out, w_out = _im2col(xp, params.d_in, f, s)
    w_mat = params.filters.reshape(params.d_out, -1)
    out = np.matmul(w_mat, cols) + params.bias.astype(x.dtype)[:, None]
    return out.reshape(x.shape[0], params.d_out, h_out, w_out)


def conv2d_backward(x, params: ConvParams, grad_out):
    """Gradients of a scalar loss through conv2d.

    Returns (d_input, d_filters, d_bias) given grad_out of the output.
    """
    x = _require_4d(x)
    grad_out = _require_4d(grad_out, "grad_out")
    n, _, h, w = x.shape
    f, s, p = params.kernel, params.stride, params.padding
    xp = _pad_spatial(x, p)
    cols, h_out, w_out = _im2col(xp, params.d_in, f, s)
    g = grad_out.reshape(n, params.d_out, h_out * w_out)

    d_bias = g.sum(axis=(0, 2))
    d_filters = np.einsum("ncl,nkl->ck", g, cols).reshape(params.filters.shape)

    w_mat = params.filters.reshape(params.d_out, -1)
    d_cols = np.matmul(w_mat.T, g)
    d_xp = _col2im(d_cols, n, params.d_in, h + 2 * p, w + 2 * p, f, s)
    if p > 0:
        d_xp = d_xp[:, :, p:p + h, p:p + w]
    return d_xp, d_filters, d_bias


def deconv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Transposed convolution: output dim = stride*(H-1) + f - 2*padding."""
    x = _require_4d(x)
    if x.shape[1] != params.d_in:
        raise ShapeError(f"input has {x.shape[1]} channels, filters expect {params.d_in}")
    n, _, h, w = x.shape
    f, s, p = params.kernel, params.stride, params.padding
    h_out = deconv_output_dim(h, f, p, s)
    w_out = deconv_output_dim(w, f, p, s)

    # Identical scatter pattern as conv2d's input gradient, with the
    # filter axes swapped so d_in drives the gather side.
    w_mat = params.filters.transpose(1, 0, 2, 3).reshape(params.d_in, -1)
    cols = np.matmul(w_mat.T, x.reshape(n, params.d_in, h * w))
    out_p = _col2im(cols, n, params.d_out, h_out + 2 * p, w_out + 2 * p, f, s)
    if p > 0:
        out_p = out_p[:, :, p:p + h_out, p:p + w_out]
    return out_p + params.bias.astype(x.dtype)[None, :, None, None]


def deconv2d_backward(x, params: ConvParams, grad_out):
    """Gradients of a scalar loss through deconv2d."""
    x = _require_4d(x)
    grad_out = _require_4d(grad_out, "grad_out")
    n, _, h, w = x.shape
    f, s, p = params.kernel, params.stride, params.padding

    gp = _pad_spatial(grad_out, p)
    g_cols, h_back, w_back = _im2col(gp, params.d_out, f, s)
    if (h_back, w_back) != (h, w):
        raise ShapeError(f"grad_out spatial dims {grad_out.shape[2:]} do not match input {x.shape[2:]}")

    d_bias = grad_out.sum(axis=(0, 2, 3))
    # d_filters[do, di, a, b] = sum_n x[n, di] outer g-patches[n, do*f*f]
    d_w = np.einsum("ncl,nkl->ck", x.reshape(n, params.d_in, h * w), g_cols)
    d_filters = d_w.reshape(params.d_in, params.d_out, f, f).transpose(1, 0, 2, 3)

    w_mat = params.filters.transpose(1, 0, 2, 3).reshape(params.d_in, -1)
    d_x = np.matmul(w_mat, g_cols).reshape(x.shape)
    return d_x, d_filters, d_bias


def maxpool(x: np.ndarray, k: int = 3, stride: int = 2):
    """Max pooling with ceiling-mode output size ceil((H-k)/s) + 1.

    Windows at the bottom/right edges are clipped to the input. Returns
    the pooled map and int64 argmax indices (flat within each H*W plane);
    ties take the first position in row-major window order.
    """
    x = _require_4d(x)
    n, c, h, w = x.shape
    if h < k or w < k:
        raise GeometryError(f"input {h}x{w} is smaller than pooling kernel {k}x{k}")
    h_out = -((h - k) // -stride) + 1
    w_out = -((w - k) // -stride) + 1

    pad_h = (h_out - 1) * stride + k - h
    pad_w = (w_out - 1) * stride + k - w
    fill = -np.inf if np.issubdtype(x.dtype, np.floating) else np.iinfo(x.dtype).min
    xp = np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), constant_values=fill)

    windows = np.empty((n, c, h_out, w_out, k * k), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            windows[..., a * k + b] = xp[:, :, a:a + (h_out - 1) * stride + 1:stride,
                                         b:b + (w_out - 1) * stride + 1:stride]
    local = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]

    rows = (np.arange(h_out) * stride)[None, None, :, None] + local // k
    cols = (np.arange(w_out) * stride)[None, None, None, :] + local % k
    argmax = (rows * w + cols).astype(np.int64)
    return out, argmax


def maxpool_backward(x_shape, argmax, grad_out):
    """Route grad_out entries to the stored argmax positions."""
    n, c, h, w = x_shape
    grad_out = _require_4d(grad_out, "grad_out")
    plane_offsets = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
    flat = (argmax + plane_offsets).ravel()
    dx = np.bincount(flat, weights=grad_out.ravel(), minlength=n * c * h * w)
    return dx.reshape(n, c, h, w).astype(grad_out.dtype)


def _lrn_window_sum(x, size):
    """Sum over the clamped across-channel window, vectorized via cumsum."""
    c = x.shape[1]
    half = size // 2
    cs = np.cumsum(x, axis=1)
    zeros = np.zeros_like(cs[:, :1])
    cs = np.concatenate([zeros, cs], axis=1)
    hi = np.minimum(np.arange(c) + half + 1, c)
    lo = np.maximum(np.arange(c) - half, 0)
    return cs[:, hi] - cs[:, lo]


def lrn(x: np.ndarray, params: LRNParams = LRNParams()) -> np.ndarray:
    x = _require_4d(x)
    scale = params.k + params.alpha * _lrn_window_sum(x * x, params.size)
    return x * scale ** (-params.beta)


def lrn_backward(x, grad_out, params: LRNParams = LRNParams()):
    """d/dx of b = x * S^-beta with S = k + alpha * window_sum(x^2).

    dx_i = g_i * S_i^-beta
           - 2*alpha*beta * x_i * window_sum(g * x * S^(-beta-1))_i
    using that the window relation is symmetric (i in window(c) iff c in
    window(i)).
    """
    x = _require_4d(x)
    grad_out = _require_4d(grad_out, "grad_out")
    scale = params.k + params.alpha * _lrn_window_sum(x * x, params.size)
    pow_b = scale ** (-params.beta)
    inner = grad_out * x * (pow_b / scale)
    back = _lrn_window_sum(inner, params.size)
    return grad_out * pow_b - 2.0 * params.alpha * params.beta * x * back


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def elementwise_max(a: np.ndarray, b: np.ndarray):
    """Pixelwise max of two equal-shape tensors; ties select `a`.

    Returns (max, selector) where selector is True where `a` won.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_max shapes differ: {a.shape} vs {b.shape}")
    selector = a >= b
    return np.where(selector, a, b), selector


def elementwise_max_backward(selector, grad_out):
    da = grad_out * selector
    return da, grad_out - da


def channel_concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack b's channels after a's; batch and spatial dims must match."""
    a = _require_4d(a, "a")
    b = _require_4d(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"channel_concat spatial/batch mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def channel_concat_backward(grad_out, d_a: int):
    return grad_out[:, :d_a], grad_out[:, d_a:]
