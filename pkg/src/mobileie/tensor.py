"""Dense NCHW tensor primitives.

Tensors are plain ``numpy.ndarray`` objects: activations are 4-D ``(n, c, h, w)``
arrays, kernels are ``(c_out, c_in, k, k)`` arrays with odd ``k``. Every
convolution here is stride 1 with zero "same" padding.

The public functions validate their arguments. The underscore-prefixed helpers
skip validation, keep the caller's dtype, and return the intermediates that the
hand-written backward passes in :mod:`mobileie.training` need.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "conv2d",
    "pad_kernel_center",
    "global_avg_pool",
    "global_max_pool",
    "prelu",
    "sigmoid",
    "tanh_map",
    "mul",
    "add",
    "pixel_shuffle",
    "pixel_unshuffle",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def _check4(x, name="x"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, k):
    """Gather ``k x k`` neighbourhoods: (n, c, h, w) -> (n, c*k*k, h*w)."""
    n, c, h, w = x.shape
    p = k // 2
    if k == 1:
        return x.reshape(n, c, h * w)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, c, k, k, h, w), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, c * k * k, h * w)


def _col2im(cols, shape, k):
    """Adjoint of :func:`_im2col`: scatter-add columns back onto the image."""
    n, c, h, w = shape
    p = k // 2
    if k == 1:
        return cols.reshape(n, c, h, w)
    cols = cols.reshape(n, c, k, k, h, w)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    return xp[:, :, p:p + h, p:p + w]


def _conv(x, kernel, bias=None, cols=None):
    """Unchecked same-padding convolution. Returns ``(y, cols)``."""
    n, _, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    if cols is None:
        cols = _im2col(x, k)
    y = np.matmul(kernel.reshape(c_out, -1), cols)
    if bias is not None:
        y += bias[:, None]
    return y.reshape(n, c_out, h, w), cols


def _conv_backward(grad, kernel, cols, x_shape, need_input_grad=True):
    """Gradients of :func:`_conv` w.r.t. kernel, bias and (optionally) input."""
    n, c_out, h, w = grad.shape
    k = kernel.shape[-1]
    g = grad.reshape(n, c_out, h * w)
    d_kernel = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    d_bias = g.sum(axis=(0, 2))
    d_x = None
    if need_input_grad:
        d_cols = np.matmul(kernel.reshape(c_out, -1).T, g)
        d_x = _col2im(d_cols, x_shape, k)
    return d_kernel, d_bias, d_x


def conv2d(x, k, b=None, pad=None):
    """Same-padded, stride-1 2-D convolution (cross-correlation).

    Parameters
    ----------
    x : ndarray, shape (n, c_in, h, w)
    k : ndarray, shape (c_out, c_in, kh, kw), kh == kw odd
    b : ndarray, shape (c_out,), optional
    pad : int, optional
        Must equal ``(kh - 1) // 2`` when given; only same-padding is supported.

    Reductions are carried out in float64 and the result is returned in the
    input's floating dtype (float32 for integer input).
    """
    x = np.asarray(x)
    k = np.asarray(k)
    _check4(x)
    if k.ndim != 4:
        raise ShapeError(f"kernel must be 4-D, got shape {k.shape}")
    c_out, c_in, kh, kw = k.shape
    if kh != kw or kh % 2 == 0:
        raise NotImplementedError(f"only odd square kernels are supported, got {kh}x{kw}")
    if pad is not None and pad != (kh - 1) // 2:
        raise NotImplementedError(f"only same padding ({(kh - 1) // 2}) is supported, got {pad}")
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    if b is not None:
        b = np.asarray(b)
        if b.shape != (c_out,):
            raise ShapeError(f"bias shape {b.shape} does not match c_out={c_out}")
        b = b.astype(np.float64)
    out_dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    y, _ = _conv(x.astype(np.float64), k.astype(np.float64), b)
    return y.astype(out_dtype, copy=False)


def pad_kernel_center(k, target):
    """Zero-pad a square kernel to ``target x target``, keeping it centred."""
    k = np.asarray(k)
    kh = k.shape[-1]
    if target % 2 == 0 or target < kh:
        raise ValueError(f"target size must be odd and >= {kh}, got {target}")
    if target == kh:
        return k.copy()
    p = (target - kh) // 2
    out = np.zeros(k.shape[:2] + (target, target), dtype=k.dtype)
    out[:, :, p:p + kh, p:p + kh] = k
    return out


def center_crop_kernel(k, size):
    """Inverse of :func:`pad_kernel_center` (no check that the border is zero)."""
    p = (k.shape[-1] - size) // 2
    return k[:, :, p:p + size, p:p + size]


# ---------------------------------------------------------------------------
# pooling and pointwise maps


def global_avg_pool(x):
    x = np.asarray(x)
    _check4(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_max_pool(x):
    x = np.asarray(x)
    _check4(x)
    return x.max(axis=(2, 3), keepdims=True)


def prelu(x, slope):
    x = np.asarray(x)
    slope = np.asarray(slope)
    _check4(x)
    if slope.shape != (x.shape[1],):
        raise ShapeError(f"slope length {slope.shape} does not match {x.shape[1]} channels")
    return np.where(x >= 0, x, slope[None, :, None, None] * x).astype(x.dtype, copy=False)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_map(x):
    return np.tanh(np.asarray(x))


def _broadcast_check(a, b):
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.size <= b.size else (b, a)
    if (small.ndim == 4 and big.ndim == 4 and small.shape[2:] == (1, 1)
            and small.shape[1] == big.shape[1] and small.shape[0] in (1, big.shape[0])):
        return
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def mul(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _broadcast_check(a, b)
    return a * b


def add(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _broadcast_check(a, b)
    return a + b


# ---------------------------------------------------------------------------
# depth <-> space


def pixel_shuffle(x, r):
    """Depth-to-space: (n, c*r*r, h, w) -> (n, c, h*r, w*r).

    ``out[n, c, h*r + dy, w*r + dx] = x[n, c*r*r + dy*r + dx, h, w]``.
    """
    x = np.asarray(x)
    _check4(x)
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError(f"channels {c} not divisible by r^2={r * r}")
    c2 = c // (r * r)
    return x.reshape(n, c2, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c2, h * r, w * r)


def pixel_unshuffle(x, r):
    """Space-to-depth, the exact inverse of :func:`pixel_shuffle`."""
    x = np.asarray(x)
    _check4(x)
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by {r}")
    return x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(
        n, c * r * r, h // r, w // r)
