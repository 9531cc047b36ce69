"""Multi-branch re-parameterizable convolution (MBRConv) and its fusion.

Training form::

    x ──┬─ conv k1 ─┬─ BN ─┐
        │           └──────┤  concat [bn(y_1), y_1, bn(y_2), y_2, ...]
        ├─ conv k2 ─┬─ BN ─┤        │
        │           └──────┤   1x1 conv, weight = w_pre (frozen) + w_learn
        ...                         │
                                  y_out

Every piece is linear in eval mode, so the whole block collapses into one
``K x K`` convolution (:func:`fuse_mbrconv`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, _conv, _conv_backward, center_crop_kernel, pad_kernel_center

__all__ = [
    "StateError",
    "BNParams",
    "ConvBranch",
    "MBRConvTrain",
    "FusedConv",
    "BRANCH_MENU",
    "mbr_forward_train",
    "fold_bn",
    "merge_concat_1x1",
    "iwo_compose",
    "fuse_mbrconv",
    "iwo_freeze",
]

BRANCH_MENU = {1: (1,), 3: (1, 3), 5: (1, 3, 5)}


class StateError(RuntimeError):
    """An object is in the wrong lifecycle state for the requested operation."""


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    initialized: bool = False

    @classmethod
    def fresh(cls, c, dtype=np.float32):
        return cls(np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype))

    def __post_init__(self):
        n = len(self.gamma)
        if not (len(self.beta) == len(self.running_mean) == len(self.running_var) == n):
            raise ShapeError("BN parameter vectors must share one length")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")


@dataclass
class ConvBranch:
    kernel: np.ndarray
    bias: np.ndarray
    bn: BNParams

    @property
    def size(self):
        return self.kernel.shape[-1]


@dataclass
class FusedConv:
    kernel: np.ndarray
    bias: np.ndarray

    def __call__(self, x):
        return _conv(x.astype(self.kernel.dtype, copy=False), self.kernel, self.bias)[0]

    @property
    def num_params(self):
        return self.kernel.size + self.bias.size


@dataclass
class MBRConvTrain:
    """Training-form block. ``w_pre`` is ``None`` until the first IWO freeze."""

    K: int
    branches: list
    w_learn: np.ndarray
    b_out: np.ndarray
    w_pre: np.ndarray | None = None
    _cache: dict | None = field(default=None, repr=False, compare=False)

    @classmethod
    def init(cls, c_in, c_out, K, rng, dtype=np.float32, sizes=None):
        """Kaiming-uniform initialised block with the default branch menu for ``K``."""
        sizes = BRANCH_MENU[K] if sizes is None else sizes
        branches = []
        for k in sizes:
            bound = 1.0 / np.sqrt(c_in * k * k)
            branches.append(ConvBranch(
                _uniform(rng, bound, (c_out, c_in, k, k), dtype),
                _uniform(rng, bound, (c_out,), dtype),
                BNParams.fresh(c_out, dtype),
            ))
        c_cat = 2 * c_out * len(sizes)
        bound = 1.0 / np.sqrt(c_cat)
        return cls(K, branches,
                   _uniform(rng, bound, (c_out, c_cat, 1, 1), dtype),
                   _uniform(rng, bound, (c_out,), dtype))

    def __post_init__(self):
        if not self.branches:
            raise ValueError("MBRConv needs at least one branch")
        c_in = self.branches[0].kernel.shape[1]
        for br in self.branches:
            if br.kernel.shape[1] != c_in:
                raise ShapeError("all branches must share c_in")
            if br.size > self.K or br.size % 2 == 0:
                raise ShapeError(f"branch size {br.size} incompatible with K={self.K}")
        if self.w_learn.shape != (self.c_out, self.c_concat, 1, 1):
            raise ShapeError(f"w_learn shape {self.w_learn.shape} != {(self.c_out, self.c_concat, 1, 1)}")
        if self.w_pre is not None and self.w_pre.shape != self.w_learn.shape:
            raise ShapeError("w_pre and w_learn shapes differ")

    @property
    def c_in(self):
        return self.branches[0].kernel.shape[1]

    @property
    def c_mid(self):
        return sum(br.kernel.shape[0] for br in self.branches)

    @property
    def c_concat(self):
        return 2 * self.c_mid

    @property
    def c_out(self):
        return self.b_out.shape[0]

    @property
    def w_final(self):
        return iwo_compose(self.w_pre, self.w_learn)

    @property
    def stats_initialized(self):
        return all(br.bn.initialized for br in self.branches)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        """Trainable arrays by name. ``w_pre`` is frozen and never listed."""
        out = {}
        for i, br in enumerate(self.branches):
            out[f"branch{i}.kernel"] = br.kernel
            out[f"branch{i}.bias"] = br.bias
            out[f"branch{i}.bn.gamma"] = br.bn.gamma
            out[f"branch{i}.bn.beta"] = br.bn.beta
        out["w_learn"] = self.w_learn
        out["b_out"] = self.b_out
        return out

    def buffers(self):
        out = {}
        for i, br in enumerate(self.branches):
            out[f"branch{i}.bn.running_mean"] = br.bn.running_mean
            out[f"branch{i}.bn.running_var"] = br.bn.running_var
        if self.w_pre is not None:
            out["w_pre"] = self.w_pre
        return out

    def num_params(self):
        n = sum(a.size for a in self.parameters().values())
        return n + (self.w_pre.size if self.w_pre is not None else 0)

    def astype(self, dtype):
        def bn(b):
            return BNParams(*(a.astype(dtype) for a in (b.gamma, b.beta, b.running_mean, b.running_var)),
                            eps=b.eps, momentum=b.momentum, initialized=b.initialized)
        return MBRConvTrain(
            self.K,
            [ConvBranch(br.kernel.astype(dtype), br.bias.astype(dtype), bn(br.bn)) for br in self.branches],
            self.w_learn.astype(dtype), self.b_out.astype(dtype),
            None if self.w_pre is None else self.w_pre.astype(dtype),
        )

    # -- forward / backward -------------------------------------------------

    def _stacked(self):
        kernel = np.concatenate([pad_kernel_center(br.kernel, self.K) for br in self.branches])
        bias = np.concatenate([br.bias for br in self.branches])
        return kernel, bias

    def _split_w(self, w):
        """Split (c_out, c_concat) integration weights into BN-path and raw-path columns."""
        w = w.reshape(self.c_out, -1)
        bn_cols, raw_cols = [], []
        start = 0
        for br in self.branches:
            c = br.kernel.shape[0]
            bn_cols.append(np.arange(start, start + c))
            raw_cols.append(np.arange(start + c, start + 2 * c))
            start += 2 * c
        bn_cols = np.concatenate(bn_cols)
        raw_cols = np.concatenate(raw_cols)
        return w[:, bn_cols], w[:, raw_cols], bn_cols, raw_cols

    def _bn_vectors(self, name):
        return np.concatenate([getattr(br.bn, name) for br in self.branches])

    def forward(self, x, mode="train"):
        """Block output. ``mode='train'`` uses batch statistics and updates running stats."""
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"input shape {x.shape} does not match c_in={self.c_in}")
        if mode == "eval":
            self._cache = None
            return self.forward_reference(x, "eval")
        if mode != "train":
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        dtype = self.w_learn.dtype
        x = x.astype(dtype, copy=False)
        n, _, h, w = x.shape
        kernel, bias = self._stacked()
        y, cols = _conv(x, kernel, bias)

        mean = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        cnt = n * h * w
        unbiased = var * (cnt / (cnt - 1)) if cnt > 1 else var
        start = 0
        for br in self.branches:
            c = br.kernel.shape[0]
            bn = br.bn
            bn.running_mean[:] = (1 - bn.momentum) * bn.running_mean + bn.momentum * mean[start:start + c]
            bn.running_var[:] = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased[start:start + c]
            bn.initialized = True
            start += c

        # BN is a per-channel affine map z = a*y + c, so the BN half of the
        # 1x1 integration folds into the raw half: out = (w_bn*a + w_raw) @ y + ...
        eps = np.concatenate([np.full(br.kernel.shape[0], br.bn.eps) for br in self.branches])
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
        gamma = self._bn_vectors("gamma")
        a = gamma * inv_std
        c = self._bn_vectors("beta") - mean * a
        w_bn, w_raw, _, _ = self._split_w(self.w_final)
        w_eff = w_bn * a + w_raw
        out = np.matmul(w_eff, y.reshape(n, -1, h * w))
        out += (w_bn @ c + self.b_out)[:, None]
        self._cache = dict(x_shape=x.shape, cols=cols, kernel=kernel, y=y, mean=mean,
                           inv_std=inv_std, a=a, c=c, w_bn=w_bn, w_eff=w_eff)
        return out.reshape(n, self.c_out, h, w)

    def forward_reference(self, x, mode="eval"):
        """Literal multi-branch evaluation: per-branch conv, BN, concat, 1x1.

        Never touches running statistics; ``mode='train'`` normalises with the
        batch statistics of ``x``.
        """
        if mode == "eval" and not self.stats_initialized:
            raise StateError("BN running statistics are uninitialised; run a training step first")
        dtype = self.w_learn.dtype
        x = x.astype(dtype, copy=False)
        parts = []
        for br in self.branches:
            y = _conv(x, br.kernel, br.bias)[0]
            if mode == "train":
                mean, var = y.mean(axis=(0, 2, 3)), y.var(axis=(0, 2, 3))
            else:
                mean, var = br.bn.running_mean, br.bn.running_var
            scale = (br.bn.gamma / np.sqrt(var + br.bn.eps)).astype(dtype)
            z = (y - mean[:, None, None].astype(dtype)) * scale[:, None, None] + br.bn.beta[:, None, None]
            parts += [z, y]
        cat = np.concatenate(parts, axis=1)
        n, m, h, w = cat.shape
        out = np.matmul(self.w_final.reshape(self.c_out, m), cat.reshape(n, m, h * w))
        out += self.b_out[:, None]
        return out.reshape(n, self.c_out, h, w)

    def backward(self, grad, need_input_grad=True):
        """Backpropagate through the last train-mode forward.

        Returns ``(grads, d_x)`` where ``grads`` is keyed like :meth:`parameters`.
        ``w_pre`` is frozen and gets no gradient.
        """
        c = self._cache
        if c is None:
            raise StateError("backward needs a cached train-mode forward pass")
        n, _, h, w = grad.shape
        g = grad.reshape(n, self.c_out, h * w)
        y = c["y"]
        m = y.shape[1]
        y3 = y.reshape(n, m, h * w)
        cnt = n * h * w

        gy = np.matmul(g, y3.transpose(0, 2, 1)).sum(axis=0)   # sum_p g[o,p] y[m,p]
        g_sum = g.sum(axis=(0, 2))
        w_bn = c["w_bn"]
        _, _, bn_cols, raw_cols = self._split_w(self.w_final)
        d_w = np.empty((self.c_out, self.c_concat), dtype=grad.dtype)
        d_w[:, raw_cols] = gy
        d_w[:, bn_cols] = gy * c["a"] + np.outer(g_sum, c["c"])

        s_dz = w_bn.T @ g_sum                      # sum_p dz[m,p]
        s_dzy = (w_bn * gy).sum(axis=0)            # sum_p dz[m,p] y[m,p]
        inv_std, mean, a = c["inv_std"], c["mean"], c["a"]
        d_beta = s_dz
        d_gamma = inv_std * (s_dzy - mean * s_dz)
        coef1 = -a * inv_std * d_gamma / cnt
        coef0 = -a * s_dz / cnt - coef1 * mean
        d_y = np.matmul(c["w_eff"].T, g)
        d_y += coef1[:, None] * y3
        d_y += coef0[:, None]
        d_y = d_y.reshape(y.shape)

        d_kernel, d_bias, d_x = _conv_backward(d_y, c["kernel"], c["cols"], c["x_shape"], need_input_grad)

        grads = {}
        start = 0
        for i, br in enumerate(self.branches):
            cm = br.kernel.shape[0]
            sl = slice(start, start + cm)
            grads[f"branch{i}.kernel"] = center_crop_kernel(d_kernel[sl], br.size).copy()
            grads[f"branch{i}.bias"] = d_bias[sl]
            grads[f"branch{i}.bn.gamma"] = d_gamma[sl]
            grads[f"branch{i}.bn.beta"] = d_beta[sl]
            start += cm
        grads["w_learn"] = d_w.reshape(self.w_learn.shape)
        grads["b_out"] = g_sum
        return grads, d_x


def mbr_forward_train(block, x, mode="train"):
    return block.forward(x, mode)


def fold_bn(kernel, bias, bn):
    """Absorb an eval-mode BatchNorm into the preceding convolution."""
    if len(bn.gamma) != kernel.shape[0]:
        raise ShapeError(f"BN has {len(bn.gamma)} channels, kernel has {kernel.shape[0]} outputs")
    denom = np.asarray(bn.running_var, np.float64) + bn.eps
    if np.any(denom <= 0):
        raise FloatingPointError("running_var + eps must be positive to fold BN")
    scale = np.asarray(bn.gamma, np.float64) / np.sqrt(denom)
    k = np.asarray(kernel, np.float64) * scale[:, None, None, None]
    b = scale * (np.asarray(bias, np.float64) - bn.running_mean) + bn.beta
    return k, b


def merge_concat_1x1(branch_kernels, w_out, b_out):
    """Collapse ``concat(conv_j) -> 1x1`` into a single convolution.

    ``branch_kernels`` is a list of ``(kernel, bias)`` pairs already padded to a
    common ``K x K`` and BN-folded, in concat order.
    """
    kernels = np.concatenate([np.asarray(k, np.float64) for k, _ in branch_kernels])
    biases = np.concatenate([np.asarray(b, np.float64) for _, b in branch_kernels])
    w = np.asarray(w_out, np.float64)
    if w.ndim == 4:
        if w.shape[2:] != (1, 1):
            raise ShapeError("integration kernel must be 1x1")
        w = w[:, :, 0, 0]
    if w.shape[1] != kernels.shape[0]:
        raise ShapeError(f"1x1 conv expects {w.shape[1]} channels, branches provide {kernels.shape[0]}")
    fused_k = np.tensordot(w, kernels, axes=(1, 0))
    fused_b = w @ biases + np.asarray(b_out, np.float64)
    return FusedConv(fused_k, fused_b)


def iwo_compose(w_pre, w_learn):
    """Effective integration weight: frozen prior plus learnable increment."""
    if w_pre is None:
        return w_learn
    if w_pre.shape != w_learn.shape:
        raise ShapeError(f"w_pre shape {w_pre.shape} != w_learn shape {w_learn.shape}")
    return w_pre + w_learn


def fuse_mbrconv(block, dtype=None):
    """Fuse an eval-mode :class:`MBRConvTrain` into one ``K x K`` convolution.

    Fusion arithmetic runs in float64; the result is cast to ``dtype``
    (default: the block's own dtype).
    """
    if not block.stats_initialized:
        raise StateError("cannot fuse a block whose BN running statistics are uninitialised")
    parts = []
    for br in block.branches:
        k_bn, b_bn = fold_bn(br.kernel, br.bias, br.bn)
        parts.append((pad_kernel_center(k_bn, block.K), b_bn))
        parts.append((pad_kernel_center(br.kernel.astype(np.float64), block.K), br.bias.astype(np.float64)))
    fused = merge_concat_1x1(parts, block.w_final, block.b_out)
    dtype = block.w_learn.dtype if dtype is None else dtype
    return FusedConv(fused.kernel.astype(dtype), fused.bias.astype(dtype))


def iwo_freeze(block):
    """Freeze the current effective integration weight into ``w_pre``; zero ``w_learn``.

    Mutates and returns ``block``. The forward function is unchanged.
    """
    block.w_pre = iwo_compose(block.w_pre, block.w_learn).copy()
    block.w_learn = np.zeros_like(block.w_learn)
    return block
