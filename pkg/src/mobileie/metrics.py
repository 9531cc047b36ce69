"""Image-quality metrics and weight-analysis helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError

__all__ = [
    "psnr",
    "mae",
    "ssim",
    "gaussian_window",
    "kl_channel_matrix",
    "KernelDelta",
    "kernel_delta",
    "delta_to_pgm_bytes",
]

PSNR_CAP = 100.0


def _pair(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """PSNR in dB for peak 1, capped at 100 dB for (near-)identical inputs."""
    a, b = _pair(a, b)
    mse = math.fsum(((a - b) ** 2).ravel()) / a.size
    if mse < 1e-10:
        return PSNR_CAP
    # the RMSE form keeps exact decimal differences exact (0.1 -> 20 dB)
    return float(20.0 * np.log10(1.0 / np.sqrt(mse)))


def mae(a, b):
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def _filter_valid(x, g):
    """Separable 'valid' correlation of the last two axes with 1-D window ``g``."""
    k = len(g)
    h, w = x.shape[-2:]
    rows = sum(g[i] * x[..., i:i + h - k + 1, :] for i in range(k))
    return sum(g[i] * rows[..., :, i:i + w - k + 1] for i in range(k))


def ssim(a, b, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over all valid Gaussian windows, averaged over channels.

    Accepts (h, w), (c, h, w) or (n, c, h, w) arrays in [0, 1]. Images smaller
    than the window use the largest odd window that fits.
    """
    a, b = _pair(a, b)
    h, w = a.shape[-2:]
    size = min(win_size, h if h % 2 else h - 1, w if w % 2 else w - 1)
    g = gaussian_window(size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a ** 2
    s_bb = _filter_valid(b * b, g) - mu_b ** 2
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    smap = num / den
    # mean per channel plane, then across planes
    return float(smap.reshape(-1, smap.shape[-2] * smap.shape[-1]).mean(axis=1).mean())


def kl_channel_matrix(w):
    """Pairwise KL divergence between softmax-normalised rows of a 1x1 kernel.

    ``M[i, j] = KL(softmax(w[i]) || softmax(w[j]))``.
    """
    w = np.asarray(w, np.float64)
    if w.ndim == 4:
        if w.shape[2:] != (1, 1):
            raise ValueError(f"expected a 1x1 kernel, got spatial size {w.shape[2:]}")
        w = w[:, :, 0, 0]
    elif w.ndim != 2:
        raise ValueError(f"expected a 1x1 kernel, got shape {w.shape}")
    z = w - w.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    m = (p * logp).sum(axis=1)[:, None] - p @ logp.T
    np.fill_diagonal(m, 0.0)
    return np.maximum(m, 0.0)


@dataclass
class KernelDelta:
    delta: np.ndarray

    def to_csv(self, path):
        """Write one row per (output channel, kernel row); columns span input channels."""
        d = self.delta
        lines = []
        for o in range(d.shape[0]):
            for r in range(d.shape[2]):
                vals = [repr(float(v)) for i in range(d.shape[1]) for v in d[o, i, r]]
                lines.append(",".join([str(o), str(r)] + vals))
        Path(path).write_text("\n".join(lines) + "\n")

    def write_pgms(self, directory, stem="delta"):
        """One 8-bit PGM per output channel: input channels tiled horizontally."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for o in range(self.delta.shape[0]):
            grid = np.concatenate(list(self.delta[o]), axis=1)
            p = directory / f"{stem}_out{o:02d}.pgm"
            p.write_bytes(delta_to_pgm_bytes(grid))
            paths.append(p)
        return paths


def delta_to_pgm_bytes(grid):
    """Min-max normalise a 2-D grid to 8 bits; a constant grid maps to mid-gray 128."""
    grid = np.asarray(grid, np.float64)
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        img = np.round((grid - lo) / (hi - lo) * 255.0)
    else:
        img = np.full(grid.shape, 128.0)
    h, w = grid.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes()


def kernel_delta(w_iwo, w_base):
    """Elementwise ``w_iwo - w_base``."""
    a = np.asarray(w_iwo)
    b = np.asarray(w_base)
    if a.shape != b.shape:
        raise ShapeError(f"kernel shapes differ: {a.shape} vs {b.shape}")
    return KernelDelta(a.astype(np.float64) - b.astype(np.float64))
