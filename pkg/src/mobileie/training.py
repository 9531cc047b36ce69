"""Loss, optimiser, learning-rate schedule and the training loop.

Gradients come from the hand-written reverse pass in
:meth:`mobileie.network.MobileIENet.backward`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

log = logging.getLogger(__name__)

__all__ = [
    "LVWConfig",
    "LossReport",
    "TrainConfig",
    "TrainingDiverged",
    "lvw_loss",
    "lvw_backward",
    "backward_pass",
    "lr_at",
    "Adam",
    "EpochRecord",
    "train",
]


@dataclass
class LVWConfig:
    eps: float = 1e-8
    detach_weights: bool = True
    l1_blend: float = 0.0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.l1_blend < 0:
            raise ValueError("l1_blend must be >= 0")


@dataclass
class LossReport:
    loss: float
    delta: np.ndarray
    mu: np.ndarray      # (n, c, 1, 1)
    sigma: np.ndarray   # (n, c, 1, 1)
    weight: np.ndarray


def lvw_loss(o, l, cfg=None):
    """Local-variance-weighted L1 loss.

    Per-pixel absolute error, reweighted by ``tanh(|err - mean| / (std + eps))``
    with mean/std taken over each (sample, channel) plane.
    """
    cfg = LVWConfig() if cfg is None else cfg
    if o.shape != l.shape:
        raise ShapeError(f"prediction {o.shape} and target {l.shape} differ in shape")
    delta = np.abs(o - l)
    mu = delta.mean(axis=(2, 3), keepdims=True)
    sigma = np.sqrt(((delta - mu) ** 2).mean(axis=(2, 3), keepdims=True))
    weight = np.tanh(np.abs(delta - mu) / (sigma + cfg.eps))
    loss = float((weight * delta).mean())
    if cfg.l1_blend > 0:
        loss += cfg.l1_blend * float(delta.mean())
    return LossReport(loss, delta, mu, sigma, weight)


def lvw_backward(report, o, l, cfg=None):
    """d(loss)/d(o) for :func:`lvw_loss`.

    With ``cfg.detach_weights`` the tanh weight map is treated as a constant.
    """
    cfg = LVWConfig() if cfg is None else cfg
    n_total = o.size
    sign = np.sign(o - l)
    w = report.weight
    if cfg.detach_weights:
        d_delta = w.copy()
    else:
        delta, mu, sigma = report.delta, report.mu, report.sigma
        p = delta.shape[2] * delta.shape[3]
        d = delta - mu
        s = sigma + cfg.eps
        a = delta * (1 - w * w)
        sd = np.sign(d)
        term_mean = (a * sd).sum(axis=(2, 3), keepdims=True) / p
        term_sigma = (a * np.abs(d)).sum(axis=(2, 3), keepdims=True)
        safe_sigma = np.where(sigma > 0, sigma, 1.0)
        d_sigma = np.where(sigma > 0, d / (p * safe_sigma), 0.0)
        d_delta = w + (a * sd - term_mean) / s - term_sigma / (s * s) * d_sigma
    if cfg.l1_blend > 0:
        d_delta = d_delta + cfg.l1_blend
    return (d_delta * sign / n_total).astype(o.dtype, copy=False)


def backward_pass(net, x, grad_out):
    """Parameter gradients for the train-mode forward of ``x`` just run on ``net``."""
    del x  # activations are cached on the network by its forward pass
    return net.backward(grad_out)


@dataclass
class TrainConfig:
    lr_peak: float = 1e-3
    lr_min: float = 1e-6
    warmup_epochs: int = 10
    restart_period: int = 50
    peak_decay: float = 0.97
    total_epochs: int = 2000
    iwo_freeze_epoch: int | list | None = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 100

    def __post_init__(self):
        if not self.warmup_epochs < self.restart_period < self.total_epochs:
            raise ValueError("need warmup_epochs < restart_period < total_epochs")
        if not 0 < self.peak_decay <= 1:
            raise ValueError("peak_decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def freeze_epochs(self):
        e = self.iwo_freeze_epoch
        if e is None:
            return ()
        return tuple(e) if isinstance(e, (list, tuple)) else (e,)


def lr_at(epoch, cfg):
    """Warm-up then cosine annealing with warm restarts and a decaying peak."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_min
    cycle, pos = divmod(epoch - cfg.warmup_epochs, cfg.restart_period)
    t = pos / cfg.restart_period
    peak = cfg.lr_peak * cfg.peak_decay ** cycle
    return cfg.lr_min + (peak - cfg.lr_min) * (1 + math.cos(math.pi * t)) / 2


class Adam:
    """Adam with per-parameter step counters, so moments can be reset individually."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = {}

    def reset(self, names):
        for name in names:
            self.m.pop(name, None)
            self.v.pop(name, None)
            self.t.pop(name, None)

    def step(self, params, grads, lr):
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = lr * math.sqrt(1 - b2 ** t) / (1 - b1 ** t)
            p -= (step * m / (np.sqrt(v) + self.eps)).astype(p.dtype, copy=False)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_psnr: float = float("nan")

    def csv(self):
        return f"{self.epoch},{self.lr!r},{self.train_loss!r},{self.val_psnr!r}"


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def evaluate_psnr(net, inputs, targets):
    from .metrics import psnr
    out = net.forward(inputs, "eval")
    return float(np.mean([psnr(out[i], targets[i]) for i in range(len(out))]))


def train(net, inputs, targets, tcfg=None, lcfg=None, val=None, start_epoch=0,
          optimizer=None, on_epoch=None, on_checkpoint=None, end_epoch=None):
    """Train ``net`` in place.

    Parameters
    ----------
    inputs, targets : ndarray, shape (N, c, h, w)
        Degraded inputs and ground truth.
    val : (inputs, targets), optional
        Held-out pairs for the per-epoch PSNR column.
    on_epoch : callable(EpochRecord), optional
    on_checkpoint : callable(epoch, net), optional
        Called every ``tcfg.checkpoint_every`` epochs.
    start_epoch, end_epoch : int
        Run epochs ``[start_epoch, end_epoch)`` of the schedule; ``end_epoch``
        defaults to ``tcfg.total_epochs``.

    Returns the list of :class:`EpochRecord`.
    """
    tcfg = TrainConfig() if tcfg is None else tcfg
    lcfg = LVWConfig() if lcfg is None else lcfg
    if len(inputs) == 0:
        raise ValueError("empty dataset")
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    opt = optimizer or Adam(tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    # one RNG stream per epoch keeps resumed runs identical to uninterrupted ones
    records = []
    stop = tcfg.total_epochs if end_epoch is None else min(end_epoch, tcfg.total_epochs)
    for epoch in range(start_epoch, stop):
        if epoch in tcfg.freeze_epochs:
            net.iwo_freeze()
            opt.reset([k for k in net.parameters() if k.endswith(".w_learn")])
            log.info("epoch %d: IWO freeze applied", epoch)
        lr = lr_at(epoch, tcfg)
        rng = np.random.default_rng([tcfg.seed, epoch])
        total, count = 0.0, 0
        for idx in _batches(len(inputs), tcfg.batch_size, rng):
            x, y = inputs[idx], targets[idx]
            out = net.forward(x, "train")
            rep = lvw_loss(out, y.astype(out.dtype, copy=False), lcfg)
            if not math.isfinite(rep.loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            grads = net.backward(lvw_backward(rep, out, y, lcfg))
            opt.step(net.parameters(), grads, lr)
            total += rep.loss * len(idx)
            count += len(idx)
        rec = EpochRecord(epoch, lr, total / count)
        if val is not None:
            rec.val_psnr = evaluate_psnr(net, *val)
        records.append(rec)
        log.debug("epoch %d lr %.3g loss %.5f psnr %.2f", epoch, lr, rec.train_loss, rec.val_psnr)
        if on_epoch is not None:
            on_epoch(rec)
        if on_checkpoint is not None and (epoch + 1) % tcfg.checkpoint_every == 0:
            on_checkpoint(epoch, net)
    return records
