"""MobileIE network assembly in training and fused forms.

Pipeline::

    x -> MBRConv5x5 -> PReLU -> (MBRConv3x3 -> FST) x 2 -> HDPA -> MBRConv3x3 [-> pixel_shuffle(2)]

The ISP variant consumes a packed RGGB mosaic (4 half-resolution planes) and
emits 12 channels that pixel-shuffle to full-resolution RGB.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .reparam import FusedConv, MBRConvTrain, StateError, fuse_mbrconv, iwo_freeze
from .tensor import ShapeError, pixel_shuffle, pixel_unshuffle, sigmoid

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "FSTParams",
    "HDPAParams",
    "MobileIENet",
    "fst_forward",
    "hdpa_forward",
    "net_forward",
    "fuse_network",
    "param_count",
    "audit_formula",
]

# variant -> (input channels, head output channels, pixel-shuffle factor)
VARIANTS = {"LLE": (3, 3, 1), "UIE": (3, 3, 1), "ISP": (4, 12, 2)}


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 12
    variant: str = "LLE"
    form: str = "train"

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.form not in ("train", "fused"):
            raise ValueError(f"form must be 'train' or 'fused', got {self.form!r}")

    @property
    def in_channels(self):
        return VARIANTS[self.variant][0]

    @property
    def head_channels(self):
        return VARIANTS[self.variant][1]

    @property
    def upscale(self):
        return VARIANTS[self.variant][2]


@dataclass
class FSTParams:
    scale: np.ndarray  # shape (1,)
    bias: np.ndarray

    @classmethod
    def init(cls, c, dtype=np.float32):
        return cls(np.ones(1, dtype), np.zeros(c, dtype))


def fst_forward(p, x):
    """Feature self-transform: ``scale * x * x + bias`` with per-channel bias."""
    if p.bias.shape != (x.shape[1],):
        raise ShapeError(f"FST bias length {p.bias.shape} does not match {x.shape[1]} channels")
    return p.scale[0] * (x * x) + p.bias[:, None, None]


@dataclass
class HDPAParams:
    attn_g: MBRConvTrain | FusedConv
    attn_l: MBRConvTrain | FusedConv


def _apply(layer, x, mode):
    if isinstance(layer, FusedConv):
        return layer(x)
    return layer.forward(x, mode)


def hdpa_forward(p, f, mode="eval", cache=None):
    """Cascaded average-pool then max-pool channel attention.

    If ``cache`` is a dict it receives the intermediates needed for backward.
    """
    c = f.shape[1]
    for layer in (p.attn_g, p.attn_l):
        c_in = layer.kernel.shape[1] if isinstance(layer, FusedConv) else layer.c_in
        if c_in != c:
            raise ShapeError(f"HDPA attention expects {c_in} channels, features have {c}")
    a_g = sigmoid(_apply(p.attn_g, f.mean(axis=(2, 3), keepdims=True), mode))
    w_g = f * a_g
    a_l = sigmoid(_apply(p.attn_l, w_g.max(axis=(2, 3), keepdims=True), mode))
    if cache is not None:
        cache.update(f=f, a_g=a_g, a_l=a_l, w_g=w_g)
    return (a_g * a_l) * f


def _hdpa_backward(p, cache, grad):
    f, a_g, a_l, w_g = cache["f"], cache["a_g"], cache["a_l"], cache["w_g"]
    n, c, h, w = f.shape
    d_f = grad * (a_g * a_l)
    d_a = (grad * f).sum(axis=(2, 3), keepdims=True)
    d_ag = d_a * a_l
    d_al = d_a * a_g

    g_l, d_q = p.attn_l.backward(d_al * a_l * (1 - a_l))
    # max-pool routes the gradient to the first arg-max per plane
    flat = w_g.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    d_wg = np.zeros_like(flat)
    np.put_along_axis(d_wg, idx[:, :, None], d_q.reshape(n, c, 1), axis=2)
    d_wg = d_wg.reshape(f.shape)
    d_f += d_wg * a_g
    d_ag += (d_wg * f).sum(axis=(2, 3), keepdims=True)

    g_g, d_p = p.attn_g.backward(d_ag * a_g * (1 - a_g))
    d_f += d_p / (h * w)
    return g_g, g_l, d_f


class MobileIENet:
    """MobileIE in either training (multi-branch) or fused (plain conv) form."""

    def __init__(self, config, stem, slope, body, fst, hdpa, head):
        self.config = config
        self.stem = stem
        self.slope = slope
        self.body = list(body)
        self.fst = list(fst)
        self.hdpa = hdpa
        self.head = head
        self._cache = None

    @classmethod
    def init(cls, config=None, seed=0, dtype=np.float32):
        config = ModelConfig() if config is None else config
        if config.form != "train":
            raise ValueError("networks are initialised in train form; use fuse_network() for the fused form")
        rng = np.random.default_rng(seed)
        C = config.channels
        stem = MBRConvTrain.init(config.in_channels, C, 5, rng, dtype)
        body = [MBRConvTrain.init(C, C, 3, rng, dtype) for _ in range(2)]
        fst = [FSTParams.init(C, dtype) for _ in range(2)]
        hdpa = HDPAParams(MBRConvTrain.init(C, C, 1, rng, dtype), MBRConvTrain.init(C, C, 1, rng, dtype))
        head = MBRConvTrain.init(C, config.head_channels, 3, rng, dtype)
        return cls(config, stem, np.full(C, 0.25, dtype), body, fst, hdpa, head)

    @property
    def form(self):
        return self.config.form

    def mbr_layers(self):
        """Named convolution layers in pipeline order."""
        return {
            "stem": self.stem,
            "body0": self.body[0],
            "body1": self.body[1],
            "hdpa.attn_g": self.hdpa.attn_g,
            "hdpa.attn_l": self.hdpa.attn_l,
            "head": self.head,
        }

    def parameters(self):
        """Trainable arrays by fully qualified name (train form only)."""
        if self.form != "train":
            raise StateError("fused networks are inference-only")
        out = {}
        for name, layer in self.mbr_layers().items():
            for k, v in layer.parameters().items():
                out[f"{name}.{k}"] = v
        out["prelu.slope"] = self.slope
        for i, p in enumerate(self.fst):
            out[f"fst{i}.scale"] = p.scale
            out[f"fst{i}.bias"] = p.bias
        return out

    def state_dict(self):
        """Every stored array (parameters, frozen weights, BN buffers) by name."""
        out = {}
        for name, layer in self.mbr_layers().items():
            if isinstance(layer, FusedConv):
                out[f"{name}.weight"] = layer.kernel
                out[f"{name}.bias"] = layer.bias
            else:
                for k, v in {**layer.parameters(), **layer.buffers()}.items():
                    out[f"{name}.{k}"] = v
        out["prelu.slope"] = self.slope
        for i, p in enumerate(self.fst):
            out[f"fst{i}.scale"] = p.scale
            out[f"fst{i}.bias"] = p.bias
        return out

    @classmethod
    def from_state_dict(cls, config, state, bn_eps=1e-5, bn_momentum=0.1):
        from .reparam import BNParams, ConvBranch

        def take(name):
            try:
                return np.array(state[name])
            except KeyError:
                raise KeyError(f"missing tensor {name!r}") from None

        def mbr(prefix, K):
            branches = []
            i = 0
            while f"{prefix}.branch{i}.kernel" in state:
                p = f"{prefix}.branch{i}"
                bn = BNParams(take(f"{p}.bn.gamma"), take(f"{p}.bn.beta"),
                              take(f"{p}.bn.running_mean"), take(f"{p}.bn.running_var"),
                              eps=bn_eps, momentum=bn_momentum, initialized=True)
                branches.append(ConvBranch(take(f"{p}.kernel"), take(f"{p}.bias"), bn))
                i += 1
            w_pre = take(f"{prefix}.w_pre") if f"{prefix}.w_pre" in state else None
            return MBRConvTrain(K, branches, take(f"{prefix}.w_learn"), take(f"{prefix}.b_out"), w_pre)

        def conv(prefix, K):
            if config.form == "fused":
                k = take(f"{prefix}.weight")
                if k.shape[-1] != K:
                    raise ShapeError(f"{prefix}.weight must be {K}x{K}, got {k.shape}")
                return FusedConv(k, take(f"{prefix}.bias"))
            return mbr(prefix, K)

        net = cls(
            config,
            conv("stem", 5),
            take("prelu.slope"),
            [conv("body0", 3), conv("body1", 3)],
            [FSTParams(take(f"fst{i}.scale"), take(f"fst{i}.bias")) for i in range(2)],
            HDPAParams(conv("hdpa.attn_g", 1), conv("hdpa.attn_l", 1)),
            conv("head", 3),
        )
        expected = set(net.state_dict())
        extra = set(state) - expected
        if extra:
            raise KeyError(f"unexpected tensors for {config}: {sorted(extra)}")
        return net

    def astype(self, dtype):
        """Copy of the network with every array cast to ``dtype``."""
        def cast(layer):
            if isinstance(layer, FusedConv):
                return FusedConv(layer.kernel.astype(dtype), layer.bias.astype(dtype))
            return layer.astype(dtype)
        return MobileIENet(
            self.config, cast(self.stem), self.slope.astype(dtype),
            [cast(b) for b in self.body],
            [FSTParams(p.scale.astype(dtype), p.bias.astype(dtype)) for p in self.fst],
            HDPAParams(cast(self.hdpa.attn_g), cast(self.hdpa.attn_l)),
            cast(self.head),
        )

    @property
    def dtype(self):
        return self.slope.dtype

    # -- forward / backward -------------------------------------------------

    def forward(self, x, mode="eval"):
        """Run the network. ``mode='eval'`` clamps the output to [0, 1]."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"{cfg.variant} expects {cfg.in_channels} input channels, got shape {x.shape}")
        if mode == "train" and self.form != "train":
            raise StateError("fused networks have no training mode")
        x = x.astype(self.dtype, copy=False)
        train = mode == "train"
        cache = {} if train else None

        s = _apply(self.stem, x, mode)
        a = np.where(s >= 0, s, self.slope[:, None, None] * s)
        if train:
            cache["stem_out"] = s
        for i in range(2):
            b = _apply(self.body[i], a, mode)
            if train:
                cache[f"body{i}_out"] = b
            a = fst_forward(self.fst[i], b)
        hd = {} if train else None
        a = hdpa_forward(self.hdpa, a, mode, hd)
        out = _apply(self.head, a, mode)
        if cfg.upscale > 1:
            out = pixel_shuffle(out, cfg.upscale)
        if train:
            cache["hdpa"] = hd
            self._cache = cache
            return out
        self._cache = None
        return np.clip(out, 0.0, 1.0)

    def backward(self, grad_out):
        """Gradients of every trainable parameter given d(loss)/d(output).

        Requires the cache from the immediately preceding ``forward(x, 'train')``.
        The output clamp is not part of the training graph.
        """
        c = self._cache
        if c is None:
            raise StateError("backward needs a cached train-mode forward pass")
        grads = {}

        def collect(prefix, g):
            for k, v in g.items():
                grads[f"{prefix}.{k}"] = v

        g = grad_out.astype(self.dtype, copy=False)
        if self.config.upscale > 1:
            g = pixel_unshuffle(g, self.config.upscale)
        gh, g = self.head.backward(g)
        collect("head", gh)
        g_g, g_l, g = _hdpa_backward(self.hdpa, c["hdpa"], g)
        collect("hdpa.attn_g", g_g)
        collect("hdpa.attn_l", g_l)
        for i in (1, 0):
            b = c[f"body{i}_out"]
            p = self.fst[i]
            grads[f"fst{i}.scale"] = np.array([(g * b * b).sum()], dtype=self.dtype)
            grads[f"fst{i}.bias"] = g.sum(axis=(0, 2, 3))
            g = g * (2 * p.scale[0]) * b
            gb, g = self.body[i].backward(g)
            collect(f"body{i}", gb)
        s = c["stem_out"]
        neg = s < 0
        grads["prelu.slope"] = np.where(neg, g * s, 0).sum(axis=(0, 2, 3))
        g = np.where(neg, self.slope[:, None, None] * g, g)
        gs, _ = self.stem.backward(g, need_input_grad=False)
        collect("stem", gs)
        return grads

    def iwo_freeze(self):
        """Apply an IWO freeze to every MBRConv in the network."""
        if self.form != "train":
            raise StateError("only train-form networks can be frozen")
        for layer in self.mbr_layers().values():
            iwo_freeze(layer)
        return self


def net_forward(net, x, mode="eval"):
    return net.forward(x, mode)


def fuse_network(net):
    """Collapse every MBRConv of a train-form network into a plain convolution."""
    if net.form != "train":
        raise StateError("network is already fused")
    f = {name: fuse_mbrconv(layer) for name, layer in net.mbr_layers().items()}
    cfg = ModelConfig(net.config.channels, net.config.variant, "fused")
    return MobileIENet(
        cfg, f["stem"], net.slope.copy(), [f["body0"], f["body1"]],
        [FSTParams(p.scale.copy(), p.bias.copy()) for p in net.fst],
        HDPAParams(f["hdpa.attn_g"], f["hdpa.attn_l"]), f["head"],
    )


def param_count(net):
    """Per-layer parameter breakdown plus ``'total'``.

    Train-form counts include frozen ``w_pre`` weights but not BN running
    statistics (those are buffers, not parameters).
    """
    out = {}
    for name, layer in net.mbr_layers().items():
        out[name] = layer.num_params if isinstance(layer, FusedConv) else layer.num_params()
    out["prelu"] = net.slope.size
    for i, p in enumerate(net.fst):
        out[f"fst{i}"] = p.scale.size + p.bias.size
    out["total"] = sum(out.values())
    return out


def audit_formula(channels, variant="LLE"):
    """Closed-form fused parameter count."""
    C = channels
    cin, cout, _ = VARIANTS[variant]
    stem = 25 * cin * C + C
    body = 2 * (9 * C * C + C)
    fst = 2 * (1 + C)
    hdpa = 2 * (C * C + C)
    head = 9 * C * cout + cout
    return stem + C + body + fst + hdpa + head
