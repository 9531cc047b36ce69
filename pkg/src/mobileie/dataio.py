"""Image files, Bayer packing and synthetic degraded/clean pairs.

Images are ``(1, c, h, w)`` float32 tensors in [0, 1]. Binary PPM/PGM are
parsed here directly; PNG goes through Pillow.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ImageFormatError",
    "ImagePair",
    "load_image",
    "save_image",
    "encode_pnm",
    "decode_pnm",
    "bayer_mosaic",
    "pack_bayer",
    "synth_clean",
    "synth_degrade",
    "synthetic_dataset",
    "load_pair_dir",
    "IMAGE_SUFFIXES",
]

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


class ImageFormatError(IOError):
    """Unsupported or malformed image data; ``offset`` is the failing byte."""

    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ImagePair:
    degraded: np.ndarray
    ground_truth: np.ndarray


# ---------------------------------------------------------------------------
# PNM


def _pnm_token(data, pos):
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PNM header", start)
    return data[start:pos], pos


def decode_pnm(data):
    """Decode binary P5/P6 bytes (maxval 255) to a uint8 array (c, h, w)."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM magic {magic!r}", 0)
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _pnm_token(data, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad PNM header field {tok!r}", start)
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PNM is supported (maxval {maxval})", pos)
    if w < 1 or h < 1:
        raise ImageFormatError("PNM dimensions must be positive", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after PNM header", pos)
    pos += 1
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    if len(data) - pos < need:
        raise ImageFormatError(f"truncated PNM payload: need {need} bytes, have {len(data) - pos}",
                               len(data))
    px = np.frombuffer(data, np.uint8, need, pos).reshape(h, w, c)
    return px.transpose(2, 0, 1).copy()


def encode_pnm(px):
    """Encode a uint8 array (c, h, w), c in {1, 3}, as binary PGM/PPM."""
    c, h, w = px.shape
    magic = {1: "P5", 3: "P6"}.get(c)
    if magic is None:
        raise ImageFormatError(f"PNM needs 1 or 3 channels, got {c}")
    return f"{magic}\n{w} {h}\n255\n".encode() + np.ascontiguousarray(px.transpose(1, 2, 0)).tobytes()


def _quantize(t):
    t = np.asarray(t)
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError("save_image takes a single image (n == 1)")
        t = t[0]
    return np.round(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path):
    """Read PNG (8-bit gray/RGB/RGBA) or binary PPM/PGM into (1, c, h, w) float32."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        px = decode_pnm(data)
    elif data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image
        try:
            with Image.open(io.BytesIO(data)) as im:
                im.load()
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB")
                arr = np.asarray(im)
        except (OSError, SyntaxError, ValueError) as exc:
            raise ImageFormatError(f"{path}: unreadable PNG: {exc}") from exc
        if arr.dtype != np.uint8:
            raise ImageFormatError(f"{path}: only 8-bit PNG is supported")
        px = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    else:
        raise ImageFormatError(f"{path}: unsupported image format", 0)
    return (px.astype(np.float32) / 255.0)[None]


def save_image(t, path):
    """Clamp to [0, 1], quantise with ``round(v * 255)`` and write by extension."""
    path = Path(path)
    px = _quantize(t)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        path.write_bytes(encode_pnm(px))
    elif suffix == ".png":
        from PIL import Image
        arr = px[0] if px.shape[0] == 1 else px.transpose(1, 2, 0)
        Image.fromarray(arr).save(path, format="PNG")
    else:
        raise ImageFormatError(f"unsupported output extension {suffix!r}")


# ---------------------------------------------------------------------------
# Bayer


def bayer_mosaic(rgb):
    """RGGB mosaic of an RGB tensor (n, 3, h, w) -> (n, 1, h, w)."""
    n, _, h, w = rgb.shape
    if h % 2 or w % 2:
        raise ValueError("Bayer mosaic needs even height and width")
    m = np.empty((n, 1, h, w), rgb.dtype)
    m[:, 0, 0::2, 0::2] = rgb[:, 0, 0::2, 0::2]
    m[:, 0, 0::2, 1::2] = rgb[:, 1, 0::2, 1::2]
    m[:, 0, 1::2, 0::2] = rgb[:, 1, 1::2, 0::2]
    m[:, 0, 1::2, 1::2] = rgb[:, 2, 1::2, 1::2]
    return m


def pack_bayer(mosaic):
    """(n, 1, h, w) RGGB mosaic -> (n, 4, h/2, w/2) planes ordered R, G1, G2, B."""
    m = mosaic[:, 0]
    return np.stack([m[:, 0::2, 0::2], m[:, 0::2, 1::2], m[:, 1::2, 0::2], m[:, 1::2, 1::2]], axis=1)


# ---------------------------------------------------------------------------
# synthetic data


def synth_clean(h, w, seed):
    """Procedural 'natural-ish' RGB image: smooth gradients, blobs, edges, texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    img = np.empty((3, h, w))
    base = rng.uniform(0.2, 0.8, 3)
    grad = rng.uniform(-0.3, 0.3, (3, 2))
    for c in range(3):
        img[c] = base[c] + grad[c, 0] * (xx - 0.5) + grad[c, 1] * (yy - 0.5)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.35)
        color = rng.uniform(0, 1, 3)
        d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / r ** 2
        if rng.random() < 0.5:
            mask = 1.0 / (1.0 + np.exp((np.sqrt(d2) - 1.0) * 12.0))  # soft disc
        else:
            mask = np.exp(-d2)
        img = img * (1 - mask) + color[:, None, None] * mask
    for _ in range(rng.integers(1, 3)):
        y0, x0 = rng.uniform(0, 0.7, 2)
        y1, x1 = y0 + rng.uniform(0.1, 0.4), x0 + rng.uniform(0.1, 0.4)
        mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        img[:, mask] = rng.uniform(0, 1, 3)[:, None]
    freq = rng.uniform(4, 16, 2)
    phase = rng.uniform(0, 2 * np.pi)
    img += rng.uniform(0.0, 0.08) * np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy) + phase)
    return np.clip(img, 0, 1).astype(np.float32)[None]


def synth_degrade(clean, task="LLE", seed=0, gamma=None, noise=None):
    """Deterministically degrade a clean (1, 3, h, w) image.

    LLE: ``clean ** gamma`` with gamma ~ U[2, 5] plus Gaussian noise (sigma 0.02).
    UIE: per-channel attenuation plus green-blue haze.
    ISP: RGGB mosaic packed into 4 half-resolution planes plus noise (sigma 0.01).
    ``gamma`` and ``noise`` override the random draws.
    """
    rng = np.random.default_rng(seed)
    clean = np.asarray(clean, np.float64)
    if task == "LLE":
        g = rng.uniform(2.0, 5.0) if gamma is None else gamma
        sigma = 0.02 if noise is None else noise
        out = clean ** g + rng.normal(0.0, 1.0, clean.shape) * sigma
    elif task == "UIE":
        att = np.array([rng.uniform(0.3, 0.5), rng.uniform(0.8, 1.0), rng.uniform(0.7, 0.9)])
        haze = np.array([0.05, 0.35, 0.3]) * rng.uniform(0.5, 1.0)
        t = rng.uniform(0.6, 0.9)
        sigma = 0.0 if noise is None else noise
        out = (clean * att[None, :, None, None]) * t + haze[None, :, None, None] * (1 - t)
        out = out + rng.normal(0.0, 1.0, clean.shape) * sigma
    elif task == "ISP":
        sigma = 0.01 if noise is None else noise
        packed = pack_bayer(bayer_mosaic(clean))
        out = packed + rng.normal(0.0, 1.0, packed.shape) * sigma
    else:
        raise ValueError(f"unknown task {task!r}")
    return ImagePair(np.clip(out, 0, 1).astype(np.float32), clean.astype(np.float32))


def synthetic_dataset(n, size=64, task="LLE", seed=0):
    """``n`` stacked synthetic pairs: returns (degraded, clean) arrays."""
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n)]
    pairs = [synth_degrade(synth_clean(size, size, s), task, s + 1) for s in seeds]
    return (np.concatenate([p.degraded for p in pairs]),
            np.concatenate([p.ground_truth for p in pairs]))


def load_pair_dir(root, variant="LLE"):
    """Load ``root/degraded/*`` and ``root/clean/*`` pairs matched by file stem.

    For ISP the degraded files are single-channel full-resolution RGGB mosaics.
    """
    root = Path(root)
    deg = {p.stem: p for p in sorted((root / "degraded").iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    gt = {p.stem: p for p in sorted((root / "clean").iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    names = sorted(deg.keys() & gt.keys())
    if not names:
        raise FileNotFoundError(f"no matching degraded/clean pairs under {root}")
    pairs = []
    for name in names:
        d = load_image(deg[name])
        if variant == "ISP":
            d = pack_bayer(d[:, :1])
        pairs.append((name, ImagePair(d, load_image(gt[name]))))
    return pairs
