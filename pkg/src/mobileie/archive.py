"""``.miew`` weight archives.

Layout (all integers little-endian)::

    b"MIEW" | u16 version | u32 header_len | header (UTF-8 JSON)
    u32 count
    count x { u16 name_len | name (UTF-8) | u8 dtype (0 = float32) | u8 rank
              | rank x u32 dims | float32 payload }

Readers reject anything malformed with :class:`ArchiveError`, whose ``offset``
points at the byte where parsing failed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import MobileIENet, ModelConfig, fuse_network

MAGIC = b"MIEW"
VERSION = 1
DTYPE_F32 = 0
HEADER_OFFSET = 10  # magic + version + header_len
MAX_RANK = 32

__all__ = ["ArchiveError", "WeightArchive", "write_archive", "read_archive",
           "encode_archive", "decode_archive", "save_model", "load_model"]


class ArchiveError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class WeightArchive:
    header: dict
    tensors: dict = field(default_factory=dict)
    header_bytes: bytes | None = None


def _header_bytes(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_archive(archive):
    hb = archive.header_bytes if archive.header_bytes is not None else _header_bytes(archive.header)
    out = [MAGIC, struct.pack("<HI", VERSION, len(hb)), hb, struct.pack("<I", len(archive.tensors))]
    for name, arr in archive.tensors.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ValueError("rank too large")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", DTYPE_F32, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ArchiveError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left",
                               self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_archive(data):
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ArchiveError("bad magic, not a MIEW archive", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ArchiveError(f"unsupported format version {version}", 4)
    (hlen,) = r.unpack("<I", "header length")
    hpos = r.pos
    hb = r.take(hlen, "header")
    try:
        header = json.loads(hb.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"header is not valid UTF-8 JSON: {exc}", hpos) from None
    if not isinstance(header, dict):
        raise ArchiveError("header must be a JSON object", hpos)
    (count,) = r.unpack("<I", "entry count")
    tensors = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveError("tensor name is not valid UTF-8", start + 2) from None
        if name in tensors:
            raise ArchiveError(f"duplicate tensor name {name!r}", start)
        dpos = r.pos
        dtype, rank = r.unpack("<BB", "dtype/rank")
        if dtype != DTYPE_F32:
            raise ArchiveError(f"unsupported dtype code {dtype}", dpos)
        if rank > MAX_RANK:
            raise ArchiveError(f"rank {rank} exceeds the supported maximum {MAX_RANK}", dpos + 1)
        dims = r.unpack(f"<{rank}I", "dims")
        payload = r.take(4 * math.prod(dims), f"payload of {name!r}")
        try:
            tensors[name] = np.frombuffer(payload, "<f4").reshape(dims).astype(np.float32)
        except ValueError as exc:
            raise ArchiveError(f"unrepresentable shape {dims}: {exc}", dpos + 2) from None
    if r.pos != len(data):
        raise ArchiveError(f"{len(data) - r.pos} trailing bytes after last entry", r.pos)
    return WeightArchive(header, tensors, hb)


def write_archive(path, archive):
    Path(path).write_bytes(encode_archive(archive))


def read_archive(path):
    return decode_archive(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model <-> archive


def save_model(path, net, epoch=None, metrics=None, extra=None):
    cfg = net.config
    header = {
        "model": {"channels": cfg.channels, "variant": cfg.variant},
        "form": cfg.form,
        "epoch": epoch,
        "metrics": metrics or {},
    }
    if extra:
        header.update(extra)
    tensors = {k: np.asarray(v, np.float32) for k, v in net.state_dict().items()}
    write_archive(path, WeightArchive(header, tensors))


def model_from_archive(arc):
    try:
        m = arc.header["model"]
        cfg = ModelConfig(int(m["channels"]), m["variant"], arc.header["form"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"header does not describe a model: {exc}", HEADER_OFFSET) from None
    expected = _reference_shapes(cfg)
    for name, arr in arc.tensors.items():
        ref = expected.get(name.replace(".w_pre", ".w_learn"))
        if ref != arr.shape:
            raise ArchiveError(f"tensor {name!r} has shape {arr.shape}, expected {ref}", HEADER_OFFSET)
    try:
        return MobileIENet.from_state_dict(cfg, arc.tensors)
    except (KeyError, ValueError) as exc:
        raise ArchiveError(f"tensors do not match {cfg}: {exc}", HEADER_OFFSET) from None


def _reference_shapes(cfg):
    ref = MobileIENet.init(ModelConfig(cfg.channels, cfg.variant, "train"))
    if cfg.form == "fused":
        for layer in ref.mbr_layers().values():
            for br in layer.branches:
                br.bn.initialized = True
        ref = fuse_network(ref)
    return {k: v.shape for k, v in ref.state_dict().items()}


def load_model(path):
    """Read an archive and rebuild the network. Returns ``(net, header)``."""
    arc = read_archive(path)
    return model_from_archive(arc), arc.header
