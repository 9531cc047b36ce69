"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
"""

import copy
import struct
import time

import numpy as np
import pytest

from mobileie.archive import (
    HEADER_OFFSET,
    ArchiveError,
    WeightArchive,
    decode_archive,
    encode_archive,
    model_from_archive,
)
from mobileie.cli import time_forward
from mobileie.dataio import synthetic_dataset
from mobileie.metrics import kl_channel_matrix, mae, psnr, ssim
from mobileie.network import MobileIENet, ModelConfig, audit_formula, fuse_network, param_count
from mobileie.training import Adam, TrainConfig, evaluate_psnr, lvw_loss, train

from acceptance_report import record
from oracles import kl_scalar, lvw_scalar, mae_scalar, psnr_scalar, ssim_scalar


@pytest.fixture(scope="module")
def checkpoint():
    """A briefly trained C=12 LLE model that has been through one freeze."""
    x, y = synthetic_dataset(16, 32, "LLE", seed=11)
    net = MobileIENet.init(ModelConfig(12), seed=11)
    cfg = TrainConfig(total_epochs=20, warmup_epochs=2, restart_period=10, iwo_freeze_epoch=10, seed=11)
    train(net, x, y, cfg)
    return net


def test_criterion_1_fusion_equivalence(checkpoint):
    t0 = time.perf_counter()
    fused = fuse_network(checkpoint)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        x = rng.random((1, 3, 64, 64)).astype(np.float32)
        worst = max(worst, float(np.abs(checkpoint.forward(x, "eval") - fused.forward(x)).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    assert record(1, ok, f"max |train - fused| = {worst:.2e} over 100 inputs (tol 1e-4), {elapsed:.1f}s")


def _tally(C, c_in, c_out):
    layers = [(5, c_in, C), (3, C, C), (3, C, C), (1, C, C), (1, C, C), (3, C, c_out)]
    return sum(k * k * i * o + o for k, i, o in layers) + C + 2 * (1 + C)


def test_criterion_2_parameter_audit():
    counts = {}
    for C in (4, 8, 12):
        net = MobileIENet.init(ModelConfig(C), seed=0)
        net.forward(np.zeros((1, 3, 8, 8), np.float32), "train")
        counts[C] = param_count(fuse_network(net))["total"]
    ok = counts[12] == 4205 and all(counts[C] == audit_formula(C) == _tally(C, 3, 3) for C in counts)
    assert record(2, ok, f"fused totals {counts}, C=12 expected 4205")


def test_criterion_3_gradient_suite():
    t0 = time.perf_counter()
    h = 1e-3
    net = MobileIENet.init(ModelConfig(4), seed=1, dtype=np.float64)
    x = np.random.default_rng(2).random((1, 3, 8, 8))
    proj = np.random.default_rng(3).standard_normal((1, 3, 8, 8))

    def probe():
        out = net.forward(x, "train")
        c = net._cache
        # sign pattern of every non-smooth op; a change means the FD interval straddles a kink
        kinks = (c["stem_out"] >= 0).tobytes() + c["hdpa"]["w_g"].reshape(1, 4, -1).argmax(axis=2).tobytes()
        return float((out * proj).sum()), kinks

    net.forward(x, "train")
    grads = net.backward(proj)
    worst, worst_name, crossings = 0.0, "", 0
    for name, arr in net.parameters().items():
        num = np.empty_like(arr)
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + h
            fp, kp = probe()
            arr.flat[i] = old - h
            fm, km = probe()
            arr.flat[i] = old
            crossings += kp != km
            num.flat[i] = (fp - fm) / (2 * h)
        # per-class relative error; the floor covers classes whose exact gradient is zero
        rel = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(grads[name]), np.linalg.norm(num), 1e-6)
        if rel > worst:
            worst, worst_name = rel, name

    frozen = MobileIENet.init(ModelConfig(4), seed=1, dtype=np.float64).iwo_freeze()
    frozen.forward(x, "train")
    g = frozen.backward(proj)
    before = {k: layer.w_pre.copy() for k, layer in frozen.mbr_layers().items()}
    Adam().step(frozen.parameters(), g, 1e-2)
    w_pre_still = all(np.array_equal(before[k], layer.w_pre) for k, layer in frozen.mbr_layers().items())
    w_pre_free = not any("w_pre" in k for k in g) and w_pre_still

    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and crossings == 0 and w_pre_free and elapsed < 120
    assert record(3, ok, f"{len(grads)} parameter tensors, worst rel {worst:.1e} ({worst_name}), "
                         f"kink crossings {crossings}, w_pre gradient-free {w_pre_free}, {elapsed:.0f}s")


def test_criterion_4_lvw_oracle():
    rng = np.random.default_rng(44)
    worst = 0.0
    for _ in range(50):
        o, l = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))
        worst = max(worst, abs(lvw_loss(o, l).loss - lvw_scalar(o, l)))
    o = rng.random((2, 3, 8, 8))
    perfect = lvw_loss(o, o.copy()).loss
    l = rng.integers(0, 192, (2, 3, 8, 8)) / 256.0
    constant = lvw_loss(l + 0.25, l).loss
    ok = worst <= 1e-6 and perfect == 0.0 and constant == 0.0
    assert record(4, ok, f"max |loss - scalar| = {worst:.1e} on 50 pairs, perfect -> {perfect}, constant -> {constant}")


@pytest.mark.slow
def test_criterion_5_desk_scale_training():
    t0 = time.perf_counter()
    x, y = synthetic_dataset(200, 64, "LLE", seed=0)
    vx, vy = synthetic_dataset(20, 64, "LLE", seed=100)
    net = MobileIENet.init(ModelConfig(12), seed=0)
    cfg = TrainConfig(total_epochs=300, warmup_epochs=10, restart_period=50, iwo_freeze_epoch=150,
                      batch_size=8, seed=0)
    train(net, x, y, cfg)
    baseline = float(np.mean([psnr(vx[i], vy[i]) for i in range(len(vx))]))
    model = evaluate_psnr(net, vx, vy)
    elapsed = time.perf_counter() - t0
    ok = model - baseline >= 6.0 and elapsed < 30 * 60
    assert record(5, ok, f"held-out PSNR {model:.2f} dB vs degraded {baseline:.2f} dB "
                         f"(gain {model - baseline:+.2f}, need +6), {elapsed / 60:.1f} min")


def test_criterion_6_iwo_direction():
    rows = []
    freeze_shift = 0.0
    for seed in range(3):
        x, y = synthetic_dataset(16, 32, "LLE", seed)
        vx, vy = synthetic_dataset(4, 32, "LLE", seed + 50)
        base = dict(total_epochs=300, warmup_epochs=10, restart_period=50, batch_size=8, seed=seed)
        net = MobileIENet.init(ModelConfig(12), seed=seed)
        opt = Adam()
        train(net, x, y, TrainConfig(**base, iwo_freeze_epoch=None), optimizer=opt, end_epoch=200)

        probe = copy.deepcopy(net)
        before = evaluate_psnr(probe, vx, vy)
        probe.iwo_freeze()
        freeze_shift = max(freeze_shift, abs(evaluate_psnr(probe, vx, vy) - before))

        final = {}
        for arm, freeze_at in (("plain", None), ("iwo", 200)):
            n2, o2 = copy.deepcopy(net), copy.deepcopy(opt)
            recs = train(n2, x, y, TrainConfig(**base, iwo_freeze_epoch=freeze_at), start_epoch=200, optimizer=o2)
            final[arm] = recs[-1].train_loss
        rows.append(final)
    ok = all(r["iwo"] <= r["plain"] for r in rows) and freeze_shift <= 1e-6
    detail = ", ".join(f"seed {s}: iwo {r['iwo']:.5f} vs plain {r['plain']:.5f}" for s, r in enumerate(rows))
    assert record(6, ok, f"{detail}; freeze PSNR shift {freeze_shift:.1e}")


def test_criterion_7_fused_speedup(checkpoint):
    fused = fuse_network(checkpoint)
    x = np.random.default_rng(0).random((1, 3, 400, 600)).astype(np.float32)
    t_train = time_forward(checkpoint, x, iters=10).mean()
    t_fused = time_forward(fused, x, iters=10).mean()
    ratio = t_train / t_fused
    ok = ratio >= 3.0
    assert record(7, ok, f"600x400 train form {t_train * 1e3:.0f} ms, fused {t_fused * 1e3:.0f} ms, "
                         f"speedup {ratio:.2f}x (need >= 3x)")


def _structural_offsets(data):
    """Byte offsets outside the JSON header and float payloads."""
    offsets = list(range(HEADER_OFFSET))
    (hlen,) = struct.unpack_from("<I", data, 6)
    pos = HEADER_OFFSET + hlen
    offsets += range(pos, pos + 4)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        rank = data[pos + 3 + nlen]
        meta = 2 + nlen + 2 + 4 * rank
        dims = struct.unpack_from(f"<{rank}I", data, pos + 4 + nlen)
        offsets += range(pos, pos + meta)
        pos += meta + 4 * int(np.prod(dims, dtype=np.int64))
    return offsets


def _load_bytes(data):
    return model_from_archive(decode_archive(data))


def test_criterion_8_archive_format(checkpoint):
    state = {k: np.asarray(v, np.float32) for k, v in checkpoint.state_dict().items()}
    header = {"model": {"channels": 12, "variant": "LLE"}, "form": "train", "epoch": 19, "metrics": {}}
    data = encode_archive(WeightArchive(header, state))
    back = decode_archive(data)
    exact = (encode_archive(back) == data and back.tensors.keys() == state.keys()
             and all(back.tensors[k].tobytes() == state[k].tobytes() for k in state))
    restored = _load_bytes(data).state_dict()
    exact = exact and all(np.asarray(restored[k], np.float32).tobytes() == state[k].tobytes() for k in state)

    rng = np.random.default_rng(8)
    structural = _structural_offsets(data)
    corpus = [data[:int(n)] for n in rng.integers(0, len(data), 50)]
    for off in rng.choice(structural, 50, replace=False):
        buf = bytearray(data)
        buf[off] ^= 1 << int(rng.integers(0, 8))
        corpus.append(bytes(buf))
    rejected, crashes = 0, []
    for blob in corpus:
        try:
            _load_bytes(blob)
        except ArchiveError:
            rejected += 1
        except Exception as exc:  # anything else is a crash
            crashes.append(type(exc).__name__)

    # flips inside float payloads are undetectable without a checksum; they must still not crash
    for off in rng.integers(0, len(data), 100):
        buf = bytearray(data)
        buf[off] ^= 1 << int(rng.integers(0, 8))
        try:
            _load_bytes(bytes(buf))
        except ArchiveError:
            pass
        except Exception as exc:
            crashes.append(type(exc).__name__)

    ok = exact and rejected == len(corpus) and not crashes
    assert record(8, ok, f"round-trip bit-exact {exact}, {rejected}/{len(corpus)} corrupted archives rejected, "
                         f"crashes {crashes or 0}")


def test_criterion_9_metric_oracles():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(3):
        a = rng.random((3, 16, 16))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        worst = max(worst, abs(psnr(a, b) - psnr_scalar(a, b)), abs(mae(a, b) - mae_scalar(a, b)),
                    abs(ssim(a, b) - ssim_scalar(a, b)))
    for _ in range(3):
        w = rng.standard_normal((6, 8, 1, 1))
        worst = max(worst, float(np.abs(kl_channel_matrix(w) - kl_scalar(w)).max()))
    twenty = psnr(np.zeros((3, 8, 8)), np.full((3, 8, 8), 0.1))
    ok = worst <= 1e-6 and twenty == 20.0
    assert record(9, ok, f"max |metric - scalar oracle| = {worst:.1e}, uniform 0.1 difference -> {twenty!r} dB")
