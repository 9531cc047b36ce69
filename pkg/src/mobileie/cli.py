"""Command-line interface: ``mobileie {train,fuse,verify,infer,eval,bench,inspect}``.

Exit codes: 0 success, 2 usage/input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import archive, dataio, metrics
from .network import MobileIENet, ModelConfig, fuse_network, param_count
from .reparam import FusedConv, StateError
from .training import LVWConfig, TrainConfig, TrainingDiverged, train

log = logging.getLogger("mobileie")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config

_MODEL_KEYS = {"channels", "variant"}
_LOSS_KEYS = {"lvw_eps": "eps", "detach_weights": "detach_weights", "l1_blend": "l1_blend"}
_DATA_KEYS = {"image_size"}


def load_config(path):
    """Flat JSON config -> (ModelConfig, TrainConfig, LVWConfig, extras). Missing keys take defaults."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - _MODEL_KEYS - train_keys - set(_LOSS_KEYS) - _DATA_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        mcfg = ModelConfig(**{k: raw[k] for k in _MODEL_KEYS if k in raw})
        tcfg = TrainConfig(**{k: raw[k] for k in train_keys if k in raw})
        lcfg = LVWConfig(**{v: raw[k] for k, v in _LOSS_KEYS.items() if k in raw})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    extras = {"image_size": int(raw.get("image_size", 64))}
    return mcfg, tcfg, lcfg, extras


def _parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError("size must be positive")
    return h, w


def _load(path, want=None):
    try:
        net, header = archive.load_model(path)
    except (OSError, archive.ArchiveError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    if want is not None and net.form != want:
        raise UsageError(f"{path} holds a {net.form}-form model, {want} form required")
    return net, header


def _random_input(cfg, h, w, rng):
    if cfg.variant == "ISP":
        return rng.random((1, 4, h // 2, w // 2)).astype(np.float32)
    return rng.random((1, cfg.in_channels, h, w)).astype(np.float32)


def _model_input(img, cfg):
    """Image file tensor -> network input for ``cfg.variant``."""
    if cfg.variant == "ISP":
        if img.shape[2] % 2 or img.shape[3] % 2:
            raise ValueError("Bayer mosaic needs even dimensions")
        return dataio.pack_bayer(img[:, :1])
    if img.shape[1] == 1:
        img = np.repeat(img, 3, axis=1)
    return img


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    mcfg, tcfg, lcfg, extras = load_config(args.config)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.synthetic is not None:
        if args.synthetic < 1:
            raise UsageError("--synthetic needs a positive count")
        size = extras["image_size"]
        x, y = dataio.synthetic_dataset(args.synthetic, size, mcfg.variant, seed=tcfg.seed)
        val = dataio.synthetic_dataset(max(4, args.synthetic // 8), size, mcfg.variant, seed=tcfg.seed + 7919)
    else:
        try:
            pairs = dataio.load_pair_dir(args.data, mcfg.variant)
        except (OSError, dataio.ImageFormatError) as exc:
            raise UsageError(str(exc)) from None
        shapes = {p.degraded.shape for _, p in pairs}
        if len(shapes) != 1:
            raise UsageError("training pairs must share one size")
        x = np.concatenate([p.degraded for _, p in pairs])
        y = np.concatenate([p.ground_truth for _, p in pairs])
        val = None
        if (Path(args.data) / "val").is_dir():
            vp = dataio.load_pair_dir(Path(args.data) / "val", mcfg.variant)
            val = (np.concatenate([p.degraded for _, p in vp]), np.concatenate([p.ground_truth for _, p in vp]))

    start = 0
    log_path = out / "train_log.csv"
    if args.resume:
        net, header = _load(args.resume, "train")
        if net.config.channels != mcfg.channels or net.config.variant != mcfg.variant:
            raise UsageError("resume checkpoint does not match the configured model")
        start = int(header.get("epoch") or 0) + 1
    else:
        net = MobileIENet.init(mcfg, seed=tcfg.seed)
        log_path.write_text("epoch,lr,train_loss,val_psnr\n")

    logf = log_path.open("a")

    def on_epoch(rec):
        logf.write(rec.csv() + "\n")
        logf.flush()

    def on_checkpoint(epoch, model):
        archive.save_model(out / f"epoch_{epoch:04d}.miew", model, epoch=epoch)

    try:
        records = train(net, x, y, tcfg, lcfg, val=val, start_epoch=start,
                        on_epoch=on_epoch, on_checkpoint=on_checkpoint)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        logf.close()
    last = records[-1] if records else None
    snapshot = {} if last is None else {"train_loss": last.train_loss, "val_psnr": last.val_psnr}
    archive.save_model(out / "final.miew", net, epoch=tcfg.total_epochs - 1, metrics=snapshot)
    if last is not None:
        print(f"trained {len(records)} epochs: loss {records[0].train_loss:.5f} -> {last.train_loss:.5f}")
    return EXIT_OK


def cmd_fuse(args):
    net, header = _load(args.inp)
    if net.form != "train":
        raise UsageError(f"{args.inp} is already fused")
    try:
        fused = fuse_network(net)
    except StateError as exc:
        raise UsageError(str(exc)) from None
    archive.save_model(args.out, fused, epoch=header.get("epoch"), metrics=header.get("metrics"))
    print(f"fused parameters: {param_count(fused)['total']}")
    return EXIT_OK


def cmd_verify(args):
    net, _ = _load(args.train, "train")
    fused, _ = _load(args.fused, "fused")
    if net.config.channels != fused.config.channels or net.config.variant != fused.config.variant:
        raise UsageError("train and fused archives describe different models")
    h, w = _parse_size(args.size)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        x = _random_input(net.config, h, w, rng)
        worst = max(worst, float(np.abs(net.forward(x) - fused.forward(x)).max()))
    print(f"fused parameters: {param_count(fused)['total']}")
    print(f"max abs deviation over {args.trials} inputs: {worst:.3e} (tol {args.tol:g})")
    return EXIT_OK if worst <= args.tol else EXIT_NUMERIC


def _inputs(path):
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in dataio.IMAGE_SUFFIXES)
    return [path]


def cmd_infer(args):
    net, _ = _load(args.model, "fused")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    files = _inputs(args.inp)
    for p in files:
        try:
            img = dataio.load_image(p)
            res = net.forward(_model_input(img, net.config))
            suffix = p.suffix.lower() if p.suffix.lower() in (".png", ".ppm") else ".ppm"
            dataio.save_image(res, out / (p.stem + suffix))
        except (OSError, ValueError) as exc:
            failures.append(p)
            print(f"error: {p}: {exc}", file=sys.stderr)
    print(f"enhanced {len(files) - len(failures)}/{len(files)} images")
    return EXIT_USAGE if failures or not files else EXIT_OK


def cmd_eval(args):
    net, _ = _load(args.model, "fused")
    try:
        pairs = dataio.load_pair_dir(args.data, net.config.variant)
    except (OSError, dataio.ImageFormatError) as exc:
        raise UsageError(str(exc)) from None
    scores = {"psnr": [], "ssim": [], "mae": []}
    for _, pair in pairs:
        out = net.forward(pair.degraded)
        scores["psnr"].append(metrics.psnr(out, pair.ground_truth))
        scores["ssim"].append(metrics.ssim(out, pair.ground_truth))
        scores["mae"].append(metrics.mae(out, pair.ground_truth))
    print(f"pairs: {len(pairs)}")
    for k, v in scores.items():
        print(f"{k}: {np.mean(v):.6f}")
    return EXIT_OK


def time_forward(net, x, iters, warmup=5):
    """Per-call wall-clock seconds of ``net.forward(x)`` after ``warmup`` calls."""
    for _ in range(warmup):
        net.forward(x)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        net.forward(x)
        times.append(time.perf_counter() - t0)
    return np.array(times)


def cmd_bench(args):
    net, _ = _load(args.model)
    h, w = _parse_size(args.size)
    x = _random_input(net.config, h, w, np.random.default_rng(0))
    forms = [(net.form, net)]
    if net.form == "train":
        forms.append(("fused", fuse_network(net)))
    results = {}
    for name, model in forms:
        t = time_forward(model, x, args.iters)
        results[name] = t
        print(f"{name}: mean {t.mean() * 1e3:.3f} ms, min {t.min() * 1e3:.3f} ms over {args.iters} iters ({h}x{w})")
    if len(results) == 2:
        print(f"speedup (train mean / fused mean): {results['train'].mean() / results['fused'].mean():.2f}x")
    return EXIT_OK


def _integration_kernels(net):
    """1x1 kernels that mix channels: every MBRConv's effective weight, or fused 1x1 convs."""
    out = {}
    for name, layer in net.mbr_layers().items():
        if isinstance(layer, FusedConv):
            if layer.kernel.shape[2:] == (1, 1):
                out[name] = layer.kernel
        else:
            out[name] = layer.w_final
    return out


def _fused_kernels(net):
    if net.form == "train":
        net = fuse_network(net)
    return {name: layer.kernel for name, layer in net.mbr_layers().items()}


def _write_matrix_csv(path, m):
    path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in m) + "\n")


def cmd_inspect(args):
    net, _ = _load(args.model)
    report = Path(args.report)
    report.mkdir(parents=True, exist_ok=True)
    for name, w in _integration_kernels(net).items():
        _write_matrix_csv(report / f"kl_{name}.csv", metrics.kl_channel_matrix(w))
    n_delta = 0
    if args.baseline:
        base, _ = _load(args.baseline)
        if base.config != net.config and (base.config.channels, base.config.variant) != (
                net.config.channels, net.config.variant):
            raise UsageError("baseline model has an incompatible configuration")
        ka, kb = _fused_kernels(net), _fused_kernels(base)
        for name in ka:
            try:
                d = metrics.kernel_delta(ka[name], kb[name])
            except ValueError as exc:
                raise UsageError(f"{name}: {exc}") from None
            d.to_csv(report / f"delta_{name}.csv")
            d.write_pgms(report / f"delta_{name}", stem=name)
            n_delta += 1
    print(f"wrote {len(_integration_kernels(net))} KL matrices and {n_delta} kernel deltas to {report}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="mobileie", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory with degraded/ and clean/ subfolders")
    src.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fuse", help="re-parameterize a training checkpoint")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("verify", help="check fused vs training-form outputs")
    s.add_argument("--train", required=True)
    s.add_argument("--fused", required=True)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--size", default="64x64")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("infer", help="enhance images with a fused model")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="PSNR/SSIM/MAE over a paired directory")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="wall-clock inference latency")
    s.add_argument("--model", required=True)
    s.add_argument("--size", default="400x600")
    s.add_argument("--iters", type=int, default=20)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("inspect", help="KL channel matrices and kernel deltas")
    s.add_argument("--model", required=True)
    s.add_argument("--baseline")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
