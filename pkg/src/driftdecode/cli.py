"""Command-line entry point: ``driftdecode {train,eval,bench-latency,drift-inspect}``.

Every artifact of an invocation lives in one run directory,
``$DRIFTDECODE_RUNS/<UTC timestamp>_seed<seed>`` (``./runs`` when the
variable is unset) unless ``--run-dir`` names one explicitly.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import rng as rngmod
from .channel import ChannelKind, complex_noise, equalize_zf, realize, transmit
from .config import ConfigError, load_config, snapshot
from .data import DatasetSpec, open_source
from .driftfield import drift_field, flatten_locations, normalize_rows
from .evaluation import evaluate, reports_to_csv
from .features import build_extractor, extract
from .models import JSCCSystem, build_system, count_flops, decode, encode
from .training import extractor_spec_from_meta, fit, load_eval_system

log = logging.getLogger("driftdecode")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def make_run_dir(seed: int, explicit=None) -> Path:
    if explicit is not None:
        path = Path(explicit)
    else:
        root = Path(os.environ.get("DRIFTDECODE_RUNS", "runs"))
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S_%f")
        path = root / f"{stamp}_seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(run_dir: Path, command: str, config: dict, seed: int, outputs: dict) -> Path:
    """Written once, before work starts; completion goes to ``completion.json``."""
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "master_seed": seed,
        "code_version": __version__,
        "torch_version": torch.__version__,
        "start_time": _now(),
        "outputs": outputs,
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def write_completion(run_dir: Path, status: str, **extra) -> None:
    record = {"status": status, "end_time": _now(), **extra}
    (run_dir / "completion.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _dataset_spec(kind, path, split, limit=None, crop=None, hflip=False, seed=0) -> DatasetSpec:
    return DatasetSpec(kind=kind, path=str(path), split=split, limit=limit, crop=crop, hflip=hflip, seed=seed)


# -- train -----------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides)
    seed = cfg.train.seed
    d = cfg.data
    train_source = open_source(_dataset_spec(d["dataset"], d["data_path"], "train", d["train_limit"], d["crop"],
                                             d["hflip"], seed))
    val_source = None
    if cfg.train.val_images > 0:
        val_path = d["val_path"] or d["data_path"]
        split = d["val_split"] if d["dataset"] == "mnist_idx" else "train"
        val_source = open_source(_dataset_spec(d["dataset"], val_path, split, d["val_limit"], d["crop"], False, seed))
    try:
        model_cfg = cfg.model_config(train_source.shape)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid [model] settings: {exc}") from exc
    run_dir = make_run_dir(seed, args.run_dir)
    write_manifest(run_dir, "train", cfg.to_dict(), seed, {
        "run_dir": str(run_dir),
        "checkpoints": str(run_dir / "checkpoints"),
        "train_log": str(run_dir / "train_log.jsonl"),
        "metrics": str(run_dir / "metrics.jsonl"),
    })
    (run_dir / "config.json").write_text(snapshot(cfg))
    final = fit(train_source, cfg.train, run_dir, model_cfg=model_cfg,
                extractor_spec=cfg.extractor_spec(model_cfg.image_shape[0]), val_source=val_source,
                resume=args.resume)
    write_completion(run_dir, "ok", final_checkpoint=str(final))
    print(final)
    return EXIT_OK


# -- eval ------------------------------------------------------------------


def cmd_eval(args) -> int:
    snrs = _floats(args.snrs)
    try:
        kinds = [ChannelKind.parse(k.strip()) for k in args.channel.split(",") if k.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc), "channel") from exc
    ckpt = Path(args.checkpoint)
    system, meta = load_eval_system(ckpt, use_ema=not args.live)
    source = open_source(_dataset_spec(args.dataset, args.data, args.split, args.limit))
    if tuple(source.shape) != tuple(system.cfg.image_shape):
        raise ValueError(f"dataset image shape {tuple(source.shape)} does not match checkpoint "
                         f"model shape {tuple(system.cfg.image_shape)}")
    extractor = build_extractor(extractor_spec_from_meta(meta))
    run_dir = make_run_dir(args.seed, args.run_dir)
    out = Path(args.out) if args.out else run_dir / "eval.csv"
    write_manifest(run_dir, "eval", {"checkpoint": str(ckpt), "data": str(args.data), "split": args.split,
                                     "snrs": snrs, "channels": [k.value for k in kinds], "limit": args.limit,
                                     "weights": "live" if args.live else "ema"},
                   args.seed, {"csv": str(out)})
    reports = []
    for kind in kinds:
        reports += evaluate(system, source, snrs, kind, args.seed, extractor, batch_size=args.batch)
    text = reports_to_csv(reports)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    write_completion(run_dir, "ok", rows=len(reports))
    sys.stdout.write(text)
    return EXIT_OK


# -- bench-latency ---------------------------------------------------------


def _bench_system(args) -> JSCCSystem:
    if args.checkpoint:
        system, _ = load_eval_system(args.checkpoint)
        return system
    cfg = load_config(args.config, args.set or [])
    return build_system(cfg.model_config(), args.seed).eval()


def cmd_bench_latency(args) -> int:
    if not args.checkpoint and not args.config:
        raise ConfigError("bench-latency needs --checkpoint or --config")
    if args.repeats < 1:
        raise ConfigError("repeats must be >= 1", "repeats")
    system = _bench_system(args)
    cfg = system.cfg
    g = rngmod.torch_stream(args.seed, rngmod.PURPOSE_EVAL, 0, 0)
    x = torch.rand(args.batch, *cfg.image_shape, generator=g)
    with torch.no_grad():
        z = encode(system.encoder, x)
        ch, _ = realize(ChannelKind.AWGN, 10.0, g)
        y = equalize_zf(transmit(z, ch, noise=complex_noise(z.symbols.shape, ch.noise_var, g)), ch)
        dec = system.decoder
        for _ in range(args.warmup):
            decode(dec, y)
        times = []
        calls_before = dec.forward_calls
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            decode(dec, y)
            times.append((time.perf_counter() - t0) * 1000.0)
        calls = dec.forward_calls - calls_before
    if calls != args.repeats:
        raise RuntimeError(f"expected one decoder forward per decode, counted {calls} for {args.repeats}")
    enc_gflops, dec_gflops = count_flops(cfg)
    report = {
        "image_shape": list(cfg.image_shape),
        "batch": args.batch,
        "repeats": args.repeats,
        "warmup": args.warmup,
        "median_ms": statistics.median(times),
        "p90_ms": float(np.percentile(times, 90)),
        "per_image_median_ms": statistics.median(times) / args.batch,
        "steps": calls // args.repeats,
        "encoder_gflops": enc_gflops,
        "decoder_gflops": dec_gflops,
        "threads": torch.get_num_threads(),
        "device": "cpu",
    }
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


# -- drift-inspect ---------------------------------------------------------


def _load_png(path) -> torch.Tensor:
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        im = im.convert("L") if im.mode in ("L", "I", "I;16", "1") else im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def _inspect_inputs(args):
    """``(recon, gt, extractor_spec)`` from an image pair or a checkpoint sample."""
    if args.images:
        recon, gt = (_load_png(p) for p in args.images)
        if recon.shape != gt.shape:
            raise ValueError(f"image shapes differ: {tuple(recon.shape)} vs {tuple(gt.shape)}")
        overrides = list(args.set or [])
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        return recon, gt, cfg.extractor_spec(recon.shape[0])
    if not (args.checkpoint and args.data):
        raise ConfigError("drift-inspect needs --images RECON GT or --checkpoint with --data")
    system, meta = load_eval_system(args.checkpoint)
    source = open_source(_dataset_spec(args.dataset, args.data, args.split))
    if args.index >= len(source):
        raise ValueError(f"index {args.index} out of range for {len(source)} images")
    gt = source.get(args.index)
    if tuple(gt.shape) != tuple(system.cfg.image_shape):
        raise ValueError(f"dataset image shape {tuple(gt.shape)} does not match checkpoint "
                         f"model shape {tuple(system.cfg.image_shape)}")
    seed = 0 if args.seed is None else args.seed
    g = rngmod.torch_stream(seed, rngmod.PURPOSE_EVAL, int(round(args.snr * 1000)), args.index)
    ch, _ = realize(args.channel, args.snr, g, redraw=True)
    with torch.no_grad():
        z = encode(system.encoder, gt[None])
        y = transmit(z, ch, noise=complex_noise(z.symbols.shape, ch.noise_var, g))
        recon = decode(system.decoder, equalize_zf(y, ch))[0]
    return recon, gt, extractor_spec_from_meta(meta)


def cmd_drift_inspect(args) -> int:
    temps = tuple(_floats(args.temps))
    if not temps or any(t <= 0 for t in temps):
        raise ConfigError("temps must be positive", "temps")
    recon, gt, spec = _inspect_inputs(args)
    extractor = build_extractor(spec)
    seed = spec.seed
    run_dir = make_run_dir(seed, args.run_dir)
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(run_dir, "drift-inspect",
                   {"temps": list(temps), "images": args.images, "checkpoint": args.checkpoint,
                    "extractor": {"kind": spec.kind.value, "layers": list(spec.layers), "seed": spec.seed}},
                   seed, {"weights": str(out_dir / "weights.csv"), "drift": str(out_dir / "drift.csv"),
                          "summary": str(out_dir / "summary.json")})
    with torch.no_grad():
        pr, pg = extract(extractor, recon[None]), extract(extractor, gt[None])
    summary = {"temps": list(temps), "layers": {}}
    with open(out_dir / "weights.csv", "w", newline="") as fw, open(out_dir / "drift.csv", "w", newline="") as fd:
        ww, wd = csv.writer(fw, lineterminator="\n"), csv.writer(fd, lineterminator="\n")
        ww.writerow(("layer", "tau", "k", "j", "weight"))
        wd.writerow(("layer", "k", "drift_norm"))
        for name in pr.maps:
            f = normalize_rows(flatten_locations(pr.maps[name][0].double()))
            g_ = normalize_rows(flatten_locations(pg.maps[name][0].double()))
            res = drift_field(f, g_, temps, keep_weights=True, chunk_threshold=max(4096, f.shape[0]))
            K = f.shape[0]
            layer = {"K": K, "diagonal_mass": {}, "drift_rms": {}}
            for tau in temps:
                W = res.weights[tau].numpy()
                for k in range(K):
                    for j in range(K):
                        ww.writerow((name, repr(tau), k, j, repr(float(W[k, j]))))
                layer["diagonal_mass"][repr(tau)] = float(np.diag(W).mean())
                layer["drift_rms"][repr(tau)] = float(res.drifts[tau].pow(2).sum(-1).mean().sqrt())
            norms = res.field.norm(dim=-1)
            for k in range(K):
                wd.writerow((name, k, repr(float(norms[k]))))
            layer["loss"] = float(res.loss)
            summary["layers"][name] = layer
    summary["weight_rows"] = len(temps) * sum(v["K"] ** 2 for v in summary["layers"].values())
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_completion(run_dir, "ok")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="driftdecode", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an encoder/decoder pair")
    t.add_argument("--config", help="config file (see driftdecode.config)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--seed", type=int, help="master seed (overrides the config)")
    t.add_argument("--run-dir", help="explicit run directory")
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint over an SNR grid")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--dataset", default="mnist_idx", choices=("mnist_idx", "image_folder"))
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--snrs", default="0,5,10,15", help="comma-separated SNRs in dB")
    e.add_argument("--channel", default="awgn", help="awgn, rayleigh or both comma-separated")
    e.add_argument("--limit", type=int, help="evaluate the first N images only")
    e.add_argument("--batch", type=int, default=256)
    e.add_argument("--seed", type=int, default=0, help="evaluation channel seed")
    e.add_argument("--live", action="store_true", help="use live instead of EMA weights")
    e.add_argument("--out", help="CSV path (default: <run dir>/eval.csv)")
    e.add_argument("--run-dir")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-latency", help="time one-step decoding and report FLOPs")
    b.add_argument("--checkpoint")
    b.add_argument("--config", help="build a randomly initialized model from [model] instead")
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.add_argument("--repeats", type=int, default=100)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="also write the JSON report here")
    b.set_defaults(func=cmd_bench_latency)

    d = sub.add_parser("drift-inspect", help="export drift-field weights and directions")
    d.add_argument("--images", nargs=2, metavar=("RECON", "GT"), help="PNG pair")
    d.add_argument("--checkpoint")
    d.add_argument("--data")
    d.add_argument("--dataset", default="mnist_idx", choices=("mnist_idx", "image_folder"))
    d.add_argument("--split", default="test", choices=("train", "test"))
    d.add_argument("--index", type=int, default=0)
    d.add_argument("--snr", type=float, default=10.0)
    d.add_argument("--channel", default="awgn")
    d.add_argument("--temps", default="0.05,0.2")
    d.add_argument("--config", help="extractor settings for --images mode")
    d.add_argument("--set", action="append", metavar="KEY=VALUE")
    d.add_argument("--seed", type=int)
    d.add_argument("--out", help="output directory (default: the run directory)")
    d.add_argument("--run-dir")
    d.set_defaults(func=cmd_drift_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version and 2 for usage errors
        return EXIT_OK if not exc.code else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
