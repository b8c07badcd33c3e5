"""Joint encoder/decoder training with the MSE + drift objective."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from . import rng as rngmod
from .archive import load_archive, save_archive
from .channel import (
    ChannelKind,
    complex_noise,
    equalize_zf,
    realize,
    stack_realizations,
    transmit,
)
from .data import batches
from .driftfield import drift_loss
from .evaluation import evaluate
from .features import ExtractorSpec, build_extractor, extract
from .models import JSCCSystem, ModelConfig, build_system, decode, encode

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_mse: float = 5.0
    lambda_drift: float = 0.15
    temps: tuple = (0.05, 0.2)
    snr_range_db: tuple = (0.0, 20.0)
    batch: int = 128
    epochs: int = 100
    lr: float = 1e-3
    warmup_steps: int = 500
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    clip_norm: float = 2.0
    ema_decay: float = 0.9995
    channel: str = "awgn"
    seed: int = 0
    adam_eps: float = 1e-8
    eps_norm: float = 1e-8
    eps_agg: float = 1e-8
    h_floor: float = 1e-6
    val_snrs: tuple = (0.0, 5.0, 10.0, 15.0)
    val_images: int = 256
    val_every: int = 0
    checkpoint_every: int = 0
    debug: bool = False

    def __post_init__(self):
        self.temps = tuple(float(t) for t in self.temps)
        self.snr_range_db = tuple(float(v) for v in self.snr_range_db)
        self.betas = tuple(float(v) for v in self.betas)
        self.val_snrs = tuple(float(v) for v in self.val_snrs)
        self.channel = ChannelKind.parse(self.channel).value
        if self.lambda_mse < 0 or self.lambda_drift < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_mse == 0 and self.lambda_drift == 0:
            raise ValueError("lambda_mse and lambda_drift cannot both be 0")
        if len(self.snr_range_db) != 2 or self.snr_range_db[0] > self.snr_range_db[1]:
            raise ValueError(f"snr_range_db must be [lo, hi] with lo <= hi, got {self.snr_range_db}")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must be in (0, 1)")
        if self.batch < 1 or self.epochs < 0 or self.warmup_steps < 0:
            raise ValueError("batch >= 1, epochs >= 0 and warmup_steps >= 0 are required")
        if not self.temps or any(t <= 0 for t in self.temps):
            raise ValueError("temps must be a non-empty set of positive temperatures")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class TrainState:
    system: JSCCSystem
    optimizer: torch.optim.Optimizer
    ema: dict
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    redraws: int = 0
    model_cfg: ModelConfig | None = None
    extractor_spec: ExtractorSpec | None = None
    history: list = field(default_factory=list)

    def params(self) -> dict:
        return dict(self.system.named_parameters())


def make_optimizer(system: JSCCSystem, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(system.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps,
                             weight_decay=cfg.weight_decay)


def init_state(model_cfg: ModelConfig, cfg: TrainConfig, extractor_spec: ExtractorSpec | None = None) -> TrainState:
    system = build_system(model_cfg, cfg.seed)
    ema = {name: p.detach().clone() for name, p in system.named_parameters()}
    return TrainState(system, make_optimizer(system, cfg), ema, model_cfg=model_cfg,
                      extractor_spec=extractor_spec or ExtractorSpec(seed=cfg.seed))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps`` optimizer steps, then constant."""
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


@torch.no_grad()
def ema_update(state: TrainState, decay: float) -> None:
    for name, p in state.system.named_parameters():
        state.ema[name].mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def ema_apply(state: TrainState) -> JSCCSystem:
    """A copy of the system carrying the EMA shadow parameters; live params untouched."""
    shadow = copy.deepcopy(state.system)
    with torch.no_grad():
        for name, p in shadow.named_parameters():
            p.copy_(state.ema[name])
    return shadow


def sample_channels(indices, epoch: int, cfg: TrainConfig, M: int):
    """Per-image SNR, channel and noise, each drawn from the image's own stream.

    Returns ``(snr_db, realization, noise, redraws)``.
    """
    lo, hi = cfg.snr_range_db
    reals, noises, redraws = [], [], 0
    for idx in indices:
        g = rngmod.torch_stream(cfg.seed, rngmod.PURPOSE_CHANNEL, int(idx), int(epoch))
        snr = lo + (hi - lo) * float(torch.rand((), generator=g, dtype=torch.float64))
        ch, r = realize(cfg.channel, snr, g, h_floor=cfg.h_floor)
        redraws += r
        reals.append(ch)
        noises.append(complex_noise((M,), ch.noise_var, g))
    ch = stack_realizations(reals)
    return ch.snr_db, ch, torch.stack(noises), redraws


def forward_system(system: JSCCSystem, x: torch.Tensor, ch, noise: torch.Tensor, h_floor: float = 1e-6):
    z = encode(system.encoder, x)
    y = transmit(z, ch, noise=noise)
    eq = equalize_zf(y, ch, h_floor)
    return decode(system.decoder, eq)


def total_loss(x: torch.Tensor, x_hat: torch.Tensor, pyramids, cfg: TrainConfig):
    """``lambda_mse * MSE + lambda_drift * drift``.

    MSE is the mean over pixels and batch; the drift term is the per-image
    drift loss averaged over the batch. ``pyramids`` is ``(recon, gt)`` or
    ``None`` when the drift weight is 0. Returns ``(loss, components)`` where
    components holds per-image tensors under ``mse_i`` / ``drift_i``.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse_i = (x - x_hat).pow(2).flatten(1).mean(1)
    mse = mse_i.mean()
    loss = cfg.lambda_mse * mse
    comps = {"mse": mse.detach(), "mse_i": mse_i.detach()}
    if cfg.lambda_drift > 0:
        if pyramids is None:
            raise ValueError("drift weight is positive but no feature pyramids were given")
        drift_i = drift_loss(pyramids[0], pyramids[1], cfg.temps, cfg.eps_norm, cfg.eps_agg)
        loss = loss + cfg.lambda_drift * drift_i.mean()
        comps["drift"] = drift_i.mean().detach()
        comps["drift_i"] = drift_i.detach()
    else:
        comps["drift"] = torch.zeros((), dtype=mse.dtype)
    return loss, comps


def global_grad_norm(params) -> float:
    norms = [p.grad.detach().norm(2) for p in params if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0


def train_step(indices, images: torch.Tensor, state: TrainState, cfg: TrainConfig, extractor,
               dump_dir: Path | None = None) -> tuple[TrainState, dict]:
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    system = state.system
    system.train()
    snr_db, ch, noise, redraws = sample_channels(indices, state.epoch, cfg, system.cfg.M)
    x_hat = forward_system(system, images, ch, noise, cfg.h_floor)
    pyramids = None
    if not (bool(torch.isfinite(images).all()) and bool(torch.isfinite(x_hat).all())):
        # the extractor refuses non-finite input, so report per-image MSE instead
        _, comps = total_loss(images, x_hat, None, replace(cfg, lambda_drift=0.0, lambda_mse=1.0))
        _abort_non_finite(indices, images, x_hat, snr_db, ch, comps, state, dump_dir)
    if cfg.lambda_drift > 0:
        with torch.no_grad():
            pyr_gt = extract(extractor, images)
        pyramids = (extract(extractor, x_hat), pyr_gt)
    loss, comps = total_loss(images, x_hat, pyramids, cfg)
    if not bool(torch.isfinite(loss)):
        _abort_non_finite(indices, images, x_hat, snr_db, ch, comps, state, dump_dir)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.debug:
        leaked = [n for n, p in extractor.named_parameters() if p.grad is not None]
        if leaked:
            raise AssertionError(f"extractor parameters received gradient: {leaked}")
    params = [p for p in system.parameters() if p.grad is not None]
    pre_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm))
    lr = lr_at(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    ema_update(state, cfg.ema_decay)
    state.step += 1
    state.redraws += redraws
    logs = {
        "step": state.step,
        "epoch": state.epoch,
        "loss": float(loss.detach()),
        "mse": float(comps["mse"]),
        "drift": float(comps["drift"]),
        "lr": lr,
        "grad_norm": pre_norm,
        "redraws": redraws,
        "snr_mean": float(snr_db.mean()),
    }
    return state, logs


def _abort_non_finite(indices, images, x_hat, snr_db, ch, comps, state, dump_dir):
    per_image = torch.zeros(len(indices), dtype=torch.float64)
    for key in ("mse_i", "drift_i"):
        if key in comps:
            per_image = per_image + comps[key].double()
    bad = [i for i in range(len(indices)) if not math.isfinite(float(per_image[i]))]
    if not bad:
        bad = [i for i in range(len(indices)) if not bool(torch.isfinite(x_hat[i]).all())]
    where = ""
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        path = dump_dir / f"nonfinite_step{state.step:07d}.pt"
        torch.save({"indices": list(map(int, indices)), "bad_batch_positions": bad, "images": images,
                    "x_hat": x_hat.detach(), "snr_db": snr_db, "h": ch.h}, path)
        where = f"; dump written to {path}"
    raise NonFiniteLossError(
        f"non-finite loss at step {state.step}: batch positions {bad} "
        f"(dataset indices {[int(indices[i]) for i in bad]}){where}"
    )


def state_tensors(state: TrainState) -> dict:
    out = {}
    for name, p in state.system.named_parameters():
        out[f"live/{name}"] = p.detach()
        out[f"ema/{name}"] = state.ema[name]
    opt = state.optimizer.state_dict()
    for pid, st in opt["state"].items():
        for key, val in st.items():
            out[f"optim/{pid}/{key}"] = torch.as_tensor(val)
    return out


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_archive(path / "tensors.ntar", state_tensors(state), {"format_version": CHECKPOINT_FORMAT})
    spec = state.extractor_spec
    meta = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": state.model_cfg.to_dict(),
        "train_config": cfg.to_dict(),
        "extractor": {
            "kind": spec.kind.value, "layers": list(spec.layers), "seed": spec.seed,
            "archive_path": spec.archive_path, "in_channels": spec.in_channels, "widths": list(spec.widths),
        },
        "step": state.step,
        "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "redraws": state.redraws,
        "master_seed": cfg.seed,
        "ema": True,
    }
    meta.update(extra or {})
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_checkpoint_meta(path) -> dict:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format_version')}")
    return meta


def extractor_spec_from_meta(meta: dict) -> ExtractorSpec:
    e = meta["extractor"]
    return ExtractorSpec(kind=e["kind"], layers=tuple(e["layers"]), seed=e["seed"],
                         archive_path=e.get("archive_path"), in_channels=e["in_channels"], widths=tuple(e["widths"]))


def load_checkpoint(path, cfg: TrainConfig | None = None) -> tuple[TrainState, dict]:
    """Restore the full training state (live, EMA and optimizer moments)."""
    path = Path(path)
    meta = read_checkpoint_meta(path)
    model_cfg = ModelConfig(**meta["model_config"])
    if cfg is None:
        cfg = TrainConfig(**meta["train_config"])
    tensors, _ = load_archive(path / "tensors.ntar")
    state = init_state(model_cfg, cfg, extractor_spec_from_meta(meta))
    with torch.no_grad():
        for name, p in state.system.named_parameters():
            p.copy_(tensors[f"live/{name}"])
            state.ema[name] = tensors[f"ema/{name}"].clone()
    opt_sd = state.optimizer.state_dict()
    restored = {}
    for key, val in tensors.items():
        if key.startswith("optim/"):
            _, pid, name = key.split("/", 2)
            restored.setdefault(int(pid), {})[name] = val.clone()
    opt_sd["state"] = restored
    state.optimizer.load_state_dict(opt_sd)
    state.step, state.epoch = meta["step"], meta["epoch"]
    state.batch_in_epoch, state.redraws = meta["batch_in_epoch"], meta["redraws"]
    return state, meta


def load_eval_system(path, use_ema: bool = True) -> tuple[JSCCSystem, dict]:
    path = Path(path)
    meta = read_checkpoint_meta(path)
    model_cfg = ModelConfig(**meta["model_config"])
    system = JSCCSystem(model_cfg)
    tensors, _ = load_archive(path / "tensors.ntar")
    prefix = "ema/" if use_ema else "live/"
    with torch.no_grad():
        for name, p in system.named_parameters():
            key = prefix + name
            if key not in tensors:
                raise KeyError(f"{path}: missing tensor {key}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise ValueError(f"{path}: tensor {key} has shape {tuple(tensors[key].shape)}, "
                                 f"model expects {tuple(p.shape)}")
            p.copy_(tensors[key])
    system.eval()
    return system, meta


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def validate(state: TrainState, val_source, cfg: TrainConfig, extractor, metrics_path: Path, last_logs: dict):
    system = ema_apply(state)
    reports = evaluate(system, val_source, cfg.val_snrs, cfg.channel, cfg.seed, extractor, cfg.val_images)
    for r in reports:
        _append_jsonl(metrics_path, {
            "step": state.step, "snr_db": r.snr_db, "psnr": r.psnr_db, "msssim_db": r.msssim_db,
            "feat_dist": r.feat_dist, "loss": last_logs.get("loss"), "mse": last_logs.get("mse"),
            "drift": last_logs.get("drift"),
        })
    return reports


def fit(train_source, cfg: TrainConfig, run_dir, model_cfg: ModelConfig | None = None,
        extractor_spec: ExtractorSpec | None = None, val_source=None, resume=None,
        stop_after_steps: int | None = None) -> Path:
    """Run the training loop and return the final checkpoint directory.

    Writes ``checkpoints/step_XXXXXXX/``, ``train_log.jsonl`` (one record per
    step) and ``metrics.jsonl`` (one record per validation SNR) under
    ``run_dir``. ``stop_after_steps`` interrupts the run after that many
    steps in this call, leaving a resumable checkpoint.
    """
    run_dir = Path(run_dir)
    ckpt_root = run_dir / "checkpoints"
    ckpt_root.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state, _ = load_checkpoint(resume, cfg)
    else:
        if model_cfg is None:
            model_cfg = ModelConfig(image_shape=train_source.shape)
        if tuple(model_cfg.image_shape) != tuple(train_source.shape):
            raise ValueError(f"dataset image shape {train_source.shape} does not match model {model_cfg.image_shape}")
        state = init_state(model_cfg, cfg, extractor_spec)
    extractor = build_extractor(state.extractor_spec)
    train_log = run_dir / "train_log.jsonl"
    metrics_path = run_dir / "metrics.jsonl"

    def checkpoint(final=False):
        name = f"step_{state.step:07d}"
        return save_checkpoint(ckpt_root / name, state, cfg, {"final": final})

    if state.step == 0 and resume is None:
        last = checkpoint(final=cfg.epochs == 0)
    else:
        last = Path(resume)
    steps_this_call = 0
    logs = {}
    t0 = time.time()
    while state.epoch < cfg.epochs:
        for idx, images in batches(train_source, cfg.batch, cfg.seed, state.epoch, start=state.batch_in_epoch):
            state, logs = train_step(idx, images, state, cfg, extractor, dump_dir=run_dir)
            state.batch_in_epoch += 1
            steps_this_call += 1
            logs["elapsed_s"] = round(time.time() - t0, 3)
            _append_jsonl(train_log, logs)
            state.history.append(logs)
            if state.step % 50 == 0:
                log.info("step %d epoch %d loss %.5f mse %.5f drift %.4f", state.step, state.epoch,
                         logs["loss"], logs["mse"], logs["drift"])
            if val_source is not None and cfg.val_every and state.step % cfg.val_every == 0:
                validate(state, val_source, cfg, extractor, metrics_path, logs)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                last = checkpoint()
            if stop_after_steps is not None and steps_this_call >= stop_after_steps:
                return checkpoint()
        state.epoch += 1
        state.batch_in_epoch = 0
        if val_source is not None:
            validate(state, val_source, cfg, extractor, metrics_path, logs)
        last = checkpoint(final=state.epoch == cfg.epochs)
    return last
