"""Multi-task training: weighted Huber loss, AdamW, plateau decay, early stopping."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .analysis import pearson, UndefinedCorrelation
from .synthgen import SampleRecord, read_manifest
from .targets import normalize, tasks_for_variant
from .vitmodel import (
    ModelConfig,
    ViTRegressor,
    images_to_tensor,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

DEFAULT_LOSS_WEIGHTS = {"angle": 2.0, "coords": 1.0, "noise": 0.5, "length": 0.5, "width": 0.5, "color": 0.5}


class ContractError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    huber_delta: float = 1.0
    loss_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    min_delta: float = 1e-4
    early_stop_patience: int = 5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    threads: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.loss_weights = {k: float(v) for k, v in self.loss_weights.items()}
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.lr < 0:
            raise ValueError("batch_size >= 1, max_epochs >= 0 and lr >= 0 required")


# loss ------------------------------------------------------------------------


def huber(residual, delta: float = 1.0):
    """Elementwise Huber penalty; accepts tensors, arrays or floats."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if isinstance(residual, torch.Tensor):
        a = residual.abs()
        return torch.where(a <= delta, 0.5 * residual ** 2, delta * (a - 0.5 * delta))
    r = np.asarray(residual, dtype=np.float64)
    a = np.abs(r)
    out = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def weighted_loss(
    predictions: Mapping[str, torch.Tensor],
    targets: Mapping[str, torch.Tensor],
    weights: Mapping[str, float],
    delta: float = 1.0,
) -> torch.Tensor:
    """``sum_task w_task * mean(huber(pred - target))`` over batch and task dims."""
    if set(predictions) != set(targets):
        raise ContractError(
            f"prediction tasks {sorted(predictions)} differ from target tasks {sorted(targets)}"
        )
    missing = set(predictions) - set(weights)
    if missing:
        raise ContractError(f"no loss weight for tasks {sorted(missing)}")
    total = None
    for task in sorted(predictions):
        term = weights[task] * huber(predictions[task] - targets[task], delta).mean()
        total = term if total is None else total + term
    return total


def backward(
    model: ViTRegressor,
    images: torch.Tensor,
    targets: Mapping[str, torch.Tensor],
    weights: Mapping[str, float],
    delta: float = 1.0,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Loss and gradients of every parameter; frozen tensors get zeros."""
    params = dict(model.named_parameters())
    trainable = {n: p for n, p in params.items() if p.requires_grad}
    loss = weighted_loss(model(images), targets, weights, delta)
    grads_t = torch.autograd.grad(loss, list(trainable.values()), allow_unused=True)
    grads = {}
    for (name, p), g in zip(trainable.items(), grads_t):
        grads[name] = torch.zeros_like(p) if g is None else g
    for name, p in params.items():
        if name not in grads:
            grads[name] = torch.zeros_like(p)
    return loss.detach(), grads


# optimiser -------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> AdamState:
    """One in-place AdamW update of the tensors named in ``params``.

    Only tensors with ``requires_grad`` are touched; decay is decoupled
    (``p -= lr * wd * p``) and applied before the bias-corrected Adam step.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# schedules -------------------------------------------------------------------


def _improved(value: float, best: float, min_delta: float) -> bool:
    if not math.isfinite(best):
        return True
    return value < best - min_delta * abs(best)


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without relative improvement."""

    lr: float
    factor: float = 0.1
    patience: int = 3
    min_delta: float = 1e-4
    best: float = math.inf
    num_bad: int = 0

    def step(self, val_loss: float) -> float:
        if _improved(val_loss, self.best, self.min_delta):
            self.best = val_loss
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.lr *= self.factor
                self.num_bad = 0
        return self.lr


def plateau_step(sched: PlateauScheduler, val_loss: float) -> float:
    return sched.step(val_loss)


@dataclass
class EarlyStopping:
    patience: int = 5
    min_delta: float = 1e-4
    best: float = math.inf
    best_epoch: int = 0
    num_bad: int = 0

    def step(self, val_loss: float, epoch: int) -> bool:
        """Record an epoch; returns True when training should stop."""
        if _improved(val_loss, self.best, self.min_delta):
            self.best, self.best_epoch, self.num_bad = val_loss, epoch, 0
            return False
        self.num_bad += 1
        return self.num_bad >= self.patience


def run_schedule(val_losses: Sequence[float], cfg: TrainConfig) -> tuple[list[float], int]:
    """Replay a val-loss trace through the scheduler and stopper.

    Returns the learning rate used after each epoch and the epoch (1-based)
    at which training stops (``len(val_losses)`` if it never does).
    """
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta)
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.min_delta)
    lrs = []
    for epoch, v in enumerate(val_losses, start=1):
        lrs.append(sched.step(v))
        if stopper.step(v, epoch):
            return lrs, epoch
    return lrs, len(val_losses)


# data ------------------------------------------------------------------------


@dataclass
class LineDataset:
    records: list[SampleRecord]
    images: np.ndarray  # uint8 (N, H, W, 3)
    variant: str
    image_size: int

    @classmethod
    def load(cls, data_dir: str | os.PathLike, variant: str) -> "LineDataset":
        data_dir = Path(data_dir)
        records = read_manifest(data_dir / "manifest.csv")
        imgs = [np.asarray(Image.open(data_dir / "images" / f"{r.image_id}.png").convert("RGB")) for r in records]
        images = np.stack(imgs)
        return cls(records, images, variant, images.shape[1])

    def targets(self, idx: np.ndarray, dtype=torch.float32) -> dict[str, torch.Tensor]:
        t = normalize([self.records[i] for i in idx], self.variant, self.image_size)
        return {k: torch.from_numpy(v).to(dtype) for k, v in t.values.items()}

    def split(self, seed: int, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.records)
        perm = np.random.default_rng([int(seed), 0x5A17]).permutation(n)
        n_val = max(1, int(math.ceil(n * val_fraction)))
        if n_val >= n:
            raise ValueError(f"dataset of {n} images too small for a validation split")
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# metrics ---------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    rho: dict[str, float]
    inference_ms: float = float("nan")  # median per-batch forward time; not reproducible


def task_correlations(preds: Mapping[str, np.ndarray], targets: Mapping[str, np.ndarray]) -> dict[str, float]:
    """Pearson rho per task; multi-dim tasks average their per-component rho."""
    out = {}
    for task in preds:
        p = np.asarray(preds[task], dtype=np.float64).reshape(len(preds[task]), -1)
        y = np.asarray(targets[task], dtype=np.float64).reshape(len(targets[task]), -1)
        vals = []
        for j in range(p.shape[1]):
            try:
                vals.append(pearson(p[:, j], y[:, j]))
            except UndefinedCorrelation:
                vals.append(float("nan"))
        out[task] = float(np.mean(vals))
    return out


def metrics_columns(tasks: Sequence[str]) -> list[str]:
    return ["epoch", "train_loss", "val_loss", "lr"] + [f"rho_{t}" for t in tasks] + ["inference_ms"]


def write_metrics(path, rows: Sequence[EpochMetrics], tasks: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_columns(tasks))
        for r in rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)] + [repr(r.rho[t]) for t in tasks]
                       + [f"{r.inference_ms:.3f}"])


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# inference -------------------------------------------------------------------


@torch.no_grad()
def predict(model: ViTRegressor, images: np.ndarray, batch_size: int = 64) -> dict[str, np.ndarray]:
    model.eval()
    dtype = next(model.parameters()).dtype
    chunks: dict[str, list[np.ndarray]] = {}
    for s in range(0, len(images), batch_size):
        out = model(images_to_tensor(images[s:s + batch_size], dtype))
        for k, v in out.items():
            chunks.setdefault(k, []).append(v.double().numpy())
    return {k: np.concatenate(v) for k, v in chunks.items()}


@torch.no_grad()
def measure_inference_time(
    model: ViTRegressor,
    batch_sizes: Sequence[int] = (1, 8, 32),
    repeats: int = 10,
    warmup: int = 2,
    seed: int = 0,
) -> list[dict[str, float]]:
    """Wall-clock forward time per batch size: median and quartiles in ms.

    Warm-up calls are run and discarded before the timed repeats.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    size = model.cfg.image_size
    gen = torch.Generator().manual_seed(seed)
    rows = []
    for bs in batch_sizes:
        x = torch.rand(bs, 3, size, size, generator=gen, dtype=dtype)
        for _ in range(warmup):
            model(x)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(x)
            times.append((time.perf_counter() - t0) * 1e3)
        q1, med, q3 = np.percentile(times, [25, 50, 75])
        rows.append({"batch_size": bs, "median_ms": float(med), "q1_ms": float(q1), "q3_ms": float(q3),
                     "iqr_ms": float(q3 - q1), "std_ms": float(np.std(times)), "repeats": repeats})
    return rows


# fit -------------------------------------------------------------------------


@dataclass
class FitResult:
    metrics: list[EpochMetrics]
    best_checkpoint: Path
    last_checkpoint: Path
    stopped_early: bool
    timings: list[dict[str, float]]


def _evaluate(model, ds: LineDataset, idx, cfg: TrainConfig, dtype):
    model.eval()
    preds, times = predict_timed(model, ds.images[idx], cfg.batch_size)
    targets = {k: v.double().numpy() for k, v in ds.targets(idx, torch.float64).items()}
    with torch.no_grad():
        loss = weighted_loss(
            {k: torch.from_numpy(v) for k, v in preds.items()},
            {k: torch.from_numpy(v) for k, v in targets.items()},
            cfg.loss_weights, cfg.huber_delta,
        ).item()
    return loss, task_correlations(preds, targets), times


@torch.no_grad()
def predict_timed(model, images, batch_size):
    dtype = next(model.parameters()).dtype
    chunks: dict[str, list[np.ndarray]] = {}
    times = []
    for s in range(0, len(images), batch_size):
        x = images_to_tensor(images[s:s + batch_size], dtype)
        t0 = time.perf_counter()
        out = model(x)
        times.append((time.perf_counter() - t0) * 1e3)
        for k, v in out.items():
            chunks.setdefault(k, []).append(v.double().numpy())
    return {k: np.concatenate(v) for k, v in chunks.items()}, times


def _trainer_state(adam: AdamState, sched: PlateauScheduler, stopper: EarlyStopping):
    extra = {
        "adam_step": adam.step,
        "sched": {"lr": sched.lr, "best": _json_float(sched.best), "num_bad": sched.num_bad},
        "stopper": {"best": _json_float(stopper.best), "best_epoch": stopper.best_epoch, "num_bad": stopper.num_bad},
    }
    tensors = {f"adam_m/{k}": v for k, v in adam.m.items()}
    tensors.update({f"adam_v/{k}": v for k, v in adam.v.items()})
    return extra, tensors


def _json_float(x: float):
    return x if math.isfinite(x) else None


def _unjson_float(x):
    return math.inf if x is None else float(x)


def fit(
    data_dir: str | os.PathLike,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | os.PathLike,
    resume: str | os.PathLike | None = None,
    dataset: LineDataset | None = None,
    dtype: torch.dtype = torch.float32,
) -> FitResult:
    """Train on ``data_dir`` and write checkpoints and metrics to ``out_dir``.

    ``best.ckpt`` holds the weights with the lowest validation loss,
    ``last.ckpt`` the full trainer state for ``resume``. ``metrics.csv`` gets
    one row per completed epoch; its ``inference_ms`` column and the
    per-batch ``timing.csv`` are wall-clock and therefore not reproducible.
    """
    if train_cfg.threads:
        torch.set_num_threads(int(train_cfg.threads))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset or LineDataset.load(data_dir, model_cfg.variant)
    if ds.image_size != model_cfg.image_size:
        raise ContractError(f"images are {ds.image_size}px but model expects {model_cfg.image_size}px")
    tasks = [h.name for h in model_cfg.heads]
    if set(tasks) != set(tasks_for_variant(model_cfg.variant)):
        raise ContractError(f"heads {tasks} do not match variant {model_cfg.variant}")
    weights = {t: train_cfg.loss_weights[t] for t in tasks}
    train_idx, val_idx = ds.split(train_cfg.seed, train_cfg.val_fraction)

    adam = AdamState()
    sched = PlateauScheduler(train_cfg.lr, train_cfg.plateau_factor, train_cfg.plateau_patience, train_cfg.min_delta)
    stopper = EarlyStopping(train_cfg.early_stop_patience, train_cfg.min_delta)
    history: list[EpochMetrics] = []
    timings: list[dict[str, float]] = []
    if resume is not None:
        model, extra, other = load_checkpoint(resume)
        adam.step = extra["adam_step"]
        adam.m = {k[len("adam_m/"):]: v for k, v in other.items() if k.startswith("adam_m/")}
        adam.v = {k[len("adam_v/"):]: v for k, v in other.items() if k.startswith("adam_v/")}
        s, e = extra["sched"], extra["stopper"]
        sched.lr, sched.best, sched.num_bad = s["lr"], _unjson_float(s["best"]), s["num_bad"]
        stopper.best, stopper.best_epoch, stopper.num_bad = _unjson_float(e["best"]), e["best_epoch"], e["num_bad"]
        history = [EpochMetrics(**m) for m in extra["history"]]
        if extra.get("stopped"):
            log.info("checkpoint %s already stopped early; nothing to resume", resume)
    else:
        model = init_params(model_cfg, train_cfg.seed, dtype)

    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    params = dict(model.named_parameters())
    stopped = False
    start_epoch = len(history) + 1
    if resume is not None and extra.get("stopped"):
        stopped = True
        start_epoch = train_cfg.max_epochs + 1

    for epoch in range(start_epoch, train_cfg.max_epochs + 1):
        model.train()
        order = train_idx[np.random.default_rng([int(train_cfg.seed), epoch]).permutation(len(train_idx))]
        total, count = 0.0, 0
        lr = sched.lr
        for b, s in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = order[s:s + train_cfg.batch_size]
            x = images_to_tensor(ds.images[idx], dtype)
            loss, grads = backward(model, x, ds.targets(idx, dtype), weights, train_cfg.huber_delta)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
            adamw_step(params, grads, adam, lr, train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        val_loss, rho, times = _evaluate(model, ds, val_idx, train_cfg, dtype)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        timings.extend({"epoch": epoch, "batch": i, "inference_ms": t} for i, t in enumerate(times))
        history.append(EpochMetrics(epoch, train_loss, val_loss, lr, rho, float(np.median(times))))
        log.info("epoch %d train %.5f val %.5f lr %.2e rho %s", epoch, train_loss, val_loss, lr,
                 {k: round(v, 3) for k, v in rho.items()})
        sched.step(val_loss)
        prev_best = stopper.best
        stop = stopper.step(val_loss, epoch)
        if stopper.best != prev_best or not best_path.exists():
            save_checkpoint(best_path, model, {"epoch": epoch, "val_loss": val_loss, "split": _split_meta(train_cfg)})
        extra, other = _trainer_state(adam, sched, stopper)
        # wall-clock timings stay out of the checkpoint so it is reproducible
        hist = [{k: v for k, v in asdict(h).items() if k != "inference_ms"} for h in history]
        extra.update(history=hist, stopped=stop, split=_split_meta(train_cfg))
        save_checkpoint(last_path, model, extra, other)
        if stop:
            stopped = True
            break

    write_metrics(out / "metrics.csv", history, tasks)
    if timings:
        with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, ["epoch", "batch", "inference_ms"], lineterminator="\n")
            w.writeheader()
            w.writerows(timings)
    return FitResult(history, best_path, last_path, stopped, timings)


def _split_meta(cfg: TrainConfig) -> dict:
    return {"seed": cfg.seed, "val_fraction": cfg.val_fraction}
