"""Adam training, RMSE/MAE evaluation and per-crop reports."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetError, Manifest, Sampling, SplitSpec, batch_iter
from .model import CheckpointError, ModelParams, MvvtConfig, forward, load_checkpoint, save_checkpoint
from .tensor import RngStream, Tensor

log = logging.getLogger(__name__)

TASKS = ("age", "leaf_count")
TASK_LABELS = {"age": "Age prediction", "leaf_count": "Leaf count"}


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: str = "age"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    grad_clip: Optional[float] = 1.0
    val_every: int = 1
    standardize_target: bool = False

    def __post_init__(self):
        bad = []
        if self.task not in TASKS:
            bad.append(f"task must be one of {TASKS}")
        if self.lr <= 0:
            bad.append("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            bad.append("beta1, beta2 must lie in [0, 1)")
        if self.eps_adam <= 0:
            bad.append("eps_adam must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.val_every < 1:
            bad.append("epochs, batch_size and val_every must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            bad.append("grad_clip must be > 0")
        if bad:
            raise ValueError("invalid TrainConfig: " + "; ".join(bad))


# --- loss and optimizer ----------------------------------------------------


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise T.ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    d = T.sub(pred, target)
    return T.mul(T.sum_(T.square(d)), 1.0 / d.data.size)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the old norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> tuple:
    """One bias-corrected Adam update. Parameters are rebound to new arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        if g.shape != state.m[name].shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, state has {state.m[name].shape}")
    grads = dict(grads)
    if cfg.grad_clip is not None:
        clip_global_norm(grads, cfg.grad_clip)
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)
        p.data = (p.data - update).astype(p.dtype)
    return params, state


# --- metrics ---------------------------------------------------------------


def _pair(y, yhat) -> tuple:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.size == 0 or y.size != yhat.size:
        raise ValueError(f"need equal nonzero lengths, got {y.size} and {yhat.size}")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


@dataclass(frozen=True)
class MetricRow:
    crop: str
    task: str
    rmse: float
    mae: float
    n: int


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def crops(self) -> list:
        seen = []
        for r in self.rows:
            if r.crop not in seen:
                seen.append(r.crop)
        return seen

    def get(self, crop: str, task: str) -> Optional[MetricRow]:
        for r in self.rows:
            if r.crop == crop and r.task == task:
                return r
        return None

    def averages(self) -> dict:
        """Task -> (mean RMSE, mean MAE) over crops."""
        out = {}
        for task in TASKS:
            rs = [r for r in self.rows if r.task == task]
            if rs:
                out[task] = (float(np.mean([r.rmse for r in rs])), float(np.mean([r.mae for r in rs])))
        return out

    def merged(self, other: "MetricsReport") -> "MetricsReport":
        rows = {(r.crop, r.task): r for r in self.rows}
        rows.update({(r.crop, r.task): r for r in other.rows})
        return MetricsReport(list(rows.values()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["crop", "task", "rmse", "mae", "n"])
        for r in self.rows:
            w.writerow([r.crop, r.task, repr(r.rmse), repr(r.mae), r.n])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["crop", "task", "rmse", "mae", "n"]:
            raise ValueError("metrics CSV must have header crop,task,rmse,mae,n")
        rows = []
        for i, rec in enumerate(reader, start=2):
            try:
                row = MetricRow(rec["crop"].strip(), rec["task"].strip(), float(rec["rmse"]), float(rec["mae"]), int(rec["n"]))
            except (AttributeError, TypeError, ValueError):
                raise ValueError(f"malformed metrics row at line {i}: {rec}") from None
            if row.task not in TASKS or row.n <= 0 or not row.crop:
                raise ValueError(f"malformed metrics row at line {i}: {rec}")
            rows.append(row)
        if not rows:
            raise ValueError("metrics CSV has no rows")
        return cls(rows)

    def table(self, digits: int = 2) -> str:
        """Aligned text table: one row per crop plus Average, RMSE/MAE per task."""
        head1 = ["Dataset", TASK_LABELS["age"], "", TASK_LABELS["leaf_count"], ""]
        head2 = ["", "RMSE", "MAE", "RMSE", "MAE"]

        def cells(pair):
            return ["-", "-"] if pair is None else [f"{pair[0]:.{digits}f}", f"{pair[1]:.{digits}f}"]

        body = []
        for crop in self.crops():
            row = [crop.capitalize()]
            for task in TASKS:
                r = self.get(crop, task)
                row += cells(None if r is None else (r.rmse, r.mae))
            body.append(row)
        avg = self.averages()
        body.append(["Average"] + cells(avg.get("age")) + cells(avg.get("leaf_count")))
        grid = [head1, head2] + body
        widths = [max(len(r[i]) for r in grid) for i in range(5)]
        rule = "-" * (sum(widths) + 3 * 4)

        def fmt(r):
            return " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))

        lines = [fmt(head1), fmt(head2), rule] + [fmt(r) for r in body[:-1]] + [rule, fmt(body[-1])]
        return "\n".join(lines)


# --- prediction and evaluation --------------------------------------------


def targets_of(batch: tuple, task: str) -> Tensor:
    return batch[1] if task == "age" else batch[2]


def predict(params: ModelParams, cfg: MvvtConfig, manifest: Manifest, items: Sequence[tuple],
            task: str, sampling: Sampling, batch_size: int = 8) -> tuple:
    """Eval-mode predictions with stride sampling; returns (y, yhat) float64 arrays."""
    sampling = replace(sampling, strategy="stride")
    dtype = T.DTYPES[cfg.dtype]
    ys, yh = [], []
    with T.no_grad():
        for batch in batch_iter(items, manifest, batch_size, False, sampling=sampling, dtype=dtype):
            out = forward(batch[0], params, cfg, "eval")
            ys.append(targets_of(batch, task).data.astype(np.float64).reshape(-1))
            yh.append(out.data.astype(np.float64).reshape(-1))
    return np.concatenate(ys), np.concatenate(yh)


def check_compatible(cfg: MvvtConfig, manifest: Manifest, sampling: Sampling) -> None:
    n = sampling.num_views(len(manifest.levels()))
    problems = []
    if cfg.num_views != n:
        problems.append(f"model expects {cfg.num_views} views, sampling yields {n}")
    if cfg.channels != 3:
        problems.append(f"model expects {cfg.channels} channels per view, images are RGB")
    if sampling.size is not None and tuple(sampling.size) != (cfg.height, cfg.width):
        problems.append(f"model expects {cfg.height}x{cfg.width} images, sampling resizes to {sampling.size}")
    if problems:
        raise CheckpointError("model/data mismatch: " + "; ".join(problems))


def evaluate(checkpoint, manifest: Manifest, items: Sequence[tuple], task: str,
             sampling: Sampling = Sampling(), batch_size: int = 8) -> MetricsReport:
    """Per-crop RMSE/MAE of a checkpoint (path or (config, params)) on ``items``."""
    if not items:
        raise DatasetError("cannot evaluate an empty split")
    cfg, params = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    check_compatible(cfg, manifest, sampling)
    items = list(items)
    y, yhat = predict(params, cfg, manifest, items, task, sampling, batch_size)
    rows = []
    crops = np.array([k[0] for k in items])
    for crop in dict.fromkeys(k[0] for k in items):
        sel = crops == crop
        rows.append(MetricRow(crop, task, rmse(y[sel], yhat[sel]), mae(y[sel], yhat[sel]), int(sel.sum())))
    return MetricsReport(rows)


# --- training --------------------------------------------------------------


def fold_target_scale(params: ModelParams, mean: float, std: float) -> ModelParams:
    """Copy of ``params`` whose head emits std * out + mean (undoes target standardization)."""
    out = params.copy()
    if mean == 0.0 and std == 1.0:
        return out
    w, b = out["head.out.weight"], out["head.out.bias"]
    w.data = (w.data * std).astype(w.dtype)
    b.data = (b.data * std + mean).astype(b.dtype)
    return out


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    curve: list
    best_val_rmse: float
    best_epoch: int
    target_mean: float
    target_std: float
    out: Optional[Path] = None

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "step", "train_mse", "val_rmse", "val_mae"])
        for row in self.curve:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
        return buf.getvalue()


def train(model_cfg: MvvtConfig, params: ModelParams, manifest: Manifest, split: SplitSpec,
          cfg: TrainConfig, sampling: Sampling = Sampling(), out=None) -> TrainResult:
    """Train on ``split.train_items``, track validation RMSE/MAE, keep best and last weights.

    ``sampling`` governs the training views; validation always uses stride sampling.
    With ``out`` set, writes ``best.ckpt``, ``last.ckpt`` and ``curve.csv`` there.
    """
    if not split.train_items or not split.val_items:
        raise DatasetError("training needs nonempty train and val splits")
    check_compatible(model_cfg, manifest, sampling)
    dtype = T.DTYPES[model_cfg.dtype]
    ys = np.array([manifest.label(k)[0 if cfg.task == "age" else 1] for k in split.train_items], dtype=np.float64)
    if cfg.standardize_target:
        mean, std = float(ys.mean()), float(ys.std()) or 1.0
    else:
        mean, std = 0.0, 1.0
    state = AdamState.zeros_like(params)
    curve, best_rmse, best_epoch, best = [], math.inf, 0, None
    step = 0
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for epoch in range(1, cfg.epochs + 1):
        ep_sampling = replace(sampling, seed=sampling.seed + epoch) if sampling.strategy == "seeded-random" else sampling
        losses = []
        for batch in batch_iter(split.train_items, manifest, cfg.batch_size, True, cfg.seed, epoch, ep_sampling, dtype):
            target = targets_of(batch, cfg.task)
            if cfg.standardize_target:
                target = Tensor(((target.data - mean) / std).astype(dtype))
            params.zero_grad()
            rng = RngStream(cfg.seed, 1, step)
            loss = mse_loss(forward(batch[0], params, model_cfg, "train", rng), target)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            T.backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state, cfg)
            losses.append(value * std * std)
            step += 1
        row = [epoch, step, float(np.mean(losses)), None, None]
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            scored = fold_target_scale(params, mean, std)
            y, yhat = predict(scored, model_cfg, manifest, split.val_items, cfg.task, sampling, cfg.batch_size)
            v_rmse = rmse(y, yhat)
            row[3], row[4] = v_rmse, mae(y, yhat)
            if v_rmse < best_rmse:
                best_rmse, best_epoch, best = v_rmse, epoch, scored
                if out is not None:
                    save_checkpoint(out / "best.ckpt", model_cfg, best)
        curve.append(row)
        log.info("epoch %d step %d train_mse %.5g val_rmse %s", epoch, step, row[2], row[3])
    last = fold_target_scale(params, mean, std)
    result = TrainResult(last, best, curve, best_rmse, best_epoch, mean, std, out)
    if out is not None:
        save_checkpoint(out / "last.ckpt", model_cfg, last)
        (out / "curve.csv").write_text(result.curve_csv())
    return result


def fit_batch(model_cfg: MvvtConfig, params: ModelParams, x: Tensor, y: Tensor, cfg: TrainConfig,
              steps: int) -> list:
    """Full-batch Adam on fixed arrays; returns per-step (train-mode loss, eval-mode MSE).

    The eval-mode MSE is measured after the step, on the same samples, without dropout.
    """
    state = AdamState.zeros_like(params)
    history = []
    for step in range(steps):
        params.zero_grad()
        loss = mse_loss(forward(x, params, model_cfg, "train", RngStream(cfg.seed, 1, step)), y)
        if not math.isfinite(loss.item()):
            raise NumericError(f"non-finite loss at step {step}")
        T.backward(loss)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, cfg)
        with T.no_grad():
            fitted = mse_loss(forward(x, params, model_cfg, "eval"), y).item()
        history.append((loss.item(), fitted))
    return history
