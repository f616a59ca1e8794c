"""Training loop, optimizer, early stopping, and closed/open-set evaluation.

A run is fully determined by (seed, config, data): the seed spawns three
independent streams (weight init, per-epoch shuffling, dropout masks), so
data order and initialization are separately reproducible. Validation total
loss is monitored every epoch; the best-validation parameters are kept and
restored before the final test evaluation. RMSE/MAE are computed per task
in native label units after inverting the z-scoring, then converted to
reporting units (kHz / kbps / count).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import REPORT_DIVISORS, REPORT_UNITS, TASKS, Dataset, LabelScaler
from .errors import ConfigError, NumericalError, UsageError
from .model import MODEL_KINDS, CodecModel, ModelConfig
from .objective import LossBreakdown, total_loss
from .tape import Tape, Tensor

EVAL_BATCH = 256


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.3
    early_stop_patience: int = 5
    early_stop_min_delta: float = 1e-4
    htc_weight: float = 0.1
    hidden_dim: int = 128
    seed: int = 1
    model_kind: str = "hydra"

    def validate(self) -> None:
        positive = ("epochs", "batch_size", "learning_rate", "adam_beta1", "adam_beta2",
                    "adam_eps", "early_stop_patience", "early_stop_min_delta", "hidden_dim")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.early_stop_patience >= self.epochs:
            raise ConfigError(
                f"early_stop_patience ({self.early_stop_patience}) must be smaller "
                f"than epochs ({self.epochs})")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.htc_weight < 0:
            raise ConfigError(f"htc_weight must be non-negative, got {self.htc_weight}")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind '{self.model_kind}' (choose from {MODEL_KINDS})")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "epochs", "batch_size", "learning_rate", "adam_beta1", "adam_beta2",
            "adam_eps", "dropout", "early_stop_patience", "early_stop_min_delta",
            "htc_weight", "hidden_dim", "seed", "model_kind")}


# -------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={n: np.zeros_like(p.data) for n, p in params.items()},
                   v={n: np.zeros_like(p.data) for n, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place; deterministic given inputs."""
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter '{name}'; aborting training")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        params[name].data = params[name].data - cfg.learning_rate * update


# ----------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    model_kind: str
    cells: dict[str, dict[str, float] | None]  # "{task}/{partition}" -> rmse/mae/n
    val_history: list[float] = field(default_factory=list)
    selected_epoch: int = -1

    def cell(self, task: str, partition: str):
        return self.cells.get(f"{task}/{partition}")

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "reporting_units": dict(zip(TASKS, REPORT_UNITS)),
            "cells": self.cells,
            "val_history": self.val_history,
            "selected_epoch": self.selected_epoch,
        }


def render_metrics_table(reports: list[MetricsReport]) -> str:
    """Fixed-width table, one row per model kind, column groups per task."""
    lines = []
    header = f"{'model':<18s}" + "".join(f"{t.upper() + ' RMSE':>12s}{t.upper() + ' MAE':>12s}"
                                         for t in TASKS)
    for partition in ("closed", "open"):
        lines.append(f"== test partition: {partition} "
                     f"(SR in {REPORT_UNITS[0]}, BPS in {REPORT_UNITS[1]}, Q in {REPORT_UNITS[2]})")
        lines.append(header)
        for rep in reports:
            row = f"{rep.model_kind:<18s}"
            for t in TASKS:
                c = rep.cell(t, partition)
                if c is None:
                    row += f"{'--':>12s}{'--':>12s}"
                else:
                    row += f"{c['rmse']:>12.4f}{c['mae']:>12.4f}"
            lines.append(row)
        lines.append("")
    return "\n".join(lines)


def predict_normalized(model: CodecModel, x: np.ndarray) -> np.ndarray:
    """Eval-mode predictions, batched; (3, N) in normalized label space."""
    outs = []
    for lo in range(0, x.shape[0], EVAL_BATCH):
        outs.append(model.predict(x[lo:lo + EVAL_BATCH]))
    return np.concatenate(outs, axis=1) if outs else np.zeros((3, 0))


def evaluate(model: CodecModel, dataset: Dataset, scaler: LabelScaler) -> MetricsReport:
    """RMSE/MAE per task for the closed and open test partitions, in
    reporting units. Empty partitions yield absent cells."""
    cells: dict[str, dict[str, float] | None] = {}
    for partition in ("closed", "open"):
        part = dataset.subset("test", partition)
        if len(part) == 0:
            for task in TASKS:
                cells[f"{task}/{partition}"] = None
            continue
        x = part.embeddings_matrix()
        y_native = part.labels_matrix()
        preds_native = scaler.denormalize(predict_normalized(model, x).T)
        err = preds_native - y_native
        for t, task in enumerate(TASKS):
            rmse = float(np.sqrt(np.mean(err[:, t] ** 2)) / REPORT_DIVISORS[t])
            mae = float(np.mean(np.abs(err[:, t])) / REPORT_DIVISORS[t])
            cells[f"{task}/{partition}"] = {"rmse": rmse, "mae": mae, "n": len(part)}
    return MetricsReport(model_kind=model.config.kind, cells=cells)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: CodecModel
    scaler: LabelScaler
    report: MetricsReport
    log: list[dict]
    best_val: float
    stopped_epoch: int


def _loss_breakdown_mean(parts: list[tuple[int, LossBreakdown]]) -> dict:
    total_n = sum(n for n, _ in parts)
    agg = {k: 0.0 for k in ("mse_sr", "mse_bps", "mse_q", "htc", "total")}
    for n, bd in parts:
        for k in agg:
            agg[k] += n * getattr(bd, k)
    return {k: v / total_n for k, v in agg.items()}


def _eval_losses(model, x, y, htc_weight, batch_size) -> dict:
    parts = []
    uses_latents = model.config.kind == "hydra"
    for lo in range(0, x.shape[0], batch_size):
        xb = x[lo:lo + batch_size]
        yb = y[lo:lo + batch_size]
        preds, latents, _ = model.forward(xb, training=False)
        targets = tuple(Tensor(yb[:, t]) for t in range(3))
        lat = latents if (uses_latents and xb.shape[0] >= 2) else None
        _, bd = total_loss(preds, targets, lat, htc_weight)
        parts.append((xb.shape[0], bd))
    return _loss_breakdown_mean(parts)


def train(dataset: Dataset, cfg: TrainConfig, log_stream=None) -> TrainResult:
    """Full training run: shuffled minibatches, Adam, early stopping on
    validation total loss, best-checkpoint restoration, test metrics."""
    cfg.validate()
    train_ds = dataset.subset("train")
    val_ds = dataset.subset("val")
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise UsageError("training requires non-empty train and val splits")

    scaler = LabelScaler.fit(train_ds)
    x_train = train_ds.embeddings_matrix()
    y_train = scaler.normalize(train_ds.labels_matrix())
    x_val = val_ds.embeddings_matrix()
    y_val = scaler.normalize(val_ds.labels_matrix())

    ss_init, ss_shuffle, ss_dropout = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_init = np.random.default_rng(ss_init)
    rng_shuffle = np.random.default_rng(ss_shuffle)
    rng_dropout = np.random.default_rng(ss_dropout)

    model = CodecModel(
        ModelConfig(input_dim=dataset.dim, kind=cfg.model_kind,
                    hidden_dim=cfg.hidden_dim, dropout=cfg.dropout),
        seed_or_rng=rng_init)
    state = AdamState.for_params(model.params)
    uses_latents = cfg.model_kind == "hydra"

    best_val = np.inf
    best_arrays = model.state_arrays()
    best_epoch = -1
    epochs_without_gain = 0
    log: list[dict] = []
    n = x_train.shape[0]

    for epoch in range(1, cfg.epochs + 1):
        perm = rng_shuffle.permutation(n)
        train_parts = []
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            xb = x_train[idx]
            yb = y_train[idx]
            with Tape() as tape:
                preds, latents, _ = model.forward(xb, training=True, rng=rng_dropout)
                targets = tuple(Tensor(yb[:, t]) for t in range(3))
                lat = latents if (uses_latents and xb.shape[0] >= 2) else None
                loss, bd = total_loss(preds, targets, lat, cfg.htc_weight)
                if not np.isfinite(bd.total):
                    raise NumericalError(f"non-finite loss at epoch {epoch}; aborting training")
                tape.backward(loss)
            grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
            adam_step(model.params, grads, state, cfg)
            for p in model.params.values():
                p.grad = None
            train_parts.append((xb.shape[0], bd))

        val_losses = _eval_losses(model, x_val, y_val, cfg.htc_weight, EVAL_BATCH)
        record = {
            "epoch": epoch,
            "train": _loss_breakdown_mean(train_parts),
            "val": val_losses,
            "param_hash": model.state_hash(),
        }
        log.append(record)
        if log_stream is not None:
            log_stream.write(json.dumps(record, sort_keys=True) + "\n")
            log_stream.flush()

        val_total = val_losses["total"]
        if val_total < best_val - cfg.early_stop_min_delta:
            epochs_without_gain = 0
        else:
            epochs_without_gain += 1
        if val_total < best_val:
            best_val = val_total
            best_arrays = model.state_arrays()
            best_epoch = epoch
        if epochs_without_gain >= cfg.early_stop_patience:
            break

    model.load_state_arrays(best_arrays)
    report = evaluate(model, dataset, scaler)
    report.val_history = [rec["val"]["total"] for rec in log]
    report.selected_epoch = best_epoch
    return TrainResult(model=model, scaler=scaler, report=report, log=log,
                       best_val=float(best_val), stopped_epoch=len(log))
