"""AdamW with group freezing, staged fine-tuning, and checkpoints."""

from __future__ import annotations

import base64
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GROUPS, ParamStore
from .errors import ConfigError, DataError, NumericError
from .grid import NormStats, SampleWindow, make_batches
from .metrics import LossConfig, compute_metrics, multivar_loss, weighted_mae
from .model import ForecastModel, ModelConfig, forecast_step

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-4


def adamw_step(params: ParamStore, grads=None, lr: float = 1e-4, betas=ADAM_BETAS,
               eps: float = ADAM_EPS, weight_decay: float = WEIGHT_DECAY) -> None:
    """Decoupled-weight-decay Adam update of every unfrozen parameter.

    ``grads`` maps names to arrays; by default each tensor's ``.grad`` is used.
    Moments and the step count live on the parameter entries.
    """
    b1, b2 = betas
    for name, p in params.items():
        if p.frozen:
            continue
        g = p.tensor.grad if grads is None else grads[name]
        if g is None:
            g = np.zeros_like(p.tensor.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        p.step += 1
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * (g * g)
        m_hat = p.m / (1.0 - b1 ** p.step)
        v_hat = p.v / (1.0 - b2 ** p.step)
        theta = p.tensor.data
        if weight_decay:
            theta *= 1.0 - lr * weight_decay
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True)
class StagePlan:
    name: str
    trainable_groups: tuple
    lr: float
    epochs: int
    batch_size: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trainable_groups", tuple(self.trainable_groups))
        if not self.trainable_groups or set(self.trainable_groups) - set(GROUPS):
            raise ConfigError(f"stage {self.name!r}: trainable_groups must be a non-empty subset of {GROUPS}")
        if not self.lr > 0:
            raise ConfigError(f"stage {self.name!r}: lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"stage {self.name!r}: epochs and batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    val_bias: float
    val_acc: float
    wall_time: float


@dataclass
class TrainReport:
    stage: str
    epochs: list = field(default_factory=list)
    hashes_before: dict = field(default_factory=dict)
    hashes_after: dict = field(default_factory=dict)
    best_epoch: int = -1

    CSV_HEADER = "stage,epoch,train_loss,val_rmse,val_bias,val_acc,wall_time"

    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def changed_groups(self) -> set[str]:
        return {g for g in GROUPS if self.hashes_before.get(g) != self.hashes_after.get(g)}

    def csv_rows(self) -> list[str]:
        return [
            f"{self.stage},{e.epoch},{e.train_loss:.9g},{e.val_rmse:.9g},{e.val_bias:.9g},{e.val_acc:.9g},{e.wall_time:.3f}"
            for e in self.epochs
        ]


@dataclass
class StageData:
    """Normalized windows plus what is needed to score them in kelvin."""

    train: list
    val: list
    weights: np.ndarray  # effective latitude weights (H, W)
    stats: NormStats


def fit_increment_scale(series) -> float:
    """Std of one-step changes over sea cells of a normalized training series."""
    if series.unit != "normalized":
        raise DataError(f"increment scale needs a normalized series, got {series.unit!r}")
    if len(series) < 2:
        raise DataError("increment scale needs at least two time steps")
    diffs = np.diff(series.data, axis=0)[:, series.grid.sea_mask]
    scale = float(diffs.std())
    if not scale > 0:
        raise DataError("training series has no day-to-day variation")
    return scale


def _split_inputs(inputs: np.ndarray):
    """``(B, 2, H, W)`` single-variable windows -> two ``(B, 1, H, W)`` states."""
    return inputs[:, 0:1], inputs[:, 1:2]


def predict_windows(model: ForecastModel, windows: list[SampleWindow], batch_size: int = 16) -> np.ndarray:
    """One-step predictions ``(N, 1, H, W)`` for each window, no graph."""
    out = []
    with ad.no_grad():
        for s in range(0, len(windows), batch_size):
            inputs = np.stack([w.inputs for w in windows[s:s + batch_size]])
            out.append(forecast_step(model, *_split_inputs(inputs)).data)
    return np.concatenate(out)


def score_windows(model, windows, weights, stats: NormStats):
    """Mean kelvin RMSE, bias and ACC of one-step forecasts over ``windows``."""
    pred = predict_windows(model, windows)[:, 0] * stats.std + stats.mean
    reports = [
        compute_metrics(p, w.target * stats.std + stats.mean, weights) for p, w in zip(pred, windows)
    ]
    return (
        float(np.mean([r.rmse for r in reports])),
        float(np.mean([r.bias for r in reports])),
        float(np.mean([r.acc for r in reports])),
    )


def run_stage(model: ForecastModel, data: StageData, plan: StagePlan,
              loss_cfg: LossConfig = LossConfig(), weight_decay: float = WEIGHT_DECAY,
              validate: bool = True) -> TrainReport:
    """Train the groups in ``plan.trainable_groups``; others stay bit-identical.

    Padded batch members contribute to gradients but not to the reported loss.
    The parameters with the best validation RMSE are restored at the end.
    """
    params = model.params
    params.set_trainable(plan.trainable_groups)
    report = TrainReport(plan.name, hashes_before=params.hashes())
    best = (np.inf, None)
    for epoch in range(plan.epochs):
        t0 = time.perf_counter()
        seed = int(np.random.SeedSequence([plan.seed, epoch]).generate_state(1)[0])
        losses, counts = 0.0, 0
        for b, batch in enumerate(make_batches(data.train, plan.batch_size, seed)):
            x_prev, x_curr = _split_inputs(batch.inputs)
            target = batch.targets[:, 0:1]
            pred = forecast_step(model, x_prev, x_curr)
            loss = multivar_loss(pred, target, loss_cfg, data.weights)
            if not np.isfinite(loss.item()):
                raise NumericError(f"stage {plan.name!r}: non-finite loss at epoch {epoch} batch {b}")
            params.zero_grad()
            loss.backward()
            adamw_step(params, lr=plan.lr, weight_decay=weight_decay)
            keep = ~batch.padded
            if keep.any():
                with ad.no_grad():
                    real = weighted_mae(pred.data[keep], target[keep], data.weights).item()
                losses += real * int(keep.sum())
                counts += int(keep.sum())
        train_loss = losses / counts
        if validate and data.val:
            rmse, bias, acc = score_windows(model, data.val, data.weights, data.stats)
        else:
            rmse = bias = acc = float("nan")
        report.epochs.append(EpochRecord(epoch, train_loss, rmse, bias, acc, time.perf_counter() - t0))
        log.info("%s epoch %d: train %.5f val rmse %.4f K", plan.name, epoch, train_loss, rmse)
        if validate and rmse < best[0]:
            best = (rmse, params.snapshot())
            report.best_epoch = epoch
    if best[1] is not None:
        params.restore(best[1])
    report.hashes_after = params.hashes()
    return report


SCALES = {"small": (3, 15), "large-batch": (8, 30)}
VARIANTS = ("A", "B", "C")


def variant_plans(variant: str, scale: str = "small", seed: int = 0,
                  epochs: int | None = None, batch_size: int | None = None) -> list[StagePlan]:
    """Stage plans for the three fine-tuning regimes.

    A: all groups at 1e-5. B: decoder only at 1e-4. C: B followed by all
    groups at 1e-5, continuing from B's weights.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
    bs, ep = SCALES[scale]
    bs, ep = batch_size or bs, epochs or ep
    full = StagePlan(f"{variant}-full", GROUPS, 1e-5, ep, bs, seed)
    decoder = StagePlan(f"{variant}-decoder", ("decoder",), 1e-4, ep, bs, seed)
    if variant == "A":
        return [full]
    if variant == "B":
        return [decoder]
    return [decoder, StagePlan("C-full", GROUPS, 1e-5, ep, bs, seed + 1)]


def run_plans(model, data, plans, loss_cfg=LossConfig(), **kw) -> list[TrainReport]:
    return [run_stage(model, data, plan, loss_cfg, **kw) for plan in plans]


def staged_protocol(model, data, variant: str, scale: str = "small", loss_cfg=LossConfig(),
                    seed: int = 0, **kw) -> list[TrainReport]:
    return run_plans(model, data, variant_plans(variant, scale, seed), loss_cfg, **kw)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def _checkpoint_meta(model: ForecastModel) -> bytes:
    meta = {"format_version": CHECKPOINT_VERSION, "config": model.config.to_dict()}
    if model.statics is not None:
        meta["statics_shape"] = list(model.statics.shape)
        meta["statics"] = base64.b64encode(model.statics.astype("<f8").tobytes()).decode("ascii")
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def save_checkpoint(model: ForecastModel, path) -> None:
    blob = ad.dump_params(model.params, _checkpoint_meta(model))
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ForecastModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    store, meta_bytes = ad.load_params(blob)
    meta = json.loads(meta_bytes)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ad.ArchiveError(f"{path}: checkpoint version {meta.get('format_version')} unsupported")
    statics = None
    if "statics" in meta:
        statics = np.frombuffer(base64.b64decode(meta["statics"]), "<f8").reshape(meta["statics_shape"])
    model = ForecastModel(ModelConfig.from_dict(meta["config"]), statics=statics)
    if store.names() != model.params.names():
        raise ad.ArchiveError(f"{path}: parameter names do not match the embedded config")
    for name, p in store.items():
        if p.tensor.shape != model.params[name].shape:
            raise ad.ArchiveError(f"{path}: parameter {name!r} shape {p.tensor.shape} mismatch")
    for name, src in store.items():
        dst = model.params.params[name]
        dst.tensor.data[...] = src.tensor.data
        dst.m, dst.v, dst.step, dst.frozen = src.m, src.v, src.step, src.frozen
        dst.tensor.requires_grad = not src.frozen
    return model
