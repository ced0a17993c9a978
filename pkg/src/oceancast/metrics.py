"""Training loss (weighted MAE and its multi-variable form) and verification metrics.

All functions take *effective* latitude weights: zero on land, mean one over
sea cells. Spatial means are therefore ``sum(w * x) / sum(w)``, which equals
``(1/N) * sum(w * x)`` over the N sea cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    surface_weights: tuple = (1.0,)
    atmos_weights: tuple = ()  # one tuple of per-level weights per atmospheric variable

    def __post_init__(self):
        object.__setattr__(self, "surface_weights", tuple(float(w) for w in self.surface_weights))
        object.__setattr__(self, "atmos_weights", tuple(tuple(float(w) for w in r) for r in self.atmos_weights))
        flat = [self.alpha, self.beta, self.gamma, *self.surface_weights,
                *(w for r in self.atmos_weights for w in r)]
        if any(w < 0 for w in flat):
            raise DataError("loss weights must be non-negative")
        if self.n_surface + self.n_atmos < 1:
            raise DataError("loss needs at least one variable")

    @property
    def n_surface(self) -> int:
        return len(self.surface_weights)

    @property
    def n_atmos(self) -> int:
        return len(self.atmos_weights)


def _check_shapes(pred_shape, target_shape, weights_shape):
    if tuple(pred_shape) != tuple(target_shape):
        raise DataError(f"prediction shape {tuple(pred_shape)} != target shape {tuple(target_shape)}")
    if tuple(pred_shape[-2:]) != tuple(weights_shape):
        raise DataError(f"weights shape {tuple(weights_shape)} does not match field shape {tuple(pred_shape)}")


def _spatial_mean(x: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    """Weighted mean over the last two axes."""
    return ad.sum_(x * (weights / weights.sum()), axis=(-2, -1))


def weighted_mae(pred, target, weights) -> ad.Tensor:
    """Latitude-weighted MAE over sea cells, averaged over any leading axes."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    _check_shapes(pred.shape, target.shape, weights.shape)
    return ad.mean(_spatial_mean(ad.abs_(pred - target), weights))


def multivar_loss(pred_state, target_state, cfg: LossConfig, weights) -> ad.Tensor:
    """``gamma/(V_S+V_A) * [alpha * sum_k w_k MAE_k + beta * sum_k mean_c w_kc MAE_kc]``.

    States are a surface array ``(..., V_S, H, W)`` or a pair
    ``(surface, atmos)`` with atmos ``(..., V_A, C, H, W)``. Leading axes
    (batch) are averaged.
    """
    weights = np.asarray(weights, dtype=np.float64)
    ps, pa = pred_state if isinstance(pred_state, tuple) else (pred_state, None)
    ts, ta = target_state if isinstance(target_state, tuple) else (target_state, None)
    ps = ad.as_tensor(ps)
    if ps.shape[-3] != cfg.n_surface:
        raise DataError(f"state has {ps.shape[-3]} surface variables, loss config expects {cfg.n_surface}")
    _check_shapes(ps.shape, np.shape(ts), weights.shape)

    per_var = _spatial_mean(ad.abs_(ps - np.asarray(ts, dtype=np.float64)), weights)  # (..., V_S)
    lead = tuple(range(per_var.ndim - 1))
    per_var = ad.mean(per_var, axis=lead) if lead else per_var
    total = cfg.alpha * ad.sum_(per_var * np.array(cfg.surface_weights))

    if cfg.n_atmos:
        if pa is None or ta is None:
            raise DataError(f"loss config expects {cfg.n_atmos} atmospheric variables, state has none")
        pa = ad.as_tensor(pa)
        if pa.shape[-4] != cfg.n_atmos:
            raise DataError(f"state has {pa.shape[-4]} atmospheric variables, loss config expects {cfg.n_atmos}")
        n_levels = pa.shape[-3]
        aw = np.array(cfg.atmos_weights, dtype=np.float64)
        if aw.shape != (cfg.n_atmos, n_levels):
            raise DataError(f"atmospheric weights shape {aw.shape} != (V_A, C) = {(cfg.n_atmos, n_levels)}")
        _check_shapes(pa.shape, np.shape(ta), weights.shape)
        per_level = _spatial_mean(ad.abs_(pa - np.asarray(ta, dtype=np.float64)), weights)  # (..., V_A, C)
        lead = tuple(range(per_level.ndim - 2))
        per_level = ad.mean(per_level, axis=lead) if lead else per_level
        total = total + cfg.beta * ad.sum_(per_level * (aw / n_levels))
    elif pa is not None:
        raise DataError("state carries atmospheric variables but loss config has none")

    return total * (cfg.gamma / (cfg.n_surface + cfg.n_atmos))


# ---------------------------------------------------------------- verification metrics


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    bias: float
    acc: float
    n_cells: int
    weights_id: str = field(default="effective_sea")

    CSV_HEADER = "date,lead,rmse,bias,acc,n_cells"

    def csv_row(self, date, lead: int) -> str:
        return f"{date},{lead},{self.rmse:.9g},{self.bias:.9g},{self.acc:.9g},{self.n_cells}"


def _prep(pred, target, weights):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    _check_shapes(pred.shape, target.shape, weights.shape)
    wn = np.broadcast_to(weights / weights.sum(), pred.shape)
    return pred, target, wn


def weighted_rmse(pred, target, weights) -> float:
    pred, target, wn = _prep(pred, target, weights)
    return float(np.sqrt(np.sum(wn * (target - pred) ** 2)))


def weighted_bias(pred, target, weights) -> float:
    """Positive when the prediction is too low (target minus prediction)."""
    pred, target, wn = _prep(pred, target, weights)
    return float(np.sum(wn * (target - pred)))


def weighted_acc(pred, target, weights) -> float:
    pred, target, wn = _prep(pred, target, weights)
    a = target - np.sum(wn * target)
    b = pred - np.sum(wn * pred)
    var_a = np.sum(wn * a * a)
    var_b = np.sum(wn * b * b)
    if var_a <= 0.0 or var_b <= 0.0:
        raise DataError("undefined ACC: a field has zero weighted variance over sea cells")
    acc = np.sum(wn * a * b) / np.sqrt(var_a * var_b)
    return float(np.clip(acc, -1.0, 1.0))


def compute_metrics(pred, target, weights) -> MetricReport:
    weights = np.asarray(weights)
    return MetricReport(
        rmse=weighted_rmse(pred, target, weights),
        bias=weighted_bias(pred, target, weights),
        acc=weighted_acc(pred, target, weights),
        n_cells=int(np.count_nonzero(weights)),
    )
