"""Autoregressive rollouts, per-lead and seasonal verification, report files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from . import autodiff as ad
from .errors import DataError, NumericError
from .grid import FieldSeries, NormStats, latitude_weights
from .metrics import MetricReport, compute_metrics
from .model import ForecastModel, forecast_step

SEASONS = ("DJF", "MAM", "JJA", "SON")
_SEASON_OF_MONTH = {12: "DJF", 1: "DJF", 2: "DJF", 3: "MAM", 4: "MAM", 5: "MAM",
                    6: "JJA", 7: "JJA", 8: "JJA", 9: "SON", 10: "SON", 11: "SON"}


def season_of(date) -> str:
    """Meteorological season of a date."""
    month = np.datetime64(date, "M").astype(int) % 12 + 1
    return _SEASON_OF_MONTH[int(month)]


def rollout(model: ForecastModel, x_prev, x_curr, steps: int) -> np.ndarray:
    """Feed predictions back as inputs for ``steps`` leads.

    States are ``(C, H, W)`` or batched ``(B, C, H, W)``; the result stacks
    leads on a new axis after the batch axis.
    """
    if steps < 1:
        raise DataError(f"rollout needs at least one step, got {steps}")
    prev = np.asarray(x_prev, dtype=np.float64)
    curr = np.asarray(x_curr, dtype=np.float64)
    out = []
    with ad.no_grad():
        for lead in range(steps):
            nxt = forecast_step(model, prev, curr).data
            if not np.all(np.isfinite(nxt)):
                raise NumericError(f"non-finite prediction at lead {lead + 1}")
            out.append(nxt)
            prev, curr = curr, nxt
    return np.stack(out, axis=0 if np.ndim(x_curr) == 3 else 1)


@dataclass
class RolloutResult:
    start_date: np.datetime64  # date of the last observed state
    predictions: np.ndarray    # (L, H, W) kelvin
    targets: np.ndarray        # (L, H, W) kelvin
    metrics: list              # MetricReport per lead

    @property
    def target_dates(self) -> np.ndarray:
        return self.start_date + np.arange(1, len(self.metrics) + 1)


@dataclass
class SeasonalSummary:
    rmse: dict = field(default_factory=dict)    # season -> (L,) mean RMSE (nan when empty)
    counts: dict = field(default_factory=dict)  # season -> (L,) sample counts

    @classmethod
    def from_results(cls, results: list[RolloutResult]) -> "SeasonalSummary":
        L = len(results[0].metrics)
        sums = {s: np.zeros(L) for s in SEASONS}
        counts = {s: np.zeros(L, dtype=np.int64) for s in SEASONS}
        for r in results:
            for k, (d, m) in enumerate(zip(r.target_dates, r.metrics)):
                s = season_of(d)
                sums[s][k] += m.rmse
                counts[s][k] += 1
        with np.errstate(invalid="ignore"):
            rmse = {s: np.where(counts[s] > 0, sums[s] / np.maximum(counts[s], 1), np.nan) for s in SEASONS}
        return cls(rmse, counts)


@dataclass
class Evaluation:
    results: list      # RolloutResult per start
    persistence: list  # RolloutResult per start, last observed state at every lead
    seasonal: SeasonalSummary
    persistence_seasonal: SeasonalSummary

    @property
    def horizon(self) -> int:
        return len(self.results[0].metrics)

    def lead_means(self, which: str = "model") -> list[dict]:
        res = self.results if which == "model" else self.persistence
        rows = []
        for k in range(self.horizon):
            ms = [r.metrics[k] for r in res]
            rows.append(dict(lead=k + 1, rmse=float(np.mean([m.rmse for m in ms])),
                             bias=float(np.mean([m.bias for m in ms])),
                             acc=float(np.mean([m.acc for m in ms])), n=len(ms)))
        return rows


def evaluate_rollouts(model: ForecastModel, series: FieldSeries, stats: NormStats, steps: int = 10,
                      stride: int = 1, batch_size: int = 16) -> Evaluation:
    """Rollouts from every ``stride``-th start of a normalized series, scored in kelvin."""
    if series.unit != "normalized":
        raise DataError(f"rollout evaluation expects a normalized series, got {series.unit!r}")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    starts = list(range(0, len(series) - (steps + 2) + 1, stride))
    if not starts:
        raise DataError(f"test range of {len(series)} days too short for {steps}-step rollouts")
    to_k = lambda a: a * stats.std + stats.mean
    data = series.data
    preds = []
    for b in range(0, len(starts), batch_size):
        idx = starts[b:b + batch_size]
        prev = np.stack([data[s] for s in idx])[:, None]
        curr = np.stack([data[s + 1] for s in idx])[:, None]
        preds.append(rollout(model, prev, curr, steps)[:, :, 0])  # (B, L, H, W)
    starts = np.asarray(starts)
    targets = np.stack([data[s + 2:s + 2 + steps] for s in starts])
    return evaluation_from_arrays(series.times[starts + 1], to_k(np.concatenate(preds)), to_k(targets),
                                  to_k(data[starts + 1]), latitude_weights(series.grid).effective)


def evaluation_from_arrays(start_dates, predictions, targets, last_observed, weights) -> Evaluation:
    """Score kelvin rollouts ``(N, L, H, W)`` and the matching persistence forecasts."""
    results, persistence = [], []
    for start, pred, tgt, last in zip(start_dates, predictions, targets, last_observed):
        pers = np.broadcast_to(last, tgt.shape)
        results.append(RolloutResult(start, pred, tgt, [compute_metrics(p, t, weights) for p, t in zip(pred, tgt)]))
        persistence.append(RolloutResult(start, pers, tgt, [compute_metrics(p, t, weights) for p, t in zip(pers, tgt)]))
    return Evaluation(results, persistence, SeasonalSummary.from_results(results),
                      SeasonalSummary.from_results(persistence))


def save_evaluation(ev: Evaluation, path) -> None:
    """Raw rollout arrays; metrics are recomputed on load."""
    try:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                start_dates=np.array([r.start_date for r in ev.results], dtype="datetime64[D]"),
                predictions=np.stack([r.predictions for r in ev.results]),
                targets=np.stack([r.targets for r in ev.results]),
                last_observed=np.stack([r.predictions[0] for r in ev.persistence]),
            )
    except OSError as exc:
        raise DataError(f"cannot write rollout results {path}: {exc}") from exc


def load_evaluation(path, weights) -> Evaluation:
    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in ("start_dates", "predictions", "targets", "last_observed")}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read rollout results {path}: {exc}") from exc
    return evaluation_from_arrays(arrays["start_dates"], arrays["predictions"], arrays["targets"],
                                  arrays["last_observed"], weights)


# ---------------------------------------------------------------- report files


def _ramp(stops: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Piecewise-linear colour map; ``v`` in [0, 1]."""
    x = np.linspace(0.0, 1.0, len(stops))
    return np.stack([np.interp(v, x, stops[:, c]) for c in range(3)], axis=-1)


SEQUENTIAL = np.array([[48, 18, 120], [33, 145, 140], [253, 231, 37]], dtype=np.float64)
DIVERGING = np.array([[33, 102, 172], [255, 255, 255], [178, 24, 43]], dtype=np.float64)
LAND_RGB = np.array([128, 128, 128], dtype=np.float64)


def difference_image(target, prediction, land_mask, scale: int = 4):
    """Three panels (target, prediction, target minus prediction) as RGB plus PNG text.

    The first two panels share a linear range; the difference panel uses a
    range symmetric about zero so that zero maps to white. Row 0 (south) is
    drawn at the bottom.
    """
    target = np.asarray(target, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    sea = ~np.asarray(land_mask, dtype=bool)
    diff = target - prediction
    lo = float(min(target[sea].min(), prediction[sea].min()))
    hi = float(max(target[sea].max(), prediction[sea].max()))
    span = max(hi - lo, 1e-12)
    half = max(float(np.abs(diff[sea]).max()), 1e-12)

    def paint(rgb):
        rgb = np.where(sea[..., None], rgb, LAND_RGB)
        rgb = np.round(rgb[::-1]).astype(np.uint8)
        return np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)

    panels = [
        paint(_ramp(SEQUENTIAL, np.clip((target - lo) / span, 0, 1))),
        paint(_ramp(SEQUENTIAL, np.clip((prediction - lo) / span, 0, 1))),
        paint(_ramp(DIVERGING, np.clip((diff + half) / (2 * half), 0, 1))),
    ]
    gap = np.full((panels[0].shape[0], scale, 3), 255, dtype=np.uint8)
    image = np.concatenate([panels[0], gap, panels[1], gap, panels[2]], axis=1)
    info = {
        "value_range_K": f"{lo:.6f},{hi:.6f}",
        "difference_range_K": f"{-half:.6f},{half:.6f}",
        "sequential_stops": ";".join(",".join(str(int(c)) for c in s) for s in SEQUENTIAL),
        "diverging_stops": ";".join(",".join(str(int(c)) for c in s) for s in DIVERGING),
        "panels": "target,prediction,target-prediction",
    }
    return image, info


def write_png(path, image: np.ndarray, info: dict) -> None:
    meta = PngImagePlugin.PngInfo()
    for k, v in info.items():
        meta.add_text(k, v)
    try:
        Image.fromarray(image, "RGB").save(path, format="PNG", pnginfo=meta)
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc


def _write(path: Path, lines: list[str]) -> None:
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def emit_reports(ev: Evaluation, out_dir, land_mask, n_maps: int = 1) -> list[Path]:
    """Write CSVs, difference maps for the first ``n_maps`` rollouts, and a summary."""
    if not ev.results:
        raise DataError("no rollout results to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create report directory {out}: {exc}") from exc
    written = []

    for name, which in (("lead_metrics.csv", "model"), ("persistence_lead_metrics.csv", "persistence")):
        rows = ["lead,rmse,bias,acc,n"] + [
            f"{r['lead']},{r['rmse']:.9g},{r['bias']:.9g},{r['acc']:.9g},{r['n']}" for r in ev.lead_means(which)
        ]
        _write(out / name, rows)
        written.append(out / name)

    for name, summ in (("seasonal.csv", ev.seasonal), ("persistence_seasonal.csv", ev.persistence_seasonal)):
        rows = ["season,lead,rmse,n"]
        for s in SEASONS:
            for k in range(ev.horizon):
                rows.append(f"{s},{k + 1},{summ.rmse[s][k]:.9g},{summ.counts[s][k]}")
        _write(out / name, rows)
        written.append(out / name)

    rows = [MetricReport.CSV_HEADER]
    for r in ev.results:
        for k, m in enumerate(r.metrics):
            rows.append(m.csv_row(str(r.target_dates[k]), k + 1))
    _write(out / "metrics.csv", rows)
    written.append(out / "metrics.csv")

    for r in ev.results[:n_maps]:
        for k in range(ev.horizon):
            image, info = difference_image(r.targets[k], r.predictions[k], land_mask)
            path = out / f"diff_{r.start_date}_lead{k + 1}.png"
            write_png(path, image, info)
            written.append(path)

    model_rows, pers_rows = ev.lead_means("model"), ev.lead_means("persistence")
    lines = [f"rollouts: {len(ev.results)}  horizon: {ev.horizon} days", "",
             "lead  model_rmse_K  persistence_rmse_K  model_bias_K  model_acc"]
    for m, p in zip(model_rows, pers_rows):
        lines.append(f"{m['lead']:>4}  {m['rmse']:12.5f}  {p['rmse']:18.5f}  {m['bias']:12.5f}  {m['acc']:9.5f}")
    lines += ["", "seasonal mean RMSE (K) by lead:"]
    for s in SEASONS:
        vals = " ".join(f"{v:.4f}" for v in ev.seasonal.rmse[s])
        lines.append(f"{s}: {vals}  (n per lead: {int(ev.seasonal.counts[s][0])})")
    _write(out / "summary.txt", lines)
    written.append(out / "summary.txt")
    return written
