"""Work-directory pipeline: synth -> preprocess -> split -> train -> eval -> rollout -> report.

Every stage records a config hash plus input and output file hashes in
``manifest.json``. A stage whose record still matches is skipped; any change
to its config sections or inputs, or a missing or altered output, reruns it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import DataError
from .grid import (
    GeoGrid, NormStats, SplitSpec, bilinear_regrid, celsius_to_kelvin, fill_missing_with_mean,
    fit_norm_stats, latitude_weights, normalize, sliding_windows, temporal_split,
)
from .gridpack import read_gridpack, read_series, write_gridpack
from .metrics import MetricReport, compute_metrics
from .rollout import emit_reports, evaluate_rollouts, load_evaluation, save_evaluation
from .synthetic import synthetic_sst
from .training import (
    StageData, TrainReport, fit_increment_scale, load_checkpoint, predict_windows, run_plans,
    save_checkpoint,
)

log = logging.getLogger(__name__)

STAGES = ("synth", "preprocess", "split", "train", "eval", "rollout", "report")
WORK_ROOT_ENV = "OCEANCAST_WORK_ROOT"


def file_hash(path) -> str:
    """SHA-256 of a file, or of every file under a directory (names included)."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode() + b"\0")
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, cfg: RunConfig, root: Path):
        self.cfg = cfg
        self.root = Path(root)
        self.manifest_path = self.root / "manifest.json"
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create work directory {self.root}: {exc}") from exc
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {}
        try:
            return json.loads(self.manifest_path.read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"unreadable manifest {self.manifest_path}: {exc}") from exc

    def _save_manifest(self) -> None:
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def path(self, name: str) -> Path:
        return self.root / name

    # paths of stage artifacts
    @property
    def raw_path(self) -> Path:
        if self.cfg.input:
            return self.cfg.resolve(self.cfg.input)
        return self.path(self.cfg.synth.tag() + ".gridpack")

    SPLIT_FILES = ("train.gridpack", "val.gridpack", "test.gridpack", "norm_stats.json")

    def run(self, stage: str, config_hash: str, inputs: list, outputs: list, fn) -> bool:
        """Run ``fn`` unless the manifest shows identical config, inputs and outputs.

        Returns True when the stage was (re)computed.
        """
        for p in inputs:
            if not Path(p).exists():
                raise DataError(f"stage {stage!r}: missing input {p}; run the upstream stage first")
        record = {
            "config_hash": config_hash,
            "inputs": {str(p): file_hash(p) for p in inputs},
        }
        old = self.manifest.get(stage)
        if old and all(old.get(k) == v for k, v in record.items()):
            outs = old.get("outputs", {})
            if set(outs) == {str(p) for p in outputs} and all(
                Path(p).exists() and file_hash(p) == h for p, h in outs.items()
            ):
                log.info("%s: up to date", stage)
                return False
        info = fn() or {}
        record["outputs"] = {str(p): file_hash(p) for p in outputs}
        record["info"] = info
        self.manifest[stage] = record
        self._save_manifest()
        log.info("%s: done", stage)
        return True


# ---------------------------------------------------------------- stages


def stage_synth(ws: Workspace) -> bool:
    cfg = ws.cfg
    if cfg.input:
        log.info("synth: skipped, paths.input is set")
        return False
    out = ws.raw_path
    return ws.run("synth", cfg.section_hash("synth", "run"), [], [out],
                  lambda: write_gridpack(synthetic_sst(cfg.synth), out))


def _target_grid(cfg: RunConfig) -> GeoGrid | None:
    if not cfg.grid:
        return None
    return GeoGrid(**cfg.grid)


def stage_preprocess(ws: Workspace) -> bool:
    cfg = ws.cfg
    src, out = ws.raw_path, ws.path("preprocessed.gridpack")

    def work():
        series = preprocess_series(cfg, read_series(src))
        write_gridpack(series, out)
        return {"shape": list(series.data.shape)}

    return ws.run("preprocess", cfg.section_hash("grid"), [src], [out], work)


def preprocess_series(cfg: RunConfig, series):
    """Kelvin, gaps filled, optionally regridded."""
    if series.unit == "celsius":
        series = celsius_to_kelvin(series)
    elif series.unit != "kelvin":
        raise DataError(f"expected celsius or kelvin input, got {series.unit!r}")
    series = fill_missing_with_mean(series)
    target = _target_grid(cfg)
    return bilinear_regrid(series, target) if target is not None else series


def split_and_normalize(cfg: RunConfig, series):
    """Split a kelvin series and normalize all parts with train statistics."""
    if cfg.split_mode == "dates":
        spec = cfg.split
    else:
        spec = SplitSpec.from_fractions(series.times, cfg.train_fraction, cfg.val_fraction)
    stats = fit_norm_stats(series, spec)
    parts = tuple(normalize(p, stats) for p in temporal_split(series, spec))
    return spec, stats, parts


def stage_split(ws: Workspace) -> bool:
    cfg = ws.cfg
    src = ws.path("preprocessed.gridpack")
    outs = [ws.path(n) for n in ws.SPLIT_FILES]

    def work():
        spec, stats, parts = split_and_normalize(cfg, read_gridpack(src))
        for name, part in zip(("train", "val", "test"), parts):
            write_gridpack(part, ws.path(f"{name}.gridpack"))
        meta = {
            "variable": stats.variable_name, "mean": stats.mean, "std": stats.std,
            "fitted_on": stats.fitted_on,
            "split": {k: [a.isoformat(), b.isoformat()] for k, (a, b) in spec.ranges().items()},
        }
        ws.path("norm_stats.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return {"days": {k: len(p) for k, p in zip(("train", "val", "test"), parts)}}

    return ws.run("split", cfg.section_hash("split"), [src], outs, work)


def read_norm_stats(path) -> NormStats:
    try:
        meta = json.loads(Path(path).read_text())
        return NormStats(meta["variable"], float(meta["mean"]), float(meta["std"]), meta["fitted_on"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"unreadable normalization stats {path}: {exc}") from exc


def _attach_file_log(path: Path):
    """Send package logging to ``path``; returns a callable that detaches it."""
    logger = logging.getLogger("oceancast")
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
    handler.setLevel(logging.INFO)
    level, propagate = logger.level, logger.propagate
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    # epoch lines reach the console only when the caller asked for INFO
    logger.propagate = logging.getLogger().isEnabledFor(logging.INFO)

    def detach():
        logger.removeHandler(handler)
        logger.setLevel(level)
        logger.propagate = propagate
        handler.close()

    return detach


def train_model(cfg: RunConfig, train, val, stats: NormStats):
    """Build the configured model and run its stage plans; returns (model, reports)."""
    from .model import ForecastModel

    mcfg = cfg.model_config()
    if "increment_scale" not in cfg.model_overrides:
        mcfg = replace(mcfg, increment_scale=fit_increment_scale(train))
    statics = train.grid.land_mask[None].astype(np.float64)
    if mcfg.n_static != statics.shape[0]:
        mcfg = replace(mcfg, n_static=statics.shape[0])
    model = ForecastModel(mcfg, statics=statics, seed=cfg.seed)
    weights = latitude_weights(train.grid).effective
    data = StageData(sliding_windows(train, 1), sliding_windows(val, 1), weights, stats)
    reports = run_plans(model, data, cfg.stage_plans(), cfg.loss, weight_decay=cfg.weight_decay)
    return model, reports


def stage_train(ws: Workspace) -> bool:
    cfg = ws.cfg
    ins = [ws.path(n) for n in ("train.gridpack", "val.gridpack", "norm_stats.json")]
    ckpt, csv, logf = ws.path("model.ckpt"), ws.path("train_report.csv"), ws.path("train.log")

    def work():
        detach = _attach_file_log(logf)
        try:
            stats = read_norm_stats(ins[2])
            model, reports = train_model(cfg, read_gridpack(ins[0]), read_gridpack(ins[1]), stats)
        finally:
            detach()
        save_checkpoint(model, ckpt)
        rows = [TrainReport.CSV_HEADER] + [r for rep in reports for r in rep.csv_rows()]
        csv.write_text("\n".join(rows) + "\n")
        return {
            rep.stage: {"best_epoch": rep.best_epoch, "changed_groups": sorted(rep.changed_groups()),
                        "hashes_after": rep.hashes_after}
            for rep in reports
        }

    # train.log holds timestamps, so it is not part of the cached outputs
    return ws.run("train", cfg.section_hash("run", "model", "loss", "train", "stage"), ins, [ckpt, csv], work)


def stage_eval(ws: Workspace) -> bool:
    cfg = ws.cfg
    ins = [ws.path("model.ckpt"), ws.path("test.gridpack"), ws.path("norm_stats.json")]
    out = ws.path("eval_metrics.csv")

    def work():
        model = load_checkpoint(ins[0])
        test, stats = read_gridpack(ins[1]), read_norm_stats(ins[2])
        windows = sliding_windows(test, 1)
        if not windows:
            raise DataError("test range too short for one-step evaluation")
        weights = latitude_weights(test.grid).effective
        preds = predict_windows(model, windows)[:, 0] * stats.std + stats.mean
        rows = [MetricReport.CSV_HEADER]
        reports = []
        for p, w in zip(preds, windows):
            m = compute_metrics(p, w.target * stats.std + stats.mean, weights)
            reports.append(m)
            rows.append(m.csv_row(str(w.dates[-1]), 1))
        out.write_text("\n".join(rows) + "\n")
        return {"mean_rmse": float(np.mean([m.rmse for m in reports])), "n": len(reports)}

    return ws.run("eval", "", ins, [out], work)


def stage_rollout(ws: Workspace) -> bool:
    cfg = ws.cfg
    ins = [ws.path("model.ckpt"), ws.path("test.gridpack"), ws.path("norm_stats.json")]
    out = ws.path("rollouts.npz")

    def work():
        model = load_checkpoint(ins[0])
        ev = evaluate_rollouts(model, read_gridpack(ins[1]), read_norm_stats(ins[2]),
                               steps=cfg.horizon, stride=cfg.stride)
        save_evaluation(ev, out)
        return {"n_rollouts": len(ev.results)}

    return ws.run("rollout", f"horizon={cfg.horizon};stride={cfg.stride}", ins, [out], work)


def stage_report(ws: Workspace) -> bool:
    cfg = ws.cfg
    ins = [ws.path("rollouts.npz"), ws.path("test.gridpack")]
    out_dir = ws.path("report")

    def work():
        if out_dir.exists():
            shutil.rmtree(out_dir)
        test = read_gridpack(ins[1])
        ev = load_evaluation(ins[0], latitude_weights(test.grid).effective)
        written = emit_reports(ev, out_dir, test.grid.land_mask, n_maps=cfg.n_maps)
        return {"files": sorted(p.name for p in written)}

    return ws.run("report", f"n_maps={cfg.n_maps}", ins, [out_dir], work)


STAGE_FUNCS = {
    "synth": stage_synth, "preprocess": stage_preprocess, "split": stage_split, "train": stage_train,
    "eval": stage_eval, "rollout": stage_rollout, "report": stage_report,
}
