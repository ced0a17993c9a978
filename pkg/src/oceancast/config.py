"""Run configuration: a sectioned key=value file (INI syntax).

Example::

    [run]
    seed = 0
    work_dir = work

    [model]
    preset = tiny

    [train]
    variant = C
    scale = small

Explicit stages replace the variant selector::

    [train]
    stages = warmup, full

    [stage warmup]
    groups = decoder
    lr = 1e-4
    epochs = 15
    batch_size = 3
"""

from __future__ import annotations

import configparser
import datetime as dt
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, DataError
from .grid import SplitSpec
from .metrics import LossConfig
from .model import ModelConfig, preset
from .synthetic import SynthParams
from .training import SCALES, VARIANTS, WEIGHT_DECAY, StagePlan

_GRID_KEYS = ("lat_min", "lat_max", "lon_min", "lon_max", "n_lat", "n_lon")
_DATE_KEYS = ("train_start", "train_end", "val_start", "val_end", "test_start", "test_end")


@dataclass
class RunConfig:
    seed: int = 0
    work_dir: str = "work"
    input: str = ""  # GridPack file or CSV directory; empty -> output of `synth`
    synth: SynthParams = SynthParams()
    grid: dict = field(default_factory=dict)  # regrid target; empty keeps the native grid
    split_mode: str = "fractions"
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    split: SplitSpec | None = None  # used when split_mode == "dates"
    preset: str = "tiny"
    model_overrides: dict = field(default_factory=dict)
    loss: LossConfig = LossConfig()
    variant: str | None = "C"
    scale: str = "small"
    epochs: int | None = None
    batch_size: int | None = None
    stages: tuple = ()
    weight_decay: float = WEIGHT_DECAY
    horizon: int = 10
    stride: int = 1
    n_maps: int = 1
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.synth.seed != self.seed:  # the synthetic series follows the run seed
            self.synth = replace(self.synth, seed=self.seed)
        if (self.variant is None) == (not self.stages):
            raise ConfigError("train: give exactly one of 'variant' or 'stages'")
        if self.variant is not None and self.variant not in VARIANTS:
            raise ConfigError(f"train.variant: {self.variant!r} not in {VARIANTS}")
        if self.scale not in SCALES:
            raise ConfigError(f"train.scale: {self.scale!r} not in {sorted(SCALES)}")
        if self.split_mode not in ("fractions", "dates"):
            raise ConfigError(f"split.mode: {self.split_mode!r} not in ('fractions', 'dates')")
        if self.split_mode == "dates" and self.split is None:
            raise ConfigError("split.mode = dates needs the six split dates")
        if self.horizon < 1:
            raise ConfigError("rollout.horizon must be >= 1")
        if self.stride < 1:
            raise ConfigError("rollout.stride must be >= 1")
        if self.grid and set(self.grid) != set(_GRID_KEYS):
            raise ConfigError(f"grid: overrides need all of {_GRID_KEYS}")
        self.model_config()  # validates preset and overrides

    def model_config(self) -> ModelConfig:
        try:
            return preset(self.preset, **self.model_overrides)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def stage_plans(self) -> list[StagePlan]:
        from .training import variant_plans

        if self.stages:
            return list(self.stages)
        return variant_plans(self.variant, self.scale, self.seed, self.epochs, self.batch_size)

    # -- paths

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def work_path(self, work_root: str | None = None) -> Path:
        p = Path(self.work_dir)
        if p.is_absolute():
            return p
        return Path(work_root) / p if work_root else Path(self.base_dir) / p

    def validate_paths(self) -> None:
        if self.input and not self.resolve(self.input).exists():
            raise ConfigError(f"paths.input: {self.input!r} does not exist")

    def section_hash(self, *sections: str) -> str:
        parser = _to_parser(self)
        h = hashlib.sha256()
        for name in sections:
            for sec in sorted(s for s in parser.sections() if s == name or s.startswith(name + " ")):
                h.update(sec.encode())
                for k, v in sorted(parser[sec].items()):
                    h.update(f"{k}={v}\n".encode())
        return h.hexdigest()


# ---------------------------------------------------------------- parsing


def _value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return tuple(_value(p) for p in raw.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def _get(sec, key, cast, default, where):
    if key not in sec or sec[key].strip() == "":
        return default
    try:
        return cast(sec[key].strip())
    except ValueError as exc:
        raise ConfigError(f"{where}.{key}: cannot parse {sec[key]!r} ({exc})") from None


def _floats(raw: str) -> tuple:
    return tuple(float(p) for p in raw.split(",") if p.strip())


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    known = {"run", "paths", "synth", "grid", "split", "model", "loss", "train", "rollout"}
    for name in parser.sections():
        if name not in known and not name.startswith("stage "):
            raise ConfigError(f"unknown config section [{name}]")
    sec = lambda n: parser[n] if parser.has_section(n) else {}
    kw = {}

    run = sec("run")
    kw["seed"] = _get(run, "seed", int, 0, "run")
    kw["work_dir"] = _get(run, "work_dir", str, "work", "run")
    kw["input"] = _get(sec("paths"), "input", str, "", "paths")

    synth = sec("synth")
    skw = {}
    for f in fields(SynthParams):
        if f.name == "seed":
            continue
        skw[f.name] = _get(synth, f.name, type(f.default), f.default, "synth")
    kw["synth"] = SynthParams(seed=kw["seed"], **skw)

    grid = sec("grid")
    g = {}
    for k in _GRID_KEYS:
        if k in grid and grid[k].strip():
            g[k] = _get(grid, k, int if k.startswith("n_") else float, None, "grid")
    kw["grid"] = g

    split = sec("split")
    kw["split_mode"] = _get(split, "mode", str, "fractions", "split")
    kw["train_fraction"] = _get(split, "train_fraction", float, 0.7, "split")
    kw["val_fraction"] = _get(split, "val_fraction", float, 0.15, "split")
    if kw["split_mode"] == "dates":
        dates = {}
        for k in _DATE_KEYS:
            dates[k] = _get(split, k, dt.date.fromisoformat, getattr(SplitSpec, k), "split")
        try:
            kw["split"] = SplitSpec(**dates)
        except DataError as exc:
            raise ConfigError(f"split: {exc}") from None

    model = sec("model")
    kw["preset"] = _get(model, "preset", str, "tiny", "model")
    mfields = {f.name for f in fields(ModelConfig)}
    overrides = {}
    for k in (model.keys() if model else []):
        if k == "preset":
            continue
        if k not in mfields:
            raise ConfigError(f"model.{k}: unknown model setting")
        v = _value(model[k])
        if k in ("enc_layers", "dec_layers", "lambda_set", "level_values") and not isinstance(v, tuple):
            v = (v,)
        overrides[k] = v
    kw["model_overrides"] = overrides

    loss = sec("loss")
    atmos = _get(loss, "atmos_weights", str, "", "loss")
    kw["loss"] = LossConfig(
        alpha=_get(loss, "alpha", float, 1.0, "loss"),
        beta=_get(loss, "beta", float, 1.0, "loss"),
        gamma=_get(loss, "gamma", float, 1.0, "loss"),
        surface_weights=_get(loss, "surface_weights", _floats, (1.0,), "loss"),
        atmos_weights=tuple(_floats(r) for r in atmos.split("|") if r.strip()),
    )

    train = sec("train")
    kw["variant"] = _get(train, "variant", str, None, "train")
    kw["scale"] = _get(train, "scale", str, "small", "train")
    kw["epochs"] = _get(train, "epochs", int, None, "train")
    kw["batch_size"] = _get(train, "batch_size", int, None, "train")
    kw["weight_decay"] = _get(train, "weight_decay", float, WEIGHT_DECAY, "train")
    stage_names = [s.strip() for s in _get(train, "stages", str, "", "train").split(",") if s.strip()]
    stages = []
    for i, name in enumerate(stage_names):
        key = f"stage {name}"
        if not parser.has_section(key):
            raise ConfigError(f"train.stages: missing section [{key}]")
        st = parser[key]
        where = f"stage {name}"
        groups = tuple(g.strip() for g in _get(st, "groups", str, "", where).split(",") if g.strip())
        stages.append(StagePlan(
            name, groups,
            _get(st, "lr", float, 0.0, where),
            _get(st, "epochs", int, 0, where),
            _get(st, "batch_size", int, 0, where),
            _get(st, "seed", int, kw["seed"] + i, where),
        ))
    kw["stages"] = tuple(stages)
    if kw["variant"] is None and not stages:
        kw["variant"] = "C"

    ro = sec("rollout")
    kw["horizon"] = _get(ro, "horizon", int, 10, "rollout")
    kw["stride"] = _get(ro, "stride", int, 1, "rollout")
    kw["n_maps"] = _get(ro, "n_maps", int, 1, "rollout")
    return RunConfig(base_dir=base_dir, **kw)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=str(path.parent))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v) + ("," if len(v) == 1 else "")
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _to_parser(cfg: RunConfig) -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None)
    p["run"] = {"seed": str(cfg.seed), "work_dir": cfg.work_dir}
    p["paths"] = {"input": cfg.input}
    p["synth"] = {f.name: _fmt(getattr(cfg.synth, f.name)) for f in fields(SynthParams) if f.name != "seed"}
    p["grid"] = {k: _fmt(v) for k, v in cfg.grid.items()}
    split = {"mode": cfg.split_mode, "train_fraction": _fmt(cfg.train_fraction), "val_fraction": _fmt(cfg.val_fraction)}
    if cfg.split is not None:
        split.update({k: getattr(cfg.split, k).isoformat() for k in _DATE_KEYS})
    p["split"] = split
    p["model"] = {"preset": cfg.preset, **{k: _fmt(v) for k, v in sorted(cfg.model_overrides.items())}}
    loss = {
        "alpha": _fmt(cfg.loss.alpha), "beta": _fmt(cfg.loss.beta), "gamma": _fmt(cfg.loss.gamma),
        "surface_weights": _fmt(cfg.loss.surface_weights),
    }
    if cfg.loss.atmos_weights:
        loss["atmos_weights"] = " | ".join(_fmt(r) for r in cfg.loss.atmos_weights)
    p["loss"] = loss
    train = {"scale": cfg.scale, "weight_decay": _fmt(cfg.weight_decay)}
    if cfg.variant is not None:
        train["variant"] = cfg.variant
    if cfg.epochs is not None:
        train["epochs"] = str(cfg.epochs)
    if cfg.batch_size is not None:
        train["batch_size"] = str(cfg.batch_size)
    if cfg.stages:
        train["stages"] = ", ".join(s.name for s in cfg.stages)
    p["train"] = train
    for s in cfg.stages:
        p[f"stage {s.name}"] = {
            "groups": ", ".join(s.trainable_groups), "lr": _fmt(float(s.lr)),
            "epochs": str(s.epochs), "batch_size": str(s.batch_size), "seed": str(s.seed),
        }
    p["rollout"] = {"horizon": str(cfg.horizon), "stride": str(cfg.stride), "n_maps": str(cfg.n_maps)}
    return p


def serialize_config(cfg: RunConfig) -> str:
    import io

    buf = io.StringIO()
    _to_parser(cfg).write(buf)
    return buf.getvalue()


def with_overrides(cfg: RunConfig, seed: int | None = None, preset_name: str | None = None) -> RunConfig:
    kw = {}
    if seed is not None:
        kw["seed"] = seed
    if preset_name is not None:
        kw["preset"] = preset_name
    return replace(cfg, **kw) if kw else cfg
