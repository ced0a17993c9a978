"""Geographic raster, field series, and the preprocessing/batching pipeline.

Everything here is a pure function over immutable values. Dates are numpy
``datetime64[D]`` arrays; missing values are NaN.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import DataError

UNITS = ("celsius", "kelvin", "normalized")
KELVIN_OFFSET = 273.15


@dataclass(frozen=True, eq=False)
class GeoGrid:
    """Uniform lat/lon raster with inclusive endpoints.

    ``land_mask`` is True on land. With ``n == 1`` along an axis the single
    row/column sits at the midpoint of the bounds.
    """

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    n_lat: int
    n_lon: int
    land_mask: np.ndarray = None

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise DataError(
                f"grid bounds must be increasing: lat [{self.lat_min}, {self.lat_max}], "
                f"lon [{self.lon_min}, {self.lon_max}]"
            )
        if not (-90.0 <= self.lat_min and self.lat_max <= 90.0):
            raise DataError(f"latitudes outside [-90, 90]: [{self.lat_min}, {self.lat_max}]")
        if self.n_lat < 1 or self.n_lon < 1:
            raise DataError(f"grid counts must be positive, got {self.n_lat}x{self.n_lon}")
        mask = self.land_mask
        if mask is None:
            mask = np.zeros((self.n_lat, self.n_lon), dtype=bool)
        mask = np.array(mask, dtype=bool)
        if mask.shape != (self.n_lat, self.n_lon):
            raise DataError(f"land mask shape {mask.shape} != grid shape {(self.n_lat, self.n_lon)}")
        mask.setflags(write=False)
        object.__setattr__(self, "land_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def lats(self) -> np.ndarray:
        return _axis(self.lat_min, self.lat_max, self.n_lat)

    @property
    def lons(self) -> np.ndarray:
        return _axis(self.lon_min, self.lon_max, self.n_lon)

    def lat_of(self, i: int) -> float:
        return float(self.lats[i])

    def lon_of(self, j: int) -> float:
        return float(self.lons[j])

    @property
    def sea_mask(self) -> np.ndarray:
        return ~self.land_mask

    def with_mask(self, land_mask) -> "GeoGrid":
        return replace(self, land_mask=land_mask)

    def same_as(self, other: "GeoGrid") -> bool:
        return (
            (self.lat_min, self.lat_max, self.lon_min, self.lon_max, self.n_lat, self.n_lon)
            == (other.lat_min, other.lat_max, other.lon_min, other.lon_max, other.n_lat, other.n_lon)
            and np.array_equal(self.land_mask, other.land_mask)
        )


def _axis(lo: float, hi: float, n: int) -> np.ndarray:
    if n == 1:
        return np.array([(lo + hi) / 2.0])
    return lo + np.arange(n) * ((hi - lo) / (n - 1))


@dataclass(frozen=True, eq=False)
class LatWeights:
    raw: np.ndarray         # (n_lat,) cos(lat)
    normalized: np.ndarray  # (n_lat, n_lon), mean 1 over all cells
    effective: np.ndarray   # (n_lat, n_lon), 0 on land, mean 1 over sea


def latitude_weights(grid: GeoGrid) -> LatWeights:
    raw = np.cos(np.deg2rad(grid.lats))
    full = np.broadcast_to(raw[:, None], grid.shape).astype(np.float64)
    normalized = full / full.mean()
    sea = grid.sea_mask
    effective = np.where(sea, normalized, 0.0)
    if sea.any():
        effective = effective / effective[sea].mean()
    return LatWeights(raw=raw, normalized=normalized, effective=effective)


@dataclass(frozen=True, eq=False)
class FieldSeries:
    variable_name: str
    unit: str
    times: np.ndarray  # datetime64[D], strictly increasing
    data: np.ndarray   # (T, n_lat, n_lon)
    grid: GeoGrid

    def __post_init__(self):
        if self.unit not in UNITS:
            raise DataError(f"unknown unit {self.unit!r}; expected one of {UNITS}")
        times = np.asarray(self.times, dtype="datetime64[D]")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise DataError(f"series data must be (T, n_lat, n_lon), got shape {data.shape}")
        if data.shape[0] != times.shape[0]:
            raise DataError(f"{data.shape[0]} time slices but {times.shape[0]} dates")
        if data.shape[1:] != self.grid.shape:
            raise DataError(f"data raster {data.shape[1:]} != grid {self.grid.shape}")
        if times.size > 1 and not np.all(np.diff(times) > np.timedelta64(0, "D")):
            raise DataError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.times.shape[0]

    def with_data(self, data, unit: str | None = None) -> "FieldSeries":
        return replace(self, data=data, unit=unit or self.unit)

    def select(self, index) -> "FieldSeries":
        return replace(self, times=self.times[index], data=self.data[index])


@dataclass(frozen=True)
class NormStats:
    variable_name: str
    mean: float
    std: float
    fitted_on: str = "train"

    def __post_init__(self):
        if not self.std > 0:
            raise DataError(f"normalization std must be positive, got {self.std}")


def _to_date(value) -> dt.date:
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value))


@dataclass(frozen=True)
class SplitSpec:
    """Three contiguous date ranges; every bound is inclusive, as printed."""

    train_start: dt.date = dt.date(2014, 1, 1)
    train_end: dt.date = dt.date(2018, 11, 25)
    val_start: dt.date = dt.date(2018, 11, 26)
    val_end: dt.date = dt.date(2019, 12, 13)
    test_start: dt.date = dt.date(2019, 12, 14)
    test_end: dt.date = dt.date(2021, 1, 1)

    def __post_init__(self):
        for name in ("train_start", "train_end", "val_start", "val_end", "test_start", "test_end"):
            object.__setattr__(self, name, _to_date(getattr(self, name)))
        order = [self.train_start, self.train_end, self.val_start, self.val_end, self.test_start, self.test_end]
        if not (order[0] <= order[1] < order[2] <= order[3] < order[4] <= order[5]):
            raise DataError(f"split dates overlap or are out of order: {[d.isoformat() for d in order]}")

    def ranges(self) -> dict[str, tuple[dt.date, dt.date]]:
        return {
            "train": (self.train_start, self.train_end),
            "val": (self.val_start, self.val_end),
            "test": (self.test_start, self.test_end),
        }

    @classmethod
    def from_fractions(cls, times, train: float = 0.7, val: float = 0.15) -> "SplitSpec":
        """Contiguous split of ``times`` by fraction; the test range takes the rest."""
        times = np.asarray(times, dtype="datetime64[D]")
        n = times.shape[0]
        n_train = int(round(n * train))
        n_val = int(round(n * val))
        if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
            raise DataError(f"cannot split {n} dates into {train}/{val}/rest fractions")
        d = [t.astype(object) for t in times]
        return cls(d[0], d[n_train - 1], d[n_train], d[n_train + n_val - 1], d[n_train + n_val], d[-1])


@dataclass(frozen=True, eq=False)
class SampleWindow:
    inputs: np.ndarray   # (2, ...) states X^{t-1}, X^t
    targets: np.ndarray  # (horizon, ...)
    dates: np.ndarray    # (2 + horizon,) datetime64[D]

    @property
    def target(self) -> np.ndarray:
        return self.targets[0]

    @property
    def horizon(self) -> int:
        return self.targets.shape[0]


@dataclass(frozen=True, eq=False)
class Batch:
    windows: list
    padded: np.ndarray = field(default=None)  # bool per sample; padded samples excluded from metrics

    @property
    def inputs(self) -> np.ndarray:
        return np.stack([w.inputs for w in self.windows])

    @property
    def targets(self) -> np.ndarray:
        return np.stack([w.targets for w in self.windows])

    def __len__(self) -> int:
        return len(self.windows)


# ---------------------------------------------------------------- preprocessing


def celsius_to_kelvin(series: FieldSeries) -> FieldSeries:
    if series.unit != "celsius":
        raise DataError(f"celsius_to_kelvin expects unit 'celsius', got {series.unit!r}")
    return series.with_data(series.data + KELVIN_OFFSET, unit="kelvin")


def kelvin_to_celsius(series: FieldSeries) -> FieldSeries:
    if series.unit != "kelvin":
        raise DataError(f"kelvin_to_celsius expects unit 'kelvin', got {series.unit!r}")
    return series.with_data(series.data - KELVIN_OFFSET, unit="celsius")


def fill_missing_with_mean(series: FieldSeries) -> FieldSeries:
    """Replace missing sea values and all land values by the slice's sea mean."""
    sea = series.grid.sea_mask
    data = series.data.copy()
    for t in range(data.shape[0]):
        sea_vals = data[t][sea]
        ok = ~np.isnan(sea_vals)
        if not ok.any():
            raise DataError(f"time slice {series.times[t]} has no valid sea values")
        mean = sea_vals[ok].mean()
        data[t][np.isnan(data[t]) | ~sea] = mean
    return series.with_data(data)


def fit_norm_stats(series: FieldSeries, split: SplitSpec) -> NormStats:
    """Population mean/std over sea cells of the train range."""
    if series.unit != "kelvin":
        raise DataError(f"norm stats are fitted in kelvin, got {series.unit!r}")
    lo, hi = split.ranges()["train"]
    sel = _date_mask(series.times, lo, hi)
    if not sel.any():
        raise DataError(f"series has no dates in the train range {lo}..{hi}")
    vals = series.data[sel][:, series.grid.sea_mask]
    vals = vals[~np.isnan(vals)]
    mean = float(vals.mean())
    std = float(vals.std())
    if std == 0.0:
        raise DataError(f"field {series.variable_name!r} is constant over the train range")
    return NormStats(series.variable_name, mean, std, fitted_on="train")


def normalize(series: FieldSeries, stats: NormStats) -> FieldSeries:
    _check_variable(series, stats)
    if series.unit != "kelvin":
        raise DataError(f"normalize expects unit 'kelvin', got {series.unit!r}")
    return series.with_data((series.data - stats.mean) / stats.std, unit="normalized")


def denormalize(series: FieldSeries, stats: NormStats) -> FieldSeries:
    _check_variable(series, stats)
    if series.unit != "normalized":
        raise DataError(f"denormalize expects unit 'normalized', got {series.unit!r}")
    return series.with_data(series.data * stats.std + stats.mean, unit="kelvin")


def _check_variable(series: FieldSeries, stats: NormStats) -> None:
    if series.variable_name != stats.variable_name:
        raise DataError(f"stats for {stats.variable_name!r} applied to {series.variable_name!r}")


def bilinear_regrid(series: FieldSeries, target: GeoGrid) -> FieldSeries:
    """Bilinear interpolation of each slice; target land mask from nearest source cell.

    The target's own ``land_mask`` is ignored and replaced.
    """
    src = series.grid
    eps = 1e-9
    if (
        target.lat_min < src.lat_min - eps or target.lat_max > src.lat_max + eps
        or target.lon_min < src.lon_min - eps or target.lon_max > src.lon_max + eps
    ):
        raise DataError(
            f"target grid lat [{target.lat_min}, {target.lat_max}] lon [{target.lon_min}, {target.lon_max}] "
            f"outside source lat [{src.lat_min}, {src.lat_max}] lon [{src.lon_min}, {src.lon_max}]"
        )
    if src.n_lat < 2 or src.n_lon < 2:
        raise DataError("bilinear regrid needs at least 2 source points per axis")
    qlat = np.clip(target.lats, src.lats[0], src.lats[-1])
    qlon = np.clip(target.lons, src.lons[0], src.lons[-1])
    pts = np.stack(np.meshgrid(qlat, qlon, indexing="ij"), axis=-1).reshape(-1, 2)
    values = np.moveaxis(series.data, 0, -1)  # (n_lat, n_lon, T)
    interp = RegularGridInterpolator((src.lats, src.lons), values, method="linear")
    out = interp(pts).reshape(target.n_lat, target.n_lon, -1)
    nearest = RegularGridInterpolator(
        (src.lats, src.lons), src.land_mask.astype(np.float64), method="nearest"
    )
    mask = nearest(pts).reshape(target.shape) > 0.5
    return FieldSeries(
        series.variable_name, series.unit, series.times, np.moveaxis(out, -1, 0), target.with_mask(mask)
    )


# ---------------------------------------------------------------- splitting and batching


def _date_mask(times: np.ndarray, lo: dt.date, hi: dt.date) -> np.ndarray:
    return (times >= np.datetime64(lo, "D")) & (times <= np.datetime64(hi, "D"))


def temporal_split(series: FieldSeries, split: SplitSpec) -> tuple[FieldSeries, FieldSeries, FieldSeries]:
    out = []
    for name, (lo, hi) in split.ranges().items():
        sel = _date_mask(series.times, lo, hi)
        expected = (hi - lo).days + 1
        if int(sel.sum()) != expected:
            raise DataError(
                f"{name} range {lo}..{hi} needs {expected} daily slices, series has {int(sel.sum())}"
            )
        out.append(series.select(sel))
    return tuple(out)


def sliding_windows(series: FieldSeries, horizon: int = 1) -> list[SampleWindow]:
    """Stride-1 windows of two inputs followed by ``horizon`` targets."""
    if horizon < 1:
        raise DataError(f"horizon must be >= 1, got {horizon}")
    size = 2 + horizon
    n = len(series) - size + 1
    if n < 1:
        raise DataError(f"series of length {len(series)} too short for window length {size}")
    return [
        SampleWindow(series.data[s:s + 2], series.data[s + 2:s + size], series.times[s:s + size])
        for s in range(n)
    ]


def make_batches(windows: Sequence[SampleWindow], batch_size: int, seed: int) -> list[Batch]:
    """Shuffle deterministically, then pad the last batch cyclically from the start."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if len(windows) == 0:
        raise DataError("no windows to batch")
    order = np.random.default_rng(seed).permutation(len(windows))
    n_batches = -(-len(windows) // batch_size)
    total = n_batches * batch_size
    idx = np.resize(order, total)  # cyclic repetition
    padded = np.arange(total) >= len(windows)
    return [
        Batch([windows[i] for i in idx[b * batch_size:(b + 1) * batch_size]],
              padded[b * batch_size:(b + 1) * batch_size].copy())
        for b in range(n_batches)
    ]
