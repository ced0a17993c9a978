"""Deterministic synthetic SST series used as the acceptance fixture."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError
from .grid import FieldSeries, GeoGrid

# Canary upwelling region, degrees
REGION = dict(lat_min=19.55, lat_max=34.525, lon_min=-20.97, lon_max=-5.975)


@dataclass(frozen=True)
class SynthParams:
    n_days: int = 1096
    n_lat: int = 24
    n_lon: int = 24
    start: str = "2014-01-01"
    seed: int = 0
    land_cols: int = 4          # land strip on the eastern edge
    gradient: float = 6.0       # south-north contrast, degC
    coastal_anomaly: float = 2.5
    coastal_scale: float = 2.0  # e-folding distance from the coast, cells
    annual_amplitude: float = 2.5
    period: float = 365.25
    noise_std: float = 0.05     # daily innovation
    noise_momentum: float = 0.8
    noise_decay: float = 0.95
    noise_smoothing: float = 2.0
    missing_fraction: float = 0.0

    def tag(self) -> str:
        return f"synth_seed{self.seed}_t{self.n_days}_{self.n_lat}x{self.n_lon}"

    def to_dict(self) -> dict:
        return asdict(self)


def synthetic_sst(params: SynthParams = SynthParams()) -> FieldSeries:
    """North-south gradient, coastal cold band, annual cycle, and smooth noise.

    The noise is an AR process whose daily increments are themselves
    autocorrelated (``momentum``), so recent tendency carries predictive skill
    beyond persistence. Land cells are NaN, in degrees Celsius.
    """
    p = params
    if p.n_days < 4 or p.n_lat < 2 or p.n_lon < p.land_cols + 2 or p.land_cols < 0:
        raise DataError(f"invalid synthetic dimensions {p.n_days}x{p.n_lat}x{p.n_lon} (land cols {p.land_cols})")
    rng = np.random.default_rng(p.seed)
    land = np.zeros((p.n_lat, p.n_lon), dtype=bool)
    if p.land_cols:
        land[:, p.n_lon - p.land_cols:] = True
    grid = GeoGrid(n_lat=p.n_lat, n_lon=p.n_lon, land_mask=land, **REGION)

    frac_north = np.linspace(0.0, 1.0, p.n_lat)[:, None]
    base = 24.0 - p.gradient * frac_north * np.ones((1, p.n_lon))
    dist = (p.n_lon - p.land_cols - 1) - np.arange(p.n_lon)  # cells west of the coast
    coast = -p.coastal_anomaly * np.exp(-np.clip(dist, 0, None) / p.coastal_scale)[None, :]

    times = np.datetime64(p.start, "D") + np.arange(p.n_days)
    day = np.arange(p.n_days, dtype=np.float64)
    phase = 2.0 * np.pi * day / p.period
    annual = p.annual_amplitude * np.sin(phase - 1.8)
    upwelling = 1.0 + 0.4 * np.sin(phase - 0.3)  # seasonal modulation of the coastal band

    smooth = lambda a: gaussian_filter(a, p.noise_smoothing, mode="wrap")
    scale = 1.0 / smooth(rng.standard_normal((p.n_lat, p.n_lon))).std()
    vel = np.zeros((p.n_lat, p.n_lon))
    noise = np.zeros((p.n_lat, p.n_lon))
    data = np.empty((p.n_days, p.n_lat, p.n_lon))
    for t in range(p.n_days):
        vel = p.noise_momentum * vel + p.noise_std * scale * smooth(rng.standard_normal((p.n_lat, p.n_lon)))
        noise = p.noise_decay * noise + vel
        data[t] = base + coast * upwelling[t] + annual[t] + noise

    data[:, land] = np.nan
    if p.missing_fraction > 0:
        holes = rng.random(data.shape) < p.missing_fraction
        data[holes] = np.nan
    return FieldSeries("thetao", "celsius", times, data, grid)
