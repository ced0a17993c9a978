import datetime as dt

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import random_grid
from oceancast.errors import DataError
from oceancast.grid import (
    FieldSeries, GeoGrid, NormStats, SplitSpec, bilinear_regrid, celsius_to_kelvin, denormalize,
    fill_missing_with_mean, fit_norm_stats, kelvin_to_celsius, latitude_weights, make_batches,
    normalize, sliding_windows, temporal_split,
)


def daily_series(start, n_days, grid, rng=None, unit="kelvin"):
    rng = rng or np.random.default_rng(0)
    times = np.datetime64(start, "D") + np.arange(n_days)
    data = 290.0 + rng.normal(size=(n_days,) + grid.shape)
    return FieldSeries("thetao", unit, times, data, grid)


# ---------------------------------------------------------------- GeoGrid


def test_axis_endpoints_inclusive():
    g = GeoGrid(19.55, 34.525, -20.97, -5.975, 5, 4)
    assert g.lats[0] == 19.55 and g.lats[-1] == pytest.approx(34.525, abs=1e-12)
    assert g.lons[0] == -20.97 and g.lons[-1] == pytest.approx(-5.975, abs=1e-12)
    assert np.allclose(np.diff(g.lats), (34.525 - 19.55) / 4)


def test_single_row_sits_at_midpoint():
    g = GeoGrid(10.0, 20.0, 0.0, 1.0, 1, 3)
    assert g.lats.tolist() == [15.0]


@pytest.mark.parametrize("kw", [
    dict(lat_min=5.0, lat_max=5.0), dict(lon_min=2.0, lon_max=1.0), dict(lat_min=-91.0),
    dict(n_lat=0), dict(land_mask=np.zeros((2, 2), dtype=bool)),
])
def test_grid_rejects_bad_definitions(kw):
    base = dict(lat_min=0.0, lat_max=10.0, lon_min=0.0, lon_max=10.0, n_lat=3, n_lon=3)
    base.update(kw)
    with pytest.raises(DataError):
        GeoGrid(**base)


def test_land_mask_is_read_only():
    g = GeoGrid(0, 1, 0, 1, 2, 2, np.eye(2, dtype=bool))
    with pytest.raises(ValueError):
        g.land_mask[0, 0] = False


# ---------------------------------------------------------------- latitude weights


@given(st.integers(0, 10_000), st.integers(1, 16), st.integers(1, 16))
def test_latitude_weight_normalisation(seed, n_lat, n_lon):
    g = random_grid(np.random.default_rng(seed), n_lat, n_lon)
    w = latitude_weights(g)
    assert abs(w.normalized.mean() - 1.0) < 1e-12
    assert abs(w.effective[g.sea_mask].mean() - 1.0) < 1e-12
    assert np.all(w.effective[g.land_mask] == 0.0)
    # same shape in latitude as cos(lat)
    ratio = w.normalized[:, 0] / np.cos(np.deg2rad(g.lats))
    assert np.allclose(ratio, ratio[0])


def test_weights_favour_equator():
    g = GeoGrid(0.0, 60.0, 0.0, 1.0, 3, 2)
    w = latitude_weights(g).normalized[:, 0]
    assert w[0] > w[1] > w[2]
    assert w[0] / w[2] == pytest.approx(1.0 / np.cos(np.deg2rad(60.0)))


# ---------------------------------------------------------------- unit conversion and filling


def test_celsius_kelvin_round_trip():
    g = GeoGrid(0, 1, 0, 1, 2, 2)
    s = daily_series("2020-01-01", 3, g, unit="celsius")
    k = celsius_to_kelvin(s)
    assert k.unit == "kelvin"
    assert np.allclose(k.data - s.data, 273.15)
    assert np.allclose(kelvin_to_celsius(k).data, s.data)
    with pytest.raises(DataError):
        celsius_to_kelvin(k)


def test_fill_missing_uses_sea_mean_per_slice():
    land = np.array([[False, False], [False, True]])
    g = GeoGrid(0, 1, 0, 1, 2, 2, land)
    data = np.array([[[1.0, 2.0], [np.nan, 99.0]], [[4.0, np.nan], [6.0, np.nan]]])
    s = FieldSeries("thetao", "kelvin", np.datetime64("2020-01-01") + np.arange(2), data, g)
    out = fill_missing_with_mean(s).data
    assert out[0].tolist() == [[1.0, 2.0], [1.5, 1.5]]
    assert out[1].tolist() == [[4.0, 5.0], [6.0, 5.0]]
    assert np.isnan(s.data).sum() == 3  # input untouched


def test_fill_missing_all_sea_missing_raises():
    g = GeoGrid(0, 1, 0, 1, 1, 2)
    s = FieldSeries("thetao", "kelvin", np.array(["2020-01-01"], "datetime64[D]"),
                    np.full((1, 1, 2), np.nan), g)
    with pytest.raises(DataError, match="no valid sea"):
        fill_missing_with_mean(s)


# ---------------------------------------------------------------- normalization


def test_norm_stats_fit_on_train_sea_only():
    rng = np.random.default_rng(1)
    land = np.zeros((3, 3), dtype=bool)
    land[0, 0] = True
    g = GeoGrid(0, 1, 0, 1, 3, 3, land)
    s = daily_series("2020-01-01", 10, g, rng)
    split = SplitSpec("2020-01-01", "2020-01-05", "2020-01-06", "2020-01-07", "2020-01-08", "2020-01-10")
    stats = fit_norm_stats(s, split)
    vals = [s.data[t, i, j] for t in range(5) for i in range(3) for j in range(3) if (i, j) != (0, 0)]
    mean = sum(vals) / len(vals)
    std = (sum((v - mean) ** 2 for v in vals) / len(vals)) ** 0.5
    assert stats.mean == pytest.approx(mean, abs=1e-12)
    assert stats.std == pytest.approx(std, abs=1e-12)
    back = denormalize(normalize(s, stats), stats)
    assert np.allclose(back.data, s.data, atol=1e-12)


def test_norm_stats_reject_constant_and_wrong_unit():
    g = GeoGrid(0, 1, 0, 1, 2, 2)
    s = FieldSeries("thetao", "kelvin", np.datetime64("2020-01-01") + np.arange(3), np.ones((3, 2, 2)), g)
    split = SplitSpec("2020-01-01", "2020-01-01", "2020-01-02", "2020-01-02", "2020-01-03", "2020-01-03")
    with pytest.raises(DataError, match="constant"):
        fit_norm_stats(s, split)
    with pytest.raises(DataError):
        NormStats("thetao", 0.0, 0.0)
    with pytest.raises(DataError):
        normalize(s.with_data(s.data, unit="celsius"), NormStats("thetao", 0.0, 1.0))
    with pytest.raises(DataError):
        normalize(s, NormStats("so", 0.0, 1.0))


# ---------------------------------------------------------------- regridding


def test_regrid_onto_same_grid_is_identity():
    g = GeoGrid(0, 10, 0, 10, 5, 6, np.eye(5, 6, dtype=bool))
    s = daily_series("2020-01-01", 2, g)
    out = bilinear_regrid(s, GeoGrid(0, 10, 0, 10, 5, 6))
    assert np.allclose(out.data, s.data, atol=1e-12)
    assert np.array_equal(out.grid.land_mask, g.land_mask)


@given(st.integers(0, 1000))
def test_regrid_reproduces_bilinear_fields_exactly(seed):
    # a*lat + b*lon + c*lat*lon is reproduced exactly by bilinear interpolation
    rng = np.random.default_rng(seed)
    src = GeoGrid(0.0, 10.0, 20.0, 30.0, 6, 7)
    a, b, c, d = rng.normal(size=4)
    lat, lon = np.meshgrid(src.lats, src.lons, indexing="ij")
    field = a * lat + b * lon + c * lat * lon + d
    s = FieldSeries("thetao", "kelvin", np.array(["2020-01-01"], "datetime64[D]"), field[None], src)
    lo = rng.uniform(0, 4)
    tgt = GeoGrid(lo, lo + rng.uniform(1, 6), 20 + rng.uniform(0, 4), 30 - rng.uniform(0, 4),
                  int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    tl, tn = np.meshgrid(tgt.lats, tgt.lons, indexing="ij")
    expect = a * tl + b * tn + c * tl * tn + d
    assert np.allclose(bilinear_regrid(s, tgt).data[0], expect, atol=1e-9)


def test_regrid_mask_nearest_and_bounds_check():
    land = np.zeros((3, 3), dtype=bool)
    land[:, 2] = True
    src = GeoGrid(0, 2, 0, 2, 3, 3, land)
    s = daily_series("2020-01-01", 1, src)
    out = bilinear_regrid(s, GeoGrid(0, 2, 0, 2, 5, 5))
    assert out.grid.land_mask[:, 4].all() and not out.grid.land_mask[:, :2].any()
    with pytest.raises(DataError, match="outside source"):
        bilinear_regrid(s, GeoGrid(-1, 2, 0, 2, 3, 3))


# ---------------------------------------------------------------- splitting


def test_default_split_day_counts():
    spec = SplitSpec()
    counts = {k: (b - a).days + 1 for k, (a, b) in spec.ranges().items()}
    assert counts == {"train": 1790, "val": 383, "test": 385}
    g = GeoGrid(0, 1, 0, 1, 1, 1)
    s = daily_series("2014-01-01", (dt.date(2021, 1, 1) - dt.date(2014, 1, 1)).days + 1, g)
    tr, va, te = temporal_split(s, spec)
    assert (len(tr), len(va), len(te)) == (1790, 383, 385)
    assert str(tr.times[-1]) == "2018-11-25" and str(va.times[0]) == "2018-11-26"
    assert str(te.times[0]) == "2019-12-14" and str(te.times[-1]) == "2021-01-01"


def test_split_rejects_overlap_and_gaps():
    with pytest.raises(DataError, match="overlap"):
        SplitSpec("2020-01-01", "2020-01-05", "2020-01-05", "2020-01-07", "2020-01-08", "2020-01-09")
    g = GeoGrid(0, 1, 0, 1, 1, 1)
    s = daily_series("2020-01-01", 9, g)
    s = s.select(np.arange(9) != 6)  # drop 2020-01-07
    spec = SplitSpec("2020-01-01", "2020-01-05", "2020-01-06", "2020-01-07", "2020-01-08", "2020-01-09")
    with pytest.raises(DataError, match="val range"):
        temporal_split(s, spec)


@given(st.integers(40, 400), st.floats(0.1, 0.8), st.floats(0.05, 0.15))
def test_fraction_split_partitions_the_dates(n, train, val):
    times = np.datetime64("2014-01-01") + np.arange(n)
    spec = SplitSpec.from_fractions(times, train, val)
    g = GeoGrid(0, 1, 0, 1, 1, 1)
    parts = temporal_split(daily_series("2014-01-01", n, g), spec)
    assert sum(len(p) for p in parts) == n
    assert len(parts[0]) == round(n * train)


# ---------------------------------------------------------------- windows and batches


@given(st.integers(3, 40), st.integers(1, 5))
def test_sliding_window_count_and_content(T, h):
    g = GeoGrid(0, 1, 0, 1, 1, 2)
    s = daily_series("2020-01-01", T, g)
    if T < 2 + h:
        with pytest.raises(DataError):
            sliding_windows(s, h)
        return
    ws = sliding_windows(s, h)
    assert len(ws) == T - (2 + h) + 1
    k = len(ws) // 2
    assert np.array_equal(ws[k].inputs, s.data[k:k + 2])
    assert np.array_equal(ws[k].targets, s.data[k + 2:k + 2 + h])
    assert ws[k].horizon == h


@given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 100))
def test_batches_cover_every_window_once(n, bs, seed):
    g = GeoGrid(0, 1, 0, 1, 1, 1)
    ws = sliding_windows(daily_series("2020-01-01", n + 2, g), 1)
    batches = make_batches(ws, bs, seed)
    assert all(len(b) == bs for b in batches)
    real = [id(w) for b in batches for w, p in zip(b.windows, b.padded) if not p]
    assert sorted(real) == sorted(id(w) for w in ws)
    assert sum(int(b.padded.sum()) for b in batches) == len(batches) * bs - n
    again = make_batches(ws, bs, seed)
    assert [[id(w) for w in b.windows] for b in batches] == [[id(w) for w in b.windows] for b in again]
