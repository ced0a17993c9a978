"""GridPack binary container and a CSV-directory importer.

Layout (little-endian)::

    magic       8s   b"GRIDPAK1"
    n_time      u32
    n_lat       u32
    n_lon       u32
    lat_min     f64
    lat_max     f64
    lon_min     f64
    lon_max     f64
    unit        u8   0=celsius 1=kelvin 2=normalized
    name_len    u16
    name        name_len bytes, UTF-8
    land_mask   n_lat*n_lon bytes, 1 = land
    times       n_time * i64, days since 1970-01-01
    data        n_time*n_lat*n_lon * f32, time-major then lat-major
"""

from __future__ import annotations

import csv
import os
import re
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .grid import UNITS, FieldSeries, GeoGrid

MAGIC = b"GRIDPAK1"
_HEADER = struct.Struct("<8s3I4dBH")
HEADER_SIZE = _HEADER.size  # fixed part, before the variable name


class GridPackError(DataError):
    pass


class BadMagicError(GridPackError):
    pass


class TruncatedError(GridPackError):
    pass


class NonIncreasingTimesError(GridPackError):
    pass


class HeaderError(GridPackError):
    pass


def encode_gridpack(series: FieldSeries) -> bytes:
    g = series.grid
    name = series.variable_name.encode("utf-8")
    head = _HEADER.pack(
        MAGIC, len(series), g.n_lat, g.n_lon,
        g.lat_min, g.lat_max, g.lon_min, g.lon_max,
        UNITS.index(series.unit), len(name),
    )
    days = series.times.astype("datetime64[D]").astype("<i8")
    return b"".join([
        head,
        name,
        g.land_mask.astype(np.uint8).tobytes(),
        days.tobytes(),
        series.data.astype("<f4").tobytes(),
    ])


def write_gridpack(series: FieldSeries, path) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_gridpack(series))
    except OSError as exc:
        raise GridPackError(f"cannot write GridPack {path}: {exc}") from exc


def decode_gridpack(buf: bytes, source: str = "<bytes>") -> FieldSeries:
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:8]!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedError(f"{source}: truncated header ({len(buf)} < {HEADER_SIZE} bytes)")
    _, nt, nlat, nlon, lat0, lat1, lon0, lon1, unit, nlen = _HEADER.unpack_from(buf)
    if nt < 1 or nlat < 1 or nlon < 1:
        raise HeaderError(f"{source}: non-positive dimensions {(nt, nlat, nlon)}")
    if unit >= len(UNITS):
        raise HeaderError(f"{source}: unknown unit code {unit}")
    cells = nlat * nlon
    expected = HEADER_SIZE + nlen + cells + 8 * nt + 4 * nt * cells
    if len(buf) < expected:
        raise TruncatedError(f"{source}: truncated payload ({len(buf)} < {expected} bytes)")
    if len(buf) > expected:
        raise HeaderError(f"{source}: {len(buf) - expected} trailing bytes after payload")
    off = HEADER_SIZE
    try:
        name = buf[off:off + nlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise HeaderError(f"{source}: variable name is not UTF-8") from exc
    off += nlen
    mask = np.frombuffer(buf, np.uint8, cells, off)
    if mask.max() > 1:
        raise HeaderError(f"{source}: land mask bytes must be 0 or 1")
    off += cells
    days = np.frombuffer(buf, "<i8", nt, off)
    off += 8 * nt
    if nt > 1 and not np.all(np.diff(days) > 0):
        raise NonIncreasingTimesError(f"{source}: times are not strictly increasing")
    data = np.frombuffer(buf, "<f4", nt * cells, off).reshape(nt, nlat, nlon)
    try:
        grid = GeoGrid(lat0, lat1, lon0, lon1, nlat, nlon, mask.reshape(nlat, nlon).astype(bool))
    except DataError as exc:
        raise HeaderError(f"{source}: {exc}") from exc
    return FieldSeries(name, UNITS[unit], days.astype("datetime64[D]"), data.astype(np.float64), grid)


def read_gridpack(path) -> FieldSeries:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise GridPackError(f"cannot read GridPack {path}: {exc}") from exc
    return decode_gridpack(buf, str(path))


# ---------------------------------------------------------------- CSV bridge

_DATE_FILE = re.compile(r"^(\d{4}-\d{2}-\d{2})\.csv$")
_MANIFEST_KEYS = {"variable", "unit", "lat_min", "lat_max", "lon_min", "lon_max", "mask_file"}


def _read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _MANIFEST_KEYS:
            raise DataError(f"{path}:{lineno}: unknown manifest key {key!r}")
        out[key] = value
    missing = _MANIFEST_KEYS - {"mask_file"} - out.keys()
    if missing:
        raise DataError(f"{path}: manifest missing keys {sorted(missing)}")
    return out


def _read_raster(path: Path) -> np.ndarray:
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.array(
        [[float(c) if c.strip() else np.nan for c in r] for r in rows], dtype=np.float64
    )


def import_csv_grid(directory) -> FieldSeries:
    """Assemble a series from ``manifest.txt`` plus one ``YYYY-MM-DD.csv`` per date.

    Row 0 of each CSV is the southernmost latitude. Empty cells are missing.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.is_file():
        raise DataError(f"{directory}: manifest.txt not found")
    man = _read_manifest(manifest_path)
    if man["unit"] not in UNITS:
        raise DataError(f"{manifest_path}: unknown unit {man['unit']!r}")

    files = {}
    for name in sorted(os.listdir(directory)):
        m = _DATE_FILE.match(name)
        if not m:
            continue
        day = np.datetime64(m.group(1), "D")
        if day in files:
            raise DataError(f"{directory}: duplicate date {m.group(1)}")
        files[day] = directory / name
    if not files:
        raise DataError(f"{directory}: no YYYY-MM-DD.csv rasters")

    days = sorted(files)
    rasters, first = [], None
    for day in days:
        r = _read_raster(files[day])
        if first is None:
            first = (files[day], r.shape)
        elif r.shape != first[1]:
            raise DataError(
                f"raster shape mismatch: {first[0].name} is {first[1]}, {files[day].name} is {r.shape}"
            )
        rasters.append(r)
    nlat, nlon = first[1]

    mask = None
    if man.get("mask_file"):
        mask = _read_raster(directory / man["mask_file"]) > 0.5
        if mask.shape != (nlat, nlon):
            raise DataError(f"mask {man['mask_file']} shape {mask.shape} != raster shape {(nlat, nlon)}")
    grid = GeoGrid(
        float(man["lat_min"]), float(man["lat_max"]), float(man["lon_min"]), float(man["lon_max"]),
        nlat, nlon, mask,
    )
    return FieldSeries(man["variable"], man["unit"], np.array(days), np.stack(rasters), grid)


def read_series(path) -> FieldSeries:
    """GridPack file or CSV directory, whichever ``path`` is."""
    path = Path(path)
    if path.is_dir():
        return import_csv_grid(path)
    return read_gridpack(path)
