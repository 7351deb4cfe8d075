"""Scattered daily point observations -> day x latitude x longitude tensor.

Pipeline: quality filter (strict ``qa > threshold``), bounding-box clip,
constrained nearest-neighbour rasterization (a pixel takes the value of the
point inside it that lies closest to its centre; pixels without a point stay
missing), stacking of the daily rasters, conversion from mol/m^2 to
molec/cm^2 and a global min-max normalization to [0, 1].

Pixel (0, 0) is the north-west corner: row indices grow southward from
``lat_max`` and column indices grow eastward from ``lon_min``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DegenerateInputError, ValidationError
from .tensor import MaskedTensor

log = logging.getLogger(__name__)

# molec/cm^2 per mol/m^2: Avogadro's number over 1e4 cm^2 per m^2
MOL_M2_TO_MOLEC_CM2 = 6.02214e19

POINT_COLUMNS = ("day", "lat", "lon", "value", "qa")


class PointObservation(NamedTuple):
    day: int
    lat: float
    lon: float
    value: float
    qa: float


@dataclass(frozen=True)
class PointSet:
    """Column-oriented batch of point observations."""

    day: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    value: np.ndarray
    qa: np.ndarray

    def __post_init__(self):
        cols = {name: np.asarray(getattr(self, name)).reshape(-1) for name in POINT_COLUMNS}
        n = len(cols["day"])
        if any(len(c) != n for c in cols.values()):
            raise ValidationError("point columns have different lengths")
        day = cols["day"]
        if n and (np.any(day != np.round(day)) or day.min() < 0):
            raise ValidationError("day indices must be non-negative integers")
        object.__setattr__(self, "day", day.astype(np.int64))
        for name in POINT_COLUMNS[1:]:
            object.__setattr__(self, name, cols[name].astype(np.float64))
        if n:
            if self.qa.min() < 0 or self.qa.max() > 1:
                raise ValidationError("qa values must lie in [0, 1]")
            if np.abs(self.lat).max() > 90 or np.abs(self.lon).max() > 180:
                raise ValidationError("lat/lon out of range")

    def __len__(self):
        return len(self.day)

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            return cls(*(np.empty(0) for _ in POINT_COLUMNS))
        return cls(*np.array(records, dtype=np.float64).T)

    def records(self):
        return [PointObservation(int(d), *map(float, rest))
                for d, *rest in zip(self.day, self.lat, self.lon, self.value, self.qa)]

    def take(self, keep):
        return PointSet(*(getattr(self, name)[keep] for name in POINT_COLUMNS))


def read_points(path):
    """Read a ``day,lat,lon,value,qa`` CSV."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().replace(" ", "")
    if tuple(header.split(",")) != POINT_COLUMNS:
        raise ValidationError(f"{path}: header must be {','.join(POINT_COLUMNS)}, got {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return PointSet.from_records([])
    return PointSet(*data.T)


def write_points(path, points):
    with open(path, "w") as fh:
        fh.write(",".join(POINT_COLUMNS) + "\n")
        for d, lat, lon, v, q in zip(points.day, points.lat, points.lon, points.value, points.qa):
            fh.write(f"{int(d)},{float(lat)!r},{float(lon)!r},{float(v)!r},{float(q)!r}\n")


def _cells(span, delta):
    q = span / delta
    # spans that are whole multiples of delta up to rounding noise
    if abs(q - round(q)) <= 1e-9 * max(1.0, q):
        return int(round(q))
    return math.ceil(q)


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    delta: float
    days: int | None = None

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ValidationError("bounding box must satisfy min < max")
        if not self.delta > 0:
            raise ValidationError(f"delta must be positive, got {self.delta}")
        if self.days is not None and self.days < 1:
            raise ValidationError(f"days must be positive, got {self.days}")

    @classmethod
    def from_bbox(cls, bbox, delta, days=None):
        """``bbox`` is ``lat_min,lat_max,lon_min,lon_max`` (string or sequence)."""
        if isinstance(bbox, str):
            try:
                bbox = [float(v) for v in bbox.split(",")]
            except ValueError:
                raise ValidationError(f"bad bbox {bbox!r}") from None
        if len(bbox) != 4:
            raise ValidationError("bbox needs four numbers: lat_min,lat_max,lon_min,lon_max")
        return cls(*map(float, bbox), float(delta), days)

    @property
    def n_lat(self):
        return _cells(self.lat_max - self.lat_min, self.delta)

    @property
    def n_lon(self):
        return _cells(self.lon_max - self.lon_min, self.delta)

    @property
    def shape(self):
        return (self.n_lat, self.n_lon)

    @property
    def dims(self):
        if self.days is None:
            raise ValidationError("grid has no day count")
        return (self.days, self.n_lat, self.n_lon)

    def contains(self, lat, lon):
        lat, lon = np.asarray(lat), np.asarray(lon)
        return ((lat >= self.lat_min) & (lat <= self.lat_max)
                & (lon >= self.lon_min) & (lon <= self.lon_max))

    def pixel_of(self, lat, lon):
        rows = np.floor((self.lat_max - np.asarray(lat)) / self.delta).astype(np.int64)
        cols = np.floor((np.asarray(lon) - self.lon_min) / self.delta).astype(np.int64)
        return np.clip(rows, 0, self.n_lat - 1), np.clip(cols, 0, self.n_lon - 1)

    def centers(self):
        """Pixel-centre latitudes (per row) and longitudes (per column)."""
        lats = self.lat_max - (np.arange(self.n_lat) + 0.5) * self.delta
        lons = self.lon_min + (np.arange(self.n_lon) + 0.5) * self.delta
        return lats, lons

    def as_dict(self):
        return {"lat_min": self.lat_min, "lat_max": self.lat_max, "lon_min": self.lon_min,
                "lon_max": self.lon_max, "delta": self.delta, "days": self.days}


@dataclass(frozen=True)
class NormalizationParams:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise DegenerateInputError(f"normalization range is empty: lo={self.lo}, hi={self.hi}")

    def as_dict(self):
        return {"lo": self.lo, "hi": self.hi}


def filter_qa(points, threshold=0.5):
    """Keep points with ``qa > threshold`` (strict), preserving order."""
    if not 0 <= threshold <= 1:
        raise ValidationError(f"qa threshold must lie in [0, 1], got {threshold}")
    if isinstance(points, PointSet):
        return points.take(points.qa > threshold)
    return [p for p in points if p.qa > threshold]


def clip_to_grid(points, grid):
    return points.take(grid.contains(points.lat, points.lon))


def _as_pointset(points):
    return points if isinstance(points, PointSet) else PointSet.from_records(points)


def _nearest_per_cell(cell, dist2, values, n_cells):
    """Value of the closest point in each cell; ties go to the earliest point."""
    out = np.full(n_cells, np.nan)
    if len(cell) == 0:
        return out
    order = np.lexsort((np.arange(len(cell)), dist2, cell))
    cell_sorted = cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    out[cell_sorted[first]] = values[order[first]]
    return out


def _pixel_distances(points, grid):
    rows, cols = grid.pixel_of(points.lat, points.lon)
    lats, lons = grid.centers()
    dist2 = (points.lat - lats[rows]) ** 2 + (points.lon - lons[cols]) ** 2
    return rows * grid.n_lon + cols, dist2


def rasterize_day(points, grid):
    """One day's points -> ``(n_lat, n_lon)`` raster with NaN where no point fell.

    Points are expected to be quality-filtered already; points outside the
    bounding box are ignored.
    """
    points = clip_to_grid(_as_pointset(points), grid)
    cell, dist2 = _pixel_distances(points, grid)
    return _nearest_per_cell(cell, dist2, points.value, grid.n_lat * grid.n_lon).reshape(grid.shape)


def build_tensor(daily_slices, grid):
    """Stack daily rasters into a :class:`MaskedTensor` (mask = finite)."""
    slices = [np.asarray(s, dtype=np.float64) for s in daily_slices]
    if not slices:
        raise ValidationError("no daily slices")
    for d, s in enumerate(slices):
        if s.shape != grid.shape:
            raise ValidationError(f"slice {d} has shape {s.shape}, grid is {grid.shape}")
    values = np.stack(slices)
    return MaskedTensor(values, np.isfinite(values))


def convert_units(value):
    """mol/m^2 -> molec/cm^2."""
    return np.multiply(value, MOL_M2_TO_MOLEC_CM2)


def normalize(tensor):
    """Global min-max over observed entries; returns the tensor and its params."""
    if tensor.n_observed == 0:
        raise ValidationError("cannot normalize a tensor without observed entries")
    obs = tensor.values[tensor.mask]
    params = NormalizationParams(float(obs.min()), float(obs.max()))
    values = (tensor.values - params.lo) / (params.hi - params.lo)
    return tensor.replace(values=values), params


def denormalize(values, params):
    return np.asarray(values) * (params.hi - params.lo) + params.lo


def tensorize(points, grid, qa_threshold=0.5, convert=True, scale=True):
    """Full ingestion pipeline.

    Returns ``(tensor, params)``; ``params`` is None when ``scale`` is off.
    The day count comes from ``grid.days`` or else from the largest day index.
    """
    points = filter_qa(_as_pointset(points), qa_threshold)
    points = clip_to_grid(points, grid)
    days = grid.days
    if days is None:
        days = int(points.day.max()) + 1 if len(points) else 1
    late = points.day >= days
    if late.any():
        log.warning("dropping %d points past day %d", int(late.sum()), days - 1)
        points = points.take(~late)
    cell, dist2 = _pixel_distances(points, grid)
    n_cells = grid.n_lat * grid.n_lon
    flat = _nearest_per_cell(points.day * n_cells + cell, dist2, points.value, days * n_cells)
    tensor = MaskedTensor.from_array(flat.reshape(days, *grid.shape))
    log.info("tensorized %d points into %s, %.2f%% observed",
             len(points), tensor.dims, 100 * tensor.observed_fraction)
    if convert:
        tensor = tensor.replace(values=convert_units(tensor.values))
    params = None
    if scale:
        tensor, params = normalize(tensor)
    return tensor, params
