"""Desk-scale stand-in for a daily gridded column product.

The truth tensor is a positive low-rank CP model (seasonal AR temporal
factors, rough exponential-covariance spatial factors) plus Gaussian noise.
Each pixel of each day emits one or more point observations inside the
pixel; pixels under a synthetic cloud only emit low-quality points, so they
come out missing after the qa filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .baselines import VariogramModel, pixel_positions
from .errors import ValidationError
from .ingest import GridSpec, PointSet
from .tensor import KruskalModel, MaskedTensor, reconstruct_full

# typical tropospheric NO2 column magnitude in mol/m^2
_COLUMN_SCALE = 5e-5


def _exp_cov_sample(positions, model, rng):
    d = np.sqrt(((positions[:, None, :] - positions[None, :, :]) ** 2).sum(-1))
    cov = model.sill - model(d)
    cov[np.diag_indices_from(cov)] = model.sill
    chol = np.linalg.cholesky(cov + 1e-10 * model.sill * np.eye(len(cov)))
    return chol @ rng.standard_normal(len(cov))


def gaussian_field(shape, model, seed, cell_size=1.0):
    """Zero-mean Gaussian random field whose semivariogram is ``model``."""
    rng = np.random.default_rng(seed)
    return _exp_cov_sample(pixel_positions(shape, cell_size), model, rng).reshape(shape)


@dataclass(frozen=True)
class SynthSpec:
    days: int = 365
    bbox: tuple = (32.0, 40.0, -110.0, -94.0)
    delta: float = 0.5
    rank: int = 6
    noise: float = 0.01
    cloud_mean: float = 0.03
    clear_prob: float = 0.1
    extra_points: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.days < 2 or self.rank < 1:
            raise ValidationError("synth needs days >= 2 and rank >= 1")
        if self.noise < 0 or not 0 <= self.cloud_mean < 0.5:
            raise ValidationError("noise must be >= 0 and cloud_mean in [0, 0.5)")

    @property
    def grid(self):
        return GridSpec.from_bbox(self.bbox, self.delta, days=self.days)

    @classmethod
    def from_mapping(cls, mapping):
        casts = {"days": int, "delta": float, "rank": int, "noise": float, "cloud_mean": float,
                 "clear_prob": float, "extra_points": float, "seed": int}
        kwargs = {}
        for key, value in mapping.items():
            if key == "bbox":
                kwargs["bbox"] = tuple(GridSpec.from_bbox(value, 1.0).as_dict()[k]
                                       for k in ("lat_min", "lat_max", "lon_min", "lon_max"))
            elif key in casts:
                kwargs[key] = casts[key](value)
            else:
                raise ValidationError(f"unknown synth key {key!r}")
        return cls(**kwargs)

    def as_dict(self):
        return {"days": self.days, "bbox": list(self.bbox), "delta": self.delta,
                "rank": self.rank, "noise": self.noise, "cloud_mean": self.cloud_mean,
                "clear_prob": self.clear_prob, "extra_points": self.extra_points,
                "seed": self.seed}


def low_rank_truth(spec, rng):
    """Positive rank-``spec.rank`` model in mol/m^2."""
    days, n_lat, n_lon = spec.grid.dims
    t = np.arange(days)
    temporal = np.empty((days, spec.rank))
    for r in range(spec.rank):
        ar = np.zeros(days)
        shocks = rng.standard_normal(days) * 0.2
        for k in range(1, days):
            ar[k] = 0.7 * ar[k - 1] + shocks[k]
        period = 365.0 / (1 + r % 3)
        temporal[:, r] = np.exp(0.4 * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi)) + ar)
    spatial = []
    for n in (n_lat, n_lon):
        model = VariogramModel(0.0, 1.0, max(3.0, n / 3.0))
        pos = np.column_stack([np.arange(n), np.zeros(n)]).astype(np.float64)
        spatial.append(np.column_stack([np.exp(0.8 * _exp_cov_sample(pos, model, rng))
                                        for _ in range(spec.rank)]))
    weights = _COLUMN_SCALE * rng.uniform(0.3, 1.0, spec.rank) / spec.rank
    return KruskalModel(weights, (temporal, *spatial))


def cloud_mask(spec, rng):
    """Boolean (days, n_lat, n_lon) array, True under a synthetic cloud."""
    days, n_lat, n_lon = spec.grid.dims
    clouds = np.zeros((days, n_lat, n_lon), dtype=bool)
    if spec.cloud_mean == 0:
        return clouds
    for d in range(days):
        blob = gaussian_filter(rng.standard_normal((n_lat, n_lon)), sigma=1.5, mode="wrap")
        if rng.random() < spec.clear_prob:
            continue
        frac = min(0.4, rng.exponential(spec.cloud_mean / (1 - spec.clear_prob)))
        k = int(round(frac * n_lat * n_lon))
        if k:
            clouds[d].flat[np.argsort(blob.ravel(), kind="stable")[-k:]] = True
    return clouds


def synth_dataset(spec):
    """Return ``(points, truth, clouds)`` for a :class:`SynthSpec`.

    ``truth`` is the fully observed noisy tensor in mol/m^2 that the clear
    points sample exactly.
    """
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    model = low_rank_truth(spec, rng)
    clean = reconstruct_full(model)
    truth = clean + spec.noise * clean.std() * rng.standard_normal(clean.shape)
    clouds = cloud_mask(spec, rng)

    days, n_lat, n_lon = grid.dims
    n_pix = days * n_lat * n_lon
    per_pixel = 1 + rng.poisson(spec.extra_points, n_pix)
    owner = np.repeat(np.arange(n_pix), per_pixel)
    first = np.r_[True, owner[1:] != owner[:-1]]
    d, r, c = np.unravel_index(owner, grid.dims)
    # strictly inside the pixel so rasterization assigns it back here
    u = rng.uniform(0.02, 0.98, (2, len(owner)))
    lat = grid.lat_max - (r + u[0]) * grid.delta
    lon = grid.lon_min + (c + u[1]) * grid.delta
    qa = rng.random(len(owner))
    good = 0.5 + 0.5 * (1.0 - rng.random(len(owner)))
    qa = np.where(first, good, qa)
    cloudy = clouds.reshape(-1)[owner]
    qa = np.where(cloudy, 0.5 * rng.random(len(owner)), qa)
    value = truth.reshape(-1)[owner]
    points = PointSet(d, lat, lon, value, qa)
    return points, MaskedTensor.from_array(truth), clouds
