"""Spatial-only gap fillers applied one day slice at a time.

Ordinary kriging uses an isotropic exponential semivariogram fitted once on
the temporally averaged field; inverse-distance weighting and a per-day mean
fill are the simpler references.  Positions are pixel centres measured in
degrees (``cell_size`` degrees per pixel).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from .errors import FitFailureError, NumericalError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_NEIGHBORHOOD = 32


@dataclass(frozen=True)
class VariogramModel:
    """``gamma(h) = nugget + (sill - nugget) * (1 - exp(-3 h / range_param))`` for h > 0.

    ``range_param`` is the effective range: the structured part reaches 95%
    of its plateau there.
    """

    nugget: float
    sill: float
    range_param: float
    kind: str = "exponential"

    def __post_init__(self):
        if self.kind != "exponential":
            raise ValidationError(f"unsupported variogram kind {self.kind!r}")
        if not (self.nugget >= 0 and self.sill >= self.nugget and self.range_param > 0):
            raise ValidationError(f"invalid variogram parameters {self}")

    def __call__(self, h):
        h = np.asarray(h, dtype=np.float64)
        structured = (self.sill - self.nugget) * -np.expm1(-3.0 * h / self.range_param)
        return np.where(h > 0, self.nugget + structured, 0.0)

    def as_dict(self):
        return {"kind": self.kind, "nugget": self.nugget, "sill": self.sill,
                "range": self.range_param}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["nugget"]), float(d["sill"]), float(d["range"]), d.get("kind", "exponential"))


@dataclass(frozen=True)
class ExperimentalVariogram:
    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray

    def __len__(self):
        return len(self.lags)


def pixel_positions(shape, cell_size=1.0):
    rows, cols = np.indices(shape)
    return np.column_stack([rows.ravel(), cols.ravel()]).astype(np.float64) * cell_size


def temporal_average(tensor):
    """Per-pixel mean over the days on which the pixel was observed."""
    counts = tensor.mask.sum(axis=0)
    sums = tensor.filled(0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def experimental_semivariogram(field, lag_width, max_lag, cell_size=1.0, chunk=512):
    """Matheron estimator over all observed pixel pairs with ``0 < d <= max_lag``.

    Pairs are binned by ``floor(d / lag_width)``; each reported lag is the
    mean pair distance of its bin, and empty bins are dropped.
    """
    field = np.asarray(field, dtype=np.float64)
    if not lag_width > 0 or not max_lag > 0:
        raise ValidationError("lag_width and max_lag must be positive")
    observed = np.isfinite(field.ravel())
    if observed.sum() < 2:
        raise ValidationError("need at least two observed pixels")
    pos = pixel_positions(field.shape, cell_size)[observed]
    z = field.ravel()[observed]
    n_bins = int(np.ceil(max_lag / lag_width - 1e-12))
    sums = np.zeros(n_bins)
    dist = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=np.int64)
    for start in range(0, len(z), chunk):
        stop = min(start + chunk, len(z))
        # pair (a, b) with a in this chunk and b > a
        d = np.sqrt(((pos[start:stop, None, :] - pos[None, start:, :]) ** 2).sum(-1))
        dz2 = (z[start:stop, None] - z[None, start:]) ** 2
        upper = np.arange(start, stop)[:, None] < np.arange(start, len(z))[None, :]
        keep = upper & (d > 0) & (d <= max_lag)
        dk = d[keep]
        k = np.minimum((dk / lag_width).astype(np.int64), n_bins - 1)
        sums += np.bincount(k, weights=dz2[keep], minlength=n_bins)
        dist += np.bincount(k, weights=dk, minlength=n_bins)
        counts += np.bincount(k, minlength=n_bins)
    nonempty = counts > 0
    if not nonempty.any():
        raise ValidationError("no pixel pairs within max_lag")
    c = counts[nonempty]
    return ExperimentalVariogram(dist[nonempty] / c, sums[nonempty] / (2.0 * c), c)


def fit_exponential(emp):
    """Pair-count weighted least-squares fit of the exponential model.

    Returns the model and the Pearson correlation between fitted and
    empirical semivariances (NaN when the fit is flat).
    """
    if len(emp) < 3:
        raise ValidationError(f"need at least 3 nonempty lag bins, got {len(emp)}")
    h = np.asarray(emp.lags, dtype=np.float64)
    g = np.asarray(emp.gamma, dtype=np.float64)
    w = np.sqrt(np.asarray(emp.counts, dtype=np.float64))
    scale = max(float(g.max()), 1e-300)
    gs = g / scale

    def residual(theta):
        nugget, psill, rng = theta
        return w * (nugget + psill * -np.expm1(-3.0 * h / rng) - gs)

    # range stays within the sampled lags so a flat variogram maps to psill -> 0
    lo_range, hi_range = h.min(), 3.0 * h.max()
    half = gs >= 0.5 * gs.max()
    start = [0.0, max(gs.max(), 1e-6), float(np.clip(h[np.argmax(half)] * 2.0, lo_range, hi_range))]
    try:
        sol = least_squares(residual, start, bounds=([0.0, 0.0, lo_range], [np.inf, np.inf, hi_range]),
                            x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
    except ValueError as exc:
        raise FitFailureError(f"variogram fit failed: {exc}") from None
    if sol.status <= 0 or not np.isfinite(sol.x).all():
        raise FitFailureError(f"variogram fit did not converge: {sol.message}")
    nugget, psill, rng = sol.x
    model = VariogramModel(nugget * scale, (nugget + psill) * scale, float(rng))
    fitted = model(h)
    if np.ptp(fitted) == 0 or np.ptp(g) == 0:
        fit_r = float("nan")
    else:
        fit_r = float(np.corrcoef(fitted, g)[0, 1])
    return model, fit_r


def _dedupe(positions, values):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    uniq, inverse = np.unique(positions, axis=0, return_inverse=True)
    if len(uniq) == len(positions):
        return positions, values
    inverse = inverse.reshape(-1)
    merged = np.bincount(inverse, weights=values) / np.bincount(inverse)
    return uniq, merged


def _nearest(positions, target, neighborhood):
    d = np.sqrt(((positions - target) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")[:neighborhood]
    return order, d[order]


def _knn(known, tree, targets, k):
    """Nearest ``k`` known points per target, ties broken by known-point order.

    Matches :func:`_nearest` so batched fills agree with single predictions.
    """
    n = len(known)
    kq = min(n, k + 8)
    while True:
        _, idx = tree.query(targets, k=kq)
        idx = idx.reshape(len(targets), kq)
        d = np.sqrt(((known[idx] - targets[:, None, :]) ** 2).sum(-1))
        if kq == n or np.all(d.max(axis=1) > np.sort(d, axis=1)[:, k - 1]):
            break
        kq = min(n, 2 * kq)
    order = np.lexsort((idx, d), axis=-1)[:, :k]
    return np.take_along_axis(d, order, 1), np.take_along_axis(idx, order, 1)


def _ok_systems(model, pos, d0):
    """Stacked ordinary-kriging systems for neighbour sets ``pos`` (T, k, 2)."""
    t, k = d0.shape
    dij = np.sqrt(((pos[:, :, None, :] - pos[:, None, :, :]) ** 2).sum(-1))
    lhs = np.ones((t, k + 1, k + 1))
    lhs[:, :k, :k] = model(dij)
    lhs[:, k, k] = 0.0
    rhs = np.ones((t, k + 1))
    rhs[:, :k] = model(d0)
    return lhs, rhs


def _solve_ok(lhs, rhs):
    try:
        return np.linalg.solve(lhs, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise NumericalError("ordinary kriging system is singular") from None


def kriging_weights(positions, model, target, neighborhood=DEFAULT_NEIGHBORHOOD):
    """Kriging weights, Lagrange multiplier and the neighbour indices used."""
    if neighborhood < 1:
        raise ValidationError("neighborhood must be >= 1")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if len(positions) == 0:
        raise ValidationError("need at least one known point")
    order, d0 = _nearest(positions, np.asarray(target, dtype=np.float64), neighborhood)
    lhs, rhs = _ok_systems(model, positions[order][None], d0[None])
    sol = _solve_ok(lhs, rhs)[0]
    return sol[:-1], sol[-1], order, d0


def kriging_predict(positions, values, model, target, neighborhood=DEFAULT_NEIGHBORHOOD):
    """Ordinary kriging estimate and variance at ``target``.

    Points sharing a position are merged (values averaged) first.
    """
    positions, values = _dedupe(positions, values)
    w, mu, order, d0 = kriging_weights(positions, model, target, neighborhood)
    estimate = float(w @ values[order])
    variance = float(w @ model(d0) + mu)
    return estimate, variance


def idw_predict(positions, values, target, power=2.0, neighborhood=DEFAULT_NEIGHBORHOOD):
    """Inverse-distance weighted mean of the nearest ``neighborhood`` points."""
    if not power > 0:
        raise ValidationError("power must be positive")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(values) == 0:
        raise ValidationError("need at least one known point")
    order, d = _nearest(positions, np.asarray(target, dtype=np.float64), neighborhood)
    if d[0] == 0:
        return float(values[order[0]])
    w = d ** -power
    return float(w @ values[order] / w.sum())


def _day_targets(slice_, targets):
    observed = np.isfinite(slice_)
    if not observed.any():
        raise ValidationError("day slice has no observed pixel")
    if targets is None:
        targets = np.argwhere(~observed)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 2)
    if observed[tuple(targets.T)].any():
        raise ValidationError("targets must be missing pixels")
    return observed, targets


def krige_fill_day(slice_, model, neighborhood=DEFAULT_NEIGHBORHOOD, cell_size=1.0,
                   targets=None, batch=2048):
    """Fill missing pixels (or just ``targets``) from the day's observed pixels."""
    slice_ = np.asarray(slice_, dtype=np.float64)
    observed, targets = _day_targets(slice_, targets)
    out = np.array(slice_)
    if len(targets) == 0:
        return out
    known = pixel_positions(slice_.shape, cell_size)[observed.ravel()]
    z = slice_.ravel()[observed.ravel()]
    k = min(neighborhood, len(z))
    tree = cKDTree(known)
    tpos = targets.astype(np.float64) * cell_size
    for start in range(0, len(targets), batch):
        chunk = tpos[start:start + batch]
        d0, idx = _knn(known, tree, chunk, k)
        lhs, rhs = _ok_systems(model, known[idx], d0)
        sol = _solve_ok(lhs, rhs)
        est = (sol[:, :k] * z[idx]).sum(axis=1)
        rows = targets[start:start + batch]
        out[rows[:, 0], rows[:, 1]] = est
    return out


def idw_fill_day(slice_, power=2.0, neighborhood=DEFAULT_NEIGHBORHOOD, cell_size=1.0, targets=None):
    slice_ = np.asarray(slice_, dtype=np.float64)
    observed, targets = _day_targets(slice_, targets)
    out = np.array(slice_)
    if len(targets) == 0:
        return out
    known = pixel_positions(slice_.shape, cell_size)[observed.ravel()]
    z = slice_.ravel()[observed.ravel()]
    k = min(neighborhood, len(z))
    d, idx = _knn(known, cKDTree(known), targets.astype(np.float64) * cell_size, k)
    # targets are missing pixels, so every distance is positive
    w = d ** -power
    out[targets[:, 0], targets[:, 1]] = (w * z[idx]).sum(axis=1) / w.sum(axis=1)
    return out


def mean_fill_day(slice_, targets=None):
    slice_ = np.asarray(slice_, dtype=np.float64)
    observed, targets = _day_targets(slice_, targets)
    out = np.array(slice_)
    out[targets[:, 0], targets[:, 1]] = slice_[observed].mean()
    return out


def fill_tensor(tensor, method, targets=None, **kwargs):
    """Apply a per-day filler to every day that has targets.

    ``method`` is ``"krige"``, ``"idw"`` or ``"mean"``; ``targets`` is an
    ``(n, 3)`` array of missing entries to fill (default: all missing).
    Untargeted missing entries stay NaN.
    """
    fillers = {"krige": krige_fill_day, "idw": idw_fill_day, "mean": mean_fill_day}
    if method not in fillers:
        raise ValidationError(f"unknown baseline {method!r}")
    if targets is None:
        targets = np.argwhere(~tensor.mask)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 3)
    out = np.array(tensor.values)
    for day in np.unique(targets[:, 0]):
        day_targets = targets[targets[:, 0] == day, 1:]
        out[day] = fillers[method](tensor.values[day], targets=day_targets, **kwargs)
    return out
