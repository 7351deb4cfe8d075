"""Masked CP-ALS tensor completion.

The objective is the squared Frobenius norm of the residual restricted to
observed entries, optionally with a ridge term on the factor matrices::

    ||(X - Xhat) * P||_F^2 + ridge * (||A0||^2 + ||A1||^2 + ||A2||^2)

Each sweep updates A0, A1, A2 in turn.  Updating one factor splits into one
small least-squares problem per row, restricted to the observed entries of
the matching fibre of the unfolded tensor.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import RankDeficiencyError, ValidationError
from .tensor import KruskalModel, reconstruct_at, reconstruct_fast, unfold

log = logging.getLogger(__name__)

INITS = ("random-uniform", "random-gaussian", "svd")

# rows per batched solve are capped so the stacked normal matrices stay small
_BATCH_ENTRIES = 2**22


@dataclass(frozen=True)
class SolverConfig:
    rank: int
    max_sweeps: int = 50
    tol: float = 1e-6
    ridge: float = 1e-10
    seed: int = 0
    init: str = "random-gaussian"

    def __post_init__(self):
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValidationError(f"rank must be a positive integer, got {self.rank!r}")
        if int(self.max_sweeps) != self.max_sweeps or self.max_sweeps < 1:
            raise ValidationError(f"max_sweeps must be >= 1, got {self.max_sweeps!r}")
        if not self.tol >= 0:
            raise ValidationError(f"tol must be >= 0, got {self.tol!r}")
        if not self.ridge >= 0:
            raise ValidationError(f"ridge must be >= 0, got {self.ridge!r}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValidationError(f"seed must be an unsigned integer, got {self.seed!r}")
        if self.init not in INITS:
            raise ValidationError(f"init must be one of {INITS}, got {self.init!r}")

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string or typed values (CLI flags, key=value files, JSON)."""
        casts = {"rank": int, "max_sweeps": int, "tol": float, "ridge": float,
                 "seed": int, "init": str}
        unknown = set(mapping) - set(casts)
        if unknown:
            raise ValidationError(f"unknown solver keys: {sorted(unknown)}")
        if "rank" not in mapping:
            raise ValidationError("solver config needs a rank")
        try:
            kwargs = {k: casts[k](v) for k, v in mapping.items()}
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad solver config value: {exc}") from None
        return cls(**kwargs)

    def as_dict(self):
        return {"rank": self.rank, "max_sweeps": self.max_sweeps, "tol": self.tol,
                "ridge": self.ridge, "seed": self.seed, "init": self.init}


@dataclass
class FitTrace:
    residuals: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    times: list = field(default_factory=list)
    empty_rows: list = field(default_factory=list)
    stop: str = "max_sweeps"

    @property
    def sweeps(self):
        return len(self.residuals) - 1

    def as_dict(self, timings=True):
        out = {"residuals": self.residuals, "objectives": self.objectives,
               "stop": self.stop, "sweeps": self.sweeps,
               "empty_rows": [list(r) for r in self.empty_rows]}
        if timings:
            out["times"] = self.times
        return out


def init_model(dims, config, tensor=None):
    """Starting factors; all weights equal to one.

    ``random-*`` inits draw every factor from ``config.seed``.  ``svd`` takes
    the leading left singular vectors of each unfolding of the zero-filled
    tensor (rescaled by the observed fraction), so it needs ``tensor``;
    columns beyond a mode's size are drawn from the seed.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValidationError(f"dims must be three positive integers, got {dims}")
    rng = np.random.default_rng(config.seed)
    if config.init == "svd":
        if tensor is None or tensor.n_observed == 0:
            raise ValidationError("svd init needs a tensor with observed entries")
        x = tensor.filled(0.0) / tensor.observed_fraction
        factors = []
        for mode, d in enumerate(dims):
            u = np.linalg.svd(unfold(x, mode).matrix, full_matrices=False)[0][:, :config.rank]
            if u.shape[1] < config.rank:
                u = np.hstack([u, rng.standard_normal((d, config.rank - u.shape[1]))])
            factors.append(u)
        factors = tuple(factors)
    elif config.init == "random-uniform":
        factors = tuple(rng.random((d, config.rank)) for d in dims)
    else:
        factors = tuple(rng.standard_normal((d, config.rank)) for d in dims)
    return KruskalModel(np.ones(config.rank), factors)


def _solve_normal(normal, rhs, ridge, row):
    rank = normal.shape[0]
    if ridge:
        normal = normal + ridge * np.eye(rank)
    try:
        return np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError(row) from None


def solve_row(G, p, x, ridge=0.0, row=None):
    """Ridge-regularized least squares over the observed rows of ``G``.

    Returns ``argmin_a ||diag(p) (x - G a)||^2 + ridge ||a||^2``.  Entries of
    ``x`` where ``p`` is zero are ignored (they may be NaN).  With no
    observed entry the all-zero vector is returned; callers that care test
    ``p.any()`` first.  With ``ridge == 0`` a rank-deficient observed block
    raises :class:`RankDeficiencyError`.
    """
    G = np.asarray(G, dtype=np.float64)
    p = np.asarray(p).astype(bool)
    x = np.asarray(x, dtype=np.float64)
    if G.ndim != 2 or p.shape != (G.shape[0],) or x.shape != p.shape:
        raise ValidationError(f"shape mismatch: G {G.shape}, p {p.shape}, x {x.shape}")
    rank = G.shape[1]
    if not p.any():
        return np.zeros(rank)
    Gp, xp = G[p], x[p]
    if not np.isfinite(xp).all():
        raise ValidationError("x must be finite wherever p is set")
    if ridge == 0 and np.linalg.matrix_rank(Gp) < rank:
        raise RankDeficiencyError(row)
    return _solve_normal(Gp.T @ Gp, Gp.T @ xp, ridge, row)


def _update_mode(values0, mask, model_factors, mode, ridge, trace):
    """Solve every row of factor ``mode`` with the other two held fixed.

    ``values0`` is the tensor with missing entries zeroed.  Normal matrices
    come from the full Gram matrix minus the missing rows' contribution when
    most of the fibre is observed, and straight from the observed rows
    otherwise; both give the same masked normal equations.
    """
    lo, hi = (k for k in range(3) if k != mode)
    A_lo, A_hi = model_factors[lo], model_factors[hi]
    rank = A_lo.shape[1]
    G = (A_hi[:, None, :] * A_lo[None, :, :]).reshape(-1, rank)
    X = unfold(values0, mode).matrix
    P = unfold(mask, mode).matrix
    counts = P.sum(axis=1)
    m = P.shape[1]
    full_gram = (A_lo.T @ A_lo) * (A_hi.T @ A_hi)
    rhs = X @ G
    A = model_factors[mode]
    n_rows = A.shape[0]
    batch = max(1, _BATCH_ENTRIES // (rank * rank))
    for start in range(0, n_rows, batch):
        rows = range(start, min(start + batch, n_rows))
        normals = np.empty((len(rows), rank, rank))
        for k, j in enumerate(rows):
            if counts[j] == m:
                normals[k] = full_gram
            elif 2 * counts[j] >= m:
                Gm = G[~P[j]]
                normals[k] = full_gram - Gm.T @ Gm
            else:
                Gp = G[P[j]]
                normals[k] = Gp.T @ Gp
        if ridge:
            normals += ridge * np.eye(rank)
        live = np.array([counts[j] > 0 for j in rows])
        if ridge == 0:
            short = [j for j in rows if 0 < counts[j] < rank]
            if short:
                raise RankDeficiencyError(short[0])
        idx = np.arange(start, start + len(rows))[live]
        if idx.size:
            try:
                A[idx] = np.linalg.solve(normals[live], rhs[idx][..., None])[..., 0]
            except np.linalg.LinAlgError:
                for k, j in zip(np.flatnonzero(live), idx):
                    A[j] = _solve_normal(normals[k], rhs[j], 0.0, int(j))
        for j in np.arange(start, start + len(rows))[~live]:
            trace.append((mode, int(j)))


def masked_residual(tensor, model):
    """``||(X - Xhat) * P||_F``."""
    diff = reconstruct_fast(model)[tensor.mask] - tensor.values[tensor.mask]
    return float(np.sqrt(diff @ diff))


def objective(tensor, model, ridge):
    """Squared masked residual plus the ridge term of the balanced factors."""
    res = masked_residual(tensor, model)
    penalty = 0.0
    if ridge:
        penalty = ridge * sum(float((a * a).sum()) for a in model.balanced_factors())
    return res * res + penalty


def _check_dims(tensor, model):
    if tensor.dims != model.dims:
        raise ValidationError(f"model dims {model.dims} != tensor dims {tensor.dims}")


def _sweep(tensor, model, config, values0, empty_rows):
    factors = model.balanced_factors()
    for mode in range(3):
        _update_mode(values0, tensor.mask, factors, mode, config.ridge, empty_rows)
    return KruskalModel(np.ones(config.rank), tuple(factors)).normalize()


def als_sweep(tensor, model, config):
    """One pass of row-wise updates over modes 0, 1, 2, then renormalization.

    The incoming weights are first spread evenly across the three factors,
    so the sweep never increases the regularized objective.  Rows with no
    observed entry keep their previous values.
    """
    _check_dims(tensor, model)
    if model.rank != config.rank:
        raise ValidationError(f"model rank {model.rank} != config rank {config.rank}")
    return _sweep(tensor, model, config, tensor.filled(0.0), [])


def fit(tensor, config, model=None):
    """Run ALS sweeps until the relative change of the masked residual drops
    below ``config.tol`` or ``config.max_sweeps`` is reached.

    Returns the normalized model and a :class:`FitTrace` whose first entries
    describe the initial model.
    """
    if tensor.n_observed == 0:
        raise ValidationError("tensor has no observed entries")
    if model is None:
        model = init_model(tensor.dims, config, tensor)
    _check_dims(tensor, model)
    values0 = tensor.filled(0.0)
    trace = FitTrace()
    t0 = time.perf_counter()
    trace.residuals.append(masked_residual(tensor, model))
    trace.objectives.append(objective(tensor, model, config.ridge))
    trace.times.append(0.0)
    for sweep in range(1, config.max_sweeps + 1):
        empty = []
        model = _sweep(tensor, model, config, values0, empty)
        trace.empty_rows.extend(empty)
        res = masked_residual(tensor, model)
        trace.residuals.append(res)
        trace.objectives.append(objective(tensor, model, config.ridge))
        trace.times.append(time.perf_counter() - t0)
        prev = trace.residuals[-2]
        log.debug("sweep %d residual %.6e", sweep, res)
        if res == 0.0 or abs(prev - res) <= config.tol * prev:
            trace.stop = "converged"
            break
    empties = sorted(set(trace.empty_rows))
    trace.empty_rows = empties
    if empties:
        log.warning("%d factor rows had no observed entries", len(empties))
    log.info("fit stopped (%s) after %d sweeps, residual %.6e",
             trace.stop, trace.sweeps, trace.residuals[-1])
    return model, trace


def impute(tensor, model):
    """Observed entries pass through; missing ones come from the model."""
    _check_dims(tensor, model)
    out = np.array(tensor.values)
    missing = np.argwhere(~tensor.mask)
    if missing.size:
        out[tuple(missing.T)] = reconstruct_at(model, missing)
    return out
