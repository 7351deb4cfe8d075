"""Dense 3-way tensors, mode unfoldings, Khatri-Rao products and Kruskal models.

Modes are numbered 0, 1, 2 (day, latitude, longitude for tensorized products).
The unfolding convention is fixed: among the two retained modes, the one with
the smaller mode number varies fastest along the columns.  ``gram_companion``
builds its Khatri-Rao product in the matching order, so that for every mode

    unfold(reconstruct_full(model), mode) == A[mode] @ diag(weights) @ G.T
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ResourceError, ValidationError

# 16 GiB; reconstruct_full refuses anything larger
DEFAULT_MAX_BYTES = 16 * 2**30


def _readonly(array):
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class MaskedTensor:
    """Value array with NaN at missing entries plus the authoritative mask.

    ``mask`` is True where an entry is observed.  Both arrays are stored as
    read-only copies; operations that modify a tensor return a new one.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 3:
            raise ValidationError(f"expected a 3-way tensor, got {values.ndim} dims")
        if values.shape != mask.shape:
            raise ValidationError(f"values {values.shape} and mask {mask.shape} differ")
        if min(values.shape) < 1:
            raise ValidationError(f"dims must be positive, got {values.shape}")
        finite = np.isfinite(values)
        bad = mask & ~finite
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValidationError(f"observed entry {idx} is not finite")
        # missing slots always carry NaN, whatever the caller put there
        values[~mask] = np.nan
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask))

    @classmethod
    def from_array(cls, values):
        """Build a tensor whose mask is ``~isnan(values)``."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values, ~np.isnan(values))

    @property
    def dims(self):
        return tuple(int(d) for d in self.values.shape)

    @property
    def size(self):
        return int(self.values.size)

    @property
    def n_observed(self):
        return int(self.mask.sum())

    @property
    def observed_fraction(self):
        return self.n_observed / self.size

    def filled(self, fill_value=0.0):
        """Writable copy of the values with missing entries replaced."""
        out = np.array(self.values)
        out[~self.mask] = fill_value
        return out

    def replace(self, values=None, mask=None):
        values = self.values if values is None else values
        mask = self.mask if mask is None else mask
        return MaskedTensor(values, mask)


@dataclass(frozen=True)
class UnfoldedView:
    mode: int
    matrix: np.ndarray
    shape: tuple

    def fold(self):
        return fold(self.matrix, self.mode, self.shape)


def _check_mode(mode):
    if mode not in (0, 1, 2):
        raise ValidationError(f"mode must be 0, 1 or 2, got {mode!r}")


def _dense(tensor):
    if isinstance(tensor, MaskedTensor):
        return tensor.values
    tensor = np.asarray(tensor)
    if tensor.ndim != 3:
        raise ValidationError(f"expected a 3-way tensor, got {tensor.ndim} dims")
    return tensor


def unfold(tensor, mode):
    """Mode-``mode`` matricization, returned as an :class:`UnfoldedView`.

    Row ``j`` lists every entry whose ``mode`` index is ``j``; the retained
    mode with the smaller number varies fastest along the columns.
    """
    _check_mode(mode)
    data = _dense(tensor)
    matrix = np.moveaxis(data, mode, 0).reshape(data.shape[mode], -1, order="F")
    return UnfoldedView(mode, matrix, tuple(data.shape))


def fold(matrix, mode, shape):
    """Inverse of :func:`unfold`."""
    _check_mode(mode)
    shape = tuple(int(s) for s in shape)
    matrix = np.asarray(matrix)
    rest = [s for k, s in enumerate(shape) if k != mode]
    if matrix.shape != (shape[mode], rest[0] * rest[1]):
        raise ValidationError(f"matrix {matrix.shape} does not unfold shape {shape}")
    moved = matrix.reshape([shape[mode], *rest], order="F")
    return np.moveaxis(moved, 0, mode)


def khatri_rao(left, right):
    """Column-wise Kronecker product: column r is ``kron(left[:, r], right[:, r])``."""
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.ndim != 2 or right.ndim != 2:
        raise ValidationError("khatri_rao expects two matrices")
    if left.shape[1] != right.shape[1]:
        raise ValidationError(
            f"column counts differ: {left.shape[1]} vs {right.shape[1]}"
        )
    rank = left.shape[1]
    return (left[:, None, :] * right[None, :, :]).reshape(-1, rank)


@dataclass(frozen=True)
class KruskalModel:
    """CP model ``[weights; A0, A1, A2]`` of rank ``R``."""

    weights: np.ndarray
    factors: tuple

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        factors = tuple(np.array(a, dtype=np.float64) for a in self.factors)
        if len(factors) != 3:
            raise ValidationError(f"expected 3 factor matrices, got {len(factors)}")
        rank = weights.shape[0]
        if rank < 1:
            raise ValidationError("rank must be at least 1")
        for k, a in enumerate(factors):
            if a.ndim != 2 or a.shape[1] != rank or a.shape[0] < 1:
                raise ValidationError(f"factor {k} has shape {a.shape}, rank is {rank}")
        if not np.isfinite(weights).all() or not all(np.isfinite(a).all() for a in factors):
            raise ValidationError("Kruskal model contains non-finite entries")
        object.__setattr__(self, "weights", _readonly(weights))
        object.__setattr__(self, "factors", tuple(_readonly(a) for a in factors))

    @property
    def rank(self):
        return int(self.weights.shape[0])

    @property
    def dims(self):
        return tuple(int(a.shape[0]) for a in self.factors)

    def normalize(self):
        """Unit-norm columns with the scale moved into ``weights``.

        Signs are canonicalized so that the largest-magnitude entry of every
        column of the first two factors is positive; the compensating flips land
        on the next factor so the represented tensor is unchanged.  All-zero
        columns stay zero with weight 0.
        """
        factors = [np.array(a) for a in self.factors]
        weights = np.array(self.weights)
        for a in factors:
            norms = np.linalg.norm(a, axis=0)
            nonzero = norms > 0
            a[:, nonzero] /= norms[nonzero]
            weights = weights * norms
        for k in (0, 1):
            a = factors[k]
            pivot = a[np.argmax(np.abs(a), axis=0), np.arange(a.shape[1])]
            flip = pivot < 0
            factors[k][:, flip] *= -1
            factors[k + 1][:, flip] *= -1
        flip = weights < 0
        weights[flip] *= -1
        factors[2][:, flip] *= -1
        return KruskalModel(weights, tuple(factors))

    def balanced_factors(self):
        """Writable factor copies with ``weights`` spread evenly over the modes.

        Each column is rescaled so that the three factor columns have equal
        norm; this is the representation with the smallest total squared
        factor norm among all rescalings of the same model.
        """
        factors = [np.array(a) for a in self.factors]
        norms = np.stack([np.linalg.norm(a, axis=0) for a in factors])
        scale = np.abs(self.weights) * norms.prod(axis=0)
        target = np.cbrt(scale)
        for k, a in enumerate(factors):
            with np.errstate(divide="ignore", invalid="ignore"):
                col = np.where(norms[k] > 0, target / norms[k], 0.0)
            a *= col
        factors[0] *= np.sign(self.weights)
        return factors


def gram_companion(model, skip_mode):
    """Khatri-Rao product of the two factors other than ``skip_mode``.

    Row order matches the columns of ``unfold(X, skip_mode)``, so an observed
    mode-``skip_mode`` fibre satisfies ``x_j ~= G @ (weights * A[skip_mode][j])``.
    """
    _check_mode(skip_mode)
    lo, hi = (k for k in range(3) if k != skip_mode)
    return khatri_rao(model.factors[hi], model.factors[lo])


def _check_index(model, index):
    if len(index) != 3:
        raise ValidationError(f"expected an index triple, got {index!r}")
    for k, (i, n) in enumerate(zip(index, model.dims)):
        if not 0 <= int(i) < n:
            raise ValidationError(f"index {i} out of range for mode {k} (size {n})")


def reconstruct_entry(model, index):
    """``sum_r weights[r] * A0[i0, r] * A1[i1, r] * A2[i2, r]``."""
    _check_index(model, index)
    i0, i1, i2 = (int(i) for i in index)
    a0, a1, a2 = model.factors
    total = 0.0
    for r in range(model.rank):
        total += model.weights[r] * a0[i0, r] * a1[i1, r] * a2[i2, r]
    return float(total)


def reconstruct_at(model, indices):
    """Vectorized :func:`reconstruct_entry` over an ``(n, 3)`` index array.

    Accumulates in the same order as the scalar path, so results agree bitwise.
    """
    indices = np.asarray(indices, dtype=np.intp).reshape(-1, 3)
    a0, a1, a2 = model.factors
    rows0, rows1, rows2 = a0[indices[:, 0]], a1[indices[:, 1]], a2[indices[:, 2]]
    total = np.zeros(indices.shape[0])
    for r in range(model.rank):
        total += model.weights[r] * rows0[:, r] * rows1[:, r] * rows2[:, r]
    return total


def reconstruct_full(model, max_bytes=DEFAULT_MAX_BYTES):
    """Dense reconstruction, entrywise identical to :func:`reconstruct_entry`."""
    dims = model.dims
    nbytes = 8 * dims[0] * dims[1] * dims[2]
    if nbytes > max_bytes:
        raise ResourceError(f"dense tensor {dims} needs {nbytes} bytes > {max_bytes}")
    a0, a1, a2 = model.factors
    out = np.zeros(dims)
    for r in range(model.rank):
        out += (
            (model.weights[r] * a0[:, r])[:, None, None]
            * a1[None, :, r][:, :, None]
            * a2[None, None, :, r]
        )
    return out


def reconstruct_fast(model):
    """Dense reconstruction through one matrix product (not bit-matched)."""
    a0 = model.factors[0] * model.weights
    return fold(a0 @ gram_companion(model, 0).T, 0, model.dims)
