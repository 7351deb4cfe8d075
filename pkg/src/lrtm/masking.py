"""Synthetic gap injection with recorded ground truth.

Two kinds of gaps are supported: uniformly random entries, and cloud pattern
transfer (CPTM), which copies every missing pixel of a source day onto a
target day that is fully observed under that pattern.  Each injection
returns a :class:`MaskDelta` holding the hidden indices and their original
values, so the evaluator can score predictions and ``restore`` can undo it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import EligibilityError, InfeasibleError, ValidationError

log = logging.getLogger(__name__)

_PROVENANCE_PREFIX = "# provenance: "


@dataclass(frozen=True)
class MaskDelta:
    entries: np.ndarray
    truth: np.ndarray
    provenance: str

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.int64).reshape(-1, 3)
        truth = np.asarray(self.truth, dtype=np.float64).reshape(-1)
        if len(entries) != len(truth):
            raise ValidationError("delta entries and truth differ in length")
        if len(np.unique(entries, axis=0)) != len(entries):
            raise ValidationError("delta contains duplicate indices")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "truth", truth)

    def __len__(self):
        return len(self.truth)

    @property
    def index(self):
        """Fancy index tuple for numpy arrays shaped like the tensor."""
        return tuple(self.entries.T)

    def days(self):
        return np.unique(self.entries[:, 0])

    @classmethod
    def concat(cls, deltas, provenance):
        deltas = list(deltas)
        if not deltas:
            return cls(np.empty((0, 3)), np.empty(0), provenance)
        return cls(np.concatenate([d.entries for d in deltas]),
                   np.concatenate([d.truth for d in deltas]), provenance)


def _hide(tensor, entries):
    values = np.array(tensor.values)
    mask = np.array(tensor.mask)
    idx = tuple(np.asarray(entries).T)
    values[idx] = np.nan
    mask[idx] = False
    return tensor.replace(values=values, mask=mask)


def add_random_missing(tensor, fraction, seed):
    """Hide ``floor(fraction * N)`` observed entries drawn uniformly without
    replacement (N counts all entries, observed or not)."""
    if not 0 < fraction < 1:
        raise ValidationError(f"fraction must lie in (0, 1), got {fraction}")
    count = int(np.floor(fraction * tensor.size))
    observed = np.flatnonzero(tensor.mask.reshape(-1))
    if count > len(observed):
        raise ValidationError(
            f"cannot hide {count} entries, only {len(observed)} are observed")
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(observed, size=count, replace=False))
    entries = np.column_stack(np.unravel_index(flat, tensor.dims))
    truth = tensor.values.reshape(-1)[flat]
    delta = MaskDelta(entries, truth, f"random fraction={fraction!r} seed={seed}")
    return _hide(tensor, entries), delta


def restore(tensor, delta):
    """Undo an injection: put the recorded truths back and mark them observed."""
    values = np.array(tensor.values)
    mask = np.array(tensor.mask)
    values[delta.index] = delta.truth
    mask[delta.index] = True
    return tensor.replace(values=values, mask=mask)


def _cloud(reference, source_day):
    return ~reference.mask[source_day]


def _check_days(tensor, source_day, target_day):
    n_days = tensor.dims[0]
    for name, d in (("source", source_day), ("target", target_day)):
        if not 0 <= d < n_days:
            raise ValidationError(f"{name} day {d} out of range [0, {n_days})")
    if source_day == target_day:
        raise ValidationError("source and target day must differ")


def cptm(tensor, source_day, target_day, reference=None):
    """Transfer the source day's missing pattern onto the target day.

    ``reference`` supplies the source pattern (default: ``tensor`` itself);
    pass the pre-injection tensor when chaining transfers so every cloud is
    an actual gap.  The target must be observed wherever the cloud is.
    """
    reference = tensor if reference is None else reference
    _check_days(tensor, source_day, target_day)
    cloud = _cloud(reference, source_day)
    conflict = cloud & ~tensor.mask[target_day]
    if conflict.any():
        r, c = (int(v) for v in np.argwhere(conflict)[0])
        raise EligibilityError((target_day, r, c))
    rows, cols = np.nonzero(cloud)
    entries = np.column_stack([np.full(len(rows), target_day), rows, cols])
    truth = tensor.values[target_day][cloud]
    delta = MaskDelta(entries, truth, f"cptm source={source_day} target={target_day}")
    return _hide(tensor, entries), delta


def select_cptm_pairs(tensor, count, seed, max_attempts=None, distinct_targets=True):
    """Draw ``count`` random (source, target) pairs that can be applied in order.

    Eligibility is checked against the mask as it evolves under the pairs
    already chosen, so :func:`apply_cptm_pairs` never hits a conflict.
    Sources without any missing pixel are skipped.  Each target day is used
    once unless ``distinct_targets`` is False, so ``count`` pairs give
    ``count`` synthetic days.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    n_days = tensor.dims[0]
    if n_days < 2:
        raise InfeasibleError("need at least two days for cloud transfer")
    max_attempts = count * 1000 if max_attempts is None else max_attempts
    rng = np.random.default_rng(seed)
    clouds = ~tensor.mask
    has_cloud = clouds.reshape(n_days, -1).any(axis=1)
    current = np.array(tensor.mask)
    pairs = []
    used = set()
    for _ in range(max_attempts):
        source, target = (int(v) for v in rng.integers(0, n_days, size=2))
        if source == target or not has_cloud[source]:
            continue
        if distinct_targets and target in used:
            continue
        if (clouds[source] & ~current[target]).any():
            continue
        current[target] &= ~clouds[source]
        pairs.append((source, target))
        used.add(target)
        if len(pairs) == count:
            return pairs
    raise InfeasibleError(
        f"found only {len(pairs)} of {count} eligible cloud-transfer pairs "
        f"in {max_attempts} attempts")


def apply_cptm_pairs(tensor, pairs):
    """Apply transfers in order; returns the masked tensor and one delta per pair."""
    reference = tensor
    deltas = []
    for source, target in pairs:
        tensor, delta = cptm(tensor, source, target, reference=reference)
        deltas.append(delta)
    return tensor, deltas


def cptm_provenance(pairs):
    return "cptm pairs=" + ";".join(f"{s}:{t}" for s, t in pairs)


def parse_cptm_provenance(provenance):
    if not provenance.startswith("cptm pairs="):
        raise ValidationError(f"not a cptm provenance line: {provenance!r}")
    body = provenance[len("cptm pairs="):]
    return [tuple(int(v) for v in item.split(":")) for item in body.split(";") if item]


def write_delta(path, delta):
    with open(path, "w") as fh:
        fh.write(_PROVENANCE_PREFIX + delta.provenance + "\n")
        fh.write("i1,i2,i3,truth\n")
        for (i1, i2, i3), v in zip(delta.entries, delta.truth):
            fh.write(f"{i1},{i2},{i3},{float(v)!r}\n")


def _read_delta_lines(path):
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        header = fh.readline().strip()
        body = fh.read()
    if not first.startswith(_PROVENANCE_PREFIX) or header != "i1,i2,i3,truth":
        raise ValidationError(f"{path}: not a mask delta file")
    rows = [line.split(",") for line in body.splitlines() if line.strip()]
    return first[len(_PROVENANCE_PREFIX):], rows


def read_delta(path):
    provenance, rows = _read_delta_lines(path)
    entries = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in rows], dtype=np.int64)
    truth = np.array([float(r[3]) for r in rows])
    return MaskDelta(entries.reshape(-1, 3), truth, provenance)


def read_delta_indices(path):
    """Hidden indices only; the truth column is left unread."""
    _, rows = _read_delta_lines(path)
    return np.array([[int(r[0]), int(r[1]), int(r[2])] for r in rows], dtype=np.int64).reshape(-1, 3)
