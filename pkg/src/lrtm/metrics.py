"""Scores for predicted versus held-out values: Pearson r, index of agreement, MAE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

SCALES = ("normalized", "molec_cm2")


class UndefinedMetricError(ValidationError):
    pass


def _pair(pred, obs, min_len):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if pred.shape != obs.shape:
        raise ValidationError(f"length mismatch: {pred.size} predictions, {obs.size} observations")
    if pred.size < min_len:
        raise ValidationError(f"need at least {min_len} pairs, got {pred.size}")
    return pred, obs


def pearson_r(pred, obs):
    pred, obs = _pair(pred, obs, 2)
    dp, do = pred - pred.mean(), obs - obs.mean()
    spp, soo = dp @ dp, do @ do
    if spp == 0 or soo == 0:
        raise UndefinedMetricError("correlation is undefined for a constant vector")
    r = (dp @ do) / np.sqrt(spp * soo)
    return float(np.clip(r, -1.0, 1.0))


def ioa(pred, obs):
    """Willmott's index of agreement, ``1 - SSE / potential error``."""
    pred, obs = _pair(pred, obs, 2)
    obar = obs.mean()
    potential = np.sum((np.abs(pred - obar) + np.abs(obs - obar)) ** 2)
    if potential == 0:
        raise UndefinedMetricError("index of agreement is undefined: zero potential error")
    return float(1.0 - np.sum((pred - obs) ** 2) / potential)


def mae(pred, obs):
    pred, obs = _pair(pred, obs, 1)
    return float(np.mean(np.abs(pred - obs)))


def daily_mean_pairs(pred, delta):
    """``(day, mean prediction, mean truth)`` for every day that has hidden entries.

    ``pred`` is either a dense tensor of predictions or a vector aligned with
    ``delta.entries``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 3:
        pred = pred[delta.index]
    if pred.shape != delta.truth.shape:
        raise ValidationError("predictions do not align with the delta")
    days = delta.entries[:, 0]
    out = []
    for day in np.unique(days):
        sel = days == day
        out.append((int(day), float(pred[sel].mean()), float(delta.truth[sel].mean())))
    return out


def _safe(fn, pred, obs):
    try:
        return fn(pred, obs)
    except UndefinedMetricError:
        return float("nan")


@dataclass
class EvaluationReport:
    method: str
    scale: str
    n: int
    r: float
    ioa: float
    mae: float
    per_day: list = field(default_factory=list)
    per_day_r: float = float("nan")
    per_day_ioa: float = float("nan")

    @classmethod
    def from_delta(cls, method, pred, delta, scale="normalized"):
        if scale not in SCALES:
            raise ValidationError(f"scale must be one of {SCALES}, got {scale!r}")
        pred = np.asarray(pred, dtype=np.float64)
        if pred.ndim == 3:
            pred = pred[delta.index]
        if not np.isfinite(pred).all():
            raise ValidationError(f"{method}: predictions contain non-finite values")
        report = cls.from_pairs(method, pred, delta.truth, scale)
        report.per_day = daily_mean_pairs(pred, delta)
        if len(report.per_day) >= 2:
            p = [row[1] for row in report.per_day]
            o = [row[2] for row in report.per_day]
            report.per_day_r = _safe(pearson_r, p, o)
            report.per_day_ioa = _safe(ioa, p, o)
        return report

    @classmethod
    def from_pairs(cls, method, pred, obs, scale="normalized"):
        pred, obs = _pair(pred, obs, 1)
        return cls(method=method, scale=scale, n=int(pred.size), r=_safe(pearson_r, pred, obs),
                   ioa=_safe(ioa, pred, obs), mae=mae(pred, obs))

    def as_dict(self):
        return {"method": self.method, "scale": self.scale, "n": self.n, "r": self.r,
                "ioa": self.ioa, "mae": self.mae, "per_day_r": self.per_day_r,
                "per_day_ioa": self.per_day_ioa,
                "per_day": [list(row) for row in self.per_day]}


def pair_rows(pred, delta):
    """Raw ``i1,i2,i3,prediction,truth`` rows for external plotting."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 3:
        pred = pred[delta.index]
    return [(int(i1), int(i2), int(i3), float(p), float(t))
            for (i1, i2, i3), p, t in zip(delta.entries, pred, delta.truth)]
