"""Temporal diagnostics on the spatially averaged daily series.

``adf_test`` is the augmented Dickey-Fuller unit-root test (null: unit root),
``ljung_box_test`` the Ljung-Box portmanteau test (null: no autocorrelation
up to the given lag).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats as sps

from .errors import DegenerateInputError, ValidationError

log = logging.getLogger(__name__)

LEVELS = (0.01, 0.05, 0.10)

# MacKinnon (2010) response surfaces for one series: the critical value at
# nobs n is b0 + b1/n + b2/n^2 + b3/n^3, rows for 1%, 5%, 10%.
_CRIT_SURFACE = {
    "c": np.array([[-3.43035, -6.5393, -16.786, -79.433],
                   [-2.86154, -2.8903, -4.234, -40.040],
                   [-2.56677, -1.5384, -2.809, 0.0]]),
    "ct": np.array([[-3.95877, -9.0531, -28.428, -134.155],
                    [-3.41049, -4.3904, -9.036, -45.374],
                    [-3.12705, -2.5856, -3.925, -22.380]]),
}

# Asymptotic distribution of the DF t-statistic, tabulated at these
# cumulative probabilities (from MacKinnon's 1994 approximation).
_P_GRID = np.array([0.001, 0.005, 0.01, 0.025, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50,
                    0.60, 0.70, 0.80, 0.90, 0.95, 0.975, 0.99, 0.995, 0.999])
_TAU_QUANTILES = {
    "c": np.array([-4.0916, -3.6424, -3.4293, -3.1215, -2.8616, -2.5671, -2.2174, -1.9697,
                   -1.7610, -1.5673, -1.3627, -1.1372, -0.8627, -0.4578, -0.0943, 0.2514,
                   0.7082, 1.0753, 2.3788]),
    "ct": np.array([-4.6079, -4.1681, -3.9605, -3.6618, -3.4105, -3.1268, -2.7917, -2.5572,
                    -2.3620, -2.1820, -2.0026, -1.8098, -1.5804, -1.2489, -0.9540, -0.6708,
                    -0.2784, 0.0852, 0.7000]),
}

REGRESSIONS = {"constant": "c", "c": "c", "constant+trend": "ct", "ct": "ct"}


@dataclass
class DailySeries:
    values: np.ndarray
    valid_counts: np.ndarray


@dataclass
class TestResult:
    statistic: float
    p_value: float | None
    lags_used: int
    nobs: int
    decision_at: dict = field(default_factory=dict)
    critical_values: dict = field(default_factory=dict)
    p_bracket: str | None = None

    __test__ = False

    def as_dict(self):
        return {"statistic": self.statistic, "p_value": self.p_value,
                "p_bracket": self.p_bracket, "lags_used": self.lags_used, "nobs": self.nobs,
                "critical_values": self.critical_values,
                "decisions": {k: ("reject" if v else "fail-to-reject")
                              for k, v in self.decision_at.items()}}


def _level_name(level):
    return f"{round(level * 100)}%"


def spatial_mean_series(tensor):
    """Per-day mean over observed pixels (NaN on days with none)."""
    counts = tensor.mask.sum(axis=(1, 2))
    sums = tensor.filled(0.0).sum(axis=(1, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return DailySeries(values, counts)


def _clean_series(series):
    y = np.asarray(series, dtype=np.float64).reshape(-1)
    bad = ~np.isfinite(y)
    if bad.any():
        log.warning("dropping %d non-finite days from the series", int(bad.sum()))
        y = y[~bad]
    if y.size and np.all(y == y[0]):
        raise DegenerateInputError("series is constant")
    return y


def _ols(X, y):
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise DegenerateInputError("ADF regression design is singular")
    resid = y - X @ beta
    return beta, float(resid @ resid)


def _adf_design(y, lags, start, trend):
    """Rows t = start..n-1 of the ADF regression (lagged level first)."""
    dy = np.diff(y)
    n = y.size
    t = np.arange(start, n)
    cols = [y[t - 1]]
    cols += [dy[t - 1 - k] for k in range(1, lags + 1)]
    cols.append(np.ones(t.size))
    if trend:
        cols.append(t.astype(np.float64))
    return np.column_stack(cols), dy[t - 1]


def adf_critical_values(nobs, regression="constant"):
    key = REGRESSIONS[regression]
    n = float(nobs)
    surface = _CRIT_SURFACE[key]
    values = surface @ np.array([1.0, 1 / n, 1 / n**2, 1 / n**3])
    return {_level_name(lv): float(v) for lv, v in zip(LEVELS, values)}


def adf_pvalue(statistic, regression="constant"):
    """Interpolated p-value; returns ``(p, bracket)`` with one of them None."""
    q = _TAU_QUANTILES[REGRESSIONS[regression]]
    if statistic < q[0]:
        return None, f"< {_P_GRID[0]}"
    if statistic > q[-1]:
        return None, f"> {_P_GRID[-1]}"
    z = np.interp(statistic, q, sps.norm.ppf(_P_GRID))
    return float(sps.norm.cdf(z)), None


def adf_test(series, max_lag=None, regression="constant", autolag="aic"):
    """Augmented Dickey-Fuller test.

    Regresses ``dy_t`` on ``y_{t-1}``, ``p`` lagged differences and a constant
    (plus a linear trend for ``regression="constant+trend"``).  With
    ``autolag="aic"`` the lag order is the AIC minimizer over ``0..max_lag``
    on a common sample; with ``autolag=None`` exactly ``max_lag`` lags are used.
    """
    if regression not in REGRESSIONS:
        raise ValidationError(f"unknown regression {regression!r}")
    trend = REGRESSIONS[regression] == "ct"
    y = _clean_series(series)
    n = y.size
    if max_lag is None:
        max_lag = int(np.ceil(12.0 * (n / 100.0) ** 0.25))
        max_lag = max(0, min(max_lag, n - 12))
    if max_lag < 0 or n <= max_lag + 10:
        raise ValidationError(f"series of length {n} too short for max_lag={max_lag}")
    if autolag is None:
        lags = max_lag
    elif autolag == "aic":
        start = max_lag + 1
        best = None
        for p in range(max_lag + 1):
            X, target = _adf_design(y, p, start, trend)
            _, ssr = _ols(X, target)
            nobs = target.size
            aic = nobs * np.log(ssr / nobs) + 2 * X.shape[1]
            if best is None or aic < best[0]:
                best = (aic, p)
        lags = best[1]
    else:
        raise ValidationError(f"unknown autolag {autolag!r}")
    X, target = _adf_design(y, lags, lags + 1, trend)
    beta, ssr = _ols(X, target)
    nobs, k = X.shape
    sigma2 = ssr / (nobs - k)
    if sigma2 == 0:
        raise DegenerateInputError("ADF regression fits the series exactly")
    cov = sigma2 * np.linalg.inv(X.T @ X)
    stat = float(beta[0] / np.sqrt(cov[0, 0]))
    crit = adf_critical_values(nobs, regression)
    p_value, bracket = adf_pvalue(stat, regression)
    decisions = {name: stat < value for name, value in crit.items()}
    return TestResult(stat, p_value, lags, nobs, decisions, crit, bracket)


def chi2_sf(x, df):
    """Chi-square upper tail via the regularized upper incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def autocorrelations(series, lags):
    y = np.asarray(series, dtype=np.float64)
    d = y - y.mean()
    denom = d @ d
    return np.array([(d[k:] @ d[:-k]) / denom for k in range(1, lags + 1)])


def ljung_box_test(series, lags=20):
    """``Q = n (n + 2) sum_k rho_k^2 / (n - k)`` against chi-square(lags)."""
    if lags < 1:
        raise ValidationError(f"lags must be >= 1, got {lags}")
    y = _clean_series(series)
    n = y.size
    if n <= lags:
        raise ValidationError(f"series of length {n} too short for {lags} lags")
    rho = autocorrelations(y, lags)
    q = float(n * (n + 2) * np.sum(rho**2 / (n - np.arange(1, lags + 1))))
    p = chi2_sf(q, lags)
    decisions = {_level_name(lv): p < lv for lv in LEVELS}
    return TestResult(q, p, lags, n, decisions)
