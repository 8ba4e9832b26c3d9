"""Frequency-stability statistics of timing-offset series.

All estimators take phase data ``x`` in seconds sampled every ``tau0``
seconds and averaging factors ``m`` (``tau = m * tau0``).
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class Estimator(str, enum.Enum):
    MDEV = "MDEV"
    TDEV = "TDEV"
    OADEV = "OADEV"


# MDEV log-log slope of each power-law noise type
NOISE_SLOPES = {
    "white PM": -1.5,
    "flicker PM": -1.0,
    "white FM": -0.5,
    "flicker FM": 0.0,
    "random-walk FM": 0.5,
}
MIN_R2 = 0.5
FLAT_SCATTER = 0.1    # log10 residual rms under which a low R² just means "flat"


@dataclass(frozen=True)
class PhaseSeries:
    sample_interval: float
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        if not self.sample_interval > 0:
            raise ValueError("sample_interval must be > 0")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("values must be one-dimensional")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return int(self.values.size)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.sample_interval

    @classmethod
    def from_ps(cls, sample_interval: float, values_ps, label: str = "") -> "PhaseSeries":
        return cls(sample_interval, np.asarray(values_ps, dtype=np.float64) * 1e-12, label)


@dataclass(frozen=True)
class SlopeFit:
    exponent: float
    intercept: float
    r2: float
    n_points: int
    scatter: float = 0.0   # rms of log10 residuals


@dataclass(frozen=True)
class StabilityCurve:
    taus: np.ndarray
    values: np.ndarray
    estimator: Estimator
    warnings: tuple = ()
    degenerate: bool = False
    label: str = ""
    slope_fit: SlopeFit | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "estimator", Estimator(self.estimator))
        for name in ("taus", "values"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def value_at(self, tau: float) -> float:
        i = int(np.argmin(np.abs(self.taus - tau)))
        if not math.isclose(self.taus[i], tau, rel_tol=1e-9):
            raise KeyError(f"tau={tau} not on this curve")
        return float(self.values[i])


def tau_grid(n: int, tau0: float, per_decade: int = 10, max_fraction: float = 1 / 3) -> np.ndarray:
    """Log-spaced averaging factors ``m``, unique integers from 1 to ``n * max_fraction``."""
    m_max = int(math.floor(n * max_fraction))
    if m_max < 1:
        return np.empty(0, np.int64)
    k = np.arange(0, int(math.floor(math.log10(m_max) * per_decade)) + 1)
    m = np.unique(np.rint(10.0 ** (k / per_decade)).astype(np.int64))
    return m[m <= m_max]


def _factors(series: PhaseSeries, taus, min_len) -> tuple[np.ndarray, list[str]]:
    tau0 = series.sample_interval
    n = len(series)
    keep, warns = [], []
    if taus is None:
        ms = tau_grid(n, tau0)
        ms = ms[[min_len(int(m)) <= n for m in ms]] if ms.size else ms
        return ms, warns
    for tau in np.atleast_1d(np.asarray(taus, dtype=np.float64)):
        m = tau / tau0
        mi = int(round(m))
        if mi < 1 or not math.isclose(m, mi, rel_tol=1e-9, abs_tol=1e-9):
            warns.append(f"tau={tau:g} s is not a positive multiple of tau0={tau0:g} s")
        elif min_len(mi) > n:
            warns.append(f"tau={tau:g} s needs {min_len(mi)} samples, series has {n}")
        else:
            keep.append(mi)
    return np.array(sorted(set(keep)), dtype=np.int64), warns


def _second_diff(x: np.ndarray, m: int) -> np.ndarray:
    return x[2 * m:] - 2 * x[m:-m] + x[:-2 * m]


def _mvar_one(x: np.ndarray, m: int, tau0: float) -> float:
    d = _second_diff(x, m)
    # sliding sums of m consecutive second differences
    cs = np.concatenate([[0.0], np.cumsum(d)])
    s = cs[m:] - cs[:-m]
    tau = m * tau0
    return float(np.sum(s * s) / (2.0 * m * m * tau * tau * s.size))


def _oavar_one(x: np.ndarray, m: int, tau0: float) -> float:
    d = _second_diff(x, m)
    tau = m * tau0
    return float(np.sum(d * d) / (2.0 * tau * tau * d.size))


def _result(series, ms, vals, est, warns):
    taus = ms * series.sample_interval
    vals = np.asarray(vals, dtype=np.float64)
    return StabilityCurve(taus, vals, est, tuple(warns),
                          bool(vals.size and np.all(vals == 0)), series.label)


def mdev(series: PhaseSeries, taus=None) -> StabilityCurve:
    """Modified Allan deviation.

    ``taus`` that are not multiples of the sample interval or need more than
    the available ``3m + 1`` samples are skipped and reported in ``warnings``.
    With ``taus=None`` a log grid of ten points per decade is used.
    """
    x = series.values
    ms, warns = _factors(series, taus, lambda m: 3 * m + 1)
    vals = [math.sqrt(_mvar_one(x, int(m), series.sample_interval)) for m in ms]
    return _result(series, ms, vals, Estimator.MDEV, warns)


def tdev_from_mdev(tau, mdev_value):
    """Time deviation in seconds from MDEV at averaging time ``tau`` (s)."""
    return np.asarray(tau, dtype=np.float64) / math.sqrt(3.0) * np.asarray(mdev_value,
                                                                           dtype=np.float64)


def tdev(series: PhaseSeries, taus=None) -> StabilityCurve:
    """Time deviation ``tau / sqrt(3) * MDEV`` in seconds."""
    md = mdev(series, taus)
    vals = tdev_from_mdev(md.taus, md.values)
    return StabilityCurve(md.taus, vals, Estimator.TDEV, md.warnings, md.degenerate, md.label)


def oadev(series: PhaseSeries, taus=None) -> StabilityCurve:
    x = series.values
    ms, warns = _factors(series, taus, lambda m: 2 * m + 1)
    vals = [math.sqrt(_oavar_one(x, int(m), series.sample_interval)) for m in ms]
    return _result(series, ms, vals, Estimator.OADEV, warns)


def fit_slope(curve: StabilityCurve) -> SlopeFit:
    ok = curve.values > 0
    lt, lv = np.log10(curve.taus[ok]), np.log10(curve.values[ok])
    if lt.size < 2:
        raise ValueError("need at least two positive points for a slope")
    a, b = np.polyfit(lt, lv, 1)
    resid = lv - (a * lt + b)
    ss_tot = float(np.sum((lv - lv.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 0.0
    return SlopeFit(float(a), float(b), r2, int(lt.size), float(np.sqrt(np.mean(resid ** 2))))


@dataclass(frozen=True)
class NoiseClass:
    exponent: float
    label: str
    r2: float
    residual: float   # distance of the fitted exponent from the class exponent


def identify_noise(curve: StabilityCurve) -> NoiseClass:
    """Fit the log-log slope and name the nearest power-law noise type.

    Needs at least four points spanning a decade. Exponents refer to the
    MDEV convention; TDEV curves are converted (their slope is one higher).
    Fits with R² below 0.5 are returned as ``"unclassified"`` unless the
    curve is simply flat (tiny log residuals), where R² carries no information.
    """
    taus = curve.taus[curve.values > 0]
    if taus.size < 4 or taus.max() / taus.min() < 10 * (1 - 1e-9):
        raise ValueError("noise identification needs >= 4 points spanning >= 1 decade")
    fit = fit_slope(curve)
    exponent = fit.exponent - 1.0 if curve.estimator is Estimator.TDEV else fit.exponent
    if fit.r2 < MIN_R2 and fit.scatter > FLAT_SCATTER:
        return NoiseClass(exponent, "unclassified", fit.r2, math.nan)
    label, ref = min(NOISE_SLOPES.items(), key=lambda kv: abs(kv[1] - exponent))
    return NoiseClass(exponent, label, fit.r2, abs(exponent - ref))


@dataclass(frozen=True)
class Detrended:
    series: PhaseSeries
    slope_ns_per_s: float
    slope_stderr_ns_per_s: float


def detrend_linear(series: PhaseSeries) -> Detrended:
    """Remove the least-squares line; the slope is returned in ns/s."""
    n = len(series)
    if n < 2:
        raise ValueError("need at least two samples")
    t = series.times
    x = series.values
    A = np.vstack([t, np.ones(n)]).T
    coef, *_ = np.linalg.lstsq(A, x, rcond=None)
    resid = x - A @ coef
    if n > 2:
        s2 = float(np.sum(resid ** 2)) / (n - 2)
        stderr = math.sqrt(s2 / float(np.sum((t - t.mean()) ** 2)))
    else:
        stderr = 0.0
    out = PhaseSeries(series.sample_interval, resid, series.label)
    return Detrended(out, float(coef[0]) * 1e9, stderr * 1e9)


def read_offset_csv(path, column: str = "offset_ps", time_column: str = "time_s",
                    label: str | None = None) -> PhaseSeries:
    """Load a uniformly sampled ``time_s, offset_ps`` table (comment lines start with '#')."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    if column not in rows[0] or time_column not in rows[0]:
        raise ValueError(f"{path}: needs columns {time_column!r} and {column!r}")
    t = np.array([float(r[time_column]) for r in rows])
    x = np.array([float(r[column]) for r in rows])
    if t.size < 2:
        raise ValueError(f"{path}: need at least two samples")
    dt = np.diff(t)
    tau0 = float(np.median(dt))
    if not tau0 > 0 or np.max(np.abs(dt - tau0)) > 1e-6 * tau0 + 1e-9:
        raise ValueError(f"{path}: samples are not uniformly spaced")
    return PhaseSeries.from_ps(tau0, x, label if label is not None else Path(path).stem)


def write_curves_csv(path, curves) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_s", "value", "estimator"])
        for c in curves:
            for tau, v in zip(c.taus, c.values):
                w.writerow([repr(float(tau)), repr(float(v)), c.estimator.value])


def stability_report(series: PhaseSeries, taus=None) -> dict:
    """MDEV, TDEV and OADEV curves of ``series`` plus the MDEV noise class."""
    curves = {"MDEV": mdev(series, taus), "TDEV": tdev(series, taus), "OADEV": oadev(series, taus)}
    try:
        noise = identify_noise(curves["MDEV"])
    except ValueError as exc:
        noise = str(exc)
    return {"curves": curves, "noise": noise}
