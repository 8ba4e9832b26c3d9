"""Gaussian peak fits on folded histograms and peak significance."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit

from .folding import FoldedHistogram, circular_difference

CONFIDENCE_3_SIGMA = 0.997
CORRELATION_WINDOW_PS = 39.0


class NoPeakError(ValueError):
    """Histogram has no structure to fit (empty or flat)."""


@dataclass(frozen=True)
class PeakFit:
    center: float          # ps in [0, period)
    rms_width: float       # ps
    amplitude: float       # counts per bin at the peak, above baseline
    baseline: float        # counts per bin
    significance: float
    counts: float = 0.0    # integrated peak counts
    fallback: bool = False


def _gauss(x, base, amp, mu, sigma):
    return base + amp * np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def _circular_smooth(counts: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return counts.astype(np.float64)
    kernel = np.ones(width) / width
    padded = np.concatenate([counts[-width:], counts, counts[:width]]).astype(np.float64)
    return np.convolve(padded, kernel, mode="same")[width:-width]


def _locate(h: FoldedHistogram, near: float | None, search_halfwidth: float | None) -> int:
    smooth = _circular_smooth(h.counts, max(1, int(round(10.0 / h.bin_width))) | 1)
    if near is None:
        return int(np.argmax(smooth))
    half = search_halfwidth if search_halfwidth is not None else h.period / 4
    centers = h.bin_centers
    mask = np.abs(circular_difference(centers, near, h.period)) <= half
    cand = np.flatnonzero(mask)
    if cand.size == 0:
        return int(np.argmax(smooth))
    return int(cand[np.argmax(smooth[cand])])


def _coarse_sigma(counts: np.ndarray, i0: int, base: float, bin_width: float) -> float:
    nb = counts.size
    smooth = _circular_smooth(counts, max(1, int(round(10.0 / bin_width))) | 1)
    top = smooth[i0]
    half = base + 0.5 * (top - base)
    left = right = 0
    limit = nb // 2
    while left < limit and smooth[(i0 - left - 1) % nb] > half:
        left += 1
    while right < limit and smooth[(i0 + right + 1) % nb] > half:
        right += 1
    fwhm = (left + right + 1) * bin_width
    return max(fwhm / 2.3548, bin_width)


def fit_peak(h: FoldedHistogram, near: float | None = None,
             search_halfwidth: float | None = None) -> PeakFit:
    """Fit Gaussian plus constant baseline around the strongest peak.

    With ``near`` the peak is searched within ``search_halfwidth`` (default a
    quarter period) of that position, which keeps the fit on one time bin
    when Early and Late peaks share the period. The fit window is five coarse
    widths either side of the peak, wrapped around the period edge and never
    wider than a quarter period.
    """
    counts = h.counts
    if counts.size == 0 or counts.max() == counts.min():
        raise NoPeakError("histogram is empty or flat")
    bw = h.bin_width
    nb = counts.size
    i0 = _locate(h, near, search_halfwidth)
    base0 = float(np.median(counts))
    sigma_guess = _coarse_sigma(counts, i0, base0, bw)
    half_bins = int(min(5 * sigma_guess, h.period / 4) / bw)
    half_bins = max(half_bins, 3)
    offs = np.arange(-half_bins, half_bins + 1)
    idx = (i0 + offs) % nb
    y = counts[idx].astype(np.float64)
    x = offs * bw
    edge = np.concatenate([y[:3], y[-3:]])
    base_guess = float(min(base0, edge.mean()))
    amp_guess = max(float(y.max()) - base_guess, 1.0)
    fallback = False
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OptimizeWarning)
            popt, _ = curve_fit(
                _gauss, x, y, p0=(base_guess, amp_guess, 0.0, sigma_guess),
                sigma=np.sqrt(np.maximum(y, 1.0)), maxfev=2000)
        base, amp, mu, sigma = (float(v) for v in popt)
        sigma = abs(sigma)
        if not (np.isfinite(popt).all() and sigma > 0 and abs(mu) <= x[-1] and amp > 0):
            raise RuntimeError("fit out of bounds")
    except (RuntimeError, ValueError):
        fallback = True
        w = np.maximum(y - base_guess, 0.0)
        if w.sum() <= 0:
            raise NoPeakError("no counts above baseline") from None
        mu = float(np.sum(w * x) / w.sum())
        sigma = float(math.sqrt(max(np.sum(w * (x - mu) ** 2) / w.sum(), bw * bw / 12)))
        base = base_guess
        amp = float(w.max())
    center = ((i0 + 0.5) * bw + mu) % h.period
    area = amp * sigma * math.sqrt(2 * math.pi) / bw
    region_bins = max(4 * sigma / bw, 1.0)
    noise = math.sqrt(max(base, 0.0) * region_bins)
    significance = 0.9545 * area / max(noise, 1.0)
    return PeakFit(center, sigma, amp, base, max(significance, 0.0), area, fallback)


def quick_significance(counts: np.ndarray, window_bins: int) -> float:
    """Cheap peak score used inside sweeps.

    Best circular window sum against the median window sum, in units of
    the Poisson standard deviation of that median.
    """
    c = np.asarray(counts, dtype=np.float64)
    w = max(1, int(window_bins))
    cs = np.concatenate([[0.0], np.cumsum(np.concatenate([c, c[:w]]))])
    sums = cs[w:w + c.size] - cs[:c.size]
    med = float(np.median(sums))
    return float((sums.max() - med) / math.sqrt(max(med, 1.0)))


def significance(rate_a: float, rate_b: float, rate_coinc: float,
                 residual_offset: float) -> float:
    """``sqrt(rate_coinc**2 / (rate_a * rate_b * residual_offset))``.

    ``rate_a`` and ``rate_b`` are the single-detection rates of the two
    parties, ``rate_coinc`` the correlation rate and ``residual_offset``
    the residual relative clock-rate difference; ``inf`` when that is 0.

    A value of 3 corresponds to :data:`CONFIDENCE_3_SIGMA` confidence that
    the peak is not noise.
    """
    if rate_a <= 0 or rate_b <= 0:
        raise ValueError("single rates must be > 0")
    if residual_offset < 0:
        raise ValueError("residual frequency difference must be >= 0")
    if residual_offset == 0:
        return math.inf
    return math.sqrt(rate_coinc * rate_coinc / (rate_a * rate_b * residual_offset))


def confidence(s: float) -> float:
    """Two-sided Gaussian confidence that a peak of significance ``s`` is real."""
    return math.erf(s / math.sqrt(2))


def peak_spread(h: FoldedHistogram, near: float | None = None, smooth_ps: float = 20.0) -> float:
    """Full width at half maximum of the dominant (possibly smeared) peak, in ps."""
    counts = h.counts
    if counts.max() == counts.min():
        raise NoPeakError("histogram is empty or flat")
    smooth = _circular_smooth(counts, max(1, int(round(smooth_ps / h.bin_width))) | 1)
    i0 = _locate(h, near, None)
    nb = counts.size
    base = float(np.percentile(smooth, 10))
    # plateau level from the upper part of the peak, robust to noise on a flat top
    above = smooth[smooth > base + 0.5 * (smooth[i0] - base)]
    top = float(np.percentile(above, 75)) if above.size else float(smooth[i0])
    half = base + 0.5 * (top - base)
    left = right = 0
    while left < nb // 2 and smooth[(i0 - left - 1) % nb] > half:
        left += 1
    while right < nb // 2 and smooth[(i0 + right + 1) % nb] > half:
        right += 1
    # linear interpolation of the two half-max crossings
    def frac(inside, outside):
        a, b = smooth[inside % nb], smooth[outside % nb]
        return 0.0 if a == b else (a - half) / (a - b)
    width = left + right + 1 + frac(i0 - left, i0 - left - 1) + frac(i0 + right, i0 + right + 1) - 1
    return float(width * h.bin_width)


def correlated_mask(folded: np.ndarray, center: float, period: float,
                    window: float = CORRELATION_WINDOW_PS) -> np.ndarray:
    """Tags within ``window`` ps of the Early or Late bin position."""
    d0 = np.abs(circular_difference(folded, center, period))
    d1 = np.abs(circular_difference(folded, center + period / 2, period))
    return (d0 <= window) | (d1 <= window)
