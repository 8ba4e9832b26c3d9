"""Session initialization: clock-frequency sweep and absolute offset search."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..clocks import PS_PER_S
from ..photon_sim import Symbol, SymbolSequence
from .folding import _as_tags, folded_histogram, period_ps
from .peaks import PeakFit, fit_peak, quick_significance

log = logging.getLogger(__name__)

S_THRESHOLD = 5.0
QBER_ALIGN_MAX = 0.25


class SweepFailed(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class AlignmentFailed(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class SweepResult:
    grid: np.ndarray
    significances: np.ndarray
    best_offset: float
    best_fit: PeakFit
    nominal_rate: float
    epoch: int = 0
    stages: tuple = field(default=(), repr=False)

    @property
    def best_rate(self) -> float:
        return self.nominal_rate * (1.0 + self.best_offset)

    @property
    def best_significance(self) -> float:
        return float(self.significances[int(np.argmax(self.significances))])


def sweep_grid(range_: float, step: float, center: float = 0.0) -> np.ndarray:
    if not step > 0:
        raise ValueError("step must be > 0")
    if range_ < 0:
        raise ValueError("range must be >= 0")
    n = int(math.floor(range_ / step + 1e-9))
    return center + np.arange(-n, n + 1) * step


def frequency_sweep(tags, nominal_rate: float, range_: float, step: float,
                    bin_width: float = 4.0, window_ps: float = 80.0,
                    s_threshold: float = S_THRESHOLD, center: float = 0.0,
                    epoch: int | None = None, workers: int = 1) -> SweepResult:
    """Brute-force grid search of the sender clock rate seen by the receiver.

    Trial ``u`` folds the tags with ``nominal_rate * (1 + u)``; each trial is
    scored with :func:`quick_significance` and the best trial gets a full
    Gaussian fit. Raises :class:`SweepFailed` when no trial reaches
    ``s_threshold``.
    """
    t = _as_tags(tags)
    if t.size == 0:
        raise SweepFailed("no tags to sweep")
    ep = int(t[0]) if epoch is None else int(epoch)
    grid = sweep_grid(range_, step, center)
    window_bins = max(1, int(round(window_ps / bin_width)))

    def score(u):
        h = folded_histogram(t, nominal_rate * (1.0 + u), bin_width, ep)
        return quick_significance(h.counts, window_bins)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            sig = np.fromiter(pool.map(score, grid), float, grid.size)
    else:
        sig = np.fromiter((score(u) for u in grid), float, grid.size)
    best = int(np.argmax(sig))
    u_best = float(grid[best])
    fit = fit_peak(folded_histogram(t, nominal_rate * (1.0 + u_best), 1.0, ep))
    result = SweepResult(grid, sig, u_best, fit, nominal_rate, ep)
    if sig[best] < s_threshold:
        raise SweepFailed(
            f"no trial reached S >= {s_threshold} (best S={sig[best]:.2f} at u={u_best:.3e})",
            result)
    return result


def staged_frequency_sweep(tags, nominal_rate: float, range_: float = 20e-6,
                           step: float = 0.5e-9, factor: int = 10,
                           max_trials: int = 2000, **kwargs) -> SweepResult:
    """Coarse-to-fine sweep ending at resolution ``step``.

    Stage ``j`` uses the first ``T / factor**j`` of the data with step
    ``step * factor**j``, so the residual peak smear ``step * T / 2`` is the
    same at every stage while the early stages touch only a sliver of the
    tags. Each stage searches ``±1.5`` coarse steps around the previous best.
    """
    t = _as_tags(tags)
    if t.size < 2:
        raise SweepFailed("not enough tags to sweep")
    span = float(t[-1] - t[0])
    n_stages = 0
    while 2 * range_ / (step * factor ** n_stages) > max_trials:
        n_stages += 1
    ep = int(t[0])
    center = 0.0
    stages = []
    current_range = range_
    result = None
    for j in range(n_stages, -1, -1):
        stage_step = step * factor ** j
        stop = t[0] + span / factor ** j
        sub = t[: int(np.searchsorted(t, stop, side="right"))]
        result = frequency_sweep(sub, nominal_rate, current_range, stage_step,
                                 center=center, epoch=ep, **kwargs)
        stages.append(result)
        center = result.best_offset
        current_range = 1.5 * stage_step
        log.debug("sweep stage step=%.2e best=%.4e S=%.1f", stage_step, center,
                  result.best_significance)
    return SweepResult(result.grid, result.significances, result.best_offset,
                       result.best_fit, nominal_rate, ep, tuple(stages))


@dataclass(frozen=True)
class OffsetSearchResult:
    absolute_offset: float
    shift: int
    relative_offset: float
    shifts: np.ndarray
    qber_curve: np.ndarray
    sifted: int = 0

    @property
    def min_qber(self) -> float:
        return float(np.min(self.qber_curve))


def decode_bins(tags, period: float, offset: float, epoch: int = 0):
    """Symbol slot number and time bin (0 Early, 1 Late) of each tag.

    Slot ``n`` spans ``epoch + offset + n*period + [-P/4, 3P/4)``; the Early
    bin is its first half.
    """
    t = _as_tags(tags)
    u = (t - np.int64(epoch)).astype(np.float64) - (offset - period / 4)
    n = np.floor(u / period)
    phase = u - n * period
    late = (phase >= period / 2).astype(np.int8)
    return n.astype(np.int64), late


def _circular_xcorr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``c[s] = sum_r a[r] * b[(r - s) % L]`` via one FFT pair."""
    fa, fb = np.fft.rfft(a), np.fft.rfft(b)
    return np.rint(np.fft.irfft(fa * np.conj(fb), n=a.size))


def qber_by_shift(slots: np.ndarray, late: np.ndarray, seq: SymbolSequence,
                  shifts: np.ndarray):
    """Sifted error rate of the decoded bins against ``seq`` for each shift."""
    L = seq.length
    r = np.mod(slots, L)
    c_early = np.bincount(r[late == 0], minlength=L).astype(np.float64)
    c_late = np.bincount(r[late == 1], minlength=L).astype(np.float64)
    sym = seq.symbols
    is_e = (sym == Symbol.EARLY).astype(np.float64)
    is_l = (sym == Symbol.LATE).astype(np.float64)
    errors = _circular_xcorr(c_early, is_l) + _circular_xcorr(c_late, is_e)
    sifted = _circular_xcorr(c_early + c_late, is_e + is_l)
    s = np.mod(shifts, L)
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(sifted[s] > 0, errors[s] / sifted[s], np.nan)
    return q, sifted[s].astype(np.int64)


def absolute_offset_search(tags, seq: SymbolSequence, relative_offset: float,
                           clock_rate: float, max_shift: int = 100, epoch: int = 0,
                           try_half_period: bool = True) -> OffsetSearchResult:
    """Resolve the integer number of periods in the timing offset.

    Tags are decoded into (slot, bin) relative to ``relative_offset`` and
    compared with the sent sequence for every shift in
    ``[-max_shift, max_shift]``; superposition-basis symbols are sifted out.
    The fitted peak may be either the Early or the Late one, so the offset
    shifted by half a period is tried too. The result is defined modulo the
    sequence duration.
    """
    P = period_ps(clock_rate)
    shifts = np.arange(-int(max_shift), int(max_shift) + 1)
    candidates = [relative_offset % P]
    if try_half_period:
        candidates.append((relative_offset + P / 2) % P)
    best = None
    for off in candidates:
        slots, late = decode_bins(tags, P, off, epoch)
        q, sifted = qber_by_shift(slots, late, seq, shifts)
        if np.all(np.isnan(q)):
            continue
        qq = np.where(np.isnan(q), np.inf, q)
        i = int(np.argmin(qq))
        if best is None or qq[i] < best[0]:
            best = (qq[i], off, i, q, sifted)
    if best is None:
        raise AlignmentFailed("no time-basis detections to compare")
    qmin, off, i, q, sifted = best
    s = int(shifts[i])
    result = OffsetSearchResult(off + s * P, s, off, shifts, q, int(sifted[i]))
    if qmin > QBER_ALIGN_MAX:
        raise AlignmentFailed(f"no QBER dip found (min QBER {qmin:.3f})", result)
    return result
