"""Live frequency tracking of the sender clock.

The tracker predicts that pulse ``anchor_index + n`` arrives at
``anchor_time + n * period`` on the receiver clock. Each update folds one
acquisition window with that prediction (a priori), measures how far the
peak has moved (``offset_step``), converts the move into a fractional frequency
correction ``offset_step / elapsed`` and refolds with the corrected period (a
posteriori).

A positive ``offset_step`` means pulses arrive later than predicted, so the
observed period grows: ``period <- period * (1 + rate_correction)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from ..clocks import PS_PER_S
from ..photon_sim import Symbol, SymbolSequence
from .folding import _as_tags, circular_difference, folded_histogram_period
from .initialization import OffsetSearchResult, decode_bins
from .peaks import NoPeakError, PeakFit, fit_peak

SLIP_TRIGGER_QBER = 0.4
SLIP_ACCEPT_QBER = 0.1


class TrackingError(RuntimeError):
    """The a-priori peak could not be found in an update window."""


class ResyncRequired(RuntimeError):
    """Slip recovery found no acceptable offset; initialization must restart."""


@dataclass(frozen=True)
class TrackerState:
    nominal_rate: float
    period: float                    # ps, current estimate
    anchor_time: float               # ps, receiver time of pulse anchor_index
    anchor_index: int
    absolute_offset: float           # ps, arrival of a pulse with index = 0 mod L
    update_time: float = 0.15
    acquisition_time: float = 0.1
    offset_step: float = 0.0
    rate_correction: float = 0.0
    a_priori_jitter: float = math.nan
    a_posteriori_jitter: float = math.nan
    significance: float = math.nan
    cumulative_offset: float = 0.0   # ps, sum of a-priori prediction errors
    offset_buffer: tuple = ()        # ((time_s, cumulative_offset_ps), ...)
    n_updates: int = 0
    qber: float = math.nan

    def __post_init__(self):
        if self.update_time < self.acquisition_time:
            raise ValueError("update_time must be >= acquisition_time")
        if not self.period > 0:
            raise ValueError("period must be > 0")

    @property
    def rate_estimate(self) -> float:
        return PS_PER_S / self.period

    @property
    def freq_diff(self) -> float:
        """Applied correction relative to the nominal rate (s/s)."""
        return self.rate_estimate / self.nominal_rate - 1.0

    @property
    def relative_offset(self) -> float:
        return self.anchor_time % self.period

    @classmethod
    def from_initialization(cls, nominal_rate: float, rate_estimate: float, epoch: int,
                            offset: OffsetSearchResult, reference_time: float,
                            sequence_length: int, **kwargs) -> "TrackerState":
        """Anchor the tracker on the pulse nearest ``reference_time`` (ps)."""
        P = PS_PER_S / rate_estimate
        base = epoch + offset.relative_offset
        n = int(round((reference_time - base) / P))
        return cls(nominal_rate=nominal_rate, period=P, anchor_time=base + n * P,
                   anchor_index=(n - offset.shift) % sequence_length,
                   absolute_offset=epoch + offset.absolute_offset, **kwargs)


def frequency_correction(offset_step_ps: float, update_time_s: float) -> float:
    """Fractional frequency difference from a timing-offset change."""
    if update_time_s <= 0:
        raise ValueError("update time must be > 0")
    return offset_step_ps / (update_time_s * PS_PER_S)


def _fit_against(tags: np.ndarray, period: float, anchor: float):
    epoch = int(math.floor(anchor))
    predicted = anchor - epoch
    h = folded_histogram_period(tags, period, 1.0, epoch)
    fit = fit_peak(h, near=predicted, search_halfwidth=period / 4)
    return fit, circular_difference(fit.center, predicted, period)


def track_update(state: TrackerState, new_tags, window: tuple | None = None) -> TrackerState:
    """One cycle of the feedback loop over an acquisition window.

    ``window`` is the ``(start, stop)`` receiver time in ps covered by
    ``new_tags``; it defaults to the first and last tag.
    """
    t = _as_tags(new_tags)
    if t.size == 0:
        raise TrackingError("no tags in update window")
    start, stop = window if window is not None else (float(t[0]), float(t[-1]))
    mid = 0.5 * (start + stop)
    P = state.period
    try:
        prior, offset_step = _fit_against(t, P, state.anchor_time)
    except NoPeakError as exc:
        raise TrackingError(f"a-priori fit failed: {exc}") from exc
    elapsed = mid - state.anchor_time
    n_mid = int(round(elapsed / P))
    rate_correction = frequency_correction(offset_step, elapsed / PS_PER_S) if elapsed > 0 else 0.0
    new_period = P * (1.0 + rate_correction)
    new_anchor = state.anchor_time + n_mid * P + offset_step
    try:
        post, _ = _fit_against(t, new_period, new_anchor)
        post_sigma = post.rms_width
    except NoPeakError:
        post_sigma = math.nan
    cumulative = state.cumulative_offset + offset_step
    return replace(
        state, period=new_period, anchor_time=new_anchor,
        anchor_index=state.anchor_index + n_mid, offset_step=float(offset_step),
        rate_correction=float(rate_correction), a_priori_jitter=prior.rms_width,
        a_posteriori_jitter=post_sigma, significance=prior.significance,
        cumulative_offset=cumulative,
        offset_buffer=state.offset_buffer + ((mid / PS_PER_S, cumulative),),
        n_updates=state.n_updates + 1)


def tracking_qber(state: TrackerState, tags, seq: SymbolSequence) -> tuple[float, int]:
    """Sifted QBER of ``tags`` decoded with the tracker's prediction."""
    t = _as_tags(tags)
    epoch = int(math.floor(state.anchor_time))
    slots, late = decode_bins(t, state.period, state.anchor_time - epoch, epoch)
    sent = seq.symbols[np.mod(state.anchor_index + slots, seq.length)]
    sifted = sent <= Symbol.LATE
    n = int(sifted.sum())
    if n == 0:
        return math.nan, 0
    return float(np.count_nonzero(late[sifted] != sent[sifted]) / n), n


def shift_periods(state: TrackerState, k: float) -> TrackerState:
    """Move the absolute offset by ``k`` periods (later arrival for k > 0).

    ``k`` may be a half-integer: a shift by half a period swaps the roles of
    the Early and Late peaks.
    """
    d = k * state.period
    return replace(state, anchor_time=state.anchor_time + d,
                   absolute_offset=state.absolute_offset + d,
                   cumulative_offset=state.cumulative_offset + d)


def slip_candidates(k_max: int) -> list[float]:
    """Whole periods ±1..±k_max first, then the half-period positions."""
    whole = [s * k for k in range(1, k_max + 1) for s in (1, -1)]
    half = [s * (k - 0.5) for k in range(1, k_max + 1) for s in (1, -1)]
    return whole + half


def recover_symbol_slip(state: TrackerState, tags, seq: SymbolSequence, k_max: int = 3,
                        trigger: float = SLIP_TRIGGER_QBER,
                        accept: float = SLIP_ACCEPT_QBER) -> tuple[TrackerState, float, float]:
    """Try offsets of ±1 ... ±k_max periods until the QBER drops below ``accept``.

    Returns the (possibly unchanged) state, the applied number of periods and
    the QBER seen before any correction.
    """
    qber, _ = tracking_qber(state, tags, seq)
    if not (qber > trigger):
        return replace(state, qber=qber), 0, qber
    for cand in slip_candidates(k_max):
        trial = shift_periods(state, cand)
        q, _ = tracking_qber(trial, tags, seq)
        if q < accept:
            return replace(trial, qber=q), cand, qber
    raise ResyncRequired(f"no offset within ±{k_max} periods restores QBER (at {qber:.3f})")


class SyncJitter(NamedTuple):
    value: float
    below_reference: bool


def sync_jitter(sigma: float, reference_sigma: float) -> SyncJitter:
    """Synchronization jitter ``sqrt(sigma**2 - reference_sigma**2)``.

    A measured width below the reference yields 0 with ``below_reference``
    set instead of NaN.
    """
    if reference_sigma < 0 or sigma < 0:
        raise ValueError("jitters must be >= 0")
    d = sigma * sigma - reference_sigma * reference_sigma
    if d < 0:
        return SyncJitter(0.0, True)
    return SyncJitter(math.sqrt(d), False)
