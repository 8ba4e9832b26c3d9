"""Weak-coherent-pulse source, fiber channel and detector simulation.

Pulses leave the sender at ``k / clock_rate`` on the sender clock. Each pulse is
detected with probability ``1 - exp(-mu * eta)`` (``eta`` from ``loss_db``);
multi-photon pulses collapse onto one click. Detected photons pick up source,
detector and digitizer jitter, the propagation delay and any fiber thermal
delay, and are then stamped by the receiver clock at the digitizer
resolution. Dark/background counts are a homogeneous Poisson process.

Large runs are generated in chunks of consecutive pulses, each chunk with its
own random stream, so any sub-range of a run can be regenerated on its own.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .clocks import PS_PER_S, ClockModel, PhaseTrajectory, synthesize_trajectory

log = logging.getLogger(__name__)

C_LIGHT = 299_792_458.0
MAX_EXPECTED_TAGS = 10**9


class Symbol(enum.IntEnum):
    EARLY = 0
    LATE = 1
    PLUS = 2
    MINUS = 3


class CapacityError(RuntimeError):
    """Requested simulation would produce more tags than allowed."""


@dataclass(frozen=True)
class SymbolSequence:
    """Periodically repeated symbol pattern; pulse ``k`` carries ``symbols[k % len]``."""

    symbols: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.symbols, dtype=np.int8)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("symbol sequence must be a non-empty 1-d sequence")
        if arr.min() < 0 or arr.max() > 3:
            raise ValueError("symbols must be Early/Late/Plus/Minus (0..3)")
        arr.setflags(write=False)
        object.__setattr__(self, "symbols", arr)

    @classmethod
    def random(cls, length: int = 1000, seed: int = 0, time_basis_only: bool = False):
        rng = np.random.default_rng(seed)
        high = 2 if time_basis_only else 4
        return cls(rng.integers(0, high, length))

    @classmethod
    def constant(cls, symbol: Symbol, length: int = 1000):
        return cls(np.full(length, int(symbol)))

    @property
    def length(self) -> int:
        return int(self.symbols.size)

    @property
    def basis(self) -> np.ndarray:
        """0 for the time basis (Early/Late), 1 for the superposition basis."""
        return (self.symbols >= 2).astype(np.int8)

    def __len__(self):
        return self.length

    def __eq__(self, other):
        return isinstance(other, SymbolSequence) and np.array_equal(self.symbols, other.symbols)

    def __hash__(self):
        return hash(self.symbols.tobytes())


@dataclass(frozen=True)
class SourceParams:
    clock_rate: float = 5e8
    mean_photon_number: float = 5.4e-4
    source_jitter_rms: float = 37.0
    sender_clock: ClockModel = field(default_factory=ClockModel)
    # probability that a pulse is emitted in the wrong time bin
    encoding_error: float = 0.0

    def __post_init__(self):
        if not self.clock_rate > 0:
            raise ValueError("clock_rate must be > 0")
        if not self.mean_photon_number >= 0:
            raise ValueError("mean_photon_number must be >= 0")
        if self.source_jitter_rms < 0:
            raise ValueError("source_jitter_rms must be >= 0")
        if not 0 <= self.encoding_error <= 1:
            raise ValueError("encoding_error must be in [0, 1]")

    @property
    def period_ps(self) -> float:
        return PS_PER_S / self.clock_rate


@dataclass(frozen=True)
class ChannelParams:
    """Fiber link: loss, background, fixed delay and temperature-driven delay.

    The temperature excursion is ``temperature_offset + amplitude *
    sin(2 pi t / period)``. ``delay_steps`` holds ``(time_s, delta_ps)``
    pairs, each adding ``delta_ps`` of delay from ``time_s`` onward.
    """

    loss_db: float = 0.0
    background_rate: float = 0.0
    propagation_delay: float = 0.0
    fiber_length: float = 10.0
    thermo_optic: float = 11e-6
    expansion: float = 0.55e-6
    refractive_index: float = 1.468
    wavelength: float = 1550e-9
    temperature_offset: float = 0.0
    temperature_amplitude: float = 0.0
    temperature_period: float = 600.0
    delay_steps: tuple = ()

    def __post_init__(self):
        if self.loss_db < 0:
            raise ValueError("loss_db must be >= 0")
        if self.background_rate < 0:
            raise ValueError("background_rate must be >= 0")
        if self.fiber_length < 0:
            raise ValueError("fiber_length must be >= 0")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be > 0")
        if self.temperature_period <= 0:
            raise ValueError("temperature_period must be > 0")
        object.__setattr__(self, "delay_steps",
                           tuple((float(t), float(d)) for t, d in self.delay_steps))

    def temperature(self, t_s):
        t = np.asarray(t_s, dtype=np.float64)
        return self.temperature_offset + self.temperature_amplitude * np.sin(
            2 * np.pi * t / self.temperature_period)


@dataclass(frozen=True)
class DetectorParams:
    detector_jitter_rms: float = 13.0
    adc_jitter_rms: float = 3.0
    dead_time: float = 0.0
    resolution: int = 1
    receiver_clock: ClockModel = field(default_factory=ClockModel)

    def __post_init__(self):
        if self.detector_jitter_rms < 0 or self.adc_jitter_rms < 0 or self.dead_time < 0:
            raise ValueError("jitters and dead time must be >= 0")
        if int(self.resolution) < 1:
            raise ValueError("resolution must be >= 1 ps")


@dataclass(frozen=True)
class Truth:
    """Ground truth of the detected signal photons, sorted by pulse index."""

    pulse_index: np.ndarray
    symbol: np.ndarray
    true_time: np.ndarray
    tag_index: np.ndarray

    def __len__(self):
        return int(self.pulse_index.size)


@dataclass(frozen=True)
class TagStream:
    tags: np.ndarray
    truth: Truth | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.tags, dtype=np.int64)
        arr.setflags(write=False)
        object.__setattr__(self, "tags", arr)

    def __len__(self):
        return int(self.tags.size)

    @property
    def span_s(self) -> float:
        if self.tags.size < 2:
            return 0.0
        return float(self.tags[-1] - self.tags[0]) / PS_PER_S

    def window(self, start_ps, stop_ps) -> "TagStream":
        """Tags with ``start_ps <= t < stop_ps`` (truth not carried)."""
        lo, hi = np.searchsorted(self.tags, [start_ps, stop_ps])
        return TagStream(self.tags[lo:hi], None, self.meta)


def fiber_thermal_delay(ch: ChannelParams, offset_step) -> np.ndarray | float:
    """Extra propagation delay in ps for a temperature change ``offset_step`` (K).

    Optical path change ``(n dL/dT + L dn/dT) dT`` divided by c, with
    ``dL/dT = expansion * L``.
    """
    path = (ch.refractive_index * ch.expansion * ch.fiber_length
            + ch.fiber_length * ch.thermo_optic)
    out = path * np.asarray(offset_step, dtype=np.float64) / C_LIGHT * PS_PER_S
    return float(out) if np.ndim(out) == 0 else out


def jitter_budget_total(components: Sequence[float]) -> float:
    comps = np.asarray(list(components), dtype=np.float64)
    if comps.size and comps.min() < 0:
        raise ValueError("jitter components must be >= 0")
    return float(np.sqrt(np.sum(comps ** 2)))


def detection_probability(src: SourceParams, ch: ChannelParams) -> float:
    mu_eta = src.mean_photon_number * 10.0 ** (-ch.loss_db / 10.0)
    return float(-np.expm1(-mu_eta))


def expected_rates(src: SourceParams, ch: ChannelParams) -> dict:
    signal = detection_probability(src, ch) * src.clock_rate
    return {"signal_cps": signal, "background_cps": ch.background_rate,
            "total_cps": signal + ch.background_rate}


@dataclass
class Simulation:
    """A configured experiment that can regenerate any chunk of its tag stream."""

    src: SourceParams
    ch: ChannelParams
    det: DetectorParams
    seq: SymbolSequence
    duration: float
    seed: int = 0
    chunk_duration: float = 0.05
    clock_sample_interval: float = 1e-3
    sender_trajectory: PhaseTrajectory | None = None
    receiver_trajectory: PhaseTrajectory | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        rates = expected_rates(self.src, self.ch)
        expected = rates["total_cps"] * self.duration
        if expected > MAX_EXPECTED_TAGS:
            raise CapacityError(
                f"expected {expected:.3g} tags exceeds the {MAX_EXPECTED_TAGS:.0e} limit")
        # margin covers propagation delay, delay steps and clock offsets
        extra_ps = self.ch.propagation_delay + sum(abs(d) for _, d in self.ch.delay_steps)
        margin = 1.0 + 1e-3 * self.duration + extra_ps / PS_PER_S
        span = self.duration + margin
        if self.sender_trajectory is None:
            self.sender_trajectory = synthesize_trajectory(
                self.src.sender_clock, span, self.clock_sample_interval)
        if self.receiver_trajectory is None:
            self.receiver_trajectory = synthesize_trajectory(
                self.det.receiver_clock, span, self.clock_sample_interval)
        self.period_ps = self.src.period_ps
        self.n_pulses = int(math.floor(self.duration * self.src.clock_rate + 1e-9))
        self.pulses_per_chunk = max(1, int(round(self.chunk_duration * self.src.clock_rate)))
        self.n_chunks = -(-self.n_pulses // self.pulses_per_chunk)
        self.p_detect = detection_probability(self.src, self.ch)

    def meta(self) -> dict:
        return {"source": asdict(self.src), "channel": asdict(self.ch),
                "detector": asdict(self.det), "duration_s": self.duration,
                "seed": self.seed, "sequence_length": self.seq.length}

    def chunk_bounds_s(self, j: int) -> tuple[float, float]:
        """Approximate receiver-time span of chunk ``j`` in seconds."""
        k0 = j * self.pulses_per_chunk
        k1 = min(self.n_pulses, k0 + self.pulses_per_chunk)
        return k0 * self.period_ps / PS_PER_S, k1 * self.period_ps / PS_PER_S

    def receiver_span_ps(self, j: int, margin_ps: float = 1e6) -> tuple[float, float]:
        """Conservative receiver-clock interval holding every tag of chunk ``j``."""
        k0 = j * self.pulses_per_chunk
        k1 = min(self.n_pulses, k0 + self.pulses_per_chunk)
        lo, hi = self.sender_trajectory.true_time_float(
            np.array([k0, k1], dtype=np.float64) * self.period_ps)
        d_lo = d_hi = float(self.ch.propagation_delay)
        for _, d in self.ch.delay_steps:
            d_lo, d_hi = d_lo + min(d, 0.0), d_hi + max(d, 0.0)
        thermal = abs(float(fiber_thermal_delay(
            self.ch, abs(self.ch.temperature_offset) + abs(self.ch.temperature_amplitude))))
        r_lo, r_hi = self.receiver_trajectory.local_time_float(
            np.clip([lo + d_lo - thermal, hi + d_hi + thermal], 0.0,
                    self.receiver_trajectory.end_ps))
        return float(r_lo) - margin_ps, float(r_hi) + margin_ps

    def _rng(self, j: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(j,)))

    def _extra_delay(self, t_true_ps: np.ndarray) -> np.ndarray:
        delay = np.full(t_true_ps.shape, float(self.ch.propagation_delay))
        for t_s, d_ps in self.ch.delay_steps:
            delay += np.where(t_true_ps >= t_s * PS_PER_S, d_ps, 0.0)
        if self.ch.temperature_offset or self.ch.temperature_amplitude:
            delay += fiber_thermal_delay(self.ch, self.ch.temperature(t_true_ps / PS_PER_S))
        return delay

    def raw_chunk(self, j: int):
        """Unsorted receiver times (float ps) plus truth arrays for chunk ``j``."""
        rng = self._rng(j)
        k0 = j * self.pulses_per_chunk
        kc = min(self.n_pulses, k0 + self.pulses_per_chunk) - k0
        count = int(rng.binomial(kc, self.p_detect)) if self.p_detect > 0 else 0
        offsets = np.unique(rng.integers(0, kc, count))
        while offsets.size < count:
            more = rng.integers(0, kc, count - offsets.size)
            offsets = np.unique(np.concatenate([offsets, more]))
        k = k0 + offsets.astype(np.int64)
        n = k.size

        sym = self.seq.symbols[k % self.seq.length].astype(np.int8)
        time_bin = np.where(sym >= 2, rng.integers(0, 2, n), sym).astype(np.int8)
        if self.src.encoding_error:
            flip = rng.random(n) < self.src.encoding_error
            time_bin = np.where(flip, 1 - time_bin, time_bin)
        P = self.period_ps
        sender_local = k * P + time_bin * (0.5 * P)
        t_emit = self.sender_trajectory.true_time_float(sender_local)
        t_pulse = self.sender_trajectory.true_time_float(k * P)
        t_arr = t_emit + rng.normal(0.0, 1.0, n) * self.src.source_jitter_rms
        t_arr = t_arr + self._extra_delay(t_arr)
        t_arr = t_arr + rng.normal(0.0, 1.0, n) * self.det.detector_jitter_rms
        # digitizer jitter acts on the local reading
        local = self.receiver_trajectory.local_time_float(t_arr)
        local = local + rng.normal(0.0, 1.0, n) * self.det.adc_jitter_rms

        bg = np.empty(0)
        if self.ch.background_rate > 0:
            t_lo = float(self.sender_trajectory.true_time_float(k0 * P))
            t_hi = float(self.sender_trajectory.true_time_float((k0 + kc) * P))
            nb = int(rng.poisson(self.ch.background_rate * (t_hi - t_lo) / PS_PER_S))
            bg_true = rng.uniform(t_lo, t_hi, nb) + self.ch.propagation_delay
            bg = self.receiver_trajectory.local_time_float(bg_true)
        return local, bg, (k, sym, t_pulse)

    def _quantize(self, t: np.ndarray) -> np.ndarray:
        res = int(self.det.resolution)
        q = np.rint(t / res).astype(np.int64) * res
        return np.maximum(q, 0)

    def chunks(self, only: set | None = None) -> Iterator[TagStream]:
        """Yield the run as consecutive, time-ordered TagStreams.

        Chunk boundaries are smoothed over: tags are only released once no
        later chunk can still produce an earlier tag. ``only`` restricts
        generation to a set of chunk indices (a gap flushes the buffer).
        """
        # columns: tag, pulse index (-1 for background), symbol, true pulse time
        pending = (np.empty(0, np.int64), np.empty(0, np.int64),
                   np.empty(0, np.int8), np.empty(0, np.float64))
        last_tag = None
        prev_j = None

        def release(upto):
            nonlocal pending, last_tag
            t = pending[0]
            cut = t.size if upto is None else int(np.searchsorted(t, upto))
            out = [c[:cut] for c in pending]
            pending = tuple(c[cut:] for c in pending)
            keep = self._dead_time_mask(out[0], last_tag)
            out = [c[keep] for c in out]
            if out[0].size:
                last_tag = int(out[0][-1])
            return self._package(*out)

        for j in range(self.n_chunks):
            if only is not None and j not in only:
                continue
            if prev_j is not None and j != prev_j + 1:
                out = release(None)
                if len(out):
                    yield out
                last_tag = None
            prev_j = j
            local, bg, (k, sym, t_pulse) = self.raw_chunk(j)
            new = (np.concatenate([self._quantize(local), self._quantize(bg)]),
                   np.concatenate([k, np.full(bg.size, -1, np.int64)]),
                   np.concatenate([sym, np.full(bg.size, -1, np.int8)]),
                   np.concatenate([t_pulse, np.full(bg.size, np.nan)]))
            horizon = int(new[0].min()) if new[0].size else None
            merged = tuple(np.concatenate([a, b]) for a, b in zip(pending, new))
            order = np.argsort(merged[0], kind="stable")
            pending = tuple(c[order] for c in merged)
            if horizon is not None:
                out = release(horizon)
                if len(out):
                    yield out
        tail = release(None)
        if len(tail):
            yield tail

    def _dead_time_mask(self, t: np.ndarray, last: int | None) -> np.ndarray:
        dead = max(float(self.det.dead_time), 0.0)
        keep = np.ones(t.size, dtype=bool)
        if t.size == 0:
            return keep
        gaps = np.diff(t, prepend=np.int64(last) if last is not None else t[0] - 2**40)
        # zero dead time still rejects coincident tags (strictly increasing stream)
        if dead == 0:
            return gaps > 0
        if np.all(gaps >= dead):
            return keep
        prev = last if last is not None else None
        for i in range(t.size):
            if prev is not None and t[i] - prev < max(dead, 1):
                keep[i] = False
            else:
                prev = t[i]
        return keep

    def _package(self, t, k, sym, t_pulse) -> TagStream:
        sig = np.flatnonzero(k >= 0)
        order = sig[np.argsort(k[sig], kind="stable")]
        truth = Truth(k[order], sym[order], t_pulse[order], order.astype(np.int64))
        return TagStream(t, truth)

    def run(self) -> TagStream:
        """The whole run as a single TagStream."""
        parts = list(self.chunks())
        if not parts:
            return TagStream(np.empty(0, np.int64), Truth(*(np.empty(0, d) for d in (
                np.int64, np.int8, np.float64, np.int64))), self.meta())
        tags = np.concatenate([p.tags for p in parts])
        offsets = np.cumsum([0] + [len(p) for p in parts[:-1]])
        truth = Truth(np.concatenate([p.truth.pulse_index for p in parts]),
                      np.concatenate([p.truth.symbol for p in parts]),
                      np.concatenate([p.truth.true_time for p in parts]),
                      np.concatenate([p.truth.tag_index + o for p, o in zip(parts, offsets)]))
        order = np.argsort(truth.pulse_index, kind="stable")
        truth = Truth(*(a[order] for a in (truth.pulse_index, truth.symbol,
                                           truth.true_time, truth.tag_index)))
        return TagStream(tags, truth, self.meta())


def emit_and_detect(src: SourceParams, ch: ChannelParams, det: DetectorParams,
                    seq: SymbolSequence, duration: float, seed: int = 0,
                    **kwargs) -> TagStream:
    """Simulate ``duration`` seconds of emission and detection."""
    return Simulation(src, ch, det, seq, duration, seed, **kwargs).run()
