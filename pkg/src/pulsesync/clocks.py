"""Parametric oscillator models.

A clock maps true (simulation) time onto its own reading. The phase error
``x(t) = local_time - true_time`` is built from a deterministic part
(fractional frequency offset plus linear frequency drift) and three
stochastic frequency-noise terms (white FM, flicker FM, random-walk FM).

Noise amplitudes are expressed as the Allan deviation each term contributes
at an averaging time of 1 s, so trajectories sampled at different intervals
describe the same physical oscillator.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import lfilter

PS_PER_S = 1e12


class ClockKind(str, enum.Enum):
    IDEAL = "Ideal"
    QUARTZ = "Quartz"
    RUBIDIUM = "Rubidium"


@dataclass(frozen=True)
class ClockModel:
    """Oscillator parameters.

    fractional_offset is dimensionless (s/s), linear_drift_rate is the change
    of fractional frequency per second, and the ``*_fm_amp`` fields are the
    Allan deviation at 1 s due to each noise type.
    """

    kind: ClockKind = ClockKind.IDEAL
    fractional_offset: float = 0.0
    linear_drift_rate: float = 0.0
    white_fm_amp: float = 0.0
    flicker_fm_amp: float = 0.0
    random_walk_fm_amp: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ClockKind(self.kind))
        for name in ("fractional_offset", "linear_drift_rate", "white_fm_amp",
                     "flicker_fm_amp", "random_walk_fm_amp"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
        for name in ("white_fm_amp", "flicker_fm_amp", "random_walk_fm_amp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.kind is ClockKind.IDEAL and not self.is_noiseless_ideal():
            raise ValueError("an Ideal clock cannot carry offset, drift or noise")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def is_noiseless_ideal(self) -> bool:
        return (self.fractional_offset == 0 and self.linear_drift_rate == 0
                and self.white_fm_amp == 0 and self.flicker_fm_amp == 0
                and self.random_walk_fm_amp == 0)

    @property
    def has_noise(self) -> bool:
        return bool(self.white_fm_amp or self.flicker_fm_amp or self.random_walk_fm_amp)

    def with_overrides(self, **kwargs) -> "ClockModel":
        return replace(self, **kwargs)


def preset(name: str, **overrides) -> ClockModel:
    """Return a named clock preset, optionally with fields overridden.

    ``ideal``
        Perfect reference (the RF-cable case).
    ``quartz-default``
        Free-running crystal oscillator. Offset is left at zero so that
        experiments set it explicitly; the drift makes the tracked frequency
        difference move by tens of ns/s over a few minutes.
    ``rubidium``
        Vapor-cell clock, modified Allan deviation about 3e-12 at 1 s.
    """
    presets = {
        "ideal": ClockModel(),
        "quartz-default": ClockModel(
            kind=ClockKind.QUARTZ,
            linear_drift_rate=1e-10,
            white_fm_amp=5e-12,
            flicker_fm_amp=5e-12,
            random_walk_fm_amp=1e-12,
        ),
        "rubidium": ClockModel(
            kind=ClockKind.RUBIDIUM,
            white_fm_amp=4.5e-12,
            flicker_fm_amp=1e-12,
        ),
    }
    try:
        clock = presets[name]
    except KeyError:
        raise ValueError(f"unknown clock preset {name!r}; choose from {sorted(presets)}") from None
    return replace(clock, **overrides) if overrides else clock


PRESETS = ("ideal", "quartz-default", "rubidium")


@dataclass(frozen=True)
class PhaseTrajectory:
    """Sampled phase error of one clock.

    ``phase_error[k]`` is x at true time ``k * sample_interval`` in ps. Values
    in between are linearly interpolated.
    """

    sample_interval: float
    phase_error: np.ndarray
    clock: ClockModel = field(default_factory=ClockModel)

    def __post_init__(self):
        arr = np.asarray(self.phase_error, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "phase_error", arr)

    @property
    def duration(self) -> float:
        return (len(self.phase_error) - 1) * self.sample_interval

    @property
    def end_ps(self) -> float:
        return self.duration * PS_PER_S

    def phase_at(self, true_time_ps) -> np.ndarray:
        """Interpolated phase error (float ps) at true times given in ps."""
        t = np.asarray(true_time_ps, dtype=np.float64)
        if t.size and (t.min() < 0 or t.max() > self.end_ps):
            raise IndexError(
                f"true time outside materialized trajectory [0, {self.end_ps:.0f}] ps")
        step_ps = self.sample_interval * PS_PER_S
        # uniform grid: direct index arithmetic beats np.interp's binary search
        pos = t / step_ps
        idx = np.minimum(pos.astype(np.int64), len(self.phase_error) - 2)
        frac = pos - idx
        x = self.phase_error
        return x[idx] + frac * (x[idx + 1] - x[idx])

    def local_time_float(self, true_time_ps) -> np.ndarray:
        t = np.asarray(true_time_ps, dtype=np.float64)
        return t + self.phase_at(t)

    def true_time_float(self, local_time_ps, iterations: int = 3) -> np.ndarray:
        """Invert ``local = t + x(t)`` by fixed-point iteration.

        |dx/dt| is far below 1 for any physical oscillator, so a few
        iterations converge to well below a femtosecond.
        """
        s = np.asarray(local_time_ps, dtype=np.float64)
        t = s.copy()
        for _ in range(iterations):
            t = s - self.phase_at(np.clip(t, 0.0, self.end_ps))
        return t


def _deterministic_phase_ps(clock: ClockModel, t_ps):
    t = np.asarray(t_ps, dtype=np.float64) / PS_PER_S
    return (clock.fractional_offset * t + 0.5 * clock.linear_drift_rate * t * t) * PS_PER_S


def flicker_poles(duration: float, sample_interval: float, per_decade: int = 3) -> np.ndarray:
    """Correlation times of the first-order filters approximating 1/f noise."""
    decades = max(math.log10(max(duration, sample_interval) / sample_interval), 1.0)
    n = int(math.ceil(decades * per_decade)) + 1
    return sample_interval * 10.0 ** (np.arange(n) / per_decade)


def synthesize_trajectory(clock: ClockModel, duration: float,
                          sample_interval: float = 1e-3) -> PhaseTrajectory:
    """Materialize the phase error of ``clock`` over ``[0, duration]`` s.

    The frequency noise is piecewise constant over each sample interval:

    * white FM: i.i.d. normal, std ``a / sqrt(dt)``;
    * random-walk FM: cumulative sum of normal steps, std ``a * sqrt(3 dt)``;
    * flicker FM: sum of stationary AR(1) processes with correlation times
      spaced three per decade, each of variance ``a**2 ln(r) / (2 ln 2)``
      where ``r`` is the pole ratio. That sum has a ``h / f`` spectrum with
      Allan deviation ``a`` on the covered band.
    """
    if not (math.isfinite(duration) and math.isfinite(sample_interval)):
        raise ValueError("duration and sample_interval must be finite")
    if duration <= 0 or sample_interval <= 0:
        raise ValueError("duration and sample_interval must be positive")
    n = int(math.floor(duration / sample_interval + 1e-9)) + 1
    t_ps = np.arange(n, dtype=np.float64) * sample_interval * PS_PER_S
    x = _deterministic_phase_ps(clock, t_ps)
    if clock.has_noise and n > 1:
        rng = np.random.default_rng(clock.seed)
        dt = sample_interval
        m = n - 1
        y = np.zeros(m)
        if clock.white_fm_amp:
            y += rng.normal(0.0, clock.white_fm_amp / math.sqrt(dt), m)
        if clock.random_walk_fm_amp:
            y += np.cumsum(rng.normal(0.0, clock.random_walk_fm_amp * math.sqrt(3 * dt), m))
        if clock.flicker_fm_amp:
            taus = flicker_poles(duration, dt)
            ratio = taus[1] / taus[0]
            var = clock.flicker_fm_amp ** 2 * math.log(ratio) / (2 * math.log(2))
            for tau in taus:
                a = math.exp(-dt / tau)
                innov = rng.normal(0.0, math.sqrt(var * (1 - a * a)), m)
                z0 = rng.normal(0.0, math.sqrt(var))
                z, _ = lfilter([1.0], [1.0, -a], innov, zi=[a * z0])
                y += z
        x[1:] += np.cumsum(y) * dt * PS_PER_S
    x = x - x[0]
    return PhaseTrajectory(sample_interval, x, clock)


def local_time(clock, true_time):
    """Clock reading in integer ps for true time(s) in ps.

    ``clock`` is a :class:`PhaseTrajectory`, or a noise-free
    :class:`ClockModel` whose phase is evaluated in closed form.
    """
    t = np.asarray(true_time)
    if np.any(t < 0):
        raise ValueError("true_time must be >= 0")
    if isinstance(clock, PhaseTrajectory):
        x = clock.phase_at(t)
    elif isinstance(clock, ClockModel):
        if clock.has_noise:
            raise ValueError("noisy clock: synthesize_trajectory() first")
        if clock.kind is ClockKind.IDEAL:
            return t.astype(np.int64) if t.ndim else int(t)
        x = _deterministic_phase_ps(clock, t)
    else:
        raise TypeError(f"expected ClockModel or PhaseTrajectory, got {type(clock).__name__}")
    out = np.asarray(t, dtype=np.int64) + np.rint(x).astype(np.int64)
    return out if out.ndim else int(out)
