"""Receiver session engine and the in-process experiment runner.

:class:`ReceiverEngine` is push-based: time tags are fed in arrival order
and the engine walks through initialization (frequency sweep on the first
acquisition window, then the absolute offset search once the sent sequence
is known) and tracking (one update per ``update_time``, using the last
``acquisition_time`` of each update period). The same engine runs behind
the TCP receiver, so the wire and in-process paths produce identical
records for identical tag streams.
"""
from __future__ import annotations

import csv
import datetime as _dt
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .clocks import PS_PER_S
from .config import ExperimentConfig, SessionConfig
from .photon_sim import Simulation, SymbolSequence, fiber_thermal_delay, jitter_budget_total
from .stability import PhaseSeries
from .sync import (AlignmentFailed, ResyncRequired, SweepFailed, TrackerState, TrackingError,
                   absolute_offset_search, confidence, correlated_mask, fold_period,
                   recover_symbol_slip, staged_frequency_sweep, sync_jitter, track_update)

log = logging.getLogger(__name__)


class Phase(str, enum.Enum):
    SWEEPING = "Sweeping"
    OFFSET_SEARCH = "OffsetSearch"
    TRACKING = "Tracking"
    DONE = "Done"
    FAILED = "Failed"


class InitFailed(RuntimeError):
    pass


class TrackingLost(RuntimeError):
    pass


@dataclass(frozen=True)
class InitInfo:
    start_time_ps: int
    sweep_offset: float
    rate_estimate: float
    significance: float
    confidence: float
    rms_width_ps: float
    relative_offset_ps: float
    absolute_offset_ps: float
    shift: int
    min_qber: float
    sifted: int
    sweep_trials: int


@dataclass(frozen=True)
class UpdateRecord:
    time_s: float
    offset_step_ps: float
    rate_correction: float
    freq_diff: float
    a_priori_sigma_ps: float
    a_posteriori_sigma_ps: float
    qber: float
    raw_qber: float        # before slip correction
    significance: float
    offset_ps: float
    slip_periods: float
    count_rate_cps: float
    correlation_rate_cps: float
    n_tags: int


RECORD_FIELDS = tuple(f.name for f in fields(UpdateRecord))


class ReceiverEngine:
    def __init__(self, nominal_rate: float, settings: SessionConfig | None = None,
                 sequence: SymbolSequence | None = None):
        self.nominal_rate = float(nominal_rate)
        self.settings = settings or SessionConfig()
        self.sequence = sequence
        self.phase = Phase.SWEEPING
        self.records: list[UpdateRecord] = []
        self.init: InitInfo | None = None
        self.state: TrackerState | None = None
        self.sweep = None
        self.events: list[tuple] = []
        self.error: str | None = None
        self._pending = np.empty(0, np.int64)
        self._t0: int | None = None
        self._last = -1
        self._init_tags = None
        self._k = 0
        self.n_tags = 0

    @property
    def acq_ps(self) -> float:
        return self.settings.acquisition_time_s * PS_PER_S

    @property
    def update_ps(self) -> float:
        return self.settings.update_time_s * PS_PER_S

    def window_end(self, k: int) -> float:
        return self._t0 + self.acq_ps + (k + 1) * self.update_ps

    def pop_events(self) -> list[tuple]:
        out, self.events = self.events, []
        return out

    def feed(self, tags) -> None:
        if self.phase in (Phase.DONE, Phase.FAILED):
            raise RuntimeError(f"engine is {self.phase.value}")
        t = np.asarray(getattr(tags, "tags", tags), dtype=np.int64)
        if t.size == 0:
            return
        if int(t[0]) <= self._last:
            raise ValueError("tags must arrive in strictly increasing order")
        if self._t0 is None:
            self._t0 = int(t[0])
        self._pending = np.concatenate([self._pending, t]) if self._pending.size else t
        self._last = int(t[-1])
        self.n_tags += int(t.size)
        self._advance()

    def provide_sequence(self, seq: SymbolSequence) -> None:
        if self.phase is not Phase.OFFSET_SEARCH and self.sequence is not None:
            raise RuntimeError("sequence already known")
        self.sequence = seq
        self._advance()

    def _fail(self, exc_type, message):
        self.phase = Phase.FAILED
        self.error = message
        self.events.append(("error", exc_type.__name__, message))
        raise exc_type(message)

    def _drop_before(self, t_ps: float) -> None:
        self._pending = self._pending[np.searchsorted(self._pending, t_ps):]

    def _advance(self) -> None:
        if self.phase is Phase.SWEEPING and self._last >= self._t0 + self.acq_ps:
            self._initial_sweep()
        if self.phase is Phase.OFFSET_SEARCH and self.sequence is not None:
            self._offset_search()
        while self.phase is Phase.TRACKING and self._last >= self.window_end(self._k):
            self._update(self._k)
            self._k += 1

    def _initial_sweep(self) -> None:
        s = self.settings
        stop = self._t0 + self.acq_ps
        self._init_tags = self._pending[: np.searchsorted(self._pending, stop)]
        try:
            self.sweep = staged_frequency_sweep(self._init_tags, self.nominal_rate, s.sweep_range,
                                                s.sweep_step, s_threshold=s.s_threshold)
        except SweepFailed as exc:
            self._fail(InitFailed, f"frequency sweep failed: {exc}")
        log.info("sweep: offset %.4e, S=%.1f", self.sweep.best_offset,
                 self.sweep.best_significance)
        self._drop_before(stop)
        self.phase = Phase.OFFSET_SEARCH
        self.events.append(("sequence_request",))

    def _offset_search(self) -> None:
        s, sw, seq = self.settings, self.sweep, self.sequence
        max_shift = s.max_shift if s.max_shift is not None else seq.length // 2
        try:
            found = absolute_offset_search(self._init_tags, seq, sw.best_fit.center,
                                           sw.best_rate, max_shift, epoch=sw.epoch)
        except AlignmentFailed as exc:
            self._fail(InitFailed, f"absolute offset search failed: {exc}")
        self.state = TrackerState.from_initialization(
            self.nominal_rate, sw.best_rate, sw.epoch, found,
            reference_time=self._t0 + self.acq_ps / 2, sequence_length=seq.length,
            update_time=s.update_time_s, acquisition_time=s.acquisition_time_s)
        self.init = InitInfo(
            self._t0, sw.best_offset, sw.best_rate, sw.best_significance,
            confidence(sw.best_fit.significance), sw.best_fit.rms_width, found.relative_offset,
            found.absolute_offset % (seq.length * PS_PER_S / sw.best_rate), found.shift,
            found.min_qber, found.sifted, int(sum(st.grid.size for st in sw.stages)))
        self._init_tags = None
        self.phase = Phase.TRACKING
        self.events.append(("init_done", self.init.absolute_offset_ps, self.state.freq_diff))

    def _update(self, k: int) -> None:
        s = self.settings
        end = self.window_end(k)
        start = end - self.acq_ps
        lo, hi = np.searchsorted(self._pending, [start, end])
        tags = self._pending[lo:hi]
        prev = self.state
        try:
            new = track_update(prev, tags, window=(start, end))
            new, slip, raw_qber = recover_symbol_slip(new, tags, self.sequence, s.slip_k_max,
                                            s.slip_trigger_qber, s.slip_accept_qber)
        except (TrackingError, ResyncRequired) as exc:
            self._fail(TrackingLost, f"update {k} at {(end - self._t0) / PS_PER_S:.3f} s: {exc}")
        if slip:
            # the jump was a timing step, not a frequency change; with the old
            # period back the a-posteriori fold is the a-priori one
            new = replace(new, period=prev.period, rate_correction=0.0,
                          a_posteriori_jitter=new.a_priori_jitter)
            log.info("symbol slip of %+g periods recovered at update %d", slip, k)
        epoch = int(math.floor(new.anchor_time))
        folded = fold_period(tags, new.period, epoch)
        n_corr = int(np.count_nonzero(correlated_mask(
            folded, (new.anchor_time - epoch) % new.period, new.period, s.correlation_window_ps)))
        acq_s = s.acquisition_time_s
        self.state = new
        rec = UpdateRecord(
            (0.5 * (start + end) - self._t0) / PS_PER_S, new.offset_step, new.rate_correction,
            new.freq_diff, new.a_priori_jitter, new.a_posteriori_jitter, new.qber, raw_qber,
            new.significance, new.cumulative_offset, float(slip), tags.size / acq_s,
            n_corr / acq_s, int(tags.size))
        self.records.append(rec)
        self.events.append(("status", new.qber, new.a_posteriori_jitter))
        self._drop_before(end)

    def finish(self) -> None:
        if self.phase is Phase.TRACKING:
            self.phase = Phase.DONE
        elif self.phase in (Phase.SWEEPING, Phase.OFFSET_SEARCH):
            self._fail(InitFailed, "tag stream ended before initialization completed")

    def tracked_series(self) -> PhaseSeries:
        """Accumulated prediction residuals, one sample per update."""
        return PhaseSeries.from_ps(self.settings.update_time_s,
                                   [r.offset_ps for r in self.records], "tracked")

    def summary(self, reference_sigma: float | None = None) -> dict:
        return summarize(self.records, self.init, reference_sigma)


def _mean(values) -> float:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=np.float64)
    return float(v.mean()) if v.size else math.nan


def summarize(records: list[UpdateRecord], init: InitInfo | None,
              reference_sigma: float | None = None) -> dict:
    prior = _mean(r.a_priori_sigma_ps for r in records)
    post = _mean(r.a_posteriori_sigma_ps for r in records)
    fd = np.array([r.freq_diff for r in records]) if records else np.zeros(0)
    out = {
        "n_updates": len(records),
        "mean_a_priori_sigma_ps": prior,
        "mean_a_posteriori_sigma_ps": post,
        "mean_qber": _mean(r.qber for r in records),
        "max_qber": max((r.qber for r in records if np.isfinite(r.qber)), default=math.nan),
        "mean_count_rate_cps": _mean(r.count_rate_cps for r in records),
        "mean_correlation_rate_cps": _mean(r.correlation_rate_cps for r in records),
        "mean_significance": _mean(r.significance for r in records),
        "slips": [{"time_s": r.time_s, "periods": r.slip_periods, "qber_before": r.raw_qber,
                   "qber_after": r.qber}
                  for r in records if r.slip_periods],
        "freq_diff_first": float(fd[0]) if fd.size else math.nan,
        "freq_diff_last": float(fd[-1]) if fd.size else math.nan,
        "freq_diff_span": float(fd.max() - fd.min()) if fd.size else math.nan,
        "init": asdict(init) if init is not None else None,
        "reference_sigma_ps": reference_sigma,
    }
    if reference_sigma is not None and records:
        for key, sigma in (("a_priori", prior), ("a_posteriori", post)):
            sj = sync_jitter(sigma, reference_sigma)
            out[f"sync_jitter_{key}_ps"] = sj.value
            out[f"sync_jitter_{key}_below_reference"] = sj.below_reference
    return out


# ---------------------------------------------------------------- runner

def build_simulation(cfg: ExperimentConfig, duration: float | None = None) -> Simulation:
    return Simulation(cfg.source_params(), cfg.channel_params(), cfg.detector_params(),
                      cfg.sequence.build(), duration or cfg.session.duration_s, cfg.seed,
                      chunk_duration=cfg.session.chunk_duration_s)


def planned_chunks(sim: Simulation, settings: SessionConfig, margin_s: float = 2e-3) -> set[int]:
    """Chunks whose tags can fall into the initialization or an acquisition window.

    Tags between acquisition windows are never looked at, so skipping them
    leaves the engine's records unchanged.
    """
    spans = np.array([sim.receiver_span_ps(j, 1e6) for j in range(sim.n_chunks)])
    t0 = spans[0, 0] + 1e6
    acq, upd, m = (settings.acquisition_time_s * PS_PER_S, settings.update_time_s * PS_PER_S,
                   margin_s * PS_PER_S)
    n_win = int(math.ceil((spans[-1, 1] - t0) / upd)) + 1
    ends = t0 + acq + (np.arange(n_win) + 1) * upd
    lo = np.concatenate([[t0 - m], ends - acq - m])
    hi = np.concatenate([[t0 + acq + m], ends + m])
    keep = set()
    for j, (a, b) in enumerate(spans):
        i = int(np.searchsorted(hi, a))
        if i < lo.size and lo[i] <= b:
            keep.add(j)
    return keep


def untracked_series(sim: Simulation, interval: float, label: str = "untracked") -> PhaseSeries:
    """Timing offset of the pulse train seen on the receiver clock without tracking.

    Built from the ground-truth clock trajectories: arrival reading minus
    nominal emission reading, sampled every ``interval`` seconds.
    """
    n = int(math.floor(sim.duration / interval)) + 1
    t = np.arange(n) * interval * PS_PER_S
    delay = sim._extra_delay(t)
    arrival = t + delay
    x = (sim.receiver_trajectory.local_time_float(arrival)
         - sim.sender_trajectory.local_time_float(t))
    return PhaseSeries.from_ps(interval, x, label)


@dataclass
class SessionResult:
    config: ExperimentConfig
    records: list[UpdateRecord]
    init: InitInfo | None
    summary: dict
    tracked: PhaseSeries
    untracked: PhaseSeries | None = None
    control: "SessionResult | None" = field(default=None, repr=False)
    engine: ReceiverEngine | None = field(default=None, repr=False)


def run_engine(cfg: ExperimentConfig, skip_idle: bool = True):
    """Simulate ``cfg`` and push the tags through a fresh engine."""
    sim = build_simulation(cfg)
    engine = ReceiverEngine(cfg.source.clock_rate_hz, cfg.session, sim.seq)
    only = planned_chunks(sim, cfg.session) if skip_idle else None
    for chunk in sim.chunks(only):
        engine.feed(chunk.tags)
    engine.finish()
    return engine, sim


def run_session(cfg: ExperimentConfig, skip_idle: bool = True,
                control: bool | None = None) -> SessionResult:
    """Full in-process session, optionally with the ideal-clock control run.

    The control run repeats the experiment with perfect clocks and the same
    seed; its mean a-posteriori width is the reference for the sync jitter.
    """
    do_control = cfg.session.control_run if control is None else control
    engine, sim = run_engine(cfg, skip_idle)
    ctrl = None
    reference_sigma = cfg.session.reference_jitter_ps
    if do_control:
        c_engine, _ = run_engine(cfg.with_ideal_clocks(), skip_idle)
        c_sum = c_engine.summary()
        ctrl = SessionResult(cfg.with_ideal_clocks(), c_engine.records, c_engine.init, c_sum,
                             c_engine.tracked_series(), None, None, c_engine)
        reference_sigma = c_sum["mean_a_posteriori_sigma_ps"]
    summary = engine.summary(reference_sigma)
    summary.update(session_context(cfg))
    untracked = untracked_series(sim, cfg.session.update_time_s)
    return SessionResult(cfg, engine.records, engine.init, summary, engine.tracked_series(),
                         untracked, ctrl, engine)


def session_context(cfg: ExperimentConfig) -> dict:
    comps = cfg.jitter_components()
    return {
        "jitter_budget_ps": {"adc": comps[0], "source": comps[1], "detector": comps[2],
                             "total": jitter_budget_total(comps)},
        "update_time_s": cfg.session.update_time_s,
        "acquisition_time_s": cfg.session.acquisition_time_s,
        "duration_s": cfg.session.duration_s,
        "seed": cfg.seed,
        "thermal_delay_ps_per_k": float(fiber_thermal_delay(cfg.channel_params(), 1.0)),
    }


# ---------------------------------------------------------------- outputs

UPDATES_CSV = "updates.csv"
SUMMARY_JSON = "summary.json"
TRACKED_CSV = "tracked_offsets.csv"
UNTRACKED_CSV = "untracked_offsets.csv"
CONFIG_JSON = "config.json"


def _stamp(kind: str) -> str:
    now = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    return f"# pulsesync {kind} written {now}\n"


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_records_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_stamp("updates"))
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in
                        (getattr(r, n) for n in RECORD_FIELDS)])


def read_records_csv(path) -> list[UpdateRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    types = {f.name: f.type for f in fields(UpdateRecord)}
    out = []
    for row in rows:
        out.append(UpdateRecord(**{n: (int(row[n]) if types[n] in (int, "int") else float(row[n]))
                                   for n in RECORD_FIELDS}))
    return out


def write_offsets_csv(path, series: PhaseSeries) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_stamp(series.label or "offsets"))
        w = csv.writer(fh)
        w.writerow(["time_s", "offset_ps"])
        for t, x in zip(series.times, series.values):
            w.writerow([repr(float(t)), repr(float(x) * 1e12)])


def write_session(result: SessionResult, out_dir, fmt: str = "csv") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        write_json(out / "updates.json", [asdict(r) for r in result.records])
    else:
        write_records_csv(out / UPDATES_CSV, result.records)
    write_offsets_csv(out / TRACKED_CSV, result.tracked)
    if result.untracked is not None:
        write_offsets_csv(out / UNTRACKED_CSV, result.untracked)
    if result.control is not None:
        write_records_csv(out / "control_updates.csv", result.control.records)
    write_json(out / SUMMARY_JSON, result.summary)
    result.config.dump(out / CONFIG_JSON)
    return out
