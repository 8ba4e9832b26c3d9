"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 initialization failure,
4 tracking lost, 5 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .config import ExperimentConfig, write_schema
from .photon_sim import CapacityError, jitter_budget_total
from .session import (CONFIG_JSON, SUMMARY_JSON, TRACKED_CSV, UNTRACKED_CSV, UPDATES_CSV,
                      InitFailed, ReceiverEngine, SessionResult, TrackingLost, build_simulation,
                      read_records_csv, run_engine, run_session, summarize, write_json,
                      write_session)
from .stability import (PhaseSeries, identify_noise, mdev, oadev, read_offset_csv, tdev,
                        detrend_linear, write_curves_csv)
from .sync import correlated_mask, fold_period, staged_frequency_sweep, SweepFailed
from .tagfile import PtagWriter, TagFileError, iter_ptag, read_header, TRUTH_HEADER

log = logging.getLogger("pulsesync")

EXIT_OK, EXIT_CONFIG, EXIT_INIT, EXIT_TRACKING, EXIT_IO = 0, 2, 3, 4, 5

# tracked-quartz time deviation used as a comparison line in reports (tau_s: ps)
REFERENCE_TDEV_PS = {0.15: 54, 0.2: 46, 0.4: 32, 1: 19, 2: 13, 4: 9.5, 10: 6.0,
                     20: 3.5, 30: 2.8, 40: 1.9, 100: 3.2}


class UsageError(Exception):
    """Bad inputs that are not a config schema violation (exit 2)."""


class MissingInputs(OSError):
    pass


def _setup_logging():
    level = os.environ.get("PULSE_SYNC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def load_config(args, duration_in_session: bool = True) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    out = {}
    if getattr(args, "out", None):
        out["dir"] = args.out
    if getattr(args, "format", None):
        out["format"] = args.format
    if out:
        upd["outputs"] = out
    if duration_in_session and getattr(args, "duration", None) is not None:
        upd["session"] = {"duration_s": args.duration}
    return cfg.updated(**upd)


# ---------------------------------------------------------------- simulate

def _correlation_rate(tags: np.ndarray, cfg: ExperimentConfig) -> float:
    s = cfg.session
    stop = tags[0] + s.acquisition_time_s * 1e12
    window = tags[: np.searchsorted(tags, stop)]
    try:
        sw = staged_frequency_sweep(window, cfg.source.clock_rate_hz, s.sweep_range, s.sweep_step,
                                    s_threshold=s.s_threshold)
    except SweepFailed:
        return 0.0
    P = 1e12 / sw.best_rate
    folded = fold_period(window, P, sw.epoch)
    n = np.count_nonzero(correlated_mask(folded, sw.best_fit.center, P, s.correlation_window_ps))
    return float(n / s.acquisition_time_s)


def cmd_simulate(args) -> int:
    # the span to simulate may be shorter than one tracking update
    cfg = load_config(args, duration_in_session=False)
    dur = args.duration if args.duration is not None else cfg.session.duration_s
    if not dur > 0:
        raise UsageError("--duration must be > 0")
    out = Path(cfg.outputs.dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = build_simulation(cfg, dur)
    ptag = out / "tags.ptag"
    n_signal = 0
    head = []
    held = (np.empty(0, np.int64), np.empty(0, np.int8), np.empty(0))
    truth_fh = None if args.no_truth else open(out / "truth.csv", "w", newline="")
    try:
        if truth_fh:
            truth_fh.write(",".join(TRUTH_HEADER) + "\n")
        with PtagWriter(ptag, cfg.source.clock_rate_hz, cfg.detector.resolution_ps) as w:
            for part in sim.chunks():
                w.write(part.tags)
                if sum(h.size for h in head) < 400_000:
                    head.append(part.tags)
                tr = part.truth
                n_signal += len(tr)
                if truth_fh:
                    held = _flush_truth(truth_fh, held, tr)
            if truth_fh:
                _flush_truth(truth_fh, held, None)
            count = w.count
    finally:
        if truth_fh:
            truth_fh.close()
    cfg.dump(out / CONFIG_JSON)
    tags = np.concatenate(head) if head else np.empty(0, np.int64)
    corr = _correlation_rate(tags, cfg) if tags.size and dur >= cfg.session.acquisition_time_s else 0.0
    stats = {"tags": count, "duration_s": dur, "count_rate_cps": count / dur, "signal_rate_cps": n_signal / dur,
             "background_rate_cps": (count - n_signal) / dur, "correlation_rate_cps": corr,
             "ptag": str(ptag)}
    write_json(out / "simulate.json", stats)
    print(f"wrote {count} tags to {ptag}")
    print(f"count rate {stats['count_rate_cps'] / 1e3:.1f} kcps, "
          f"correlation rate {corr / 1e3:.1f} kcps")
    return EXIT_OK


def _flush_truth(fh, held, tr):
    """Write truth rows in pulse order; rows that a later part may precede are held back."""
    from .photon_sim import Symbol
    if tr is None:
        k, s, t = held
        cut = k.size
        new = held
    else:
        new = tuple(np.concatenate([a, b]) for a, b in zip(held, (tr.pulse_index, tr.symbol,
                                                                 tr.true_time)))
        order = np.argsort(new[0], kind="stable")
        new = tuple(a[order] for a in new)
        cut = int(np.searchsorted(new[0], tr.pulse_index.min())) if len(tr) else 0
    names = [m.name for m in Symbol]
    fh.writelines(f"{int(a)},{names[int(b)]},{float(c)!r}\n"
                  for a, b, c in zip(new[0][:cut], new[1][:cut], new[2][:cut]))
    return tuple(a[cut:] for a in new)


# ---------------------------------------------------------------- sync

def _engine_from_file(path, cfg: ExperimentConfig) -> ReceiverEngine:
    hdr = read_header(path)
    engine = ReceiverEngine(hdr.clock_rate_hz, cfg.session, cfg.sequence.build())
    for batch in iter_ptag(path):
        engine.feed(batch)
    engine.finish()
    return engine


def cmd_sync(args) -> int:
    cfg = load_config(args)
    if args.tags:
        engine = _engine_from_file(args.tags, cfg)
        reference_sigma = cfg.session.reference_jitter_ps
        control = None
        if args.reference_tags:
            ref = _engine_from_file(args.reference_tags, cfg)
            reference_sigma = ref.summary()["mean_a_posteriori_sigma_ps"]
        summary = engine.summary(reference_sigma)
        result = SessionResult(cfg, engine.records, engine.init, summary,
                               engine.tracked_series(), None, control, engine)
    else:
        result = run_session(cfg)
    out = write_session(result, cfg.outputs.dir, cfg.outputs.format)
    _print_summary(result.summary)
    print(f"session written to {out}")
    return EXIT_OK


def _print_summary(s: dict) -> None:
    def fmt(v, spec):
        return "n/a" if v is None or (isinstance(v, float) and not math.isfinite(v)) else format(v, spec)
    print(f"updates {s['n_updates']}, mean a-priori sigma {fmt(s['mean_a_priori_sigma_ps'], '.3f')} ps, "
          f"a-posteriori {fmt(s['mean_a_posteriori_sigma_ps'], '.3f')} ps")
    if "sync_jitter_a_posteriori_ps" in s:
        print(f"sync jitter a-priori {fmt(s['sync_jitter_a_priori_ps'], '.2f')} ps, "
              f"a-posteriori {fmt(s['sync_jitter_a_posteriori_ps'], '.2f')} ps "
              f"(reference {fmt(s['reference_sigma_ps'], '.3f')} ps)")
    print(f"mean QBER {fmt(s['mean_qber'], '.4f')}, slips {len(s['slips'])}")


# ---------------------------------------------------------------- allan

def _series_from(path: Path, column: str) -> PhaseSeries:
    if path.is_dir():
        path = path / TRACKED_CSV
    return read_offset_csv(path, column=column)


def allan_curves(series: PhaseSeries):
    curves = [mdev(series), tdev(series), oadev(series)]
    try:
        noise = identify_noise(curves[0])
        noise_out = {"exponent": noise.exponent, "class": noise.label, "r2": noise.r2}
    except ValueError as exc:
        noise_out = {"class": "unclassified", "reason": str(exc)}
    return curves, noise_out


def cmd_allan(args) -> int:
    cfg_out = Path(args.out or "out")
    series = _series_from(Path(args.input), args.column)
    slope = None
    if args.detrend:
        d = detrend_linear(series)
        series, slope = d.series, d.slope_ns_per_s
    curves, noise = allan_curves(series)
    cfg_out.mkdir(parents=True, exist_ok=True)
    fmt = args.format or "csv"
    if fmt == "json":
        write_json(cfg_out / "allan.json", [{"estimator": c.estimator.value, "tau_s": c.taus.tolist(),
                                             "value": c.values.tolist()} for c in curves])
    else:
        write_curves_csv(cfg_out / "allan.csv", curves)
    warnings = sorted({w for c in curves for w in c.warnings})
    write_json(cfg_out / "noise.json", {"noise": noise, "detrend_slope_ns_per_s": slope,
                                         "warnings": warnings, "n_samples": len(series),
                                         "sample_interval_s": series.sample_interval})
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{len(series)} samples at {series.sample_interval:g} s; MDEV noise class: "
          f"{noise['class']}" + (f" (slope {noise['exponent']:.2f})" if "exponent" in noise else ""))
    return EXIT_OK


# ---------------------------------------------------------------- report

def _tdev_table(series: PhaseSeries) -> list[dict]:
    tau0 = series.sample_interval
    # several reference taus can round to one grid point; keep the closest
    nearest = {}
    for tau in REFERENCE_TDEV_PS:
        m = max(1, int(round(tau / tau0)))
        if m not in nearest or abs(tau - m * tau0) < abs(nearest[m] - m * tau0):
            nearest[m] = tau
    rows = []
    for m, tau in sorted(nearest.items()):
        ref = REFERENCE_TDEV_PS[tau]
        c = tdev(series, [m * tau0])
        md = mdev(series, [m * tau0])
        if c.values.size:
            rows.append({"tau_s": m * tau0, "tdev_ps": float(c.values[0]) * 1e12,
                         "mdev": float(md.values[0]), "reference_tau_s": tau,
                         "reference_tdev_ps": ref})
    return rows


def cmd_report(args) -> int:
    d = Path(args.session)
    required = [SUMMARY_JSON, UPDATES_CSV, TRACKED_CSV, CONFIG_JSON]
    missing = [f for f in required if not (d / f).is_file()]
    if missing:
        raise MissingInputs(f"{d}: missing {', '.join(missing)}")
    summary = json.loads((d / SUMMARY_JSON).read_text())
    cfg = ExperimentConfig.load(d / CONFIG_JSON)
    records = read_records_csv(d / UPDATES_CSV)
    tracked = read_offset_csv(d / TRACKED_CSV)
    comps = cfg.jitter_components()
    report = {
        "jitter_budget_ps": {"adc": comps[0], "source": comps[1], "detector": comps[2],
                             "total": jitter_budget_total(comps),
                             "total_rounded": round(jitter_budget_total(comps))},
        "tdev_table": _tdev_table(tracked),
        "significance_trace": [{"time_s": r.time_s, "significance": r.significance}
                               for r in records],
        "session": summarize(records, None, summary.get("reference_sigma_ps")),
    }
    if (d / UNTRACKED_CSV).is_file():
        raw = detrend_linear(read_offset_csv(d / UNTRACKED_CSV))
        report["untracked_tdev_table"] = _tdev_table(raw.series)
        report["untracked_detrend_slope_ns_per_s"] = raw.slope_ns_per_s
    out = Path(args.out) if args.out else d
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report)
    jb = report["jitter_budget_ps"]
    print(f"jitter budget total {jb['total']:.1f} ps")
    for row in report["tdev_table"]:
        print(f"TDEV({row['tau_s']:g} s) = {row['tdev_ps']:.3g} ps "
              f"[reference {row['reference_tdev_ps']} ps]")
    return EXIT_OK


# ---------------------------------------------------------------- wire mode

def cmd_serve_sender(args) -> int:
    from .net import serve_sender
    cfg = load_config(args)

    def announce(port):
        print(f"listening on {args.host}:{port}", flush=True)

    rep = serve_sender(cfg, args.host, args.port, on_listen=announce,
                       accept_timeout=args.timeout)
    print(f"sent {rep.tags_sent} tags in {rep.frames_sent} frames; final state {rep.state.value}")
    if rep.peer_error is not None:
        print(f"receiver reported error 0x{rep.peer_error.code:04x}: {rep.peer_error.text}",
              file=sys.stderr)
        return {0x0010: EXIT_INIT, 0x0011: EXIT_TRACKING}.get(rep.peer_error.code, EXIT_IO)
    return EXIT_OK


def cmd_serve_receiver(args) -> int:
    from .net import serve_receiver
    cfg = load_config(args)
    engine, proto = serve_receiver(cfg, args.host, args.port, connect_timeout=args.timeout)
    reference_sigma = cfg.session.reference_jitter_ps
    control = None
    if cfg.session.control_run and reference_sigma is None:
        # calibration against a perfect clock link, done locally
        c_engine, _ = run_engine(cfg.with_ideal_clocks())
        reference_sigma = c_engine.summary()["mean_a_posteriori_sigma_ps"]
    summary = engine.summary(reference_sigma)
    summary["protocol_trace_reveals"] = proto.reveals
    summary["protocol_state"] = proto.state.value
    result = SessionResult(cfg, engine.records, engine.init, summary, engine.tracked_series(),
                           None, control, engine)
    out = write_session(result, cfg.outputs.dir, cfg.outputs.format)
    _print_summary(summary)
    print(f"session written to {out}; protocol state {proto.state.value}")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = load_config(args)
    out = Path(args.write)
    cfg.dump(out)
    print(f"wrote {out}")
    if args.schema:
        write_schema(args.schema)
        print(f"wrote {args.schema}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pulse-sync", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), help="table output format")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a PTAG tag file and truth sidecar")
    s.add_argument("--duration", type=float, help="override session duration_s")
    s.add_argument("--no-truth", action="store_true", help="skip the truth CSV")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sync", parents=[common], help="initialization + tracking session")
    s.add_argument("--duration", type=float, help="override session duration_s")
    s.add_argument("--tags", metavar="PTAG", help="process a tag file instead of simulating")
    s.add_argument("--reference-tags", metavar="PTAG",
                   help="tag file recorded with a perfect clock link (reference jitter)")
    s.set_defaults(func=cmd_sync)

    s = sub.add_parser("allan", parents=[common], help="MDEV/TDEV/OADEV of an offset series")
    s.add_argument("input", help="offset CSV (time_s, offset_ps) or a session directory")
    s.add_argument("--column", default="offset_ps")
    s.add_argument("--detrend", action="store_true", help="remove a least-squares line first")
    s.set_defaults(func=cmd_allan)

    s = sub.add_parser("report", parents=[common], help="summarize a session directory")
    s.add_argument("session", help="directory written by sync or serve-receiver")
    s.set_defaults(func=cmd_report)

    for name, func, help_text in (("serve-sender", cmd_serve_sender, "stream tags over TCP"),
                                  ("serve-receiver", cmd_serve_receiver,
                                   "run the receiver against a TCP sender")):
        s = sub.add_parser(name, parents=[common], help=help_text)
        s.add_argument("--host", default="127.0.0.1")
        s.add_argument("--port", type=int, default=47653)
        s.add_argument("--duration", type=float, help="override session duration_s")
        s.add_argument("--timeout", type=float, default=60.0, help="accept/connect timeout (s)")
        s.set_defaults(func=func)

    s = sub.add_parser("config", parents=[common], help="write the effective config (and schema)")
    s.add_argument("--write", metavar="PATH", default="experiment.json")
    s.add_argument("--schema", metavar="PATH", help="also write the JSON schema")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, UsageError, json.JSONDecodeError, CapacityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InitFailed as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return EXIT_INIT
    except TrackingLost as exc:
        print(f"tracking lost: {exc}", file=sys.stderr)
        return EXIT_TRACKING
    except (OSError, TagFileError, ValueError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
