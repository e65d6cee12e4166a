"""Command-line entry point: ``aiohmm <command> [options]``.

Exit status is 0 on success, 1 on a runtime failure (bad data, numerical
trouble, missing files) and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .anticipation import (THRESHOLD_GRID, ProtocolConfig, confusion_matrix, lead_time_curve, score,
                           stream_anticipate, sweep, threshold_curve)
from .errors import AioHmmError
from .features import DEFAULT_HORIZON_S, featurize_trace
from .learning import Ablation, EmConfig, fit_all, group_by_label
from .model import CLASSES
from .synth import ScenarioConfig, generate_episode

log = logging.getLogger("aiohmm")

TRACE_FILE = "trace.jsonl"
ANNOTATION_FILE = "annotations.json"
CUE_FILE = "cues.json"
METRIC_COLUMNS = ("tp", "fp", "fpp", "mp", "precision", "recall", "f1", "mean_time_to_maneuver_s")


def _protocol(args, threshold=None) -> ProtocolConfig:
    return ProtocolConfig(stride_s=getattr(args, "stride", 0.8), horizon_s=getattr(args, "horizon", DEFAULT_HORIZON_S),
                          threshold=args.threshold if threshold is None else threshold,
                          lockout_s=getattr(args, "lockout", 5.0))


def _em_config(args, n_states=None) -> EmConfig:
    return EmConfig(n_states=n_states or args.states, max_iters=args.max_iters, ablation=args.ablation,
                    seed=args.seed, sigma_ridge=args.ridge)


# -- commands ------------------------------------------------------------------


def cmd_simulate(args):
    out = Path(args.out)
    base = ScenarioConfig(duration_s=args.duration, maneuver_rate=args.maneuver_rate,
                          cue_lead_range_s=(args.lead_min, args.lead_max), cue_strength=args.cue_strength,
                          noise_sigma=args.noise_sigma, seed=args.seed)
    for k in range(args.episodes):
        ep = generate_episode(replace(base, seed=args.seed + k))
        d = out / f"ep{k:03d}"
        d.mkdir(parents=True, exist_ok=True)
        io.save_trace(ep.trace, d / TRACE_FILE)
        io.save_annotations(ep.annotations, d / ANNOTATION_FILE)
        (d / CUE_FILE).write_text(json.dumps(ep.injected_cue_times) + "\n", encoding="utf-8")
        log.info("wrote %s: %d frames, %d annotations", d, len(ep.trace.frames), len(ep.annotations))
    return 0


def _episode_pairs(args):
    pairs = [(Path(d) / TRACE_FILE, Path(d) / ANNOTATION_FILE) for d in args.episodes]
    if args.trace or args.annotations:
        if not (args.trace and args.annotations):
            raise _Usage("--trace and --annotations must be given together")
        pairs.append((Path(args.trace), Path(args.annotations)))
    if not pairs:
        raise _Usage("give episode directories or --trace/--annotations")
    return pairs


def cmd_featurize(args):
    dataset = []
    for trace_path, ann_path in _episode_pairs(args):
        dataset += featurize_trace(io.load_trace(trace_path), io.load_annotations(ann_path), args.horizon)
    if not dataset:
        raise AioHmmError("no annotation had a full context window; dataset would be empty")
    io.save_dataset(dataset, args.out)
    log.info("wrote %d sequences to %s", len(dataset), args.out)
    return 0


def cmd_train(args):
    grouped = group_by_label(io.load_dataset(args.dataset))
    models = fit_all(grouped, _em_config(args))
    io.save_model_set(models, args.out)
    return 0


def cmd_anticipate(args):
    models = io.load_model_set(args.model)
    trace = io.load_trace(args.trace)
    anns = io.load_annotations(args.annotations) if args.annotations else ()
    events = stream_anticipate(models, trace, _protocol(args), anns)
    io.save_events(events, args.out)
    n = sum(e.predicted.is_maneuver for e in events)
    log.info("%d steps, %d maneuver predictions -> %s", len(events), n, args.out)
    return 0


def cmd_score(args):
    events = io.load_events(args.events)
    anns = io.load_annotations(args.annotations)
    m = score(events, anns, ProtocolConfig(lockout_s=args.lockout))
    row = dict(lockout_s=args.lockout, **m.as_row())
    io.write_csv(args.out, [row], ("lockout_s",) + METRIC_COLUMNS)
    print(f"precision={m.precision:.4f} recall={m.recall:.4f} f1={m.f1:.4f} "
          f"tp={m.tp} fp={m.fp} fpp={m.fpp} mp={m.mp}")
    return 0


def cmd_sweep(args):
    grouped = group_by_label(io.load_dataset(args.dataset))
    em = _em_config(args, n_states=1)
    result = sweep(grouped, args.states, THRESHOLD_GRID, n_folds=args.folds, seed=args.seed, em=em)
    cols = ("n_states", "threshold", "fold") + METRIC_COLUMNS
    rows = result.rows + [dict(r, tp="", fp="", fpp="", mp="", mean_time_to_maneuver_s="") for r in result.mean_rows()]
    io.write_csv(args.out, rows, cols)
    b = result.best
    print(f"best: n_states={b['n_states']} threshold={b['threshold']:.2f} mean f1={b['f1']:.4f}")
    return 0


def cmd_report(args):
    if bool(args.model) != bool(args.trace):
        raise _Usage("--model and --trace must be given together")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    events = io.load_events(args.events)
    anns = io.load_annotations(args.annotations)
    cfg = ProtocolConfig(lockout_s=args.lockout)

    M = confusion_matrix(events, anns, cfg)
    io.write_csv(out / "confusion.csv",
                 [dict(predicted=c.value, **{a.value: int(M[i, j]) for j, a in enumerate(CLASSES)})
                  for i, c in enumerate(CLASSES)], ["predicted"] + [c.value for c in CLASSES])
    _plot().plot_confusion(M, out / "confusion.png")

    times = np.array([e.t for e in events])
    P = np.stack([e.posteriors for e in events]) if events else np.empty((0, len(CLASSES)))
    curve = threshold_curve([(times, P, anns)], THRESHOLD_GRID, cfg)
    io.write_csv(out / "threshold_curve.csv", [dict(threshold=t, f1=f) for t, f in curve], ("threshold", "f1"))
    _plot().plot_curve([t for t, _ in curve], [f for _, f in curve], out / "threshold_curve.png",
                       "prediction threshold", title="F1 against threshold")

    if args.model and args.trace:
        models = io.load_model_set(args.model)
        trace = io.load_trace(args.trace)
        leads = np.round(np.arange(0.0, args.max_lead + 1e-9, 0.4), 2)
        lc = lead_time_curve(models, [(trace, anns)], leads, replace(cfg, horizon_s=args.horizon))
        io.write_csv(out / "lead_time_curve.csv", [dict(time_to_maneuver_s=t, f1=f) for t, f in lc],
                     ("time_to_maneuver_s", "f1"))
        _plot().plot_curve([t for t, _ in lc], [f for _, f in lc], out / "lead_time_curve.png",
                           "time before maneuver (s)", title="F1 against prediction lead")
    log.info("report written to %s", out)
    return 0


def _plot():
    from . import plotting  # matplotlib is only loaded for reports
    return plotting


# -- parser --------------------------------------------------------------------


class _Usage(Exception):
    pass


def _add_protocol(p, threshold=True):
    if threshold:
        p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON_S)
    p.add_argument("--stride", type=float, default=0.8)
    p.add_argument("--lockout", type=float, default=5.0)


def _add_em(p, states=True):
    if states:
        p.add_argument("--states", type=int, default=3)
    p.add_argument("--ablation", choices=[a.value for a in Ablation], default=Ablation.AIO_HMM.value)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--ridge", type=float, default=1e-6, help="covariance ridge relative to trace/dim")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aiohmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic episodes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--maneuver-rate", type=float, default=2.0, help="maneuvers per minute")
    p.add_argument("--cue-strength", type=float, default=ScenarioConfig.cue_strength)
    p.add_argument("--noise-sigma", type=float, default=ScenarioConfig.noise_sigma)
    p.add_argument("--lead-min", type=float, default=1.0)
    p.add_argument("--lead-max", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("featurize", help="traces + annotations -> labeled dataset")
    p.add_argument("episodes", nargs="*", help=f"directories holding {TRACE_FILE} and {ANNOTATION_FILE}")
    p.add_argument("--trace")
    p.add_argument("--annotations")
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON_S)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="dataset -> model set")
    p.add_argument("dataset")
    _add_em(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("anticipate", help="model set + trace -> prediction events")
    p.add_argument("--model", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--annotations", help="ground truth that releases the lockout early")
    _add_protocol(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_anticipate)

    p = sub.add_parser("score", help="events + annotations -> metrics CSV")
    p.add_argument("--events", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--lockout", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", help="cross-validate states and threshold")
    p.add_argument("dataset")
    p.add_argument("--states", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--folds", type=int, default=5)
    _add_em(p, states=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="events -> confusion and curve CSVs with figures")
    p.add_argument("--events", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--model", help="with --trace, also draw F1 against prediction lead")
    p.add_argument("--trace")
    p.add_argument("--lockout", type=float, default=5.0)
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON_S)
    p.add_argument("--max-lead", type=float, default=5.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"aiohmm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (AioHmmError, OSError, ValueError, ArithmeticError) as exc:
        print(f"aiohmm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
