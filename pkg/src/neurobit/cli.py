"""Command line entry point: ``neurobit {synth,inspect,run,sweep,report}``.

Failures exit nonzero and print a JSON object ``{"error": kind, "message": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import data_io, harness
from .errors import ArgumentError, NeurobitError


def _load_data(cfg: harness.ExperimentConfig, data_path):
    """Recordings and channel order from ``--data`` or the config's ``data`` block."""
    if data_path is not None:
        recs, manifest = data_io.load_export(data_path)
        return recs, manifest.channel_names
    spec = cfg.data or {}
    if "export" in spec:
        recs, manifest = data_io.load_export(spec["export"])
        return recs, manifest.channel_names
    if "synthetic" in spec:
        s = spec["synthetic"]
        recs = data_io.generate_synthetic_dataset(int(s.get("n_subjects", 8)),
                                                  int(s.get("n_trials_per_state", 5)),
                                                  int(s.get("seed", 0)))
        return recs, list(data_io.DEAP_CHANNELS)
    raise ArgumentError("no data: pass --data or give the config a 'data' block "
                        "({'export': path} or {'synthetic': {...}})")


def _summary(r: harness.CrrReport) -> dict:
    return {"label": r.label, "mean_crr": r.mean_crr, "se_crr": r.se_crr,
            "fold_crr": r.fold_crr, "published_crr": r.published_crr,
            "config_hash": r.config_hash}


def cmd_synth(args) -> dict:
    recs = data_io.generate_synthetic_dataset(args.subjects, args.trials_per_state, args.seed)
    path = data_io.write_export(recs, args.out)
    return {"manifest": str(path), "subjects": len(recs),
            "trials_per_subject": int(recs[0].trials.shape[0])}


def cmd_inspect(args) -> dict:
    recs, manifest = data_io.load_export(args.path)
    ratings = {r.subject_id: r.ratings for r in recs}
    return {
        "provenance": manifest.provenance,
        "subjects": manifest.subjects,
        "channel_names": list(manifest.channel_names),
        "trials_per_subject": {r.subject_id: int(r.trials.shape[0]) for r in recs},
        "participants_per_state": data_io.participants_per_state(ratings),
    }


def _run_and_report(configs, args) -> dict:
    reports = []
    cache = {}
    for cfg in configs:
        key = (json.dumps(cfg.data, sort_keys=True), args.data)
        if key not in cache:
            cache[key] = _load_data(cfg, args.data)
        recs, channels = cache[key]
        folds = [int(k) for k in args.folds.split(",")] if args.folds else None
        save = Path(args.save_models) / cfg.digest() if args.save_models else None
        logging.getLogger("neurobit").info("running %s", cfg.label)
        reports.append(harness.run_experiment(cfg, recs, channel_names=channels,
                                              checkpoint_dir=save, folds=folds))
    files = harness.report(reports, args.out)
    return {"reports": [_summary(r) for r in reports], "files": [str(f) for f in files]}


def cmd_run(args) -> dict:
    return _run_and_report([harness.load_config(args.config)], args)


def cmd_sweep(args) -> dict:
    with open(args.config) as fh:
        spec = json.load(fh)
    return _run_and_report(harness.expand_sweep(spec), args)


def cmd_report(args):
    reports = harness.load_reports(args.inp)
    if args.out:
        harness.report(reports, args.out, formats=(args.format,))
    if args.format == "json":
        return [r.to_dict() for r in reports]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=harness.SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(harness._summary_row(r))
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurobit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic export")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=8)
    s.add_argument("--trials-per-state", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("inspect", help="validate an export and summarise it")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)

    for name, func, help_ in (("run", cmd_run, "run one experiment config"),
                              ("sweep", cmd_sweep, "run every variant of a sweep file")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--data", help="export directory or manifest (overrides the config)")
        s.add_argument("--out", default="results")
        s.add_argument("--folds", help="comma-separated fold indices (default: all 10)")
        s.add_argument("--save-models", help="directory for per-fold checkpoints")
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="re-emit saved results as JSON or CSV")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--format", choices=("json", "csv"), default="csv")
    s.add_argument("--out", help="also write report files here")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = args.func(args)
    except NeurobitError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    sys.stdout.write(out if isinstance(out, str) else json.dumps(out, indent=1) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
