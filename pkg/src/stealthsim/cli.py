"""Command-line entry point: ``stealthsim {calibrate,run,sweep,report}``.

Failures exit with status 2 and print a single JSON object on stderr.
"""

import argparse
import json
import os
import sys

from .detection import Calibration
from .errors import StealthSimError
from .experiment import (MetricsReport, calibrate, emit, emit_sweep, load_config, run_experiment, run_sweep,
                         summary_line)


def _parser():
    p = argparse.ArgumentParser(prog="stealthsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="override master_seed")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="worker processes")
        sp.add_argument("--runs", type=int, help="override n_runs")

    common(sub.add_parser("calibrate", help="calibrate detector thresholds"))
    run = sub.add_parser("run", help="run one experiment")
    common(run)
    run.add_argument("--calibration", help="reuse a calibration.json from the calibrate command")
    sweep = sub.add_parser("sweep", help="run a parameter sweep")
    common(sweep)
    sweep.add_argument("--axis", help="dotted config path (default: the config's sweep.axis)")
    sweep.add_argument("--values", help="comma-separated values (default: the config's sweep.values)")
    rep = sub.add_parser("report", help="re-emit a saved report")
    rep.add_argument("--input", required=True, help="report.json written by run")
    rep.add_argument("--out", default="out")
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.runs is not None:
        cfg.n_runs = args.runs
    return cfg


def _dispatch(args):
    if args.command == "calibrate":
        cfg = _config(args)
        cals = calibrate(cfg)
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "calibration.json")
        with open(path, "w") as fh:
            json.dump([c.to_dict() for c in cals], fh, indent=1, sort_keys=True)
        return {"calibration": path, "thresholds": [c.spec.threshold for c in cals]}
    if args.command == "run":
        cfg = _config(args)
        cals = None
        if args.calibration:
            with open(args.calibration) as fh:
                cals = [Calibration.from_dict(d) for d in json.load(fh)]
        report = run_experiment(cfg, workers=args.workers, calibrations=cals)
        paths = emit(report, "json", args.out) + emit(report, "csv", args.out)
        return {**summary_line(report), "files": paths}
    if args.command == "sweep":
        cfg = _config(args)
        values = None
        if args.values:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        table = run_sweep(cfg, axis=args.axis, values=values, workers=args.workers)
        paths = emit_sweep(table, "csv", args.out) + emit_sweep(table, "json", args.out)
        return {"axis": table.axis, "rows": len(table.rows), "files": paths}
    with open(args.input) as fh:
        report = MetricsReport.from_json(fh.read())
    paths = emit(report, args.format, args.out)
    return {**summary_line(report), "files": paths}


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        result = _dispatch(args)
    except StealthSimError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": "input", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
