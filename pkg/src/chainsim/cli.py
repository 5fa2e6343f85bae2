"""Command-line interface: run one scenario, the verdict matrix, or a sweep.

Exit codes: 0 clean run, 1 configuration error, 2 invariant violation or
matrix mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from chainsim.engine import SimFault
from chainsim.runner import matrix, run_scenario, sweep
from chainsim.scenario import ConfigError, load_scenario

OUT_ENV = "CHAINSIM_OUT"


def _out_root(args_out) -> Path:
    if args_out:
        return Path(args_out)
    return Path(os.environ.get(OUT_ENV, "out"))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="chainsim")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario file")
    p_run.add_argument("scenario")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)

    p_matrix = sub.add_parser("matrix", help="run the 5x5 verdict matrix")
    p_matrix.add_argument("--seed", type=int, action="append", default=None,
                          help="seed (repeatable; default 1 2 3)")
    p_matrix.add_argument("--out", default=None)
    p_matrix.add_argument("--jobs", type=int, default=None)

    p_sweep = sub.add_parser("sweep", help="vary one scenario field")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("--param", required=True,
                         help="dotted path, e.g. attack.fraction")
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values (JSON literals)")
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--jobs", type=int, default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            spec = load_scenario(args.scenario)
            if args.seed is not None:
                spec.seed = args.seed
            outdir = _out_root(args.out) / f"{spec.name}_seed{spec.seed}"
            summary = run_scenario(spec, outdir)
            print(json.dumps({
                "out": str(outdir),
                "commit_ratio": summary["commit_ratio"],
                "verdict": summary["verdict"],
            }, indent=2))
            return 0
        if args.command == "matrix":
            seeds = tuple(args.seed) if args.seed else (1, 2, 3)
            outroot = _out_root(args.out) / "matrix"
            report = matrix(seeds=seeds, outroot=outroot, jobs=args.jobs)
            for name in sorted(report["cells"]):
                cell = report["cells"][name]
                outcomes = {s: v["outcome"] for s, v in cell["seeds"].items()}
                status = "ok" if cell["ok"] else "MISMATCH"
                print(f"{name:35s} expected={cell['expected'] or '-'} "
                      f"{outcomes} [{status}]")
            with open(outroot / "matrix.json", "w") as f:
                json.dump(report, f, indent=2, sort_keys=True, default=str)
            if not report["ok"]:
                print(f"{len(report['mismatches'])} cell(s) deviate from the "
                      f"expected matrix", file=sys.stderr)
                return 2
            return 0
        if args.command == "sweep":
            spec = load_scenario(args.scenario)
            values = [_parse_value(v) for v in args.values.split(",")]
            outroot = _out_root(args.out) / f"sweep_{spec.name}"
            rows = sweep(spec, args.param, values, outroot=outroot,
                         jobs=args.jobs)
            outroot.mkdir(parents=True, exist_ok=True)
            with open(outroot / "sweep.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["value", "commit_ratio", "median_latency_s",
                            "recovery_time_s", "outcome"])
                for row in rows:
                    w.writerow([row["value"], f"{row['commit_ratio']:.4f}",
                                row["median_latency_s"],
                                row["recovery_time_s"], row["outcome"]])
            for row in rows:
                print(f"{args.param}={row['value']}: "
                      f"ratio={row['commit_ratio']:.3f} "
                      f"p50={row['median_latency_s']} {row['outcome']}")
            return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (AssertionError, SimFault) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
