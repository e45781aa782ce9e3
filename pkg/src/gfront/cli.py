"""Command line front end for the batch experiment runner.

Exit codes: 0 = ok, 1 = configuration problem, 2 = runtime failure.  The
output directory is picked in order from --out, the GFRONT_OUT environment
variable, the config's out key, and finally ./runs.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .harness import ConfigError, list_experiments, parse_config, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gfront", description="Run and validate batch experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("config", help="path to an INI experiment config")
    run_p.add_argument("--out", default=None,
                       help="output directory (beats GFRONT_OUT and the config)")

    val_p = sub.add_parser("validate", help="check a config and echo its normal form")
    val_p.add_argument("config", help="path to an INI experiment config")

    sub.add_parser("list", help="list experiment kinds and their parameters")
    return parser


def _read_text(path: str) -> str | None:
    try:
        return Path(path).read_text()
    except OSError as e:
        print(f"cannot read {path}: {e}", file=sys.stderr)
        return None


def _cmd_run(args) -> int:
    text = _read_text(args.config)
    if text is None:
        return EXIT_CONFIG
    report = parse_config(text)
    if not report.ok:
        for issue in report.issues:
            print(f"{issue.field}: {issue.reason}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out or os.environ.get("GFRONT_OUT") or None
    try:
        result = run_experiment(report.config, out_dir=out_dir)
    except ConfigError as e:
        for field, reason in e.issues:
            print(f"{field}: {reason}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    s = result.summary
    n_rows = sum(len(rec.rows) for rec in result.records)
    print(f"wrote {result.csv_path} ({s['trials_completed']} trials, "
          f"{n_rows} records, sha256 {s['csv_sha256'][:12]})")
    print(f"wrote {result.summary_path}")
    if result.partial:
        print(f"partial: budget of {s['budget_seconds']:g} s exceeded after "
              f"{s['trials_completed']} of {s['trials_requested']} trials")
    for key, value in s["stats"].items():
        print(f"  {key} = {value}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    text = _read_text(args.config)
    if text is None:
        return EXIT_CONFIG
    report = parse_config(text)
    if not report.ok:
        for issue in report.issues:
            print(f"{issue.field}: {issue.reason}", file=sys.stderr)
        return EXIT_CONFIG
    print("ok")
    print()
    print(report.normalized, end="")
    return EXIT_OK


def _cmd_list() -> int:
    for kind, info in list_experiments().items():
        print(f"{kind}: {info['description']}")
        print(f"  trials default: {info['default_trials']}")
        for name, p in info["params"].items():
            default = "(derived)" if p["default"] is None else p["default"]
            print(f"  {name} ({p['type']}, default {default}): {p['help']}")
        print()
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "validate":
        return _cmd_validate(args)
    return _cmd_list()


if __name__ == "__main__":
    raise SystemExit(main())
