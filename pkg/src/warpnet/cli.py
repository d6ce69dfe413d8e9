"""Command-line scenario runner: ``warpnet run <scenario> [--seed --until --metrics --transcript]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .scenario import ParseError, bundled_scenario, report, run_scenario


def _scenario_path(arg: str) -> Path:
    path = Path(arg)
    if path.exists():
        return path
    try:
        return bundled_scenario(arg)
    except FileNotFoundError:
        raise argparse.ArgumentTypeError(f"no scenario file or bundled scenario named {arg!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warpnet", description="Run WARP network scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="replay a scenario file")
    run.add_argument("scenario", type=_scenario_path, help="path, or the name of a bundled scenario")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--until", type=float, default=None, help="stop at this virtual time")
    run.add_argument("--metrics", type=Path, help="write metrics (key=value; JSON if the name ends in .json)")
    run.add_argument("--transcript", type=Path, help="write the delivery transcript")
    run.add_argument("--format", choices=("text", "json", "kv"), default="text", help="stdout report format")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run_scenario(args.scenario, seed=args.seed, until=args.until)
    except ParseError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return 2
    if args.metrics:
        fmt = "json" if args.metrics.suffix == ".json" else "kv"
        args.metrics.write_text(report(result.metrics, fmt))
    if args.transcript:
        args.transcript.write_text(result.transcript)
    sys.stdout.write(report(result.metrics, args.format))
    for failure in result.failures:
        print(f"FAIL {failure}", file=sys.stderr)
    if result.metrics["stale_serves"]:
        print(f"FAIL stale_serves={result.metrics['stale_serves']}", file=sys.stderr)
    verdict = "PASS" if result.exit_status == 0 else "FAIL"
    print(f"{verdict}: {result.passed} expectation(s) passed, {len(result.failures)} failed", file=sys.stderr)
    return result.exit_status


if __name__ == "__main__":
    sys.exit(main())
