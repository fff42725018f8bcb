"""Command-line front end: ``subwalk <command> --config file.json``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from .experiments import Pipeline, Report, Table, run
from .manifold import CoverageFailure
from .operator import NotPSD, NotSpanned
from .reduction import FlowEscape, NoSelection, StageFailure

log = logging.getLogger("subwalk")

COMMANDS = ("ballbox", "reduce", "walk", "spectrum", "converge", "generator", "verify-all")
CONSTRUCTION_ERRORS = (CoverageFailure, StageFailure, NotPSD, NotSpanned, FlowEscape, NoSelection)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_BUILD = 0, 1, 2, 3


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path: Path, table: Table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([fmt(v) for v in row])


def write_report(out: Path, report: Report) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    for t in report.tables:
        write_table(out / f"{t.name}.csv", t)
    lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}" + (f": {c.detail}" if c.detail else "")
             for c in report.checks]
    lines += [f"NOTE {n}" for n in report.notes]
    lines.append(f"{'PASS' if report.passed else 'FAIL'} overall ({sum(c.passed for c in report.checks)}"
                 f"/{len(report.checks)})")
    path = out / f"summary_{report.command}.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="subwalk", description="Random walks for subelliptic operators on tori.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True,
                    help="experiment JSON, or the name of a bundled config such as laplace1d")
    ap.add_argument("--out", type=Path, default=None, help="output directory (default: config 'output' or ./out/<name>)")
    ap.add_argument("--seed", type=int, default=None, help="overrides walk.seed")
    ap.add_argument("--quiet", action="store_true", help="only print the summary path")
    return ap


def load_config(name: str) -> cfg.Experiment:
    path = Path(name)
    if not path.exists() and name in cfg.BUNDLED:
        return cfg.load_bundled(name)
    return cfg.load(path)


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("config error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        exp = load_config(args.config)
    except cfg.ConfigError as err:
        where = f" (offset {err.offset})" if err.offset is not None else ""
        print(f"config error: {err}{where}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path(exp.output or Path("out") / exp.name)
    try:
        report = run(args.command, Pipeline(exp, seed=args.seed))
    except CONSTRUCTION_ERRORS as err:
        print(f"construction failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_BUILD
    summary = write_report(out, report)
    if args.quiet:
        print(summary)
    else:
        print(summary.read_text(), end="")
        log.info("artifacts in %s", out)
    return EXIT_OK if report.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
