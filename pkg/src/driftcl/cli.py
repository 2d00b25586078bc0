"""driftcl command line: generate, benchmark, ablate, report."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from .benchmark import generate, read_report, render, run, summary_rows, write_outputs
from .config import ENV_VAR, load_config
from .data import ConfigError, DomainError, FormatError
from .engine import DimensionError, NumericError

EXIT_ERROR = 1

log = logging.getLogger("driftcl")


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftcl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_options(p):
        p.add_argument("--config", type=Path, help=f"INI run config (default: ${ENV_VAR}, else built-in defaults)")
        p.add_argument("--out", type=Path, help="output directory (overrides [run] out)")
        p.add_argument("--seeds", type=_seeds, help="comma-separated seeds (overrides [run] seeds)")

    p = sub.add_parser("generate", help="write 9 train + 9 test synthetic experiments as CSV")
    run_options(p)

    for name, text in (("benchmark", "baseline, TL, CL and RR-adaptive over all seeds"),
                       ("ablate", "baseline, TL, RR-adaptive and RR+adaptive over all seeds")):
        p = sub.add_parser(name, help=text)
        run_options(p)
        p.add_argument("--jobs", type=int, help="parallel seed workers (overrides [run] jobs)")

    p = sub.add_parser("report", help="print a summary of a report.json")
    p.add_argument("report", type=Path)
    p.add_argument("--csv-only", action="store_true", help="print the overall table as CSV and nothing else")
    return parser


def _config(args):
    cfg = load_config(args.config)
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    cfg.validate()
    return cfg


def cmd_generate(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    paths = generate(cfg, cfg.out, seed)
    print(f"wrote {len(paths)} files for seed {seed} to {cfg.out}")
    return 0


def _cmd_run(args, kind: str) -> int:
    cfg = _config(args)
    report, traces = run(cfg, kind)
    write_outputs(report, traces, cfg.out)
    print(render(report))
    print(f"\nreport written to {cfg.out / 'report.json'}")
    return 0


def cmd_benchmark(args) -> int:
    return _cmd_run(args, "benchmark")


def cmd_ablate(args) -> int:
    return _cmd_run(args, "ablate")


def cmd_report(args) -> int:
    report = read_report(args.report)
    if args.csv_only:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["model", "overall_rmse_mean", "overall_rmse_std", "bwt_mean", "forgetting_mean"])
        w.writerows(summary_rows(report))
    else:
        print(render(report))
    return 0


COMMANDS = {"generate": cmd_generate, "benchmark": cmd_benchmark, "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ConfigError, FormatError, DomainError, DimensionError, NumericError, ValueError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"driftcl: error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
