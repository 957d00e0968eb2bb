"""Command line entry point.

    mortensen VERB --config PATH --out DIR [--seed N] [--kind KIND]

Verbs map to pipelines: simulate -> twin, dp -> bellman-check,
hjb -> hjb-vs-dp, kalman -> kalman-xcheck, zakai -> laplace-sweep,
sweep -> the config's own ``kind`` (or ``--kind``).  ``report`` audits an
existing output directory and re-emits its plot data.

Exit status: 0 when every declared tolerance passes, 1 when one fails,
2 for invalid input, 3 when a solver aborts.
"""

from __future__ import annotations

import argparse
import sys

from .audit import audit
from .config import KINDS, ConfigError, ExperimentConfig
from .plotdata import PlotDataError, emit_plotdata
from .report import ReportError, RunReport, write_manifest
from .scenarios import run_scenario

VERB_KINDS = {
    "simulate": "twin",
    "dp": "bellman-check",
    "hjb": "hjb-vs-dp",
    "kalman": "kalman-xcheck",
    "zakai": "laplace-sweep",
    "sweep": None,
}

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mortensen", description="Cost-to-come, HJB and Zakai experiments.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in list(VERB_KINDS) + ["report"]:
        sp = sub.add_parser(verb)
        sp.add_argument("--config", required=verb != "report", help="TOML file or bundled benchmark name")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        if verb == "sweep":
            sp.add_argument("--kind", choices=KINDS, default=None)
    return p


def _finish(out, report: RunReport) -> int:
    emit_plotdata(out)
    write_manifest(out)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAIL


def _report(args) -> int:
    report = RunReport.read(args.out)
    if args.config:
        cfg = ExperimentConfig.load(args.config, kind=report.kind, seed=args.seed)
        if cfg.digest() != report.config_digest:
            print(f"config {args.config} does not match the run in {args.out}", file=sys.stderr)
            return EXIT_INPUT
    res = audit(args.out)
    for line in res.mismatches:
        print("audit mismatch:", line, file=sys.stderr)
    for name in res.tampered:
        print("audit: hash differs for", name, file=sys.stderr)
    if not res.ok:
        return EXIT_FAIL
    code = _finish(args.out, report)
    print(f"audit: {res.checked} metrics recomputed from CSV, OK")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "report":
            return _report(args)
        kind = VERB_KINDS[args.verb] or getattr(args, "kind", None)
        cfg = ExperimentConfig.load(args.config, kind=kind, seed=args.seed)
        report = run_scenario(cfg, args.out)
        return _finish(args.out, report)
    except (ConfigError, ReportError, PlotDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RuntimeError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
