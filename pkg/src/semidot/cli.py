"""Command line entry point: ``semidot <experiment> --config path [--output dir] [--seed n]``."""
from __future__ import annotations

import os

# BLAS threading would make reductions order-dependent; fan-out happens across runs instead
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

from . import config as C  # noqa: E402

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

EPILOG = C.schema_help() + """

Exit codes: 0 all checks passed, 1 a check failed, 2 invalid config, 3 numerical failure
(partial artifacts are kept and flagged in report.json).
Environment: SEMIDOT_THREADS caps the number of parallel sub-runs (default 1).
Outputs: CSV data, JSON summaries and report.json (config echo, versions, wall time,
per-check results and a manifest of every other file with its SHA-256)."""


def parser():
    p = argparse.ArgumentParser(prog="semidot", description="Gradient flows and transport on grid x graph.",
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("experiment", choices=C.EXPERIMENTS)
    p.add_argument("--config", required=True, help="JSON config file ('-' for stdin)")
    p.add_argument("--output", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="seed (overrides the config)")
    p.add_argument("--validate-only", action="store_true", help="print diagnostics and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(path):
    text = sys.stdin.read() if path == "-" else open(path).read()
    return json.loads(text)


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = _load(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not isinstance(raw, dict):
        print("config: top level must be a JSON object", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    if args.output is not None:
        raw = {**raw, "output_dir": args.output}
    diags = C.validate(raw, args.experiment)
    for d in diags:
        print(d, file=sys.stderr)
    if C.fatal(diags):
        return EXIT_CONFIG
    if args.validate_only:
        print("config ok")
        return EXIT_OK
    from .runner import run
    rep = run(C.effective(raw, args.experiment))
    for c in rep.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}")
    if rep.status != "ok":
        print(f"numerical failure: {rep.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if rep.passed else EXIT_CHECKS


if __name__ == "__main__":
    sys.exit(main())
