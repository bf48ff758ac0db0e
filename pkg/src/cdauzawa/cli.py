"""Command-line entry point: ``cdauzawa <study> --config cfg.yaml [overrides]``.

Exit status: 0 converged, 2 stalled, 3 diverged, 4 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import COMMANDS, EXIT_CONFIG_ERROR, ReferenceFileError, load_config, run_study
from .linalg import LinearSolveError
from .solvers import ConfigError, ContinuationError

_HELP = {
    "reference": "compute and certify a reference solution by Reynolds continuation",
    "solve": "run every (method, m, gamma) combination against a stored reference",
    "study-H": "coarse-data density sweep at the first gamma",
    "study-gamma": "grad-div sweep at the first coarse grid",
    "noise-study": "CDA-Uzawa with noisy data, with and without the switch to Newton",
    "th-demo": "Taylor-Hood CDA-Uzawa error floor next to a Scott-Vogelius control",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdauzawa", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="study", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--re", type=float, help="Reynolds number (viscosity is 1/Re)")
        p.add_argument("--n", type=int, help="fine mesh subdivisions per side")
        p.add_argument("--m", type=int, nargs="+", help="coarse data grid sizes")
        p.add_argument("--gamma", type=float, nargs="+", help="grad-div parameters")
        p.add_argument("--mu", type=float, help="nudging parameter")
        p.add_argument("--nsr", type=float, nargs="+", help="noise-to-signal ratios")
        p.add_argument("--seed", type=int, help="noise seed")
        p.add_argument("--tol", type=float, help="stopping tolerance on the increment *-norm")
        p.add_argument("--max-iter", type=int, help="iteration limit")
        p.add_argument("--out", help="output directory")
        p.add_argument("--methods", nargs="+", help="solver methods to run")
        p.add_argument("--pairing", choices=("scott-vogelius", "taylor-hood"))
        p.add_argument("--reference", help="reference file to read or write")
        p.add_argument("--build-missing", action="store_true", default=None,
                       help="compute a missing reference instead of failing")
        p.add_argument("--no-wall-time", dest="record_wall_time", action="store_false", default=None,
                       help="write 0 in the wall_seconds column for reproducible output")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {
        "study": args.study, "re": args.re, "n": args.n, "m": args.m, "gamma": args.gamma,
        "mu": args.mu, "nsr": args.nsr, "seed": args.seed, "tol": args.tol,
        "max_iter": args.max_iter, "out": args.out, "methods": args.methods,
        "pairing": args.pairing, "reference": args.reference,
        "build_missing": args.build_missing, "record_wall_time": args.record_wall_time,
    }
    try:
        cfg = load_config(args.config, **overrides)
        return run_study(cfg)
    except (ConfigError, ReferenceFileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except ContinuationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LinearSolveError as exc:
        print(f"error: linear solve failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
