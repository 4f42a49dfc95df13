"""Command-line interface.

Subcommands: simulate, estimate, montecarlo, moments.  Exit codes: 0 on
success, 1 on usage/config errors, 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import NumericalError
from .harness import (
    ConfigError,
    cmd_estimate,
    cmd_moments,
    cmd_montecarlo,
    cmd_simulate,
    _decode_real,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tgem",
                     description="Truncated-Gaussian noise estimation for "
                                 "state-space models")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate a dataset CSV from a config")
    sim.add_argument("--config", required=True,
                     help="config JSON path or builtin name (e.g. paper_sec6_desk)")
    sim.add_argument("--out", required=True, help="output dataset CSV path")
    sim.add_argument("--seed", type=int, default=None,
                     help="override the config master seed")

    est = sub.add_parser("estimate", help="estimate noise parameters from a dataset")
    est.add_argument("--config", required=True)
    est.add_argument("--data", required=True, help="dataset CSV path")
    est.add_argument("--method", required=True, choices=("tg", "ks"))
    est.add_argument("--out", required=True,
                     help="trace JSON path (a flat CSV is written next to it)")

    mc = sub.add_parser("montecarlo", help="replicate the benchmark study")
    mc.add_argument("--config", required=True)
    mc.add_argument("--out-dir", required=True)
    mc.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    mom = sub.add_parser("moments", help="univariate truncated-moment report")
    mom.add_argument("--mu", required=True, type=float)
    mom.add_argument("--var", required=True, type=float)
    mom.add_argument("--a", required=True, help="lower bound (float or -inf)")
    mom.add_argument("--b", required=True, help="upper bound (float or +inf)")

    return parser


def _join_dash_values(argv):
    """Fold ``--a -inf`` into ``--a=-inf``: argparse only auto-detects
    negative numbers, not signed infinities."""
    flags = {"--a", "--b", "--mu", "--var"}
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in flags and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(_join_dash_values(list(argv)))
        if args.command == "simulate":
            cmd_simulate(args.config, args.out, seed=args.seed)
        elif args.command == "estimate":
            cmd_estimate(args.config, args.data, args.method, args.out)
        elif args.command == "montecarlo":
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cmd_montecarlo(args.config, args.out_dir, jobs=args.jobs)
        elif args.command == "moments":
            a = _decode_real(args.a)
            b = _decode_real(args.b)
            cmd_moments(args.mu, args.var, a, b)
        return 0
    except (_UsageError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
