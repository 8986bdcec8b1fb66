"""``stc`` command line: collect | design | simulate | compare.

Exit codes: 0 success, 2 configuration error, 3 infeasible design,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import experiment
from .dataset import DataError
from .lmi import LmiError
from .synthesis import DesignError, InfeasibleDesignError
from .topology import InvalidTopologyError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stc", description="Data-driven self-triggered consensus experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")

    common(sub.add_parser("collect", help="record open-loop data for every follower and data length"))
    p = sub.add_parser("design", help="solve the design LMIs")
    common(p)
    p.add_argument("--mode", action="append", choices=experiment.MODES,
                   help="design pipeline (repeatable); defaults to the config's list")
    p = sub.add_parser("simulate", help="run the closed loop for stored designs")
    common(p)
    p.add_argument("--design", action="append", help="design JSON (repeatable); defaults to all stored designs")
    p = sub.add_parser("compare", help="tabulate steady-state times and trigger counts")
    common(p)
    p.add_argument("bundles", nargs="*", help="result bundle directories; defaults to all stored runs")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = experiment.load_config(args.config, args.seed, args.out)
        if args.command == "collect":
            paths = experiment.run_collect(cfg)
        elif args.command == "design":
            paths = experiment.run_design(cfg, args.mode)
        elif args.command == "simulate":
            paths = experiment.run_simulate(cfg, args.design)
        else:
            paths = experiment.run_compare(cfg, args.bundles or None)
    except (experiment.ConfigError, InvalidTopologyError, DataError, OSError) as exc:
        print(f"stc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleDesignError as exc:
        print(f"stc: infeasible design: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DesignError, LmiError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"stc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
