"""Command line: ``ckba <stage> --config <path> [--out <dir>]``.

Exit codes: 0 success, 1 invalid configuration or missing/stale upstream
artifacts, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..ba import DegenerateObservableError
from ..darcy import SolverError
from ..gp import DegenerateGramError
from ..io import MatrixFormatError
from ..kle import EigenSolverError
from ..uq import DegenerateSampleError
from .config import ConfigError, load
from .stages import STAGES, StageError, run_all, run_stage

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2

_NUMERICAL = (DegenerateGramError, EigenSolverError, SolverError, DegenerateObservableError,
              DegenerateSampleError, FloatingPointError, np.linalg.LinAlgError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ckba", description=__doc__.splitlines()[0])
    p.add_argument("stage", choices=STAGES + ("all",),
                   help="pipeline stage to run ('all' runs every stage in order)")
    p.add_argument("--config", required=True, type=Path, help="JSON configuration file")
    p.add_argument("--out", type=Path, default=None,
                   help="run directory (default: <config stem>-run next to the config)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = args.out or args.config.with_name(args.config.stem + "-run")
    try:
        cfg = load(args.config)
        if args.stage == "all":
            run_all(cfg, out)
        else:
            run_stage(cfg, args.stage, out)
    except FileNotFoundError as exc:
        print(f"ckba: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigError as exc:
        print(f"ckba: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (StageError, MatrixFormatError) as exc:
        print(f"ckba {args.stage}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except _NUMERICAL as exc:
        print(f"ckba {args.stage}: numerical failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
