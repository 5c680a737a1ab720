"""Command line entry point: ``foca {train,sweep,prop1,dump}``.

Exit codes: 0 success, 1 config error, 2 runtime or numeric failure,
3 sweep finished with failed cells.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .core import MissingHistoryError
from .experiments import TrainingError, cmd_dump, cmd_prop1, cmd_sweep, cmd_train
from .outputs import FormatError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("foca")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foca", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train the toy denoiser and write versioned weights",
        "sweep": "run every (predictor, N, seed) cell; write steps.csv and summary.csv",
        "prop1": "check the error-accumulation bound on a contractive linear system",
        "dump": "write cached and uncached feature trajectories side by side",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=_u64, help="single seed (overrides config 'seeds')")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. schedule.intervals=[5]")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override, seed=args.seed, out=args.out)
        if args.command == "train":
            result = cmd_train(cfg)
            log.info("excess held-out MSE %.4g", result.excess_mse)
        elif args.command == "sweep":
            result = cmd_sweep(cfg)
            log.info("%d cells written to %s", result.cells, result.out_dir)
            if result.failures:
                log.error("%d of %d cells failed", len(result.failures), result.cells)
                return EXIT_PARTIAL
        elif args.command == "prop1":
            verdict = cmd_prop1(cfg)["report"]["verdict"]
            log.info("bound verdict: %s", verdict)
        else:
            path = cmd_dump(cfg)
            log.info("trajectory written to %s", path)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (TrainingError, ArithmeticError, MissingHistoryError, FormatError, OSError,
            ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
