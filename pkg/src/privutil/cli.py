"""Command line entry point: ``privutil {simulate,attack,verify,curve}``.

Exit status: 0 success, 1 usage or configuration error, 2 run failure,
3 a gated verification check failed.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, harness
from .bounds import SchemaError
from .config import ConfigError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(harness.EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="privutil", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment YAML file")
        sp.add_argument("--out", help=f"output root (default: ${harness.OUTPUT_ENV} or ./runs)")
        sp.add_argument("--seed", type=_u64, help="override the master seed")
        sp.add_argument("--jobs", type=_positive, default=1, help="worker processes")

    common(sub.add_parser("simulate", help="run the federation and write a trade-off report"))
    common(sub.add_parser("attack", help="run configured attacks against a simulated run"))
    common(sub.add_parser("curve", help="sweep a mechanism parameter and write curve.csv"))
    v = sub.add_parser("verify", help="check every applicable bound on a run directory")
    v.add_argument("run", nargs="?", help="run directory")
    v.add_argument("--config", help="locate the run directory from a config instead")
    v.add_argument("--out", help="output root used with --config")
    v.add_argument("--seed", type=_u64, help=argparse.SUPPRESS)
    v.add_argument("--jobs", type=_positive, default=1, help=argparse.SUPPRESS)
    return p


def _verify_target(args) -> str:
    if args.run:
        return args.run
    if not args.config:
        raise ConfigError("run", "give a run directory or --config")
    cfg, run_dir = harness._prepare(args.config, args.out, args.seed)
    return str(run_dir)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            code, path = harness.cmd_verify(_verify_target(args))
            print(path)
            if code:
                print("verification failed: see the checks with status 'fail'", file=sys.stderr)
            return code
        cmd = {"simulate": harness.cmd_simulate, "attack": harness.cmd_attack,
               "curve": harness.cmd_curve}[args.command]
        print(cmd(args.config, out=args.out, seed=args.seed, jobs=args.jobs))
        return harness.EXIT_OK
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return harness.EXIT_USAGE
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return harness.EXIT_USAGE
    except (harness.RunError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return harness.EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
