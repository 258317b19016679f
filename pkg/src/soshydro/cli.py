"""Command-line entry point.

Usage::

    soshydro <experiment> --config PATH [--seed U64] [--out DIR] [--threads K]

Experiments: ``hydro``, ``electro``, ``gap``, ``diag``, ``tabulate`` and
``pde-solve``.  ``soshydro configs`` lists the bundled example configs and
``soshydro configs NAME`` prints one.

Exit codes: 0 pass (or an honestly inconclusive result), 1 tolerance
failure, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources

from numpy.linalg import LinAlgError

from .harness import EXPERIMENTS, ConfigError, ExperimentAborted, load_config, run_experiment
from .pde import PdeError
from .sim import NumericalError
from .transport import SandwichError

__all__ = ["main", "EXIT_PASS", "EXIT_TOLERANCE", "EXIT_CONFIG", "EXIT_NUMERICAL"]

EXIT_PASS = 0
EXIT_TOLERANCE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# NumericalError and PdeError are ArithmeticError subclasses; singular Gram
# matrices raise LinAlgError.
_NUMERICAL = (NumericalError, PdeError, ArithmeticError, LinAlgError)


def _bundled_configs() -> list[str]:
    root = resources.files("soshydro") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".yaml"))


def _configs_command(argv) -> int:
    names = _bundled_configs()
    if not argv:
        print("\n".join(names))
        return EXIT_PASS
    name = argv[0] if argv[0].endswith(".yaml") else argv[0] + ".yaml"
    if name not in names:
        print(f"unknown config {argv[0]!r}; available: {', '.join(names)}", file=sys.stderr)
        return EXIT_CONFIG
    print((resources.files("soshydro") / "configs" / name).read_text(encoding="utf-8"), end="")
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soshydro", description="Slope-dynamics experiments.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (unsigned 64-bit)")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="replica worker processes (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "configs":
        return _configs_command(argv[1:])
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return EXIT_CONFIG if exc.code else EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if config.experiment != args.experiment:
            raise ConfigError(f"config describes {config.experiment!r}, not {args.experiment!r}")
        changes = {}
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            changes["seed"] = args.seed
        if args.out is not None:
            changes["output"] = args.out
        if changes:
            config = config.replace(**changes)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_experiment(config, workers=args.threads, out_dir=config.output)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentAborted as exc:
        paths = exc.report.write(config.output)
        print(f"run aborted: {exc.cause!r}; partial report in {paths[0]}", file=sys.stderr)
        # A sandwich violation while tabulating is a tolerance failure; any
        # other sub-run failure is numerical.
        return EXIT_TOLERANCE if isinstance(exc.cause, SandwichError) else EXIT_NUMERICAL
    except _NUMERICAL as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    paths = report.write(config.output)
    print(f"{config.experiment}: {report.verdict}")
    for name, ok in sorted(report.checks.items()):
        print(f"  {name}: {'ok' if ok else 'FAILED'}")
    print(f"report: {paths[0]}")
    return report.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
