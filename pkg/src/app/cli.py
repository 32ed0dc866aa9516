from __future__ import annotations

import argparse
import logging
import os
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any

from src.app.pipeline import cmd_attack, cmd_evaluate, cmd_simulate, cmd_sweep, cmd_train
from src.core.config import ExperimentConfig, load_experiment_config
from src.core.errors import ConfigError, FatalSimulatorError, ManifestError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

LOCK_NAME = ".lock"

COMMANDS: dict[str, Callable[..., Any]] = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


class OutputLocked(RuntimeError):
    """Another invocation holds the output directory."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robust-npe",
        description="Simulate, train, attack and evaluate amortized posterior estimators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", required=True, type=Path, help="Experiment YAML file")
        p.add_argument("--seed", type=int, default=None, help="Override every seed in the config")
        p.add_argument("--out", type=Path, default=None, help="Output directory (overrides RNPE_OUT_DIR and output_dir)")
        p.add_argument("--force", action="store_true", help="Overwrite existing outputs")
        p.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    return parser


@contextmanager
def output_lock(directory: Path) -> Iterator[Path]:
    """
    Hold `<directory>/.lock` for the duration of a subcommand.

    Raises:
        OutputLocked: If the lock file already exists.
    """
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        msg = f"Output directory '{directory}' is locked by another run (remove '{path}' if it is stale)"
        logger.error(msg)
        raise OutputLocked(msg) from e
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


def _exit_code(error: BaseException) -> int:
    if isinstance(error, (ArithmeticError, FatalSimulatorError)):
        return EXIT_NUMERIC
    if isinstance(error, (ConfigError, ManifestError, OSError, ValueError, OutputLocked)):
        return EXIT_CONFIG
    raise error


def run(args: argparse.Namespace) -> int:
    """Execute one parsed subcommand and map failures to exit codes."""
    try:
        cfg: ExperimentConfig = load_experiment_config(args.config, seed=args.seed, out_dir=args.out)
        with output_lock(cfg.out_path):
            logger.info("Running '%s' in %s", args.command, cfg.out_path)
            COMMANDS[args.command](cfg, force=args.force)
    except Exception as e:  # noqa: BLE001
        code = _exit_code(e)
        logger.error("'%s' failed (%s): %s", args.command, type(e).__name__, e)
        return code

    logger.info("'%s' finished", args.command)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return run(args)


if __name__ == "__main__":
    raise SystemExit(main())
