"""Command-line entry point.

    perceiver-prompt {generate,train,eval,sweep,export-prompts,all} [--config PATH] --run-dir DIR [--seed N]

Log verbosity comes from ``PERCEIVER_PROMPT_LOG`` (DEBUG, INFO, WARNING, ...; default INFO).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .audio import WavReadError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .training import TrainingDivergedError

LOG_ENV = "PERCEIVER_PROMPT_LOG"

COMMANDS = {
    "generate": pipeline.cmd_generate,
    "train": pipeline.cmd_train,
    "eval": pipeline.cmd_eval,
    "sweep": pipeline.cmd_sweep,
    "export-prompts": pipeline.cmd_export_prompts,
    "all": pipeline.run_all,
}

# errors that carry an actionable message; anything else is a bug and keeps its traceback
USER_ERRORS = (ConfigError, CheckpointError, pipeline.CorpusMismatchError, pipeline.MissingArtifactError,
               WavReadError, TrainingDivergedError, FileNotFoundError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perceiver-prompt",
                                description="Speaker-prompt adaptation of a small encoder-decoder ASR model.")
    p.add_argument("command", choices=sorted(COMMANDS), help="pipeline step to run ('all' = generate, train, eval)")
    p.add_argument("--config", type=Path, default=None, help="YAML run config (omitted keys take defaults)")
    p.add_argument("--run-dir", type=Path, required=True, help="directory for checkpoints, logs and reports")
    p.add_argument("--seed", type=int, default=None, help="override the config's training seed")
    return p


def setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"{LOG_ENV}={level!r} is not a logging level (use DEBUG, INFO, WARNING or ERROR)")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        cfg = resolve_config(args)
        args.run_dir.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, args.run_dir)
    except USER_ERRORS as e:
        print(f"perceiver-prompt {args.command}: error: {e}", file=sys.stderr)
        return 2
    if isinstance(result, pipeline.Comparison):
        print(result.table())
    elif isinstance(result, dict) and result and all(isinstance(v, pipeline.Comparison) for v in result.values()):
        print((args.run_dir / "reports" / "sweep.txt").read_text(), end="")
    elif isinstance(result, pipeline.ProbeResult):
        print(f"speaker probe accuracy {result.speaker_accuracy:.3f}; shuffled-label control "
              f"{result.shuffled_mean:.3f} (sigma {result.sigma:.3f}); severity probe {result.severity_accuracy:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
