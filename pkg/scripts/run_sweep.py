"""Configuration sweep (Conf.1-15 by default) with a shared backbone and LoRA.

    python scripts/run_sweep.py --out runs/sweep [--config cfg.yaml] [--confs 2 8 12] [--ptune-epochs N]
"""
import argparse
import dataclasses
from pathlib import Path

from perceiver_prompt import pipeline
from perceiver_prompt.config import RunConfig, load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--confs", type=int, nargs="+")
    ap.add_argument("--ptune-epochs", type=int)
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig()
    sweep = cfg.sweep
    if args.confs:
        sweep = dataclasses.replace(sweep, confs=args.confs)
    if args.ptune_epochs is not None:
        sweep = dataclasses.replace(sweep, ptune_epochs=args.ptune_epochs)
    cfg = dataclasses.replace(cfg, sweep=sweep)
    pipeline.cmd_generate(cfg, args.out)
    pipeline.cmd_sweep(cfg, args.out)
    print((args.out / "reports" / "sweep.txt").read_text(), end="")


if __name__ == "__main__":
    main()
