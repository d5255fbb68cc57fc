"""End-to-end runs over several seeds on one shared corpus.

    python scripts/run_seeds.py --out runs/e2e --seeds 0 1 2 [--config cfg.yaml]

Each seed trains backbone, LoRA and prompt generator, evaluates the held-out
speakers, then exports prompts with self-only and 5-utterance history. A summary
goes to <out>/summary.json.
"""
import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from perceiver_prompt import pipeline
from perceiver_prompt.config import RunConfig, load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--history", type=int, default=5, help="history length for the second prompt export")
    args = ap.parse_args()
    base = load_config(args.config) if args.config else RunConfig()
    base = dataclasses.replace(base, corpus=dataclasses.replace(base.corpus, root=str((args.out / "corpus").resolve())))
    pipeline.cmd_generate(base, args.out)
    rows = {}
    for seed in args.seeds:
        cfg = dataclasses.replace(base, seed=seed)
        run = args.out / f"seed{seed}"
        t0 = time.time()
        comp = pipeline.run_all(cfg, run)
        probes = {}
        for n in (0, args.history):
            pcfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, n_history=n))
            probes[n] = dataclasses.asdict(pipeline.cmd_export_prompts(pcfg, run))
        rows[seed] = {**comp.summary(), "seconds": time.time() - t0, "probes": probes}
        print(f"seed {seed}: CER {comp.baseline.overall:.1f} -> {comp.adapted.overall:.1f} "
              f"({comp.relative_reduction:.2f}%), {rows[seed]['seconds']:.0f}s", flush=True)
    mean = float(np.mean([r["relative_reduction"] for r in rows.values()]))
    print(f"mean relative reduction {mean:.2f}%")
    (args.out / "summary.json").write_text(json.dumps({"seeds": rows, "mean_relative_reduction": mean}, indent=1))


if __name__ == "__main__":
    main()
