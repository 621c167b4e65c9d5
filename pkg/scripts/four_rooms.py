"""Four Rooms comparison: train each algorithm (and A2IMOC ablation variants)
over a seed set and print the final evaluation returns. Finished runs with an
identical config are reused, so the script can be interrupted and restarted.

    python3 scripts/four_rooms.py --algorithms a2c,a2imoc,aoc --seeds 0-9 \
        --variants n_step_advantage,truncated_advantage --variant-seeds 0-4 --out runs/acceptance

The default --out matches the directory the acceptance tests read.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from imoc.cli import cached_run, variant_config
from imoc.config import RunConfig, apply_override


def parse_seeds(text: str) -> list[int]:
    if "-" in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--algorithms", default="a2c,a2imoc,aoc")
    parser.add_argument("--seeds", default="0-9")
    parser.add_argument("--variants", default="n_step_advantage,truncated_advantage")
    parser.add_argument("--variant-seeds", default="0-4")
    parser.add_argument("--steps", type=int, default=2_000_000)
    parser.add_argument("--out", default="runs/acceptance")
    parser.add_argument("--override", action="append", default=[])
    parser.add_argument("--fresh", action="store_true", help="retrain even if a matching run exists")
    args = parser.parse_args()

    jobs = [(a, None, parse_seeds(args.seeds)) for a in args.algorithms.split(",") if a]
    jobs += [("a2imoc", v, parse_seeds(args.variant_seeds)) for v in args.variants.split(",") if v]
    results = {}
    for algo, variant, seeds in jobs:
        name = variant or algo
        finals = []
        for seed in seeds:
            cfg = RunConfig(algorithm=algo, seed=seed, total_env_steps=args.steps)
            for item in args.override:
                apply_override(cfg, item)
            if variant:
                cfg = variant_config(cfg, variant)
            summary = cached_run(cfg, Path(args.out) / name / f"seed{seed}", fresh=args.fresh)
            finals.append(summary["final_return"])
            print(f"{name} seed {seed}: final {finals[-1]:+.3f} ({summary['seconds']:.0f}s)", flush=True)
        results[name] = finals
        f = np.array(finals)
        print(f"{name}: mean {f.mean():+.3f}  >=1.5: {(f >= 1.5).sum()}/{len(f)}  "
              f"<=1.0: {(f <= 1.0).sum()}/{len(f)}", flush=True)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "finals.json").write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
