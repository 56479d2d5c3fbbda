"""Navigation-scene agreement with exact softmax, repeated over scene seeds.

For every seed a fresh synthetic scene is drawn, SARA maps are distilled on
it and all demo kernels are compared against softmax scores.

    python scripts/navdemo_seeds.py --seeds 0-5
"""

import argparse

import numpy as np

from sara_attn.config import RunConfig
from sara_attn.runs import run_demo


def seed_range(text):
    lo, _, hi = text.partition("-")
    return range(int(lo), int(hi or lo) + 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0-5"))
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()

    table = {}
    for seed in args.seeds:
        cfg = RunConfig(seed=seed)
        cfg.demo.distill_steps = args.steps
        result = run_demo(cfg, write=False)
        for name, stats in result["kernels"].items():
            table.setdefault(name, []).append(stats)
        print(f"seed {seed}: passed={result['passed']}")

    print(f"\n{'kernel':22s} {'mean TV':>9s} {'argmax':>7s} {'H gap':>7s}")
    for name, rows in table.items():
        tv = np.mean([r["mean_tv"] for r in rows])
        am = np.mean([r["argmax_rate"] for r in rows])
        gap = np.mean([r["mean_entropy_gap"] for r in rows])
        print(f"{name:22s} {tv:9.4f} {am:7.2f} {gap:7.3f}")


if __name__ == "__main__":
    main()
