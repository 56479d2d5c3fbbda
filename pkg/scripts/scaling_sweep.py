"""Quadratic vs linear kernel attention over a range of sequence lengths.

Prints median wall time and flop counts per engine and the doubling ratios
between consecutive grid points, then writes bench.csv under --out.

    python scripts/scaling_sweep.py --grid 256,512,1024,2048,4096 --m 128
"""

import argparse

from sara_attn.config import RunConfig
from sara_attn.runs import crossover, run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="256,512,1024,2048,4096")
    ap.add_argument("--m", type=int, default=128)
    ap.add_argument("--dv", type=int, default=128)
    ap.add_argument("--feature", default="relu")
    ap.add_argument("--parallel", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/scaling")
    args = ap.parse_args()

    cfg = RunConfig(seed=args.seed, out=args.out)
    cfg.dims.m, cfg.dims.d_v = args.m, args.dv
    cfg.bench.grid = [int(v) for v in args.grid.split(",")]
    cfg.bench.feature = args.feature
    cfg.bench.parallel = args.parallel
    records = run_bench(cfg.validate())

    prev = {}
    print(f"{'engine':10s} {'N':>6s} {'ms':>10s} {'flops':>14s} {'t ratio':>8s} {'f ratio':>8s}")
    for r in sorted(records, key=lambda r: (r.engine, r.N)):
        ratio_t = ratio_f = ""
        if r.engine in prev:
            p = prev[r.engine]
            ratio_t = f"{r.wall_time_ns / p.wall_time_ns:8.2f}"
            ratio_f = f"{r.flops / p.flops:8.3f}"
        print(f"{r.engine:10s} {r.N:6d} {r.wall_time_ns / 1e6:10.3f} {r.flops:14d} {ratio_t:>8s} {ratio_f:>8s}")
        prev[r.engine] = r
    print(f"crossover at N = {crossover(records)}")


if __name__ == "__main__":
    main()
