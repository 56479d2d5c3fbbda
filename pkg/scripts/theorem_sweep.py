"""Sup-norm error of the explicit SARA construction as the target delta shrinks.

For each delta the number of random features comes from the bound; the
script reports that m together with the median and worst error over seeds.

    python scripts/theorem_sweep.py --deltas 0.5,0.3,0.2,0.1
"""

import argparse

from sara_attn import theory
from sara_attn.numerics import SeededRng


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--deltas", default="0.5,0.3,0.2,0.1")
    ap.add_argument("--M", type=int, default=8)
    ap.add_argument("--N", type=int, default=8)
    ap.add_argument("--d", type=int, default=6)
    ap.add_argument("--d-qk", type=int, default=4)
    ap.add_argument("--r", type=float, default=0.5)
    ap.add_argument("--A", type=float, default=-1.0)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    layer, Xq, Xk = theory.theorem_inputs(SeededRng(args.seed).child("sweep"), args.M, args.N, args.d, args.d_qk, args.r)
    print(f"{'delta':>6s} {'m':>7s} {'median':>9s} {'max':>9s} {'within':>7s} {'kernel rel':>11s}")
    for delta in (float(v) for v in args.deltas.split(",")):
        setting = theory.measured_setting(layer, Xq, Xk, delta, args.A)
        rep = theory.theorem_end_to_end(setting, layer, Xq, Xk, range(args.seeds))
        print(f"{delta:6.2f} {rep.m_used:7d} {rep.median_error:9.4f} {max(rep.errors_per_seed):9.4f} "
              f"{rep.fraction_within_delta:7.2f} {max(rep.kernel_rel_errors):11.4f}")


if __name__ == "__main__":
    main()
