"""Distillation loss curves for several feature functions and initialisations.

Each run distils the same random softmax teacher into a SARA student and
records loss per step; curves go to one CSV (run, step, loss) so they can be
plotted side by side.

    python scripts/uptrain_curves.py --steps 500 --out runs/curves.csv
"""

import argparse
import csv
from pathlib import Path

from sara_attn.numerics import SeededRng
from sara_attn.uptrain import DistillationConfig, SyntheticTokens, random_teacher, uptrain

RUNS = [
    ("relu", "gaussian_scaled", "output_mse"),
    ("exp", "gaussian_scaled", "output_mse"),
    ("square", "gaussian_scaled", "output_mse"),
    ("exp", "teacher_projections", "output_mse"),
    ("exp", "teacher_projections", "row_kl"),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--tokens", type=int, default=8)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=1.0)
    ap.add_argument("--teacher-scale", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/uptrain_curves.csv")
    args = ap.parse_args()

    root = SeededRng(args.seed).child("curves")
    layer = random_teacher(root.child("teacher"), args.d, scale=args.teacher_scale)
    rows = []
    for f, init, loss in RUNS:
        cfg = DistillationConfig(f=f, m=args.d, init=init, loss=loss, learning_rate=args.lr,
                                 steps=args.steps, batch=4, seed=args.seed)
        data = SyntheticTokens(root.child("data"), args.tokens, args.d, cfg.batch)
        hist = uptrain(cfg, layer, data)
        name = f"{f}/{init}/{loss}"
        print(f"{name:40s} {hist.loss[0]:.4e} -> {hist.loss[-1]:.4e}  ratio {hist.loss[-1] / hist.loss[0]:.4f}")
        rows.extend((name, i, repr(v)) for i, v in enumerate(hist.loss))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "step", "loss"])
        w.writerows(rows)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
