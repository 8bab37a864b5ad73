#!/usr/bin/env python3
"""Loose-versus-tight sweep, plus a beta ladder showing how ensembles shrink."""

import argparse
from pathlib import Path

import numpy as np

from ecse import harness
from ecse.backbones import PetModel, PetShape, pet2body
from ecse.symmetrize import PRESETS, SymmetrizedModel
from ecse.training import make_toy_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-structures", type=int, default=30)
    ap.add_argument("--perturbations", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--outdir", default="results/tradeoff")
    args = ap.parse_args()

    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    shape = PetShape()
    bb, aux = PetModel.create(shape, args.seed), pet2body(shape, args.seed + 1)
    structs = make_toy_dataset("ch4_like", args.n_structures, args.seed)

    def make(cfg):
        return SymmetrizedModel(bb, cfg, aux)

    rows = harness.sweep_tradeoff(make, structs, dict(PRESETS), n_perturbations=args.perturbations, seed=args.seed)
    harness.write_csv(out / "presets.csv", harness.TRADEOFF_HEADER, rows)
    for r in rows:
        print(f"{r[0]:6s} frames {r[1]:.2f}  slope {r[2]:.3f}  equivariance {r[4]:.1e}  {r[5]:.0f} s")

    ladder = []
    for beta in (5.0, 20.0, 50.0, 200.0, 1000.0):
        cfg = PRESETS["loose"].replace(beta=beta, beta_w=beta)
        frames = np.concatenate([make(cfg).frame_counts(s) for s in structs])
        ladder.append((beta, float(frames.mean()), int(frames.min()), int(frames.max())))
        print(f"beta {beta:7.1f}  mean frames {frames.mean():.2f}")
    harness.write_csv(out / "beta_ladder.csv", ("beta", "mean_frames", "min_frames", "max_frames"), ladder)


if __name__ == "__main__":
    main()
