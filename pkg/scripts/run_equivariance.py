#!/usr/bin/env python3
"""Equivariance table: symmetrized and raw backbones on ch4-like and periodic structures."""

import argparse
from pathlib import Path

from ecse import harness
from ecse.backbones import MlpBackbone, PetModel, PetShape, RadialAux, pet2body
from ecse.symmetrize import PRESETS, SymmetrizedModel
from ecse.training import make_toy_dataset


def models(seed):
    pet = PetShape()
    vec = PetShape(output="vector")
    for name, cfg in PRESETS.items():
        yield f"pet/{name}", SymmetrizedModel(PetModel.create(pet, seed), cfg, pet2body(pet, seed + 1)), False
        yield f"mlp/{name}", SymmetrizedModel(MlpBackbone(seed=seed, n_slots=64), cfg, RadialAux(seed=seed + 1)), False
        yield (f"pet_vector/{name}",
               SymmetrizedModel(PetModel.create(vec, seed), cfg, RadialAux(output="vector", seed=seed + 1)), False)
    yield "pet/raw", PetModel.create(pet, seed), True
    yield "mlp/raw", MlpBackbone(seed=seed, n_slots=64), True


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-molecules", type=int, default=100)
    ap.add_argument("--n-periodic", type=int, default=20)
    ap.add_argument("--rotations", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/equivariance.csv")
    args = ap.parse_args()

    structs = (make_toy_dataset("ch4_like", args.n_molecules, args.seed)
               + make_toy_dataset("periodic", args.n_periodic, args.seed + 1))
    rows = []
    for name, model, raw in models(args.seed):
        rep = harness.verify_equivariance(model, structs, args.rotations, args.seed, raw=raw)
        rows.append((name, rep.max_discrepancy, rep.fraction_above(1e-6), rep.passed))
        print(f"{name:18s} max {rep.max_discrepancy:.3e}  >1e-6 on {100 * rep.fraction_above(1e-6):.1f}%",
              flush=True)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    harness.write_csv(args.out, ("model", "max_discrepancy", "fraction_above_1e-6", "passed"), rows)


if __name__ == "__main__":
    main()
