"""Command line entry point: ``ecse <subcommand> [options]``.

Exit codes: 0 pass, 1 invariant failure, 2 input error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness
from .backbones import MlpBackbone, PetModel, PetShape, RadialAux, pet2body
from .backbones.checkpoint import CheckpointError, load_pet, save_pet
from .structures import XYZParseError, parse_xyz, write_xyz
from .symmetrize import PRESETS, EcseConfig, SymmetrizedModel, preset
from .training import DATASETS, TrainOptions, make_toy_dataset, train_toy

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _config(args) -> EcseConfig:
    cfg = preset(args.preset)
    if args.config:
        try:
            cfg = EcseConfig.load(args.config, base=cfg)
        except (OSError, ValueError) as err:
            raise InputError(f"config {args.config}: {err}") from None
    return cfg


def _backbone(args):
    shape = PetShape(output=getattr(args, "output", "scalar"))
    if args.checkpoint:
        try:
            return load_pet(args.checkpoint)
        except (OSError, CheckpointError, ValueError) as err:
            raise InputError(f"checkpoint {args.checkpoint}: {err}") from None
    if args.backbone == "mlp":
        return MlpBackbone(output=shape.output, n_slots=64, seed=args.seed)
    if args.backbone == "pet":
        return PetModel.create(shape, args.seed)
    return pet2body(shape, args.seed)


def _aux(backbone, seed):
    if isinstance(backbone, PetModel):
        if backbone.rank:
            return RadialAux(species=backbone.shape.species, output="vector", seed=seed + 1)
        return pet2body(backbone.shape, seed + 1)
    return RadialAux(species=backbone.species, output=backbone.output, seed=seed + 1)


def _model(args, cfg=None):
    bb = _backbone(args)
    return SymmetrizedModel(bb, cfg or _config(args), _aux(bb, args.seed))


def _structures(args):
    if getattr(args, "xyz", None):
        try:
            return parse_xyz(Path(args.xyz).read_text())
        except (OSError, XYZParseError) as err:
            raise InputError(f"{args.xyz}: {err}") from None
    return make_toy_dataset(args.dataset, args.n, args.seed)


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_verify_equivariance(args) -> int:
    structs = _structures(args)
    model = _model(args)
    rep = harness.verify_equivariance(model, structs, args.rotations, args.seed, args.tol)
    raw = harness.verify_equivariance(model.backbone, structs, args.rotations, args.seed, raw=True)
    _emit(rep.to_csv(), args.out)
    print(f"symmetrized max discrepancy {rep.max_discrepancy:.3e} (tol {args.tol:g}); "
          f"raw backbone {raw.max_discrepancy:.3e}", file=sys.stderr)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_verify_smoothness(args) -> int:
    structs = _structures(args)
    amps = sorted(float(a) for a in args.amplitudes.split(","))
    model = _model(args)
    rep = harness.verify_smoothness(model, structs, amps, args.perturbations, args.seed)
    _emit(rep.to_csv(), args.out)
    print(f"slope {rep.slope:.4f}, spikes {len(rep.spikes())}, max spike ratio {rep.max_spike_ratio:.3g}",
          file=sys.stderr)
    return EXIT_OK if rep.passed() else EXIT_FAIL


def cmd_fd_forces(args) -> int:
    structs = _structures(args)
    model = _model(args)
    rows = []
    ok = True
    for sid, s in enumerate(structs):
        F = harness.fd_forces(model, s, args.h)
        ok &= bool(np.linalg.norm(F.sum(0)) <= 1e-6)
        rows += [(sid, i, *map(float, F[i])) for i in range(s.n_atoms)]
    _emit(harness.write_csv(None, ("structure_id", "atom", "fx", "fy", "fz"), rows), args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_sweep_tradeoff(args) -> int:
    structs = _structures(args)
    bb = _backbone(args)
    aux = _aux(bb, args.seed)
    rows = harness.sweep_tradeoff(lambda cfg: SymmetrizedModel(bb, cfg, aux), structs, dict(PRESETS),
                                  n_perturbations=args.perturbations, seed=args.seed)
    _emit(harness.write_csv(None, harness.TRADEOFF_HEADER, rows), args.out)
    by = {r[0]: r for r in rows}
    ok = by["tight"][1] < by["loose"][1] and all(r[4] <= 1e-10 for r in rows)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train_toy(args) -> int:
    opts = TrainOptions(lr=args.lr, epochs=args.epochs, seed=args.seed)
    if args.config:
        try:
            opts = TrainOptions.from_text(Path(args.config).read_text(), base=opts)
        except (OSError, ValueError) as err:
            raise InputError(f"config {args.config}: {err}") from None
    train = make_toy_dataset("ch4_like", args.n_train, args.seed)
    val = make_toy_dataset("ch4_like", args.n_val, args.seed + 1)
    model = PetModel.create(PetShape(), args.seed)
    res = train_toy(model, train, val, opts)
    _emit(res.history_csv(), args.out)
    if args.save:
        model.weights = res.weights
        save_pet(args.save, model)
    first, best = res.history[0]["val_E_rmse"], min(h["val_E_rmse"] for h in res.history)
    print(f"val E rmse {first:.4f} -> {best:.4f} (best epoch {res.best_epoch})", file=sys.stderr)
    return EXIT_OK


def cmd_symmetrize(args) -> int:
    structs = _structures(args)
    model = _model(args)
    rows = []
    for sid, s in enumerate(structs):
        y = model(s).values
        rows.append((sid, *map(float, np.ravel(y))))
    n = len(rows[0]) - 1 if rows else 1
    header = ("structure_id", "value") if n == 1 else ("structure_id",) + tuple(f"y{k}" for k in range(n))
    _emit(harness.write_csv(None, header, rows), args.out)
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    _emit(write_xyz(make_toy_dataset(args.dataset, args.n, args.seed)), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value overrides on top of the preset")
        sp.add_argument("--preset", default="loose", choices=sorted(PRESETS))
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="CSV/XYZ output path (default stdout)")
        sp.add_argument("--backbone", default="pet", choices=("mlp", "pet", "pet2body"))
        sp.add_argument("--checkpoint", help="PET parameter file")
        if data:
            sp.add_argument("--xyz", help="extended XYZ input instead of a generated dataset")
            sp.add_argument("--dataset", default="ch4_like", choices=DATASETS)
            sp.add_argument("--n", type=int, default=10)

    sp = sub.add_parser("verify-equivariance")
    common(sp)
    sp.add_argument("--rotations", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--output", default="scalar", choices=("scalar", "vector"))
    sp.set_defaults(func=cmd_verify_equivariance)

    sp = sub.add_parser("verify-smoothness")
    common(sp)
    sp.add_argument("--amplitudes", default=",".join(str(a) for a in harness.DEFAULT_AMPLITUDES))
    sp.add_argument("--perturbations", type=int, default=50)
    sp.set_defaults(func=cmd_verify_smoothness)

    sp = sub.add_parser("fd-forces")
    common(sp)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.set_defaults(func=cmd_fd_forces)

    sp = sub.add_parser("sweep-tradeoff")
    common(sp)
    sp.add_argument("--perturbations", type=int, default=10)
    sp.set_defaults(func=cmd_sweep_tradeoff)

    sp = sub.add_parser("train-toy")
    common(sp, data=False)
    sp.add_argument("--n-train", type=int, default=200)
    sp.add_argument("--n-val", type=int, default=50)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--save", help="write the best parameters here")
    sp.set_defaults(func=cmd_train_toy)

    sp = sub.add_parser("symmetrize")
    common(sp)
    sp.add_argument("--output", default="scalar", choices=("scalar", "vector"))
    sp.set_defaults(func=cmd_symmetrize)

    sp = sub.add_parser("gen-dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_dataset)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
