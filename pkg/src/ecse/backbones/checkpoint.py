"""Flat parameter checkpoints.

Byte layout (all little-endian):

    offset 0   8 bytes   magic b"ECSEPRM1"
    offset 8   4 bytes   uint32 header length H
    offset 12  H bytes   UTF-8 JSON header {"kind", "shape", "seed", "n_params"}
    offset 12+H          n_params float64 values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ECSEPRM1"


class CheckpointError(ValueError):
    pass


def save_params(path, kind: str, shape: dict, seed: int, weights: np.ndarray) -> None:
    weights = np.ascontiguousarray(weights, dtype="<f8")
    header = json.dumps({"kind": kind, "shape": shape, "seed": int(seed), "n_params": int(weights.size)}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(weights.tobytes())


def load_params(path):
    """Return ``(header_dict, weights)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode())
    weights = np.frombuffer(raw[12 + hlen:], dtype="<f8").astype(float)
    if weights.size != header["n_params"]:
        raise CheckpointError(f"{path}: expected {header['n_params']} values, found {weights.size}")
    return header, weights


def save_pet(path, model) -> None:
    save_params(path, "pet", model.shape.to_dict(), model.seed, model.weights)


def load_pet(path):
    from .pet import PetModel, PetShape

    header, weights = load_params(path)
    if header["kind"] != "pet":
        raise CheckpointError(f"{path}: not a PET checkpoint ({header['kind']})")
    return PetModel(PetShape.from_dict(header["shape"]), weights, header["seed"])
