from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

KINDS = ("scalar", "vector", "tensor")


def output_shape(rank: int) -> tuple:
    return (3,) * rank


@dataclass
class Prediction:
    """A model output together with how it transforms under rotation.

    ``values`` has shape ``(3,) * rank``; ``per_atom``, when present, carries one
    such block per atom and sums to ``values``.
    """

    kind: str
    values: np.ndarray
    per_atom: Optional[np.ndarray] = None
    rank: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prediction kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=float)
        if self.rank is None:
            self.rank = {"scalar": 0, "vector": 1}.get(self.kind, self.values.ndim)
        if self.kind == "scalar":
            self.values = self.values.reshape(())

    def rotate(self, R) -> np.ndarray:
        """Values after applying rotation ``R`` on every tensor index."""
        return rotate_tensor(self.values, R, self.rank)


def rotate_tensor(t, R, rank: int):
    t = np.asarray(t, dtype=float)
    for axis in range(rank):
        t = np.moveaxis(np.tensordot(R, t, axes=([1], [axis])), 0, axis)
    return t


def back_rotate(values, rotations, rank: int):
    """Map per-frame outputs back to the global basis.

    ``values``: (K, ...) expressed in frame k whose rows are ``rotations[k]``;
    every tensor index is contracted with ``rotations[k]`` (i.e. R^T y).
    """
    out = np.asarray(values, dtype=float)
    lead = out.ndim - rank
    for axis in range(rank):
        ax = lead + axis
        # out_{..a..} = sum_b R[k, b, a] * out_{..b..}
        out = np.moveaxis(out, ax, -1)
        out = np.einsum("k...b,kba->k...a", out, rotations)
        out = np.moveaxis(out, -1, ax)
    return out
