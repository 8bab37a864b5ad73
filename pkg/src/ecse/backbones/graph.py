"""Padded neighbor-slot layout used by the message-passing backbone."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..smoothmath import fc
from ..structures import Structure, neighbor_list


@dataclass(frozen=True)
class PaddedGraph:
    """Neighbors of each atom packed into ``M`` slots.

    ``rev[i, a]`` is the flat slot index (into ``N*M``) of the reverse edge, so the
    message travelling j -> i is read from slot ``rev[i, a]`` of atom j's list.
    Only pairs with a strictly positive cutoff gate get a slot.
    """

    species: np.ndarray  # (N,) atomic numbers
    nbr: np.ndarray  # (N, M)
    mask: np.ndarray  # (N, M) bool
    disp: np.ndarray  # (N, M, 3)
    rev: np.ndarray  # (N, M)
    attribute: Optional[np.ndarray] = None  # (N,)
    owner: Optional[np.ndarray] = None  # (N,) structure index for unions
    n_structures: int = 1

    @property
    def n_atoms(self) -> int:
        return self.nbr.shape[0]

    @property
    def n_slots(self) -> int:
        return self.nbr.shape[1]

    def slot_counts(self) -> np.ndarray:
        return self.mask.sum(1)

    def rotated_disp(self, rotations) -> np.ndarray:
        """(K, 3, 3) rotations -> (K, N, M, 3) displacement batch."""
        return np.einsum("kab,nmb->knma", rotations, self.disp)

    def displaced(self, atom: int, vector) -> np.ndarray:
        """Displacements after moving one atom by ``vector`` (periodic images move too)."""
        v = np.asarray(vector, dtype=float)
        d = self.disp.copy()
        d[(self.nbr == atom) & self.mask] += v
        d[atom][self.mask[atom]] -= v
        return d


def build_graph(s: Structure, r_c: float, delta_rc: float) -> PaddedGraph:
    nl = neighbor_list(s, r_c)
    gate = fc(nl.distances, r_c, delta_rc) if len(nl.centers) else np.zeros(0)
    keep = np.asarray(gate) > 0
    centers, nbrs = nl.centers[keep], nl.neighbors[keep]
    shifts, disp = nl.shifts[keep], nl.displacements[keep]
    n = s.n_atoms
    counts = np.bincount(centers, minlength=n)
    M = max(int(counts.max()) if n else 0, 1)
    nbr = np.zeros((n, M), dtype=int)
    mask = np.zeros((n, M), dtype=bool)
    dsp = np.zeros((n, M, 3))
    slot_of = {}
    fill = np.zeros(n, dtype=int)
    for p in range(len(centers)):
        i = centers[p]
        a = fill[i]
        fill[i] += 1
        nbr[i, a] = nbrs[p]
        mask[i, a] = True
        dsp[i, a] = disp[p]
        slot_of[(i, nbrs[p], tuple(shifts[p]))] = i * M + a
    rev = np.arange(n * M).reshape(n, M)
    for p in range(len(centers)):
        i, j = centers[p], nbrs[p]
        rev.flat[slot_of[(i, j, tuple(shifts[p]))]] = slot_of[(j, i, tuple(-shifts[p]))]
    return PaddedGraph(
        species=s.species.copy(),
        nbr=nbr,
        mask=mask,
        disp=dsp,
        rev=rev,
        attribute=None if s.attribute is None else s.attribute.copy(),
        owner=np.zeros(n, dtype=int),
        n_structures=1,
    )


def union(graphs: list[PaddedGraph]) -> PaddedGraph:
    """Disjoint union, used to batch structures through one forward pass."""
    M = max(g.n_slots for g in graphs)
    N = sum(g.n_atoms for g in graphs)
    nbr = np.zeros((N, M), dtype=int)
    mask = np.zeros((N, M), dtype=bool)
    disp = np.zeros((N, M, 3))
    rev = np.arange(N * M).reshape(N, M)
    owner = np.zeros(N, dtype=int)
    has_attr = graphs[0].attribute is not None
    attr = np.zeros(N) if has_attr else None
    species = np.zeros(N, dtype=int)
    off = 0
    for k, g in enumerate(graphs):
        n, m = g.n_atoms, g.n_slots
        sl = slice(off, off + n)
        nbr[sl, :m] = g.nbr + off
        mask[sl, :m] = g.mask
        disp[sl, :m] = g.disp
        ri, ra = np.divmod(g.rev, m)
        block = (ri + off) * M + ra
        rev[sl, :m] = np.where(g.mask, block, rev[sl, :m])
        owner[sl] = k
        species[sl] = g.species
        if has_attr:
            attr[sl] = g.attribute
        off += n
    return PaddedGraph(species, nbr, mask, disp, rev, attr, owner, len(graphs))
