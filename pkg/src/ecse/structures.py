"""Point-cloud data model, extended-XYZ I/O, neighbor lists and atomic environments."""

from __future__ import annotations

import io
import itertools
import shlex
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

D_MIN = 1e-3

# Index = atomic number, so species are small nonnegative integers.
ELEMENTS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn"
).split()
SYMBOL_TO_SPECIES = {s: i for i, s in enumerate(ELEMENTS)}


class XYZParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class CollidingPointsError(ValueError):
    """Two points (or a point and a periodic image) closer than d_min."""


@dataclass(frozen=True, eq=False)
class Structure:
    positions: np.ndarray
    species: np.ndarray
    attribute: Optional[np.ndarray] = None
    cell: Optional[np.ndarray] = None
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", pos)
        sp = np.asarray(self.species, dtype=int).reshape(-1)
        if sp.shape[0] != pos.shape[0] or np.any(sp < 0):
            raise ValueError("species must be nonnegative, one per atom")
        object.__setattr__(self, "species", sp)
        if self.attribute is not None:
            object.__setattr__(self, "attribute", np.asarray(self.attribute, dtype=float).reshape(-1))
        if self.cell is not None:
            cell = np.asarray(self.cell, dtype=float).reshape(3, 3)
            if abs(np.linalg.det(cell)) < 1e-12:
                raise ValueError("cell is singular")
            object.__setattr__(self, "cell", cell)
        if self.forces is not None:
            object.__setattr__(self, "forces", np.asarray(self.forces, dtype=float).reshape(-1, 3))

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    @property
    def periodic(self) -> bool:
        return self.cell is not None

    def rotated(self, rotation) -> "Structure":
        """Apply ``rotation`` to positions, cell vectors and forces."""
        R = np.asarray(rotation, dtype=float)
        return replace(
            self,
            positions=self.positions @ R.T,
            cell=None if self.cell is None else self.cell @ R.T,
            forces=None if self.forces is None else self.forces @ R.T,
        )

    def translated(self, shift) -> "Structure":
        return replace(self, positions=self.positions + np.asarray(shift, dtype=float))

    def with_positions(self, positions) -> "Structure":
        return replace(self, positions=positions)

    def permuted(self, order) -> "Structure":
        order = np.asarray(order)
        return replace(
            self,
            positions=self.positions[order],
            species=self.species[order],
            attribute=None if self.attribute is None else self.attribute[order],
            forces=None if self.forces is None else self.forces[order],
        )


@dataclass(frozen=True)
class AtomicEnvironment:
    center_index: int
    displacements: np.ndarray
    distances: np.ndarray
    neighbor_species: np.ndarray
    center_species: int
    neighbor_attributes: Optional[np.ndarray] = None
    center_attribute: Optional[float] = None

    @property
    def n_neighbors(self) -> int:
        return self.displacements.shape[0]

    def with_displacements(self, displacements) -> "AtomicEnvironment":
        d = np.asarray(displacements, dtype=float).reshape(-1, 3)
        return replace(self, displacements=d, distances=np.linalg.norm(d, axis=1))

    def rotated(self, rotation) -> "AtomicEnvironment":
        return self.with_displacements(self.displacements @ np.asarray(rotation).T)

    def with_neighbor(self, displacement, species: int, attribute: float = 0.0) -> "AtomicEnvironment":
        d = np.vstack([self.displacements, np.asarray(displacement, dtype=float).reshape(1, 3)])
        attrs = None
        if self.neighbor_attributes is not None:
            attrs = np.append(self.neighbor_attributes, attribute)
        return replace(
            self,
            displacements=d,
            distances=np.linalg.norm(d, axis=1),
            neighbor_species=np.append(self.neighbor_species, species),
            neighbor_attributes=attrs,
        )


def make_environment(displacements, neighbor_species=None, center_species: int = 0,
                     neighbor_attributes=None, center_attribute=None) -> AtomicEnvironment:
    """Build an environment directly from displacement vectors."""
    d = np.asarray(displacements, dtype=float).reshape(-1, 3)
    if neighbor_species is None:
        neighbor_species = np.zeros(len(d), dtype=int)
    return AtomicEnvironment(
        center_index=0,
        displacements=d,
        distances=np.linalg.norm(d, axis=1),
        neighbor_species=np.asarray(neighbor_species, dtype=int),
        center_species=int(center_species),
        neighbor_attributes=None if neighbor_attributes is None else np.asarray(neighbor_attributes, float),
        center_attribute=center_attribute,
    )


@dataclass(frozen=True)
class NeighborList:
    """Flat directed pair list; pair ``p`` points from ``centers[p]`` to ``neighbors[p]``."""

    centers: np.ndarray
    neighbors: np.ndarray
    shifts: np.ndarray
    displacements: np.ndarray
    r_c: float

    @property
    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.displacements, axis=1)

    def of(self, i: int):
        sel = self.centers == i
        return self.neighbors[sel], self.shifts[sel], self.displacements[sel]


def _shift_ranges(cell, frac_diff_min, frac_diff_max, r_c):
    # lattice planes of family k are 1/|b_k| apart, b = rows of inv(cell).T
    recip = np.linalg.inv(cell).T
    reach = r_c * np.linalg.norm(recip, axis=1)
    lo = np.floor(-reach - frac_diff_max).astype(int)
    hi = np.ceil(reach - frac_diff_min).astype(int)
    return [range(lo[k], hi[k] + 1) for k in range(3)]


def neighbor_list(s: Structure, r_c: float, d_min: float = D_MIN) -> NeighborList:
    """All directed pairs with |displacement| <= r_c, periodic images included.

    Brute force over every atom pair and every lattice shift that can reach r_c.
    """
    if not r_c > 0 or not np.isfinite(r_c):
        raise ValueError("r_c must be positive and finite")
    pos = s.positions
    n = s.n_atoms
    diff = pos[None, :, :] - pos[:, None, :]  # diff[i, j] = r_j - r_i
    if s.cell is None:
        shifts = np.zeros((1, 3), dtype=int)
    else:
        frac = pos @ np.linalg.inv(s.cell)
        fd = frac[None, :, :] - frac[:, None, :]
        ranges = _shift_ranges(s.cell, fd.reshape(-1, 3).min(0), fd.reshape(-1, 3).max(0), r_c)
        shifts = np.array(list(itertools.product(*ranges)), dtype=int)
    offsets = shifts @ s.cell if s.cell is not None else np.zeros((1, 3))
    # disp[i, j, k] = r_j - r_i + shift_k . cell
    disp = diff[:, :, None, :] + offsets[None, None, :, :]
    dist = np.linalg.norm(disp, axis=-1)
    self_pair = np.zeros_like(dist, dtype=bool)
    zero_shift = np.all(shifts == 0, axis=1)
    self_pair[np.arange(n), np.arange(n), :] = zero_shift[None, :]
    close = (dist < d_min) & ~self_pair
    if np.any(close):
        i, j, k = np.argwhere(close)[0]
        raise CollidingPointsError(
            f"atoms {i} and {j} (shift {tuple(shifts[k])}) are {dist[i, j, k]:.3g} apart, below d_min={d_min}"
        )
    keep = (dist <= r_c) & ~self_pair
    ii, jj, kk = np.nonzero(keep)
    return NeighborList(
        centers=ii.astype(int),
        neighbors=jj.astype(int),
        shifts=shifts[kk],
        displacements=disp[ii, jj, kk],
        r_c=float(r_c),
    )


def environment(s: Structure, i: int, r_c: float, nl: Optional[NeighborList] = None) -> AtomicEnvironment:
    if not 0 <= i < s.n_atoms:
        raise IndexError(f"atom index {i} out of range for {s.n_atoms} atoms")
    if nl is None or nl.r_c < r_c:
        nl = neighbor_list(s, r_c)
    nbr, _, disp = nl.of(i)
    dist = np.linalg.norm(disp, axis=1)
    sel = dist <= r_c
    nbr, disp, dist = nbr[sel], disp[sel], dist[sel]
    return AtomicEnvironment(
        center_index=i,
        displacements=disp,
        distances=dist,
        neighbor_species=s.species[nbr],
        center_species=int(s.species[i]),
        neighbor_attributes=None if s.attribute is None else s.attribute[nbr],
        center_attribute=None if s.attribute is None else float(s.attribute[i]),
    )


def environments(s: Structure, r_c: float) -> list[AtomicEnvironment]:
    nl = neighbor_list(s, r_c)
    return [environment(s, i, r_c, nl) for i in range(s.n_atoms)]


# --- extended XYZ ---------------------------------------------------------

_PROP_WIDTH = {"S": 1, "R": 1, "I": 1, "L": 1}


def _parse_comment(line: str) -> dict:
    out = {}
    try:
        tokens = shlex.split(line, posix=True)
    except ValueError:
        tokens = line.split()
    for tok in tokens:
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _parse_properties(spec: str, lineno: int):
    parts = spec.split(":")
    if len(parts) % 3:
        raise XYZParseError(lineno, f"malformed Properties={spec!r}")
    cols = []
    for name, kind, width in zip(parts[0::3], parts[1::3], parts[2::3]):
        if kind not in _PROP_WIDTH:
            raise XYZParseError(lineno, f"unknown property type {kind!r}")
        try:
            w = int(width)
        except ValueError as err:
            raise XYZParseError(lineno, f"bad property width {width!r}") from err
        cols.append((name, kind, w))
    return cols


def parse_xyz(text, symbols: Optional[dict] = None) -> list[Structure]:
    """Parse one or more extended-XYZ frames.

    Recognised per-atom columns: ``species``, ``pos``, ``forces`` and an optional
    scalar ``attribute``; comment keys: ``Lattice``, ``Properties``, ``energy``.
    """
    if isinstance(text, (bytes, bytearray)):
        text = text.decode()
    table = dict(SYMBOL_TO_SPECIES)
    if symbols:
        table.update(symbols)
    lines = text.splitlines()
    frames = []
    ln = 0
    while ln < len(lines):
        if not lines[ln].strip():
            ln += 1
            continue
        try:
            n = int(lines[ln].strip())
        except ValueError as err:
            raise XYZParseError(ln + 1, f"expected atom count, got {lines[ln]!r}") from err
        if n < 0:
            raise XYZParseError(ln + 1, "negative atom count")
        if ln + 1 >= len(lines):
            raise XYZParseError(ln + 2, "missing comment line")
        info = _parse_comment(lines[ln + 1])
        if "Properties" in info:
            cols = _parse_properties(info["Properties"], ln + 2)
        else:
            cols = [("species", "S", 1), ("pos", "R", 3)]
        width = sum(w for _, _, w in cols)
        data = {name: [] for name, _, _ in cols}
        for k in range(n):
            row_no = ln + 2 + k
            if row_no >= len(lines):
                raise XYZParseError(row_no + 1, f"expected {n} atom rows, file ended")
            fields = lines[row_no].split()
            if len(fields) != width:
                raise XYZParseError(row_no + 1, f"expected {width} columns, got {len(fields)}")
            c = 0
            for name, kind, w in cols:
                chunk = fields[c:c + w]
                c += w
                if kind == "S":
                    val = chunk[0]
                    if name == "species" and val not in table:
                        raise XYZParseError(row_no + 1, f"unknown element {val!r}")
                    data[name].append(val)
                else:
                    try:
                        data[name].append([float(x) for x in chunk])
                    except ValueError as err:
                        raise XYZParseError(row_no + 1, f"non-numeric value in column {name!r}") from err
        if "species" not in data or "pos" not in data:
            raise XYZParseError(ln + 2, "Properties must include species and pos")
        cell = None
        if "Lattice" in info:
            try:
                cell = np.array([float(x) for x in info["Lattice"].split()]).reshape(3, 3)
            except ValueError as err:
                raise XYZParseError(ln + 2, "Lattice must hold 9 numbers") from err
        energy = float(info["energy"]) if "energy" in info else None
        forces = np.array(data["forces"]).reshape(n, 3) if "forces" in data else None
        attribute = np.array(data["attribute"]).reshape(n) if "attribute" in data else None
        frames.append(
            Structure(
                positions=np.array(data["pos"], dtype=float).reshape(n, 3),
                species=np.array([table[x] for x in data["species"]], dtype=int),
                attribute=attribute,
                cell=cell,
                energy=energy,
                forces=forces,
            )
        )
        ln += 2 + n
    return frames


def write_xyz(structures) -> str:
    if isinstance(structures, Structure):
        structures = [structures]
    buf = io.StringIO()
    for s in structures:
        props = "species:S:1:pos:R:3"
        if s.forces is not None:
            props += ":forces:R:3"
        if s.attribute is not None:
            props += ":attribute:R:1"
        comment = [f"Properties={props}"]
        if s.cell is not None:
            comment.insert(0, 'Lattice="' + " ".join(repr(float(x)) for x in s.cell.ravel()) + '"')
        if s.energy is not None:
            comment.append(f"energy={float(s.energy)!r}")
        buf.write(f"{s.n_atoms}\n{' '.join(comment)}\n")
        for i in range(s.n_atoms):
            row = [ELEMENTS[s.species[i]]] + [repr(float(x)) for x in s.positions[i]]
            if s.forces is not None:
                row += [repr(float(x)) for x in s.forces[i]]
            if s.attribute is not None:
                row.append(repr(float(s.attribute[i])))
            buf.write(" ".join(row) + "\n")
    return buf.getvalue()
