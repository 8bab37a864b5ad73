import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecse.structures import (
    CollidingPointsError,
    Structure,
    XYZParseError,
    environment,
    environments,
    make_environment,
    neighbor_list,
    parse_xyz,
    write_xyz,
)

from .conftest import rotations


def brute_pairs(s, r_c, reach=3):
    """Independent oracle: loop over a generous fixed block of lattice shifts."""
    out = set()
    shifts = [(0, 0, 0)] if s.cell is None else itertools.product(range(-reach, reach + 1), repeat=3)
    shifts = list(shifts)
    for i in range(s.n_atoms):
        for j in range(s.n_atoms):
            for sh in shifts:
                if i == j and sh == (0, 0, 0):
                    continue
                off = np.zeros(3) if s.cell is None else np.array(sh) @ s.cell
                d = s.positions[j] - s.positions[i] + off
                if np.linalg.norm(d) <= r_c:
                    out.add((i, j, tuple(int(x) for x in sh)))
    return out


def listed_pairs(nl):
    return {(int(i), int(j), tuple(int(x) for x in k)) for i, j, k in zip(nl.centers, nl.neighbors, nl.shifts)}


def test_molecule_neighbor_list():
    s = Structure(np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 2.5, 0]]), np.array([6, 1, 1]))
    nl = neighbor_list(s, 2.0)
    assert listed_pairs(nl) == {(0, 1, (0, 0, 0)), (1, 0, (0, 0, 0))}
    assert np.allclose(nl.distances, 1.0)


@pytest.mark.parametrize("seed", range(4))
def test_periodic_neighbor_list_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    cell = np.diag([3.0, 3.5, 4.0]) + rng.uniform(-0.6, 0.6, (3, 3))
    pos = rng.random((4, 3)) @ cell
    s = Structure(pos, np.array([1, 6, 1, 6]), cell=cell)
    nl = neighbor_list(s, 4.5, d_min=0.0)
    assert listed_pairs(nl) == brute_pairs(s, 4.5)
    d = pos[nl.neighbors] - pos[nl.centers] + nl.shifts @ cell
    assert np.allclose(d, nl.displacements)


def test_small_cell_sees_own_images():
    s = Structure(np.zeros((1, 3)), np.array([1]), cell=np.eye(3) * 2.0)
    nl = neighbor_list(s, 2.0)
    assert len(nl.centers) == 6
    assert np.allclose(nl.distances, 2.0)


def test_boundary_inclusive_and_colliding():
    s = Structure(np.array([[0.0, 0, 0], [2.0, 0, 0]]), np.array([1, 1]))
    assert len(neighbor_list(s, 2.0).centers) == 2
    with pytest.raises(CollidingPointsError):
        neighbor_list(Structure(np.zeros((2, 3)), np.array([1, 1])), 2.0)


def test_structure_validation():
    with pytest.raises(ValueError):
        Structure(np.array([[np.nan, 0, 0]]), np.array([1]))
    with pytest.raises(ValueError):
        Structure(np.zeros((1, 3)), np.array([1]), cell=np.zeros((3, 3)))


def test_environment_index_error(ch4_set):
    with pytest.raises(IndexError):
        environment(ch4_set[0], 7, 4.0)


def test_environments_rotate_with_structure(ch4_set):
    s = ch4_set[0]
    R = rotations(1, seed=3)[0]
    for a, b in zip(environments(s, 4.0), environments(s.rotated(R), 4.0)):
        assert np.allclose(b.displacements, a.displacements @ R.T)
        assert np.allclose(b.distances, a.distances)


def test_with_neighbor_appends():
    env = make_environment([[1.0, 0, 0]], [1], 6)
    env2 = env.with_neighbor([0, 4.0, 0], 1)
    assert env2.n_neighbors == 2 and env2.distances[-1] == 4.0


def test_xyz_round_trip_is_exact(ch4_set, periodic_set):
    frames = list(ch4_set[:2]) + list(periodic_set[:1])
    back = parse_xyz(write_xyz(frames))
    assert len(back) == 3
    for a, b in zip(frames, back):
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.species, b.species)
        assert a.energy == b.energy
        assert np.array_equal(a.forces, b.forces)
        assert (a.cell is None) == (b.cell is None)
        if a.cell is not None:
            assert np.array_equal(a.cell, b.cell)


def test_xyz_plain_and_attribute_columns():
    text = "2\nProperties=species:S:1:pos:R:3:attribute:R:1 energy=-1.5\nH 0 0 0 0.5\nO 0 0 1 -0.5\n"
    (s,) = parse_xyz(text)
    assert s.energy == -1.5 and list(s.species) == [1, 8]
    assert np.allclose(s.attribute, [0.5, -0.5])
    (p,) = parse_xyz("1\nplain comment\nC 1 2 3\n")
    assert p.energy is None and np.allclose(p.positions, [[1, 2, 3]])


@pytest.mark.parametrize(
    "text, line",
    [
        ("x\n\n", 1),
        ("2\ncomment\nH 0 0 0\n", 4),
        ("1\ncomment\nXx 0 0 0\n", 3),
        ("1\ncomment\nH 0 zero 0\n", 3),
        ("1\ncomment\nH 0 0\n", 3),
        ('1\nLattice="1 0 0" Properties=species:S:1:pos:R:3\nH 0 0 0\n', 2),
    ],
)
def test_xyz_errors_carry_line_numbers(text, line):
    with pytest.raises(XYZParseError) as err:
        parse_xyz(text)
    assert err.value.lineno == line


@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_translation_leaves_environments_unchanged(vals):
    pos = np.array(vals).reshape(2, 3)
    if np.linalg.norm(pos[0] - pos[1]) < 1e-2:
        return
    s = Structure(pos, np.array([1, 6]))
    t = s.translated([0.3, -1.0, 2.0])
    for a, b in zip(environments(s, 5.0), environments(t, 5.0)):
        assert np.allclose(a.displacements, b.displacements)
