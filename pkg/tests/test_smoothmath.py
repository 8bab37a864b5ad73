import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy.special import lambertw

from ecse.smoothmath import (
    W_INV_E,
    AllZeroWeightsError,
    AngularParams,
    CollinearPairError,
    CutoffParams,
    fc,
    frame_from_pair,
    frames_from_pairs,
    qc,
    qc1,
    qc2,
    smooth_max,
    smooth_max_weighted,
    smooth_min,
    smooth_min_weighted,
    t_of_beta,
)

from .conftest import rotations

finite = st.floats(-50, 50, allow_nan=False)
vec3 = st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3)


# values frozen from a 30-digit mpmath evaluation of the closed forms
@pytest.mark.parametrize(
    "r, expected",
    [
        (0.0, 1.0),
        (3.0, 1.0),
        (3.2, 0.977022630089974378),
        (3.5, 0.5),
        (3.75, 0.064969169128664062),
        (4.0, 0.0),
        (7.0, 0.0),
    ],
)
def test_fc_reference_values(r, expected):
    assert fc(r, 4.0, 1.0) == pytest.approx(expected, abs=1e-15)


def test_qc1_reference_value():
    assert qc1(0.25, 0.1, 0.2) == pytest.approx(0.935030830871335938, abs=1e-15)
    assert qc2(0.25, 0.1, 0.2) == pytest.approx(0.25 * 0.935030830871335938, abs=1e-15)


def test_gates_are_vectorised():
    r = np.linspace(0, 5, 11)
    out = fc(r, 4.0, 1.0)
    assert out.shape == r.shape
    assert np.all(np.diff(out) <= 0)


@given(st.floats(0, 10), st.floats(0.5, 5), st.floats(0.05, 0.5))
def test_fc_range_and_plateaus(r, r_c, frac):
    d = frac * r_c
    v = fc(r, r_c, d)
    assert 0.0 <= v <= 1.0
    if r <= r_c - d:
        assert v == 1.0
    if r >= r_c:
        assert v == 0.0


@given(st.floats(0, 1), st.floats(0, 0.5), st.floats(0.01, 0.5))
def test_qc1_is_mirrored_fc(z, omega, delta):
    # rising gate == 1 - falling gate with the same transition band
    assert qc1(z, omega, delta) == pytest.approx(1.0 - fc(z, omega + delta, delta), abs=1e-14)


def test_qc_dispatch_and_zero_at_collinear():
    assert qc("qc1", 0.0, 0.1, 0.2) == 0.0
    assert qc("qc2", 0.0, 0.0, 0.2) == 0.0
    with pytest.raises(ValueError):
        qc("qc3", 0.5, 0.1, 0.2)


@pytest.mark.parametrize("bad", [(0.0, 0.5), (4.0, 0.0), (4.0, 5.0)])
def test_cutoff_params_validation(bad):
    with pytest.raises(ValueError):
        CutoffParams(*bad)


def test_angular_params_validation():
    AngularParams(0.1, 0.2)
    with pytest.raises(ValueError):
        AngularParams(0.9, 0.2)
    with pytest.raises(ValueError):
        AngularParams(-0.1, 0.2)


def test_t_of_beta_matches_lambert_oracle():
    oracle = float(lambertw(math.exp(-1)).real)
    assert W_INV_E == pytest.approx(oracle, abs=1e-14)
    assert t_of_beta(1.0) == pytest.approx(0.278465, abs=1e-5)
    assert t_of_beta(4.0) == pytest.approx(oracle / 4, abs=1e-15)


def test_smooth_max_reference():
    assert smooth_max([1.0, 2.0], 3.0) == pytest.approx(1.952574126822433219, abs=1e-14)


@given(st.lists(finite, min_size=1, max_size=12), st.floats(0.1, 30))
def test_smooth_max_min_bounds(xs, beta):
    m = smooth_max(xs, beta)
    assert min(xs) - 1e-9 <= m <= max(xs) + 1e-9
    n = smooth_min(xs, beta)
    assert min(xs) - 1e-9 <= n <= max(xs) + 1e-9


@given(finite, finite, st.floats(0.1, 30))
def test_pair_slack_bound(a, b, beta):
    assert smooth_max([a, b], beta) + t_of_beta(beta) >= max(a, b) - 1e-12


def test_smooth_max_extreme_values_are_stable():
    assert smooth_max([1000.0, -1000.0], 50.0) == 1000.0
    assert smooth_min([1000.0, -1000.0], 50.0) == -1000.0


@given(st.lists(finite, min_size=1, max_size=8), st.lists(st.floats(0.01, 5), min_size=8, max_size=8),
       finite, st.floats(0.1, 20))
def test_zero_weight_entries_are_bit_identical(xs, ps, extra, beta):
    ps = ps[: len(xs)]
    base = smooth_max_weighted(xs, ps, beta)
    assert smooth_max_weighted(xs + [extra], ps + [0.0], beta) == base
    base = smooth_min_weighted(xs, ps, beta)
    assert smooth_min_weighted([extra] + xs, [0.0] + ps, beta) == base


def test_all_zero_weights_raise():
    with pytest.raises(AllZeroWeightsError):
        smooth_max_weighted([1.0, 2.0], [0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        smooth_max_weighted([1.0], [-1.0], 1.0)


def test_frame_orientation():
    R = frame_from_pair([2.0, 0, 0], [1.0, 1.0, 0]).rotation
    # rows: v1, v1 x v2, v1 x (v1 x v2)
    assert np.allclose(R, [[1, 0, 0], [0, 0, 1], [0, -1, 0]])
    assert np.allclose(R @ [2.0, 0, 0], [2, 0, 0])


@given(vec3, vec3)
def test_frames_are_proper_and_covariant(a, b):
    a, b = np.array(a), np.array(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    assume(na > 1e-3 and nb > 1e-3 and np.linalg.norm(np.cross(a / na, b / nb)) > 1e-3)
    R = frame_from_pair(a, b).rotation
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    for Q in rotations(3, seed=int(abs(a[0]) * 1000) % 97):
        R2 = frame_from_pair(Q @ a, Q @ b).rotation
        assert np.allclose(R2, R @ Q.T, atol=1e-10)


def test_collinear_pair_rejected():
    with pytest.raises(CollinearPairError):
        frame_from_pair([1.0, 0, 0], [-3.0, 0, 0])
    with pytest.raises(CollinearPairError):
        frames_from_pairs(np.array([[1.0, 0, 0]]), np.array([[0.0, 0, 0]]))
