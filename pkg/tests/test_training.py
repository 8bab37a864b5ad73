import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecse.backbones import PetModel
from ecse.structures import Structure
from ecse.training import (
    Adam,
    LossState,
    PairPotential,
    TrainOptions,
    _batch_loss_grad,
    bag_of_atoms,
    fit_self_contributions,
    loss,
    make_toy_dataset,
    model_forces,
    quaternion_to_matrix,
    random_rotation,
    train_toy,
    update_normalizers,
)

from .conftest import SMALL_PET, rotations


def test_bag_of_atoms_water():
    water = Structure(np.array([[0.0, 0, 0], [0.96, 0, 0], [-0.24, 0.93, 0]]), np.array([8, 1, 1]))
    assert list(bag_of_atoms(water, (1, 6, 8))) == [2, 0, 1]


def test_exactly_linear_energies_fit_to_zero_residual():
    coef = {1: -0.5, 6: -37.8, 8: -75.1}
    rng = np.random.default_rng(0)
    data = []
    for _ in range(12):
        sp = rng.choice([1, 6, 8], int(rng.integers(2, 7)))
        pos = np.arange(len(sp))[:, None] * np.array([1.0, 0, 0])
        data.append(Structure(pos, sp, energy=float(sum(coef[z] for z in sp))))
    sc = fit_self_contributions(data)
    assert np.max(np.abs(sc.remove(data))) <= 1e-8
    assert np.allclose(sc.coefficients, [coef[1], coef[6], coef[8]], atol=1e-10)


def test_self_contribution_round_trip():
    data = make_toy_dataset("ch4_like", 5, seed=1)
    sc = fit_self_contributions(data, fit_intercept=True)
    back = sc.add(data, sc.remove(data))
    assert np.allclose(back, [s.energy for s in data], atol=1e-12, rtol=0)


def test_residuals_orthogonal_to_counts():
    data = make_toy_dataset("ch4_like", 8, seed=2) + make_toy_dataset("periodic", 4, seed=3)
    sc = fit_self_contributions(data, species=(1, 6))
    X = np.array([bag_of_atoms(s, (1, 6)) for s in data])
    assert np.allclose(X.T @ sc.remove(data), 0.0, atol=1e-8)


def test_fit_needs_energies():
    with pytest.raises(ValueError):
        fit_self_contributions([Structure(np.zeros((1, 3)), np.array([1]))])


# -- loss -------------------------------------------------------------------------

def test_loss_reference_values():
    st0 = LossState()
    assert loss(1.0, 1.0, np.zeros(6), np.zeros(6), 2, st0) == 0.0
    assert loss(3.0, 1.0, np.zeros(6), np.zeros(6), 2, st0) == pytest.approx(0.4, abs=1e-15)
    assert loss(3.0, 1.0, None, None, 4, st0, per_atom_energy=True) == pytest.approx(0.1 * 0.25, abs=1e-15)


def test_doubling_force_normaliser_halves_force_term():
    f = np.arange(6.0)
    a = loss(0.0, 0.0, f, np.zeros(6), 2, LossState(mse_f=1.0))
    b = loss(0.0, 0.0, f, np.zeros(6), 2, LossState(mse_f=2.0))
    assert b == pytest.approx(a / 2, rel=1e-15)


def test_loss_is_rotation_invariant():
    rng = np.random.default_rng(3)
    pf, tf = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    R = rotations(1, 1)[0]
    st0 = LossState(mse_e=0.7, mse_f=1.3)
    assert loss(1.0, 0.2, pf @ R.T, tf @ R.T, 4, st0) == pytest.approx(loss(1.0, 0.2, pf, tf, 4, st0), abs=1e-12)


def test_loss_rejects_bad_inputs():
    with pytest.raises(ValueError):
        loss(0, 0, None, None, 1, LossState(mse_e=0.0))
    with pytest.raises(ValueError):
        loss(0, 0, np.zeros(3), np.zeros(3), 2, LossState())


def test_ema_update():
    st0 = LossState(mse_e=1.0, mse_f=2.0)
    assert update_normalizers(st0, 1e-300, 2.0).mse_e == pytest.approx(0.9, abs=1e-15)
    assert update_normalizers(st0, 1.0, 2.0) == st0
    s = st0
    for _ in range(400):
        s = update_normalizers(s, 0.25, 0.5)
    assert s.mse_e == pytest.approx(0.25, abs=1e-12) and s.mse_f == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        update_normalizers(st0, 0.0, 1.0)


# -- rotations --------------------------------------------------------------------

@given(st.integers(0, 2**32 - 1))
def test_random_rotation_is_proper(seed):
    R = random_rotation(np.random.default_rng(seed)).rotation
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_rotation_trace_has_zero_mean():
    # the l=1 representation has no invariant component under Haar measure
    q = np.random.default_rng(0).standard_normal((4, 10**6))
    q /= np.linalg.norm(q, axis=0)
    M = quaternion_to_matrix(q)
    assert abs(np.mean(M[0, 0] + M[1, 1] + M[2, 2])) < 0.01
    rng = np.random.default_rng(1)
    tr = [np.trace(random_rotation(rng).rotation) for _ in range(20000)]
    assert abs(np.mean(tr)) < 0.03


def test_rotation_sequence_reproducible():
    a = [random_rotation(np.random.default_rng(5)).rotation for _ in range(2)]
    assert np.array_equal(a[0], a[1])


# -- datasets and potential -------------------------------------------------------

def test_ch4_like_respects_close_contact_filter():
    for s in make_toy_dataset("ch4_like", 50, seed=4):
        d = np.linalg.norm(s.positions[:, None] - s.positions[None], axis=-1)
        assert d[np.triu_indices(5, 1)].min() >= 0.5
        assert np.max(np.linalg.norm(s.positions, axis=1)) <= 3.5
        assert sorted(s.species) == [1, 1, 1, 1, 6]


@pytest.mark.parametrize("kind", ["ch4_like", "periodic", "dimer_sweep"])
def test_pair_potential_forces_match_finite_differences(kind):
    pot = PairPotential()
    h = 1e-5
    for s in make_toy_dataset(kind, 3, seed=5):
        F = np.zeros_like(s.positions)
        for i in range(s.n_atoms):
            for c in range(3):
                p = s.positions.copy()
                p[i, c] += h
                ep = pot.energy(s.with_positions(p))
                p[i, c] -= 2 * h
                F[i, c] = -(ep - pot.energy(s.with_positions(p))) / (2 * h)
        assert np.allclose(s.forces, F, atol=1e-9, rtol=0)
        assert np.abs(s.forces.sum(0)).max() < 1e-12


def test_collinear_family_is_collinear():
    for s in make_toy_dataset("collinear_family", 10, seed=6):
        x = s.positions - s.positions[0]
        u = x[1:] / np.linalg.norm(x[1:], axis=1)[:, None]
        c = np.cross(u[:, None], u[None])
        assert np.max(np.sum(c * c, axis=-1)) < 1e-6


def test_dimer_sweep_crosses_the_cutoff():
    r = [np.linalg.norm(s.positions[1] - s.positions[0]) for s in make_toy_dataset("dimer_sweep", 20)]
    assert min(r) < 3.0 < 4.0 < max(r)


def test_unknown_dataset_rejected():
    with pytest.raises(ValueError):
        make_toy_dataset("graphene", 3)
    with pytest.raises(ValueError):
        make_toy_dataset("ch4_like", 0)


# -- optimisation -----------------------------------------------------------------

def test_adam_first_step_is_lr_sized():
    p = np.array([1.0, -2.0])
    out = Adam(0.1).step(p, np.array([3.0, -0.5]))
    assert np.allclose(out, p - 0.1 * np.sign([3.0, -0.5]), atol=1e-8)


@pytest.mark.parametrize("use_forces", [False, True])
def test_batch_gradient_matches_finite_differences(use_forces):
    model = PetModel.create(SMALL_PET, seed=2)
    batch = make_toy_dataset("ch4_like", 3, seed=7)
    sc = fit_self_contributions(batch)
    opts = TrainOptions(use_forces=use_forces, fd_h=1e-3)
    state = LossState(mse_e=2.0, mse_f=3.0)
    w = model.weights.copy()
    _, g = _batch_loss_grad(model, w, batch, sc, state, opts)
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(3):
        v = rng.normal(size=w.shape)
        lp, _ = _batch_loss_grad(model, w + eps * v, batch, sc, state, opts)
        lm, _ = _batch_loss_grad(model, w - eps * v, batch, sc, state, opts)
        assert (lp - lm) / (2 * eps) == pytest.approx(g @ v, rel=1e-5, abs=1e-9)


def test_model_forces_match_direct_differences():
    model = PetModel.create(SMALL_PET, seed=3)
    s = make_toy_dataset("ch4_like", 1, seed=8)[0]
    F = model_forces(model, s, h=1e-4)
    p = s.positions.copy()
    p[2, 1] += 1e-4
    ep = float(model(s.with_positions(p)).values)
    p[2, 1] -= 2e-4
    em = float(model(s.with_positions(p)).values)
    assert F[2, 1] == pytest.approx(-(ep - em) / 2e-4, rel=1e-8, abs=1e-12)


@pytest.fixture(scope="module")
def tiny_data():
    return make_toy_dataset("ch4_like", 24, seed=9), make_toy_dataset("ch4_like", 8, seed=10)


def test_training_is_deterministic_and_leaves_model_alone(tiny_data):
    model = PetModel.create(SMALL_PET, seed=4)
    w0 = model.weights.copy()
    opts = TrainOptions(lr=1e-3, epochs=3, batch_size=8, val_forces=False)
    a = train_toy(model, *tiny_data, opts)
    b = train_toy(model, *tiny_data, opts)
    assert a.history_csv() == b.history_csv()
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(model.weights, w0)
    assert a.history_csv().splitlines()[0] == "epoch,lr,train_loss,val_E_rmse,val_F_rmse"


def test_zero_learning_rate_keeps_parameters(tiny_data):
    model = PetModel.create(SMALL_PET, seed=4)
    res = train_toy(model, *tiny_data, TrainOptions(lr=0.0, epochs=2, val_forces=False))
    assert np.array_equal(res.weights, model.weights)


def test_training_reduces_validation_error(tiny_data):
    model = PetModel.create(SMALL_PET, seed=4)
    res = train_toy(model, *tiny_data, TrainOptions(lr=3e-3, epochs=15, batch_size=8, val_forces=False))
    assert min(h["val_E_rmse"] for h in res.history[1:]) < res.history[0]["val_E_rmse"]


def test_step_decay_and_early_stop(tiny_data):
    model = PetModel.create(SMALL_PET, seed=4)
    res = train_toy(model, *tiny_data, TrainOptions(lr=1e-3, epochs=6, lr_step=2, lr_gamma=0.5,
                                                    val_forces=False))
    assert [h["lr"] for h in res.history[1:5]] == [1e-3, 1e-3, 5e-4, 5e-4]
    stopped = train_toy(model, *tiny_data, TrainOptions(lr=0.0, epochs=10, patience=2, val_forces=False))
    assert len(stopped.history) == 1 + 3


def test_validation_force_rmse_reported(tiny_data):
    model = PetModel.create(SMALL_PET, seed=4)
    res = train_toy(model, tiny_data[0][:8], tiny_data[1][:3], TrainOptions(epochs=1))
    assert np.isfinite(res.history[-1]["val_F_rmse"])


def test_train_options_round_trip():
    opts = TrainOptions(lr=3e-4, use_forces=True, seed=7)
    assert TrainOptions.from_text(opts.to_text()) == opts
    assert dataclasses.replace(opts, lr=1.0).lr == 1.0
