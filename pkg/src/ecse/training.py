"""Desk-scale training: self-contributions, loss with EMA normalisers, rotational
augmentation, Adam with step decay and early stopping, synthetic datasets."""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import config as kv
from .backbones.graph import union
from .smoothmath import Frame, fc
from .structures import ELEMENTS, Structure, neighbor_list


class TrainingDivergedError(RuntimeError):
    pass


# -- rotations ----------------------------------------------------------------

def quaternion_to_matrix(q) -> np.ndarray:
    a, b, c, d = q
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])


def random_rotation(rng: np.random.Generator) -> Frame:
    """Haar-uniform rotation from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return Frame(quaternion_to_matrix(q))


# -- self contributions -------------------------------------------------------

def bag_of_atoms(s: Structure, species) -> np.ndarray:
    """Species counts in the order of ``species``."""
    sp = np.asarray(s.species)
    return np.array([np.count_nonzero(sp == z) for z in species], dtype=float)


@dataclass
class SelfContributionModel:
    species: tuple
    coefficients: np.ndarray
    intercept: float = 0.0

    def predict(self, s: Structure) -> float:
        return float(self.intercept + bag_of_atoms(s, self.species) @ self.coefficients)

    def remove(self, structures) -> np.ndarray:
        return np.array([s.energy - self.predict(s) for s in structures])

    def add(self, structures, residual_energies) -> np.ndarray:
        return np.array([e + self.predict(s) for s, e in zip(structures, residual_energies)])


def fit_self_contributions(train, species=None, fit_intercept: bool = False) -> SelfContributionModel:
    """Least squares of energies on species counts (minimum norm when rank deficient)."""
    train = [s for s in train if s.energy is not None]
    if not train:
        raise ValueError("no structures with energy targets")
    if species is None:
        species = tuple(sorted({int(z) for s in train for z in s.species}))
    X = np.array([bag_of_atoms(s, species) for s in train])
    if fit_intercept:
        X = np.column_stack([X, np.ones(len(X))])
    y = np.array([s.energy for s in train], dtype=float)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    if fit_intercept:
        return SelfContributionModel(tuple(species), coef[:-1], float(coef[-1]))
    return SelfContributionModel(tuple(species), coef, 0.0)


# -- loss ---------------------------------------------------------------------

@dataclass(frozen=True)
class LossState:
    mse_e: float = 1.0
    mse_f: float = 1.0
    w_e: float = 0.1
    ema_decay: float = 0.9


def loss(pred_e, true_e, pred_f, true_f, n_atoms, state: LossState, per_atom_energy: bool = False) -> float:
    """w_E (E~ - E)^2 / MSE_E + mean over 3N force components of (F~ - F)^2 / MSE_F.

    Force arrays may be ``None`` for an energy-only loss.
    """
    if not (state.mse_e > 0 and state.mse_f > 0):
        raise ValueError("loss normalisers must be positive")
    de = float(pred_e) - float(true_e)
    if per_atom_energy:
        de /= n_atoms
    out = state.w_e * de * de / state.mse_e
    if pred_f is not None and true_f is not None:
        df = np.asarray(pred_f, float).ravel() - np.asarray(true_f, float).ravel()
        if df.size != 3 * n_atoms:
            raise ValueError(f"force arrays must have 3*n_atoms = {3 * n_atoms} entries")
        out += float(np.dot(df, df)) / (3 * n_atoms) / state.mse_f
    return out


def update_normalizers(state: LossState, mse_e: float, mse_f: float) -> LossState:
    if not (mse_e > 0 and mse_f > 0):
        raise ValueError("validation MSEs must be positive")
    a = state.ema_decay
    return dataclasses.replace(state, mse_e=a * state.mse_e + (1 - a) * mse_e,
                               mse_f=a * state.mse_f + (1 - a) * mse_f)


# -- synthetic potential and datasets ------------------------------------------

def _fc_and_derivative(r, r_c, delta):
    """Cutoff gate and its radial derivative."""
    r = np.asarray(r, dtype=float)
    g = np.asarray(fc(r, r_c, delta), dtype=float).reshape(r.shape)
    dg = np.zeros_like(r)
    inner = (r > r_c - delta) & (r < r_c)
    if np.any(inner):
        x = 2.0 * (r[inner] - r_c + 0.5 * delta) / delta
        u = 1.0 / (x + 1.0) + 1.0 / (x - 1.0)
        t = np.exp(-2.0 * np.abs(u))
        sech2 = 4.0 * t / (1.0 + t) ** 2
        du = -1.0 / (x + 1.0) ** 2 - 1.0 / (x - 1.0) ** 2
        dg[inner] = 0.5 * sech2 * du * (2.0 / delta)
    return g, dg


# (depth, stiffness, equilibrium distance) per unordered species pair
MORSE_TABLE = {
    (1, 1): (0.6, 1.6, 1.4),
    (1, 6): (1.2, 1.8, 1.1),
    (6, 6): (2.0, 1.5, 1.5),
}
MORSE_DEFAULT = (1.0, 1.5, 1.3)


@dataclass(frozen=True)
class PairPotential:
    """E = sum_{i<j} f_c(r) D [(1 - exp(-a (r - r0)))^2 - 1], species-dependent."""

    r_c: float = 4.0
    delta_rc: float = 1.0

    def _params(self, zi, zj):
        out = np.empty((len(zi), 3))
        for k, (a, b) in enumerate(zip(zi, zj)):
            key = (min(a, b), max(a, b))
            out[k] = MORSE_TABLE.get(key, MORSE_DEFAULT)
        return out.T

    def _pairs(self, s: Structure):
        nl = neighbor_list(s, self.r_c)
        sp = np.asarray(s.species)
        D, a, r0 = self._params(sp[nl.centers], sp[nl.neighbors])
        return nl, D, a, r0

    def energy(self, s: Structure) -> float:
        nl, D, a, r0 = self._pairs(s)
        if len(nl.centers) == 0:
            return 0.0
        r = nl.distances
        g, _ = _fc_and_derivative(r, self.r_c, self.delta_rc)
        m = (1.0 - np.exp(-a * (r - r0))) ** 2 - 1.0
        # every pair appears twice in the full list
        return float(0.5 * np.sum(g * D * m))

    def forces(self, s: Structure) -> np.ndarray:
        nl, D, a, r0 = self._pairs(s)
        F = np.zeros((s.n_atoms, 3))
        if len(nl.centers) == 0:
            return F
        r = nl.distances
        g, dg = _fc_and_derivative(r, self.r_c, self.delta_rc)
        ex = np.exp(-a * (r - r0))
        m = (1.0 - ex) ** 2 - 1.0
        dm = 2.0 * (1.0 - ex) * a * ex
        dEdr = 0.5 * D * (dg * m + g * dm)
        # r = |x_j - x_i + shift|: dr/dx_j = u, dr/dx_i = -u
        u = nl.displacements / r[:, None]
        contrib = dEdr[:, None] * u
        np.add.at(F, nl.centers, contrib)
        np.add.at(F, nl.neighbors, -contrib)
        return F

    def label(self, s: Structure) -> Structure:
        return dataclasses.replace(s, energy=self.energy(s), forces=self.forces(s))


def _ch4_positions(rng, radius=3.5, min_dist=0.5, n=5):
    while True:
        v = rng.standard_normal((n, 3))
        v *= (radius * rng.random((n, 1)) ** (1 / 3)) / np.linalg.norm(v, axis=1, keepdims=True)
        d = np.linalg.norm(v[:, None] - v[None], axis=-1)
        if d[np.triu_indices(n, 1)].min() >= min_dist:
            return v


def _collinear_chain(rng, n_atoms, jitter=1e-4):
    axis = random_rotation(rng).rotation[0]
    t = np.cumsum(rng.uniform(0.9, 1.6, n_atoms))
    t -= t.mean()
    perp = rng.standard_normal((n_atoms, 3)) * jitter
    perp -= np.outer(perp @ axis, axis)
    return np.outer(t, axis) + perp


def _periodic_random(rng, n_atoms=4, length=5.0, min_dist=0.8):
    cell = np.diag([length] * 3) + rng.uniform(-0.5, 0.5, (3, 3))
    while True:
        frac = rng.random((n_atoms, 3))
        pos = frac @ cell
        s = Structure(pos, rng.choice([1, 6], n_atoms), cell=cell)
        nl = neighbor_list(s, min_dist, d_min=0.0)
        if len(nl.centers) == 0:
            return s


DATASETS = ("ch4_like", "dimer_sweep", "collinear_family", "periodic")


def make_toy_dataset(kind: str, n: int, seed: int = 0, potential: Optional[PairPotential] = None) -> list:
    """Synthetic structures labelled by ``potential`` (default PairPotential())."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pot = potential or PairPotential()
    rng = np.random.default_rng(seed)
    out = []
    if kind == "ch4_like":
        for _ in range(n):
            out.append(Structure(_ch4_positions(rng), np.array([6, 1, 1, 1, 1])))
    elif kind == "dimer_sweep":
        # across the cutoff seam, from well inside to beyond r_c
        for r in np.linspace(0.8, pot.r_c + 0.5, n):
            axis = random_rotation(rng).rotation[0]
            out.append(Structure(np.array([np.zeros(3), r * axis]), np.array([6, 1])))
    elif kind == "collinear_family":
        for _ in range(n):
            k = int(rng.integers(3, 6))
            sp = rng.choice([1, 6], k)
            out.append(Structure(_collinear_chain(rng, k), sp))
    elif kind == "periodic":
        for _ in range(n):
            out.append(_periodic_random(rng))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {DATASETS}")
    return [pot.label(s) for s in out]


# -- optimisation -----------------------------------------------------------

@dataclass(frozen=True)
class TrainOptions:
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    w_e: float = 0.1
    ema_decay: float = 0.9
    patience: int = 20
    lr_step: int = 50
    lr_gamma: float = 0.5
    use_forces: bool = False
    fd_h: float = 1e-4
    val_forces: bool = True
    per_atom_energy: bool = False
    augment: bool = True

    def to_text(self) -> str:
        return kv.to_kv(self)

    @classmethod
    def from_text(cls, text: str, base=None) -> "TrainOptions":
        return kv.from_kv(cls, text, base)


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mh / (np.sqrt(vh) + self.eps)


def _fd_stencil(graph, h):
    """(6N, N, M, 3) displacement copies: +h and -h along every coordinate."""
    N = graph.n_atoms
    out = np.empty((6 * N,) + graph.disp.shape)
    k = 0
    for i in range(N):
        for c in range(3):
            e = np.zeros(3)
            e[c] = h
            out[k] = graph.displaced(i, e)
            out[k + 1] = graph.displaced(i, -e)
            k += 2
    return out


def model_forces(model, s: Structure, h: float = 1e-4, graph=None) -> np.ndarray:
    """Central-difference forces of a PET energy, all stencil points in one pass."""
    g = model.graph(s) if graph is None else graph
    e = model.structure_energies(g, _fd_stencil(g, h))[:, 0]
    return -(e[0::2] - e[1::2]).reshape(s.n_atoms, 3) / (2 * h)


@dataclass
class TrainResult:
    weights: np.ndarray
    history: list
    self_contributions: SelfContributionModel
    best_epoch: int
    state: LossState

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_E_rmse", "val_F_rmse")


def _evaluate(model, weights, graphs, structures, sc, opts):
    saved = model.weights
    model.weights = weights
    try:
        g = union(graphs)
        e = model.structure_energies(g)[0] + np.array([sc.predict(s) for s in structures])
        t = np.array([s.energy for s in structures])
        if opts.per_atom_energy:
            n = np.array([s.n_atoms for s in structures])
            e, t = e / n, t / n
        mse_e = float(np.mean((e - t) ** 2))
        mse_f = float("nan")
        if opts.val_forces and all(s.forces is not None for s in structures):
            sq, cnt = 0.0, 0
            for s, gs in zip(structures, graphs):
                df = model_forces(model, s, opts.fd_h, gs) - s.forces
                sq += float(np.sum(df * df))
                cnt += df.size
            mse_f = sq / cnt
    finally:
        model.weights = saved
    return mse_e, mse_f


def _batch_loss_grad(model, weights, batch, sc, state, opts):
    graphs = [model.graph(s) for s in batch]
    g = union(graphs)
    target = np.array([s.energy - sc.predict(s) for s in batch])
    n_at = np.array([s.n_atoms for s in batch], float)
    saved = model.weights
    model.weights = weights
    try:
        out, cache = model.forward(g, keep_cache=True)
        e = np.zeros(len(batch))
        np.add.at(e, g.owner, out[0, :, 0])
        scale = n_at if opts.per_atom_energy else np.ones_like(n_at)
        de = (e - target) / scale
        total = float(np.sum(opts.w_e * de * de / state.mse_e))
        d_e = 2.0 * opts.w_e * de / scale / state.mse_e
        d_out = np.zeros_like(out)
        d_out[0, :, 0] = d_e[g.owner]
        grad = model.backward(cache, d_out)
        if opts.use_forces:
            for s, gs in zip(batch, graphs):
                stencil = _fd_stencil(gs, opts.fd_h)
                out, cache = model.forward(gs, stencil, keep_cache=True)
                es = out[:, :, 0].sum(1)
                f = -(es[0::2] - es[1::2]) / (2 * opts.fd_h)
                df = f - s.forces.ravel()
                total += float(np.dot(df, df)) / df.size / state.mse_f
                gF = 2.0 * df / df.size / state.mse_f
                d_out = np.zeros_like(out)
                d_out[0::2, :, 0] = (-gF / (2 * opts.fd_h))[:, None]
                d_out[1::2, :, 0] = (gF / (2 * opts.fd_h))[:, None]
                grad = grad + model.backward(cache, d_out)
    finally:
        model.weights = saved
    return total / len(batch), grad / len(batch)


def train_toy(model, train, val, opts: TrainOptions = TrainOptions()) -> TrainResult:
    """Fit a PetModel and return the best weights; ``model.weights`` is left untouched."""
    rng = np.random.default_rng(opts.seed)
    sc = fit_self_contributions(train, model.shape.species)
    weights = model.weights.copy()
    val_graphs = [model.graph(s) for s in val]
    mse_e, mse_f = _evaluate(model, weights, val_graphs, val, sc, opts)
    state = LossState(mse_e=max(mse_e, 1e-12), mse_f=max(mse_f, 1e-12) if np.isfinite(mse_f) else 1.0,
                      w_e=opts.w_e, ema_decay=opts.ema_decay)
    history = [dict(epoch=0, lr=opts.lr, train_loss=float("nan"),
                    val_E_rmse=float(np.sqrt(mse_e)), val_F_rmse=float(np.sqrt(mse_f)))]
    adam = Adam(opts.lr)
    best, best_w, best_epoch, since = np.inf, weights.copy(), 0, 0
    for epoch in range(1, opts.epochs + 1):
        adam.lr = opts.lr * opts.lr_gamma ** ((epoch - 1) // opts.lr_step)
        data = train
        if opts.augment:
            data = [s.rotated(random_rotation(rng).rotation) for s in train]
        order = rng.permutation(len(data))
        losses = []
        for b in range(0, len(order), opts.batch_size):
            batch = [data[i] for i in order[b:b + opts.batch_size]]
            lval, grad = _batch_loss_grad(model, weights, batch, sc, state, opts)
            if not (np.isfinite(lval) and np.all(np.isfinite(grad))):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b // opts.batch_size}")
            weights = adam.step(weights, grad)
            losses.append(lval)
        mse_e, mse_f = _evaluate(model, weights, val_graphs, val, sc, opts)
        if np.isfinite(mse_f):
            state = update_normalizers(state, max(mse_e, 1e-300), max(mse_f, 1e-300))
        else:
            state = update_normalizers(state, max(mse_e, 1e-300), state.mse_f)
        history.append(dict(epoch=epoch, lr=adam.lr, train_loss=float(np.mean(losses)),
                            val_E_rmse=float(np.sqrt(mse_e)), val_F_rmse=float(np.sqrt(mse_f))))
        score = opts.w_e * mse_e + (mse_f if opts.use_forces else 0.0)
        if score < best:
            best, best_w, best_epoch, since = score, weights.copy(), epoch, 0
        else:
            since += 1
            if since >= opts.patience:
                break
    return TrainResult(best_w, history, sc, best_epoch, state)


def species_symbols(species) -> list:
    return [ELEMENTS[int(z)] for z in species]
