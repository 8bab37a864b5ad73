"""Local backbones acting on a single atomic environment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..smoothmath import fc
from ..structures import AtomicEnvironment, Structure, environments
from . import layers as L
from .base import Prediction


class CapacityError(ValueError):
    """More neighbors than the fixed slot budget of a local backbone."""


def _batch(env: AtomicEnvironment, disp):
    if disp is None:
        return env.displacements[None], True
    disp = np.asarray(disp, dtype=float)
    if disp.ndim == 2:
        return disp[None], True
    return disp, False


@dataclass
class MlpBackbone:
    """Smooth, deliberately non-equivariant MLP on raw Cartesian neighbor vectors.

    Each neighbor is encoded from (displacement, f_c(r), species embedding), gated
    by f_c(r) and summed; the sum plus the center embedding feeds the output MLP.
    """

    species: tuple = (1, 6)
    r_c: float = 4.0
    delta_rc: float = 1.0
    d_embed: int = 8
    hidden: int = 32
    n_slots: int = 16
    output: str = "scalar"  # or "vector"
    seed: int = 0
    weights: np.ndarray = None
    layout: L.ParamLayout = field(init=False, repr=False)

    locality = "local"
    invariant = False

    def __post_init__(self):
        if self.output not in ("scalar", "vector"):
            raise ValueError(f"output must be 'scalar' or 'vector', got {self.output!r}")
        self.species = tuple(int(s) for s in self.species)
        lay = L.ParamLayout()
        lay.add("emb", (len(self.species), self.d_embed), 1.0)
        lay.mlp2("enc", 4 + self.d_embed, self.hidden, self.hidden)
        lay.mlp2("head", self.hidden + self.d_embed, self.hidden, self.out_dim)
        self.layout = lay
        if self.weights is None:
            self.weights = lay.random_init(self.seed)
        self.weights = np.asarray(self.weights, dtype=float)
        self._w = lay.views(self.weights)
        self._idx = {z: i for i, z in enumerate(self.species)}

    @property
    def out_dim(self) -> int:
        return 1 if self.output == "scalar" else 3

    @property
    def kind(self) -> str:
        return self.output

    @property
    def rank(self) -> int:
        return 0 if self.output == "scalar" else 1

    def evaluate(self, env: AtomicEnvironment, disp=None) -> np.ndarray:
        """Output for ``env``; ``disp`` optionally supplies (K, n, 3) re-expressed
        displacement sets for the same neighbors. Returns (K, ...) or (...)."""
        d, single = _batch(env, disp)
        w = self._w
        r = np.sqrt(np.sum(d * d, axis=-1))
        gate = fc(r, self.r_c, self.delta_rc)
        gate = np.asarray(gate).reshape(r.shape)
        live = np.any(gate > 0, axis=0)
        if int(live.sum()) > self.n_slots:
            raise CapacityError(f"{int(live.sum())} neighbors exceed capacity {self.n_slots}")
        K = d.shape[0]
        emb_c = w["emb"][self._idx[int(env.center_species)]]
        if live.any():
            d, gate = d[:, live], gate[:, live]
            sp = np.array([self._idx[int(z)] for z in env.neighbor_species[live]])
            e = np.broadcast_to(w["emb"][sp][None], (K, len(sp), self.d_embed))
            x = np.concatenate([d, gate[..., None], e], axis=-1)
            h, _ = L.mlp2_fwd(x, w["enc.l1.W"], w["enc.l1.b"], w["enc.l2.W"], w["enc.l2.b"])
            pooled = np.sum(h * gate[..., None], axis=1)
        else:
            pooled = np.zeros((K, self.hidden))
        z = np.concatenate([pooled, np.broadcast_to(emb_c, (K, self.d_embed))], axis=-1)
        y, _ = L.mlp2_fwd(z, w["head.l1.W"], w["head.l1.b"], w["head.l2.W"], w["head.l2.b"])
        if self.output == "scalar":
            y = y[:, 0]
        return y[0] if single else y

    def __call__(self, s: Structure) -> Prediction:
        return predict_local(self, s)


@dataclass
class RadialAux:
    """Intrinsically equivariant local model used as the collinear fallback.

    Scalar: sum_j f_c(r_j) g(r_j, s_j). Vector: sum_j f_c(r_j) g(r_j, s_j) r_j.
    """

    species: tuple = (1, 6)
    r_c: float = 4.0
    delta_rc: float = 1.0
    hidden: int = 16
    output: str = "scalar"
    seed: int = 0

    locality = "local"
    invariant = True

    def __post_init__(self):
        self.species = tuple(int(s) for s in self.species)
        lay = L.ParamLayout()
        lay.add("emb", (len(self.species), 4), 1.0)
        lay.mlp2("g", 5, self.hidden, 1)
        self.layout = lay
        self.weights = lay.random_init(self.seed)
        self._w = lay.views(self.weights)
        self._idx = {z: i for i, z in enumerate(self.species)}

    @property
    def kind(self) -> str:
        return self.output

    @property
    def rank(self) -> int:
        return 0 if self.output == "scalar" else 1

    def evaluate(self, env: AtomicEnvironment, disp=None) -> np.ndarray:
        d, single = _batch(env, disp)
        w = self._w
        r = np.sqrt(np.sum(d * d, axis=-1))
        gate = np.asarray(fc(r, self.r_c, self.delta_rc)).reshape(r.shape)
        K, n = r.shape
        if n == 0:
            y = np.zeros((K,) if self.output == "scalar" else (K, 3))
            return y[0] if single else y
        sp = np.array([self._idx[int(z)] for z in env.neighbor_species])
        e = np.broadcast_to(w["emb"][sp][None], (K, n, 4))
        x = np.concatenate([r[..., None], e], axis=-1)
        g, _ = L.mlp2_fwd(x, w["g.l1.W"], w["g.l1.b"], w["g.l2.W"], w["g.l2.b"])
        g = g[..., 0] * gate
        if self.output == "scalar":
            y = g.sum(-1)
        else:
            y = np.einsum("kn,kna->ka", g, d)
        return y[0] if single else y

    def __call__(self, s: Structure) -> Prediction:
        return predict_local(self, s)


def predict_local(backbone, s: Structure) -> Prediction:
    """Unsymmetrised prediction of a local backbone: sum over atomic environments."""
    envs = environments(s, backbone.r_c)
    per_atom = np.array([backbone.evaluate(env) for env in envs])
    return Prediction(backbone.kind, per_atom.sum(0), per_atom)
