"""Equivariant coordinate-system ensembles.

A non-equivariant backbone is evaluated in a set of local frames built from
ordered pairs of neighbor directions; the back-rotated outputs are averaged with
smooth weights. Everything here is pure numpy and deterministic.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import config as kv
from .backbones.base import Prediction, back_rotate
from .smoothmath import (
    COLLINEAR_EPS,
    AngularParams,
    CutoffParams,
    Frame,
    fc,
    frames_from_pairs,
    qc,
    qc1,
    smooth_max_weighted,
    smooth_min_weighted,
    t_of_beta,
)
from .structures import AtomicEnvironment, Structure, environments


class FullyCollinearError(ValueError):
    """No usable frame and no fallback configured."""


class CovariantOutputError(ValueError):
    """Adaptive angular thresholds cannot serve covariant outputs."""


COLLINEAR_MODES = ("aux_model", "adaptive_omega")
MODES = ("per_atom", "global_pool")


@dataclass(frozen=True)
class EcseConfig:
    """All knobs of the ensemble. Serialised as flat ``key = value`` text."""

    r_out: float = 4.0
    delta_rc: float = 0.5
    omega: float = 0.1
    delta_omega: float = 0.2
    qc_kind: str = "qc1"
    beta: float = 5.0
    beta_w: float = 10.0
    beta_omega: Optional[float] = None  # None -> beta_w
    adaptive_cutoff: bool = True
    prune: bool = False
    t_f: float = 0.4
    dt_f: float = 0.2
    t_e: float = 0.05
    dt_e: float = 0.02
    t_aux: float = 1e-3
    d_aux: float = 1e-3
    collinear_mode: str = "aux_model"
    stitch_delta: float = 0.0  # 0 disables stitching
    n_extra_aug: int = 0
    aug_seed: int = 0
    mode: str = "per_atom"

    def __post_init__(self):
        CutoffParams(self.r_out, self.delta_rc)
        AngularParams(self.omega, self.delta_omega)
        if self.qc_kind not in ("qc1", "qc2"):
            raise ValueError(f"qc_kind must be qc1 or qc2, got {self.qc_kind!r}")
        for name in ("beta", "beta_w"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.beta_omega is not None and not self.beta_omega > 0:
            raise ValueError("beta_omega must be positive")
        if not (0 < self.t_f < 1 and self.dt_f > 0):
            raise ValueError("need 0 < t_f < 1 and dt_f > 0")
        if self.t_f + self.dt_f > 1:
            # otherwise the largest weight itself could be pruned away
            raise ValueError("t_f + dt_f must not exceed 1")
        if not (0 < self.dt_e < self.t_e):
            raise ValueError("need 0 < dt_e < t_e")
        if not (self.t_aux > 0 and self.d_aux > 0):
            raise ValueError("t_aux and d_aux must be positive")
        if self.collinear_mode not in COLLINEAR_MODES:
            raise ValueError(f"collinear_mode must be one of {COLLINEAR_MODES}")
        if self.stitch_delta < 0:
            raise ValueError("stitch_delta must be >= 0")
        if self.n_extra_aug < 0:
            raise ValueError("n_extra_aug must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def beta_aux(self) -> float:
        return self.beta_w if self.beta_omega is None else self.beta_omega

    @property
    def outer(self) -> CutoffParams:
        return CutoffParams(self.r_out, self.delta_rc)

    @property
    def angular(self) -> AngularParams:
        return AngularParams(self.omega, self.delta_omega)

    def replace(self, **kw) -> "EcseConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return kv.to_kv(self)

    @classmethod
    def from_text(cls, text: str, base: Optional["EcseConfig"] = None) -> "EcseConfig":
        return kv.from_kv(cls, text, base)

    @classmethod
    def load(cls, path, base: Optional["EcseConfig"] = None) -> "EcseConfig":
        return kv.load(cls, path, base)


PRESETS = {
    "loose": EcseConfig(),
    "tight": EcseConfig(
        beta=50.0,
        delta_rc=0.2,
        omega=0.3,
        delta_omega=0.1,
        beta_w=50.0,
        prune=True,
        t_f=0.6,
        dt_f=0.3,
        t_e=0.05,
        dt_e=0.02,
    ),
}


def preset(name: str) -> EcseConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class WeightedFrame:
    frame: Frame
    weight: float
    pair: tuple


@dataclass
class Ensemble:
    """Array form of a weighted frame list for one environment (or a pool)."""

    rotations: np.ndarray  # (K, 3, 3)
    weights: np.ndarray  # (K,)
    pairs: np.ndarray  # (K, 2), or (K, 3) with the center index first for pools
    r_in: float = float("nan")
    # weights that feed the auxiliary gate (pruned, not stitched)
    gate_weights: np.ndarray = field(default=None)
    # adaptive_omega mode at the exact singularity: frames averaged with equal weight
    singular: bool = False

    def __len__(self):
        return len(self.weights)

    def frames(self) -> list:
        return [WeightedFrame(Frame(R), float(w), tuple(int(x) for x in p))
                for R, w, p in zip(self.rotations, self.weights, self.pairs)]

    @classmethod
    def from_frames(cls, wfs) -> "Ensemble":
        if not wfs:
            return cls(np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, 2), int), gate_weights=np.zeros(0))
        w = np.array([f.weight for f in wfs], dtype=float)
        return cls(np.array([f.frame.rotation for f in wfs]), w,
                   np.array([f.pair for f in wfs], dtype=int), gate_weights=w)


def _empty(r_in=float("nan")) -> Ensemble:
    return Ensemble(np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, 2), int), r_in, np.zeros(0))


def _ordered_pairs(n: int):
    # row-major j != j'; appending a neighbor never reorders existing pairs
    jj, kk = np.nonzero(~np.eye(n, dtype=bool))
    return jj, kk


def _cross2(disp, jj, kk):
    r = np.linalg.norm(disp, axis=1)
    rhat = disp / r[:, None]
    c = np.cross(rhat[jj], rhat[kk])
    return np.sum(c * c, axis=1)


def _smooth_max2(a, b, beta):
    m = np.maximum(a, b)
    ea = np.exp(beta * (a - m))
    eb = np.exp(beta * (b - m))
    return (a * ea + b * eb) / (ea + eb)


def adaptive_inner_cutoff(env: AtomicEnvironment, cfg: EcseConfig) -> float:
    """Smallest-ish radius that still encloses a well-conditioned pair.

    Importances gate each pair radially at ``r_out - T(beta)`` (not ``r_out``) so
    the smooth minimum can never exceed ``r_out``; see the decisions ledger.
    """
    r = env.distances
    n = len(r)
    anchor_x, anchor_p = np.array([cfg.r_out]), np.array([1.0])
    if n < 2:
        return float(smooth_min_weighted(anchor_x, anchor_p, cfg.beta) + cfg.delta_rc)
    jj, kk = _ordered_pairs(n)
    z = _cross2(env.displacements, jj, kk)
    slack = t_of_beta(cfg.beta)
    rad = fc(r, cfg.r_out - slack, cfg.delta_rc)
    p = rad[jj] * rad[kk] * qc1(z, cfg.omega + cfg.delta_omega, cfg.delta_omega)
    psm = _smooth_max2(r[jj], r[kk], cfg.beta) + slack
    xs = np.concatenate([psm, anchor_x])
    ps = np.concatenate([p, anchor_p])
    return float(smooth_min_weighted(xs, ps, cfg.beta) + cfg.delta_rc)


def _radial(env: AtomicEnvironment, cfg: EcseConfig, r_in: Optional[float]):
    r = env.distances
    g = fc(r, cfg.r_out, cfg.delta_rc)
    if r_in is not None:
        g = g * fc(r, r_in, cfg.delta_rc)
    return np.asarray(g, dtype=float).reshape(r.shape)


def _resolve_r_in(env, cfg, r_in):
    if r_in is None and cfg.adaptive_cutoff:
        return adaptive_inner_cutoff(env, cfg)
    return r_in


def pair_weight(env: AtomicEnvironment, j: int, jp: int, cfg: EcseConfig, r_in=None) -> float:
    """f_c(r_j) f_c(r_j') q_c(|r_j x r_j'|^2); radial gates at r_out and, when the
    adaptive cutoff is on, also at the inner radius."""
    n = env.n_neighbors
    if j == jp or not (0 <= j < n and 0 <= jp < n):
        raise IndexError(f"invalid pair ({j}, {jp}) for {n} neighbors")
    r_in = _resolve_r_in(env, cfg, r_in)
    rad = _radial(env, cfg, r_in)
    z = _cross2(env.displacements, np.array([j]), np.array([jp]))[0]
    if z < COLLINEAR_EPS:
        return 0.0
    return float(rad[j] * rad[jp] * qc(cfg.qc_kind, z, cfg.omega, cfg.delta_omega))


def _adaptive_omega(z, pw, cfg):
    """omega = delta_omega = SmoothMax(cross^2)/2 with radial pair weights."""
    live = pw > 0
    if not np.any(live):
        return 0.0
    return 0.5 * smooth_max_weighted(z[live], pw[live], cfg.beta)


def _perpendicular(e):
    a = np.zeros(3)
    a[int(np.argmin(np.abs(e)))] = 1.0
    return np.cross(e, a)


def _singular_frames(env, rad) -> Ensemble:
    """Both orientations along the collinear axis, equal weights."""
    live = np.nonzero(rad > 0)[0]
    if len(live) == 0:
        ens = _empty()
        ens.rotations, ens.weights = np.eye(3)[None], np.ones(1)
        ens.pairs = np.array([[-1, -1]])
    else:
        j = live[np.argmin(env.distances[live])]
        e = env.displacements[j] / env.distances[j]
        perp = _perpendicular(e)
        R = frames_from_pairs(np.array([e, -e]), np.array([perp, perp]))
        ens = _empty()
        ens.rotations, ens.weights = R, np.ones(2)
        ens.pairs = np.array([[j, -1], [j, -1]])
    ens.gate_weights = ens.weights
    ens.singular = True
    return ens


def _raw_ensemble(env: AtomicEnvironment, cfg: EcseConfig) -> Ensemble:
    n = env.n_neighbors
    r_in = _resolve_r_in(env, cfg, None)
    r_in_val = float("nan") if r_in is None else r_in
    adaptive = cfg.collinear_mode == "adaptive_omega"
    if n < 2:
        return _singular_frames(env, _radial(env, cfg, r_in)) if adaptive else _empty(r_in_val)
    rad = _radial(env, cfg, r_in)
    jj, kk = _ordered_pairs(n)
    z = _cross2(env.displacements, jj, kk)
    z = np.where(z < COLLINEAR_EPS, 0.0, z)
    pw = rad[jj] * rad[kk]
    if adaptive:
        om = _adaptive_omega(z, pw, cfg)
        if not om > 0:
            return _singular_frames(env, rad)
        w = pw * qc(cfg.qc_kind, z, om, om)
    else:
        w = pw * qc(cfg.qc_kind, z, cfg.omega, cfg.delta_omega)
    w = np.asarray(w, dtype=float)
    keep = np.nonzero(w > 0)[0]
    jj, kk, w = jj[keep], kk[keep], w[keep]
    d = env.displacements
    R = frames_from_pairs(d[jj], d[kk]) if len(w) else np.zeros((0, 3, 3))
    pairs = np.stack([jj, kk], axis=1) if len(w) else np.zeros((0, 2), int)
    if adaptive and len(w):
        Ropp = frames_from_pairs(-d[jj], d[kk])
        R = np.concatenate([R, Ropp])
        w = np.concatenate([w, w])
        pairs = np.concatenate([pairs, pairs])
    return Ensemble(R, w, pairs, r_in_val, w)


def prune_weights(w: np.ndarray, cfg: EcseConfig) -> np.ndarray:
    """Smoothly zero weights far below the (smooth) maximum."""
    w = np.asarray(w, dtype=float)
    if w.size == 0 or not np.any(w > 0):
        return w.copy()
    w_max = smooth_max_weighted(w, w, cfg.beta_w)
    e = float(fc(w_max, cfg.t_e, cfg.dt_e))
    if e == 1.0:
        return w.copy()
    f = np.asarray(qc1(w, w_max * cfg.t_f, w_max * cfg.dt_f), dtype=float).reshape(w.shape)
    return e * w + (1.0 - e) * w * f


def _prune_ensemble(ens: Ensemble, cfg: EcseConfig) -> Ensemble:
    if ens.singular or len(ens) == 0:
        return ens
    w = prune_weights(ens.weights, cfg)
    keep = w > 0
    return Ensemble(ens.rotations[keep], w[keep], ens.pairs[keep], ens.r_in, w[keep])


def stitch_gate(x, delta_r: float):
    """s(x) with s(x) + s(-x) = 1: 0 for x <= -delta_r, 1 for x >= delta_r."""
    return qc1(x, -delta_r, 2.0 * delta_r)


def _stitch_ensemble(ens: Ensemble, env: AtomicEnvironment, delta_r: float) -> Ensemble:
    if ens.singular or len(ens) == 0:
        return ens
    r = env.distances
    j, jp = ens.pairs[:, 0], ens.pairs[:, 1]
    s = np.asarray(stitch_gate(r[j] - r[jp], delta_r), dtype=float).reshape(j.shape)
    w = ens.weights * s
    keep = w > 0
    return Ensemble(ens.rotations[keep], w[keep], ens.pairs[keep], ens.r_in, ens.gate_weights)


def build_ensemble(env: AtomicEnvironment, cfg: EcseConfig) -> Ensemble:
    """Raw ordered-pair ensemble, then pruning and stitching as configured."""
    ens = _raw_ensemble(env, cfg)
    if cfg.prune:
        ens = _prune_ensemble(ens, cfg)
    if cfg.stitch_delta > 0:
        ens = _stitch_ensemble(ens, env, cfg.stitch_delta)
    return ens


def frame_ensemble(env: AtomicEnvironment, cfg: EcseConfig) -> list:
    """Ordered-pair frames with positive weight inside the (adaptive) cutoff."""
    return _raw_ensemble(env, cfg).frames()


def prune(weighted_frames: list, cfg: EcseConfig) -> list:
    if not weighted_frames:
        raise ValueError("prune needs a nonempty frame list")
    w = prune_weights(np.array([f.weight for f in weighted_frames]), cfg)
    return [WeightedFrame(f.frame, float(x), f.pair) for f, x in zip(weighted_frames, w) if x > 0]


def stitch_unordered_pairs(weighted_frames: list, env: AtomicEnvironment, delta_r: float) -> list:
    """Blend the two orders of each pair; far from r_j == r_j' only the
    farther-neighbor-first frame keeps its weight."""
    if not delta_r > 0:
        raise ValueError("delta_r must be positive")
    r = env.distances
    out = []
    for f in weighted_frames:
        j, jp = f.pair[0], f.pair[1]
        w = f.weight * float(stitch_gate(r[j] - r[jp], delta_r))
        if w > 0:
            out.append(WeightedFrame(f.frame, w, f.pair))
    return out


def aux_weight(gate_weights, cfg: EcseConfig) -> float:
    """Weight of the auxiliary model: 1 when no frame has weight, 0 once any frame
    is comfortably usable."""
    w = np.asarray(gate_weights, dtype=float)
    if w.size == 0 or not np.any(w > 0):
        return 1.0
    return float(fc(smooth_max_weighted(w, w, cfg.beta_aux), cfg.t_aux, cfg.d_aux))


def augmentation_rotations(n: int, seed: int) -> np.ndarray:
    from .training import random_rotation

    rng = np.random.default_rng(seed)
    return np.array([random_rotation(rng).rotation for _ in range(n)])


def _augment(ens: Ensemble, aug: np.ndarray) -> tuple:
    # frame-major, augmentation-minor; G = A F so coordinates are A (F x)
    G = np.einsum("aij,kjl->kail", aug, ens.rotations).reshape(-1, 3, 3)
    w = np.repeat(ens.weights, len(aug))
    return G, w


def _average(values, weights, w_aux=0.0, y_aux=None):
    """(w_aux y_aux + sum_k w_k y_k) / (w_aux + sum_k w_k) in a fixed order."""
    if len(weights):
        num = np.tensordot(weights, values, axes=(0, 0))
        den = weights.sum()
        if w_aux > 0:
            num = w_aux * y_aux + num
            den = w_aux + den
    else:
        num, den = w_aux * y_aux, w_aux
    return num / den


def _rank_of(backbone) -> int:
    return int(getattr(backbone, "rank", 0))


def _kind_of(backbone) -> str:
    return getattr(backbone, "kind", "scalar")


def _check_backbone(backbone, cfg):
    if cfg.collinear_mode == "adaptive_omega" and _rank_of(backbone) > 0:
        raise CovariantOutputError("adaptive_omega mode supports invariant outputs only")


def _evaluate_local(backbone, env: AtomicEnvironment, rotations: np.ndarray):
    disp = np.einsum("kab,nb->kna", rotations, env.displacements)
    return np.asarray(backbone.evaluate(env, disp), dtype=float)


def _aux_local(aux, env):
    return np.asarray(aux.evaluate(env), dtype=float)


def _frames_for(ens: Ensemble, cfg: EcseConfig, augmentations):
    if augmentations is None and cfg.n_extra_aug > 0:
        augmentations = augmentation_rotations(cfg.n_extra_aug, cfg.aug_seed)
    if augmentations is None or ens.singular:
        return ens.rotations, ens.weights
    return _augment(ens, np.asarray(augmentations, dtype=float))


def _w_aux(ens: Ensemble, cfg: EcseConfig) -> float:
    if cfg.collinear_mode != "aux_model" or ens.singular:
        return 0.0
    return aux_weight(ens.gate_weights, cfg)


def symmetrize_local(env: AtomicEnvironment, backbone, cfg: EcseConfig, aux=None,
                     augmentations=None, ensemble: Optional[Ensemble] = None) -> Prediction:
    """Weighted frame average of a local backbone on one environment.

    ``augmentations`` (M, 3, 3) overrides the configured extra rotations.
    """
    _check_backbone(backbone, cfg)
    rank = _rank_of(backbone)
    ens = build_ensemble(env, cfg) if ensemble is None else ensemble
    w_aux = _w_aux(ens, cfg)
    y_aux = None
    if w_aux > 0:
        if aux is None:
            raise FullyCollinearError(
                f"environment {env.center_index}: no usable frame and no auxiliary model")
        y_aux = _aux_local(aux, env)
    R, w = _frames_for(ens, cfg, augmentations)
    if len(w):
        vals = _evaluate_local(backbone, env, R)
        if rank:
            vals = back_rotate(vals, R, rank)
    else:
        vals = None
    y = _average(vals, w, w_aux, y_aux)
    return Prediction(_kind_of(backbone), y, rank=rank)


def symmetrize_covariant_tensor(env: AtomicEnvironment, backbone, rank: int, cfg: EcseConfig,
                                aux=None) -> Prediction:
    if _rank_of(backbone) != rank:
        raise ValueError(f"backbone declares rank {_rank_of(backbone)}, requested {rank}")
    if rank > 0 and cfg.collinear_mode != "aux_model":
        raise CovariantOutputError("covariant outputs need collinear_mode = aux_model")
    return symmetrize_local(env, backbone, cfg, aux)


def symmetrize_with_extra_augmentations(env: AtomicEnvironment, backbone, cfg: EcseConfig,
                                        aux=None, augmentations=None) -> Prediction:
    if augmentations is None:
        if cfg.n_extra_aug < 1:
            raise ValueError("n_extra_aug must be >= 1 (or pass augmentations)")
        augmentations = augmentation_rotations(cfg.n_extra_aug, cfg.aug_seed)
    return symmetrize_local(env, backbone, cfg, aux, augmentations=augmentations)


def pool_ensembles(envs, cfg: EcseConfig) -> Ensemble:
    """Union of per-atom (pruned, stitched) ensembles; pairs become (i, j, j')."""
    parts = [build_ensemble(env, cfg) for env in envs]
    return _union(parts, [env.center_index for env in envs])


def _union(parts, centers) -> Ensemble:
    live = [(c, e) for c, e in zip(centers, parts) if len(e)]
    if not live:
        return Ensemble(np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, 3), int), gate_weights=np.zeros(0))
    R = np.concatenate([e.rotations for _, e in live])
    w = np.concatenate([e.weights for _, e in live])
    pairs = np.concatenate([
        np.column_stack([np.full(len(e), c), e.pairs]) for c, e in live])
    gate = np.concatenate([e.gate_weights for _, e in live if e.gate_weights is not None])
    return Ensemble(R, w, pairs, gate_weights=gate)


def _evaluate_structure(backbone, s: Structure, rotations, envs_cache):
    """Whole-structure evaluation in each frame -> (values (K,...), per_atom (K,N,...))."""
    if getattr(backbone, "locality", "local") == "local":
        envs = envs_cache.setdefault("bb", environments(s, backbone.r_c))
        pa = np.stack([_evaluate_local(backbone, env, rotations) for env in envs], axis=1)
        return pa.sum(1), pa
    return backbone.evaluate_graph(backbone.graph(s), rotations)


def _aux_structure(aux, s: Structure):
    pred = aux(s)
    return pred.values, pred.per_atom


def symmetrize_global_pool(s: Structure, backbone, cfg: EcseConfig, aux=None,
                           augmentations=None) -> Prediction:
    """One pooled frame set for the whole structure; the backbone sees the full
    structure rotated into every pooled frame."""
    _check_backbone(backbone, cfg)
    rank = _rank_of(backbone)
    envs = environments(s, cfg.r_out)
    ens = pool_ensembles(envs, cfg)
    if len(ens) == 0 and cfg.collinear_mode == "adaptive_omega":
        ens = _singular_frames(None, np.zeros(0))
    w_aux = _w_aux(ens, cfg)
    y_aux = pa_aux = None
    if w_aux > 0:
        if aux is None:
            raise FullyCollinearError("no usable frame in the pool and no auxiliary model")
        y_aux, pa_aux = _aux_structure(aux, s)
    R, w = _frames_for(ens, cfg, augmentations)
    vals = pa = None
    if len(w):
        vals, pa = _evaluate_structure(backbone, s, R, {})
        if rank:
            vals = back_rotate(vals, R, rank)
            pa = back_rotate(pa, R, rank)
    y = _average(vals, w, w_aux, y_aux)
    per_atom = None
    if pa is not None or pa_aux is not None:
        per_atom = _average(pa, w, w_aux, pa_aux)
    return Prediction(_kind_of(backbone), y, per_atom, rank=rank)


def symmetrize_structure(s: Structure, backbone, cfg: EcseConfig, aux=None) -> Prediction:
    """Dispatch on ``cfg.mode``; per-atom mode needs a local backbone."""
    if cfg.mode == "global_pool" or getattr(backbone, "locality", "local") != "local":
        return symmetrize_global_pool(s, backbone, cfg.replace(mode="global_pool"), aux)
    envs = environments(s, max(cfg.r_out, backbone.r_c))
    pa = np.array([symmetrize_local(env, backbone, cfg, aux).values for env in envs])
    if len(pa) == 0:
        pa = np.zeros((0,) + (3,) * _rank_of(backbone))
    return Prediction(_kind_of(backbone), pa.sum(0), pa, rank=_rank_of(backbone))


@dataclass
class SymmetrizedModel:
    """A backbone wrapped by the ensemble average; callable on structures."""

    backbone: object
    cfg: EcseConfig = field(default_factory=EcseConfig)
    aux: object = None

    def __post_init__(self):
        _check_backbone(self.backbone, self.cfg)

    @property
    def kind(self) -> str:
        return _kind_of(self.backbone)

    @property
    def rank(self) -> int:
        return _rank_of(self.backbone)

    def __call__(self, s: Structure) -> Prediction:
        return symmetrize_structure(s, self.backbone, self.cfg, self.aux)

    def energy(self, s: Structure) -> float:
        return float(self(s).values)

    def frame_counts(self, s: Structure) -> np.ndarray:
        """Frames per atomic environment after pruning/stitching."""
        return np.array([len(build_ensemble(env, self.cfg)) for env in environments(s, self.cfg.r_out)])
