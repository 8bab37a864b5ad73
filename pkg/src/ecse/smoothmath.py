"""Smooth scalar primitives: cutoff gates, smooth max/min, frames from vector pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# ||v1 x v2||^2 below this refuses to build a frame. Weights vanish long before.
COLLINEAR_EPS = 1e-24


class CollinearPairError(ValueError):
    """Raised when a frame is requested for (nearly) collinear vectors."""


class AllZeroWeightsError(ValueError):
    """Raised by weighted smooth max/min when no weight is strictly positive."""


@dataclass(frozen=True)
class CutoffParams:
    """Radial cutoff: gate is 1 below ``r_c - delta_rc`` and 0 beyond ``r_c``."""

    r_c: float
    delta_rc: float

    def __post_init__(self):
        if not self.r_c > 0:
            raise ValueError(f"r_c must be positive, got {self.r_c}")
        if not (0 < self.delta_rc <= self.r_c):
            raise ValueError(f"delta_rc must lie in (0, r_c], got {self.delta_rc}")

    def __call__(self, r):
        return fc(r, self.r_c, self.delta_rc)


@dataclass(frozen=True)
class AngularParams:
    """Threshold/width pair for the squared-cross-product gates."""

    omega: float
    delta_omega: float

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")
        if not self.delta_omega > 0:
            raise ValueError(f"delta_omega must be > 0, got {self.delta_omega}")
        if self.omega + self.delta_omega > 1:
            raise ValueError("omega + delta_omega must not exceed 1")


def _bump(x):
    # tanh(1/(x+1) + 1/(x-1)) for |x| < 1; odd in x, -1 at x -> 1, +1 at x -> -1.
    # x can round onto +-1 right next to the band edge: use the limits there.
    b = np.where(x <= -1.0, 1.0, -1.0)
    mid = (x > -1.0) & (x < 1.0)
    b[mid] = np.tanh(1.0 / (x[mid] + 1.0) + 1.0 / (x[mid] - 1.0))
    return b


def _transition(u, lo, width, rising):
    """Shared piecewise shape used by fc and the q gates.

    ``u`` is mapped onto x in (-1, 1) across ``[lo, lo + width]``; the result is
    0 below ``lo`` and 1 above ``lo + width`` when ``rising``, mirrored otherwise.
    """
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u) if rising else np.ones_like(u)
    hi = lo + width
    if rising:
        out = np.where(u >= hi, 1.0, out)
    else:
        out = np.where(u >= hi, 0.0, out)
    inside = (u > lo) & (u < hi)
    if np.any(inside):
        x = 2.0 * (u[inside] - lo - 0.5 * width) / width
        b = _bump(x)
        out = np.array(out, copy=True)
        out[inside] = 0.5 * (1.0 - b) if rising else 0.5 * (b + 1.0)
    return out if out.ndim else float(out)


def fc(r, r_c: float, delta_rc: float):
    """Radial cutoff gate f_c(r | r_c, delta_rc); accepts scalars or arrays."""
    return _transition(r, r_c - delta_rc, delta_rc, rising=False)


def qc1(z, omega: float, delta_omega: float):
    """Rising gate: 0 for z <= omega, 1 for z >= omega + delta_omega."""
    return _transition(z, omega, delta_omega, rising=True)


def qc2(z, omega: float, delta_omega: float):
    """Like :func:`qc1` but multiplied by z, so it is the identity past the ramp."""
    z = np.asarray(z, dtype=float)
    out = z * _transition(z, omega, delta_omega, rising=True)
    return out if np.ndim(out) else float(out)


def qc(kind: str, z, omega: float, delta_omega: float):
    if kind == "qc1":
        return qc1(z, omega, delta_omega)
    if kind == "qc2":
        return qc2(z, omega, delta_omega)
    raise ValueError(f"unknown q_c kind {kind!r}")


def _signed_smooth_max(xs, beta):
    xs = np.asarray(xs, dtype=float).ravel()
    if xs.size == 0:
        raise ValueError("smooth max of an empty set")
    a = beta * xs
    e = np.exp(a - a.max())
    return float(np.dot(e, xs) / e.sum())


def smooth_max(xs, beta: float) -> float:
    """Softmax-weighted mean of ``xs``; never exceeds max(xs), tends to it as beta grows."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    return _signed_smooth_max(xs, beta)


def smooth_min(xs, beta: float) -> float:
    if not beta > 0:
        raise ValueError("beta must be positive")
    return _signed_smooth_max(xs, -beta)


def _signed_smooth_max_weighted(xs, ps, beta):
    xs = np.asarray(xs, dtype=float).ravel()
    ps = np.asarray(ps, dtype=float).ravel()
    if xs.shape != ps.shape:
        raise ValueError("values and weights must have the same length")
    if np.any(ps < 0):
        raise ValueError("weights must be nonnegative")
    keep = ps > 0
    if not np.any(keep):
        raise AllZeroWeightsError("all weights are zero")
    xs, ps = xs[keep], ps[keep]
    a = beta * xs
    e = np.exp(a - a.max()) * ps
    return float(np.dot(e, xs) / e.sum())


def smooth_max_weighted(xs, ps, beta: float) -> float:
    """Weighted smooth max. Zero-weight entries are dropped before any arithmetic,
    so appending ``(x, 0)`` leaves the result bit-identical."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    return _signed_smooth_max_weighted(xs, ps, beta)


def smooth_min_weighted(xs, ps, beta: float) -> float:
    if not beta > 0:
        raise ValueError("beta must be positive")
    return _signed_smooth_max_weighted(xs, ps, -beta)


def _lambert_w_inv_e(tol: float = 1e-14) -> float:
    # positive root of w * exp(w) = exp(-1)
    target = math.exp(-1.0)
    w = 0.3
    for _ in range(100):
        ew = math.exp(w)
        step = (w * ew - target) / (ew * (1.0 + w))
        w -= step
        if abs(step) < tol:
            break
    return w


W_INV_E = _lambert_w_inv_e()


def t_of_beta(beta: float) -> float:
    """Slack T(beta) = W(1/e)/beta with SmoothMax({x1, x2}) + T >= max(x1, x2)."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    return W_INV_E / beta


@dataclass(frozen=True)
class Frame:
    """Proper rotation whose rows are the frame axes expressed in the global basis.

    ``rotation @ v`` gives the components of a global vector ``v`` in this frame.
    """

    rotation: np.ndarray

    def to_frame(self, vectors):
        return np.asarray(vectors) @ self.rotation.T

    def from_frame(self, vectors):
        return np.asarray(vectors) @ self.rotation


def frames_from_pairs(v1, v2) -> np.ndarray:
    """Vectorised frame construction, shapes ``(k, 3), (k, 3) -> (k, 3, 3)``."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        a = v1 / np.linalg.norm(v1, axis=-1, keepdims=True)
        b = v2 / np.linalg.norm(v2, axis=-1, keepdims=True)
    u1 = np.cross(a, b)
    n2 = np.sum(u1 * u1, axis=-1, keepdims=True)
    # nan from a zero-length input fails this test too
    if not np.all(n2 >= COLLINEAR_EPS):
        raise CollinearPairError("cannot build a frame from collinear vectors")
    u1 = u1 / np.sqrt(n2)
    u2 = np.cross(a, u1)
    return np.stack([a, u1, u2], axis=-2)


def frame_from_pair(v1, v2) -> Frame:
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if not (np.linalg.norm(v1) > 0 and np.linalg.norm(v2) > 0):
        raise CollinearPairError("zero-length vector")
    return Frame(frames_from_pairs(v1[None], v2[None])[0])
