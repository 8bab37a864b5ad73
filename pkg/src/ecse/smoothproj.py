"""Smooth point-to-grid primitives: cardinal B-splines, cutoff-gated voxel
projection, the density-integral projection, smooth convolution and aggregation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .smoothmath import CutoffParams, fc, smooth_max, smooth_min
from .structures import AtomicEnvironment

MAX_ORDER = 4  # integral projection of order 3 needs the order-4 basis


def bspline_eval(p: int, x):
    """Cardinal B-spline N_p on uniform integer knots, support [0, p + 1].

    Cox-de Boor: N_0 = 1 on [0, 1); N_p(x) = (x N_{p-1}(x) + (p + 1 - x) N_{p-1}(x - 1)) / p.
    """
    if not (isinstance(p, (int, np.integer)) and 0 <= p <= MAX_ORDER):
        raise ValueError(f"order must be an integer in [0, {MAX_ORDER}], got {p!r}")
    x = np.asarray(x, dtype=float)
    # N_{k}(x - j) for j = 0..p, built up one order at a time
    vals = [((x - j >= 0) & (x - j < 1)).astype(float) for j in range(p + 1)]
    for k in range(1, p + 1):
        vals = [((x - j) * vals[j] + (k + 1 - (x - j)) * vals[j + 1]) / k for j in range(p + 1 - k)]
    n = vals[0]
    return float(n) if n.ndim == 0 else n


def centered_bspline(p: int, u):
    """N_p shifted to be symmetric about 0, support [-(p+1)/2, (p+1)/2]."""
    return bspline_eval(p, np.asarray(u, dtype=float) + 0.5 * (p + 1))


@dataclass(frozen=True)
class BsplineBasis:
    """1-D family B_i(x) = N_p((x - c_i) / h + (p+1)/2), c_i the center of voxel i."""

    order: int
    spacing: float
    origin: float = 0.0

    def __post_init__(self):
        if not 0 <= self.order <= MAX_ORDER:
            raise ValueError(f"order must lie in [0, {MAX_ORDER}]")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")

    def center(self, i):
        return self.origin + (np.asarray(i) + 0.5) * self.spacing

    def __call__(self, i, x):
        return centered_bspline(self.order, (np.asarray(x) - self.center(i)) / self.spacing)


@dataclass
class VoxelGrid:
    """Regular grid of ``extents`` voxels; voxel (i, j, k) spans origin + [i, i+1) h."""

    extents: tuple
    spacing: float
    origin: np.ndarray
    coefficients: Optional[np.ndarray] = None

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ValueError("extents must be three positive integers")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        self.origin = np.broadcast_to(np.asarray(self.origin, dtype=float), (3,)).copy()
        if self.coefficients is None:
            self.coefficients = np.zeros(self.extents)
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != self.extents:
            raise ValueError(f"coefficients shape {self.coefficients.shape} != extents {self.extents}")

    @classmethod
    def covering(cls, r_c: float, spacing: float, order: int = 3) -> "VoxelGrid":
        """Grid centered on the origin whose bases fully cover the cutoff ball."""
        margin = 0.5 * (order + 2) * spacing
        n = int(np.ceil(2 * (r_c + margin) / spacing))
        half = 0.5 * n * spacing
        return cls((n, n, n), spacing, np.full(3, -half))

    def basis(self, axis: int, order: int) -> BsplineBasis:
        return BsplineBasis(order, self.spacing, float(self.origin[axis]))

    def with_coefficients(self, c) -> "VoxelGrid":
        return replace(self, coefficients=np.asarray(c, dtype=float), origin=self.origin.copy())


def _gate(env: AtomicEnvironment, cutoff: CutoffParams):
    return np.asarray(fc(env.distances, cutoff.r_c, cutoff.delta_rc), dtype=float).reshape(-1)


def _axis_values(grid: VoxelGrid, order: int, coords):
    """(3, n_points, extent) values of the per-axis basis."""
    out = []
    for a in range(3):
        idx = np.arange(grid.extents[a])
        out.append(grid.basis(a, order)(idx[None, :], coords[:, a:a + 1]))
    return out


def project_environment(env: AtomicEnvironment, grid: VoxelGrid, p: int, cutoff: CutoffParams) -> VoxelGrid:
    """c_ijk = sum_k f_c(r_k) B_i(x_k) B_j(y_k) B_k(z_k)."""
    g = _gate(env, cutoff)
    live = g > 0
    if not np.any(live):
        return grid.with_coefficients(np.zeros(grid.extents))
    pts = env.displacements[live]
    bx, by, bz = _axis_values(grid, p, pts)
    c = np.einsum("n,ni,nj,nk->ijk", g[live], bx, by, bz)
    return grid.with_coefficients(c)


def _gauss_legendre_piecewise(f, a: float, b: float, breaks, n_nodes: int) -> float:
    """Integrate f over [a, b], split at ``breaks`` so each piece is polynomial."""
    nodes, wts = np.polynomial.legendre.leggauss(n_nodes)
    cuts = np.unique(np.concatenate([[a, b], np.clip(breaks, a, b)]))
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi <= lo:
            continue
        x = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        total += 0.5 * (hi - lo) * float(np.dot(wts, f(x)))
    return total


def _voxel_integrals(grid: VoxelGrid, p: int, axis: int, x0: float) -> np.ndarray:
    """Integral over each voxel of the unit-mass order-p bump centered at x0."""
    h = grid.spacing
    half = 0.5 * (p + 1)
    breaks = x0 + (np.arange(p + 2) - half) * h

    def bump(x):
        return centered_bspline(p, (x - x0) / h) / h

    out = np.zeros(grid.extents[axis])
    for i in range(grid.extents[axis]):
        lo = grid.origin[axis] + i * h
        hi = lo + h
        if hi <= breaks[0] or lo >= breaks[-1]:
            continue
        out[i] = _gauss_legendre_piecewise(bump, lo, hi, breaks, p + 1)
    return out


def integral_projection(env: AtomicEnvironment, grid: VoxelGrid, p: int, cutoff: CutoffParams) -> VoxelGrid:
    """Voxel integrals of the gated density sum_k f_c(r_k) B(x - x_k), with B the
    separable unit-mass order-p B-spline of width (p+1) h.

    Computed by quadrature; analytically this is the direct projection of order p+1.
    """
    if not 0 <= p < MAX_ORDER:
        raise ValueError(f"integral projection order must lie in [0, {MAX_ORDER - 1}]")
    g = _gate(env, cutoff)
    c = np.zeros(grid.extents)
    for k in np.nonzero(g > 0)[0]:
        x = env.displacements[k]
        ix, iy, iz = (_voxel_integrals(grid, p, a, x[a]) for a in range(3))
        c += g[k] * np.einsum("i,j,k->ijk", ix, iy, iz)
    return grid.with_coefficients(c)


def gaussian_poly_kernel(n_out: int, n_in: int, sigma: float = 1.0, seed: int = 0) -> Callable:
    """g_mn(d) = exp(-|d|^2 / 2 sigma^2) sum_b W[m, n, b] phi_b(d), phi = (1, dx, dy, dz)."""
    W = np.random.default_rng(seed).standard_normal((n_out, n_in, 4))

    def kernel(d):
        d = np.atleast_2d(np.asarray(d, dtype=float))
        env = np.exp(-np.sum(d * d, axis=1) / (2 * sigma * sigma))
        phi = np.column_stack([np.ones(len(d)), d]) * env[:, None]
        return np.einsum("pb,mnb->pmn", phi, W)

    return kernel


def smooth_conv(points, features, query, kernel: Callable, cutoff: CutoffParams) -> np.ndarray:
    """sum_i sum_n g_mn(r_i - r) f_in f_c(|r_i - r|); ``kernel(d)`` returns (P, M, N)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    feats = np.asarray(features, dtype=float).reshape(len(pts), -1)
    d = pts - np.asarray(query, dtype=float)
    g = np.asarray(fc(np.linalg.norm(d, axis=1), cutoff.r_c, cutoff.delta_rc), dtype=float).reshape(-1)
    live = g > 0
    if not np.any(live):
        n_out = kernel(np.zeros((1, 3))).shape[1]
        return np.zeros(n_out)
    K = kernel(d[live])
    return np.einsum("pmn,pn,p->m", K, feats[live], g[live])


AGG_MODES = ("sum", "mean", "max", "min")


def smooth_aggregate(values, distances, mode: str, cutoff: CutoffParams, beta: float = 10.0) -> float:
    """Cutoff-aware aggregation of scalar values attached to points.

    sum/mean weight by f_c. max/min take the smooth max/min of v +/- log f_c, so a
    point approaching the cutoff drifts to -inf (+inf) and its softmax weight
    vanishes continuously. With no point inside the cutoff max gives -inf and min +inf.
    """
    if mode not in AGG_MODES:
        raise ValueError(f"mode must be one of {AGG_MODES}")
    v = np.asarray(values, dtype=float).ravel()
    g = np.asarray(fc(np.asarray(distances, dtype=float).ravel(), cutoff.r_c, cutoff.delta_rc),
                   dtype=float).reshape(-1)
    if mode == "sum":
        return float(np.dot(g, v))
    if mode == "mean":
        tot = g.sum()
        return float(np.dot(g, v) / tot) if tot > 0 else 0.0
    if not beta > 0:
        raise ValueError("beta must be positive")
    live = g > 0
    if not np.any(live):
        return -np.inf if mode == "max" else np.inf
    shift = np.log(g[live])
    if mode == "max":
        return smooth_max(v[live] + shift, beta)
    return smooth_min(v[live] - shift, beta)
