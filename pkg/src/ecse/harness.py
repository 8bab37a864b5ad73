"""Experiment drivers: equivariance checks, the perturbation smoothness experiment,
finite-difference forces, and the loose/tight tradeoff sweep. Output is CSV."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .backbones.base import Prediction, rotate_tensor
from .structures import Structure
from .training import random_rotation

DEFAULT_AMPLITUDES = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
FIT_RANGE = (1e-6, 1e-3)


def _predict(model, s: Structure) -> Prediction:
    out = model(s)
    if isinstance(out, Prediction):
        return out
    return Prediction("scalar", float(out))


def _energy_fn(model) -> Callable:
    if hasattr(model, "energy"):
        return model.energy
    return lambda s: float(_predict(model, s).values)


def write_csv(path, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


# -- equivariance -------------------------------------------------------------

@dataclass
class EquivarianceReport:
    rows: list  # (structure_id, rotation_id, scalar_rel, covariant_rel)
    tol: float
    checked: bool  # raw models are reported without a verdict

    @property
    def max_scalar(self) -> float:
        return max((r[2] for r in self.rows), default=0.0)

    @property
    def max_covariant(self) -> float:
        return max((r[3] for r in self.rows), default=0.0)

    @property
    def max_discrepancy(self) -> float:
        return max(self.max_scalar, self.max_covariant)

    @property
    def passed(self) -> Optional[bool]:
        if not self.checked:
            return None
        return self.max_discrepancy <= self.tol

    def fraction_above(self, threshold: float) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([max(r[2], r[3]) > threshold for r in self.rows]))

    def to_csv(self, path=None) -> str:
        return write_csv(path, ("structure_id", "rotation_id", "scalar_rel", "covariant_rel"), self.rows)


def discrepancy(y0: Prediction, y_rot: Prediction, R) -> float:
    """Relative mismatch between y(R x) and R y(x)."""
    expected = y0.rotate(R)
    diff = np.linalg.norm(np.ravel(y_rot.values - expected))
    scale = np.linalg.norm(np.ravel(expected))
    return float(diff / scale) if scale > 0 else float(diff)


def verify_equivariance(model, structures, n_rotations: int = 20, seed: int = 0,
                        tol: float = 1e-10, raw: bool = False) -> EquivarianceReport:
    rng = np.random.default_rng(seed)
    rows = []
    for sid, s in enumerate(structures):
        y0 = _predict(model, s)
        for k in range(n_rotations):
            R = random_rotation(rng).rotation
            d = discrepancy(y0, _predict(model, s.rotated(R)), R)
            if y0.rank == 0:
                rows.append((sid, k, d, 0.0))
            else:
                rows.append((sid, k, 0.0, d))
    return EquivarianceReport(rows, tol, not raw)


# -- smoothness ---------------------------------------------------------------

@dataclass
class SmoothnessReport:
    rows: list  # (structure_id, sigma, perturbation_id, delta)
    amplitudes: tuple
    fit_range: tuple = FIT_RANGE
    spike_factor: float = 1e3
    trend_factor: float = 10.0
    _cache: dict = field(default_factory=dict, repr=False)

    def _arr(self):
        if "a" not in self._cache:
            self._cache["a"] = np.array(self.rows, dtype=float).reshape(-1, 4)
        return self._cache["a"]

    def max_by_amplitude(self) -> dict:
        a = self._arr()
        return {s: float(a[a[:, 1] == s, 3].max()) for s in self.amplitudes if np.any(a[:, 1] == s)}

    def _fit_points(self):
        lo, hi = self.fit_range
        m = self.max_by_amplitude()
        pts = [(s, v) for s, v in m.items() if lo <= s <= hi and v > 0]
        return np.array(pts, dtype=float).reshape(-1, 2)

    @property
    def slope(self) -> float:
        pts = self._fit_points()
        if len(pts) < 2:
            return float("nan")
        return float(np.polyfit(np.log(pts[:, 0]), np.log(pts[:, 1]), 1)[0])

    @property
    def max_trend_ratio(self) -> float:
        """Largest max|delta| over the fitted power law, within the fit range."""
        pts = self._fit_points()
        if len(pts) < 2:
            return float("nan")
        k, b = np.polyfit(np.log(pts[:, 0]), np.log(pts[:, 1]), 1)
        trend = np.exp(b + k * np.log(pts[:, 0]))
        return float(np.max(pts[:, 1] / trend))

    @property
    def scale(self) -> float:
        """Median |delta| / sigma at the reference amplitude (1e-3, or the largest fitted one)."""
        a = self._arr()
        fitted = [s for s in self.amplitudes if self.fit_range[0] <= s <= self.fit_range[1]]
        ref = 1e-3 if 1e-3 in self.amplitudes else max(fitted)
        sel = a[a[:, 1] == ref]
        return float(np.median(sel[:, 3] / ref))

    def spikes(self) -> list:
        """Rows with sigma <= 1e-4 and |delta| > spike_factor * sigma * scale."""
        a = self._arr()
        sc = self.scale
        bad = (a[:, 1] <= 1e-4) & (a[:, 3] > self.spike_factor * a[:, 1] * sc)
        return [tuple(r) for r in a[bad]]

    @property
    def max_spike_ratio(self) -> float:
        a = self._arr()
        small = a[a[:, 1] <= 1e-4]
        if len(small) == 0 or self.scale == 0:
            return 0.0
        return float(np.max(small[:, 3] / (small[:, 1] * self.scale)))

    def passed(self, slope_range=(0.8, 1.2)) -> bool:
        s = self.slope
        return (slope_range[0] <= s <= slope_range[1] and not self.spikes()
                and self.max_trend_ratio <= self.trend_factor)

    def to_csv(self, path=None) -> str:
        return write_csv(path, ("structure_id", "sigma", "perturbation_id", "delta"), self.rows)


def verify_smoothness(model, structures, amplitudes=DEFAULT_AMPLITUDES, n_perturbations: int = 50,
                      seed: int = 0, fit_range=FIT_RANGE) -> SmoothnessReport:
    """Gaussian noise of each amplitude on every coordinate; record |y(s + noise) - y(s)|."""
    amps = tuple(float(a) for a in amplitudes)
    if list(amps) != sorted(amps):
        raise ValueError("amplitudes must be sorted ascending")
    rng = np.random.default_rng(seed)
    rows = []
    for sid, s in enumerate(structures):
        y0 = _predict(model, s).values
        for sigma in amps:
            for k in range(n_perturbations):
                noise = sigma * rng.standard_normal(s.positions.shape)
                y = _predict(model, s.with_positions(s.positions + noise)).values
                rows.append((sid, sigma, k, float(np.linalg.norm(np.ravel(y - y0)))))
    return SmoothnessReport(rows, amps, tuple(fit_range))


# -- forces -------------------------------------------------------------------

def fd_forces(model, s: Structure, h: float = 1e-5) -> np.ndarray:
    """-dE/dx by central differences, one coordinate at a time."""
    if not h > 0:
        raise ValueError("h must be positive")
    energy = _energy_fn(model)
    F = np.zeros((s.n_atoms, 3))
    for i in range(s.n_atoms):
        for c in range(3):
            p = s.positions.copy()
            p[i, c] += h
            ep = energy(s.with_positions(p))
            p[i, c] -= 2 * h
            em = energy(s.with_positions(p))
            F[i, c] = -(ep - em) / (2 * h)
    return F


def richardson_ratio(model, s: Structure, h: float = 1e-3) -> float:
    """|F(h) - F(h/2)| / |F(h/2) - F(h/4)|; close to 4 for second-order differences."""
    f1, f2, f4 = (fd_forces(model, s, h / k) for k in (1, 2, 4))
    num = np.linalg.norm(f1 - f2)
    den = np.linalg.norm(f2 - f4)
    return float(num / den) if den > 0 else float("inf")


# -- tradeoff -----------------------------------------------------------------

TRADEOFF_HEADER = ("preset", "mean_frames", "slope", "max_spike_ratio", "max_equivariance", "wall_time")


def sweep_tradeoff(make_model: Callable, structures, presets: dict, amplitudes=(1e-6, 1e-5, 1e-4, 1e-3),
                   n_perturbations: int = 10, n_rotations: int = 5, seed: int = 0) -> list:
    """One row per preset. ``make_model(cfg)`` returns a symmetrised model exposing
    ``frame_counts``."""
    if len(presets) < 2:
        raise ValueError("need at least two presets")
    rows = []
    for name, cfg in presets.items():
        t0 = time.perf_counter()
        model = make_model(cfg)
        frames = np.concatenate([model.frame_counts(s) for s in structures])
        sm = verify_smoothness(model, structures, amplitudes, n_perturbations, seed)
        eq = verify_equivariance(model, structures, n_rotations, seed)
        rows.append((name, float(frames.mean()), sm.slope, sm.max_spike_ratio, eq.max_discrepancy,
                     time.perf_counter() - t0))
    return rows
