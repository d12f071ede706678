"""Empirical pairings, block averages, rescaled fields and replica statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from .lattice import LatticeField, TorusGrid
from .simulator import ParticleConfig
from .zrmeasure import DomainError, ThermoTable, chi2


@dataclass(frozen=True)
class TestFunction:
    """Smooth periodic psi on T^d; ``f`` maps an (M, d) array of points to (M,)."""

    __test__ = False  # not a pytest class

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    integral: float

    def __call__(self, theta):
        return np.asarray(self.f(np.atleast_2d(theta)), dtype=float)

    def on_grid(self, grid: TorusGrid) -> np.ndarray:
        return self(grid.positions())


def _bump(theta, center=0.5, width=0.25):
    """C-infinity bump in each coordinate, supported within width of center."""
    out = np.ones(theta.shape[0])
    for j in range(theta.shape[1]):
        z = (theta[:, j] - center + 0.5) % 1.0 - 0.5
        s = np.clip(np.abs(z) / width, 0, 1)
        with np.errstate(divide="ignore", over="ignore"):
            val = np.where(s < 1, np.exp(1 - 1 / np.maximum(1 - s**2, 1e-300)), 0.0)
        out *= val
    return out


_BUMP_1D_INTEGRAL = None


def _bump_integral(d: int) -> float:
    global _BUMP_1D_INTEGRAL
    if _BUMP_1D_INTEGRAL is None:
        from scipy.integrate import quad

        _BUMP_1D_INTEGRAL = quad(lambda z: _bump(np.array([[z]]))[0], 0.25, 0.75, epsabs=1e-14)[0]
    return _BUMP_1D_INTEGRAL**d


def catalog(d: int = 1, size: int = 4) -> list[TestFunction]:
    """Constants, Fourier modes along each axis and a bump.

    size=4 gives {1, cos 2 pi th_1, sin 2 pi th_1, bump}; size=8 extends with
    higher modes (and the second axis in d=2).
    """
    items = [TestFunction("const", lambda th: np.ones(th.shape[0]), 1.0)]
    modes = []
    for k in (1, 2, 3):
        for j in range(d):
            suffix = f"{k}" if d == 1 else f"{k}_{j + 1}"
            modes.append(TestFunction(f"cos{suffix}", lambda th, k=k, j=j: np.cos(2 * np.pi * k * th[:, j]), 0.0))
            modes.append(TestFunction(f"sin{suffix}", lambda th, k=k, j=j: np.sin(2 * np.pi * k * th[:, j]), 0.0))
    bump = TestFunction("bump", lambda th: _bump(th), _bump_integral(d))
    return items + modes[: size - 2] + [bump]


def empirical_pairing(cfg: ParticleConfig, psi, species: int) -> float:
    """<pi_i, psi> = N^-d sum_x eta_i(x) psi(x/N)."""
    eta = _species(cfg, species)
    vals = psi.on_grid(cfg.grid) if isinstance(psi, TestFunction) else np.asarray(psi)
    return float(np.dot(eta, vals) / cfg.grid.size)


def field_pairing(grid: TorusGrid, values: np.ndarray, psi) -> float:
    vals = psi.on_grid(grid) if isinstance(psi, TestFunction) else np.asarray(psi)
    return float(np.dot(values, vals) / grid.size)


def _species(cfg: ParticleConfig, i: int) -> np.ndarray:
    if i == 1:
        return cfg.eta1
    if i == 2:
        return cfg.eta2
    raise ValueError("species must be 1 or 2")


def block_field(values: np.ndarray, grid: TorusGrid, ell: int) -> np.ndarray:
    """Average over the box x + [-ell, ell]^d at every site (periodic)."""
    if 2 * ell + 1 > grid.N:
        raise DomainError(f"box radius {ell} too large for torus side {grid.N}")
    a = np.asarray(values, dtype=float).reshape(grid.shape)
    for j in range(grid.d):
        # periodic moving sum via cumulative sums on a wrapped copy
        pad = np.concatenate([np.take(a, range(-ell, 0), axis=j), a,
                              np.take(a, range(0, ell), axis=j)], axis=j)
        c = np.cumsum(pad, axis=j)
        zero = np.zeros_like(np.take(c, [0], axis=j))
        c = np.concatenate([zero, c], axis=j)
        hi = np.take(c, range(2 * ell + 1, 2 * ell + 1 + grid.N), axis=j)
        lo = np.take(c, range(0, grid.N), axis=j)
        a = (hi - lo) / (2 * ell + 1)
    return a.ravel()


def block_average(cfg: ParticleConfig, species: int, x: int, ell: int) -> float:
    return float(block_field(_species(cfg, species), cfg.grid, ell)[x])


def default_block_radius(grid: TorusGrid) -> int:
    return int(round(grid.N ** (1.0 / (2 * grid.d))))


def omega_fields(cfg: ParticleConfig, u, v, table: ThermoTable):
    """Rescaled fluctuations ((eta1 - u)/chi1(u), (eta2 - v)/chi2(v))."""
    u = u.values if isinstance(u, LatticeField) else np.asarray(u, dtype=float)
    v = v.values if isinstance(v, LatticeField) else np.asarray(v, dtype=float)
    c1 = np.asarray(table.chi1(u), dtype=float)
    c2 = chi2(v)
    for name, c in (("chi1", c1), ("chi2", c2)):
        bad = np.nonzero(c <= 0)[0]
        if bad.size:
            raise DomainError(f"{name} vanishes at site {int(bad[0])}")
    return (cfg.eta1 - u) / c1, (cfg.eta2 - v) / c2


def l1_profile_distance(cfg: ParticleConfig, u, ell: int) -> float:
    u = u.values if isinstance(u, LatticeField) else np.asarray(u, dtype=float)
    return float(np.mean(np.abs(block_field(cfg.eta1, cfg.grid, ell) - u)))


def time_integral(times, values) -> float:
    """Trapezoidal rule over the snapshot grid."""
    return float(trapezoid(values, times))


# --- replica aggregation -------------------------------------------------------

@dataclass
class ReplicaStats:
    """Merge-only running mean/variance (Chan et al. pairwise update)."""

    count: int = 0
    mean: np.ndarray | float = 0.0
    m2: np.ndarray | float = 0.0

    def add(self, x) -> "ReplicaStats":
        return self.merge(ReplicaStats(1, np.asarray(x, dtype=float), np.zeros_like(np.asarray(x, dtype=float))))

    def merge(self, other: "ReplicaStats") -> "ReplicaStats":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, np.array(other.mean, dtype=float), np.array(other.m2, dtype=float)
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * other.count / n
        self.m2 = self.m2 + other.m2 + delta**2 * self.count * other.count / n
        self.count = n
        return self

    @property
    def variance(self):
        if self.count < 2:
            return np.zeros_like(np.asarray(self.mean, dtype=float))
        return self.m2 / (self.count - 1)

    @property
    def stderr(self):
        return np.sqrt(self.variance / max(self.count, 1))


def write_timeseries_csv(path, rows):
    """rows: iterables of (time, observable, mean, se, count)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "observable", "mean", "se", "count"])
        for t, name, m, se, n in rows:
            w.writerow([repr(float(t)), name, repr(float(m)), repr(float(se)), int(n)])
