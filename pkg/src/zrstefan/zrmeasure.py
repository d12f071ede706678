"""Zero-range jump rates and the grand-canonical single-site toolkit.

For a rate g with g(0) = 0 the single-site marginal at fugacity alpha is

    nu_alpha(k) = alpha**k / g(k)! / Z(alpha),   Z(alpha) = sum_k alpha**k / g(k)!

and the fugacity map phi(rho) inverts rho = E_{nu_phi(rho)}[k].  Series are
summed in log space with a certified geometric tail bound derived from the
linear-growth condition g(k + r2) - g(k) >= r1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lattice import LatticeField, TorusGrid


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class JumpRateSpec:
    """Rate g: Z_+ -> R_+ plus the constants of the Lipschitz/linear-growth
    conditions.  ``g`` must accept an integer numpy array."""

    g: Callable[[np.ndarray], np.ndarray]
    name: str
    lipschitz: float
    C: float
    r1: float
    r2: int = 1
    params: dict = field(default_factory=dict)

    def __call__(self, k):
        return self.g(np.asarray(k, dtype=np.int64))

    def table(self, kmax: int) -> np.ndarray:
        """g(0), ..., g(kmax) as floats."""
        return np.asarray(self(np.arange(kmax + 1)), dtype=float)

    def validate(self, k_max: int = 10_000):
        k = np.arange(k_max + self.r2 + 2)
        gk = self.table(k[-1])
        if gk[0] != 0.0:
            raise DomainError(f"{self.name}: g(0) must be 0, got {gk[0]}")
        if np.any(gk[1:] <= 0):
            raise DomainError(f"{self.name}: g(k) must be positive for k >= 1")
        if np.max(np.abs(np.diff(gk))) > self.lipschitz + 1e-12:
            raise DomainError(f"{self.name}: Lipschitz bound {self.lipschitz} violated")
        ks = k[1:k_max + 1]
        if np.any(gk[ks] > self.C * ks + 1e-12):
            raise DomainError(f"{self.name}: growth bound g(k) <= {self.C} k violated")
        if np.any(gk[ks + self.r2] - gk[ks] < self.r1 - 1e-12):
            raise DomainError(
                f"{self.name}: g(k + {self.r2}) - g(k) >= {self.r1} violated"
            )
        return self


def linear_rate() -> JumpRateSpec:
    """g(k) = k: independent walkers, Poisson marginals, phi = identity."""
    return JumpRateSpec(
        g=lambda k: k.astype(float), name="linear", lipschitz=1.0, C=1.0, r1=1.0, r2=1
    )


def affine_rate(a: float = 1.0) -> JumpRateSpec:
    """g(k) = k + a 1{k >= 1}: genuinely nonlinear fugacity map."""
    if a < 0:
        raise DomainError("affine offset must be non-negative")
    return JumpRateSpec(
        g=lambda k: np.where(k >= 1, k + a, 0.0),
        name="affine",
        lipschitz=1.0 + a,
        C=1.0 + a,
        r1=1.0,
        r2=1,
        params={"a": a},
    )


def rate_from_config(kind: str, **params) -> JumpRateSpec:
    if kind == "linear":
        if params:
            raise DomainError(f"linear rate takes no parameters, got {sorted(params)}")
        return linear_rate()
    if kind == "affine":
        return affine_rate(float(params.get("a", 1.0)))
    raise DomainError(f"unknown rate kind {kind!r} (expected linear | affine)")


class ThermoTable:
    """Series truncation for Z, rho, chi over fugacities in [0, alpha_max]."""

    def __init__(self, spec: JumpRateSpec, alpha_max: float = 40.0, tol: float = 1e-16):
        self.spec = spec
        self.alpha_max = float(alpha_max)
        self.tol = tol
        self.k_trunc = self._choose_truncation()
        k = np.arange(self.k_trunc + 1)
        gk = spec.table(self.k_trunc)
        self._k = k.astype(float)
        # log g(k)!
        self._log_gfact = np.concatenate([[0.0], np.cumsum(np.log(gk[1:]))])
        self.c0 = float(gk[1])  # phi'(0) = 1 / (d rho / d alpha)(0) = g(1)

    def _choose_truncation(self) -> int:
        a = self.alpha_max
        if a == 0.0:
            return 1
        spec = self.spec
        logt = 0.0
        logmax = 0.0
        small = 0
        k = 0
        while True:
            k += 1
            logt += math.log(a) - math.log(float(spec(k)))
            logmax = max(logmax, logt)
            small = small + 1 if logt - logmax < math.log(self.tol) else 0
            # certified tail: g(j) >= r1 floor(k / r2) for all j > k
            lower = spec.r1 * (k // spec.r2)
            q = a / lower if lower > 0 else math.inf
            if small >= 10 and q < 0.5:
                tail = math.exp(logt - logmax) * q / (1 - q)
                if tail < self.tol:
                    return k
            if k > 100_000:
                raise DomainError("series truncation did not converge")

    @property
    def rho_max(self) -> float:
        return float(self.mean_density(self.alpha_max))

    def _log_weights(self, alpha) -> np.ndarray:
        a = np.atleast_1d(np.asarray(alpha, dtype=float))
        if np.any(a < 0):
            raise DomainError("fugacity must be non-negative")
        if np.any(a > self.alpha_max * (1 + 1e-12)):
            raise DomainError(
                f"fugacity {a.max()} beyond table range {self.alpha_max}"
            )
        with np.errstate(divide="ignore", invalid="ignore"):
            la = np.log(a)
            lw = la[:, None] * self._k[None, :] - self._log_gfact[None, :]
        lw[:, 0] = 0.0  # alpha**0 = 1 including alpha = 0
        return lw

    def _moments(self, alpha):
        lw = self._log_weights(alpha)
        m = lw.max(axis=1, keepdims=True)
        w = np.exp(lw - m)
        s0 = w.sum(axis=1)
        s1 = (w * self._k).sum(axis=1)
        s2 = (w * self._k**2).sum(axis=1)
        mean = s1 / s0
        var = s2 / s0 - mean**2
        # centered form is more accurate when the mean is large
        var = np.maximum((w * (self._k - mean[:, None]) ** 2).sum(axis=1) / s0, 0.0)
        return m[:, 0], s0, mean, var

    def pmf(self, alpha: float) -> np.ndarray:
        lw = self._log_weights(alpha)[0]
        w = np.exp(lw - lw.max())
        return w / w.sum()

    def partition_function(self, alpha):
        m, s0, _, _ = self._moments(alpha)
        return _unwrap(np.exp(m) * s0, alpha)

    def mean_density(self, alpha):
        return _unwrap(self._moments(alpha)[2], alpha)

    def variance_at_fugacity(self, alpha):
        return _unwrap(self._moments(alpha)[3], alpha)

    def fugacity_of_density(self, rho):
        """phi(rho): Newton on alpha with a bisection safeguard."""
        r = np.atleast_1d(np.asarray(rho, dtype=float))
        if np.any(r < 0):
            raise DomainError("density must be non-negative")
        if np.any(r > self.rho_max):
            raise DomainError(f"density {r.max()} beyond table range {self.rho_max}")
        lo = np.zeros_like(r)
        hi = np.full_like(r, self.alpha_max)
        # Poisson-like start; alpha ~ g(1) rho near zero
        a = np.clip(np.maximum(r, self.c0 * r / (1 + r)), 0, self.alpha_max)
        active = r > 0
        a[~active] = 0.0
        for _ in range(200):
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            ai, ri = a[idx], r[idx]
            _, _, mean, var = self._moments(ai)
            f = mean - ri
            lo[idx] = np.where(f < 0, ai, lo[idx])
            hi[idx] = np.where(f > 0, ai, hi[idx])
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(var > 0, f * ai / var, 0.0)
            new = ai - step
            bad = ~((new >= lo[idx]) & (new <= hi[idx]))
            new = np.where(bad, 0.5 * (lo[idx] + hi[idx]), new)
            done = (np.abs(f) <= 1e-15 * (1 + ri)) | (
                np.abs(new - ai) <= 1e-15 * np.maximum(ai, 1e-300)
            )
            a[idx] = np.where(done & (np.abs(f) <= 1e-15 * (1 + ri)), ai, new)
            active[idx[done]] = False
        return _unwrap(a, rho)

    def fugacity_derivative(self, rho):
        """phi'(rho) = phi(rho) / Var; the limit g(1) at rho = 0."""
        r = np.atleast_1d(np.asarray(rho, dtype=float))
        a = np.atleast_1d(self.fugacity_of_density(r))
        var = np.atleast_1d(self.variance_at_fugacity(a))
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(a > 1e-8, a / var, np.nan)
        # small alpha: Z = 1 + a/g1 + a^2/(g1 g2) + ..., use the series for d rho / d alpha
        small = ~(a > 1e-8)
        if np.any(small):
            g1, g2 = float(self.spec(1)), float(self.spec(2))
            drho = 1.0 / g1 + a[small] * (4.0 / (g1 * g2) - 2.0 / g1**2)
            out[small] = 1.0 / drho
        return _unwrap(out, rho)

    def chi1(self, rho):
        """Single-site variance under nu_{1, rho}, equal to phi / phi'."""
        a = self.fugacity_of_density(rho)
        return self.variance_at_fugacity(a)

    def sample_site(self, rho: float, rng: np.random.Generator, size=None):
        """Inverse-CDF draw(s) from nu_{1, rho}."""
        if rho < 0:
            raise DomainError("density must be non-negative")
        if rho == 0:
            return 0 if size is None else np.zeros(size, dtype=np.int64)
        p = self.pmf(float(self.fugacity_of_density(rho)))
        cdf = _truncated_cdf(p)
        u = rng.random(size)
        k = np.searchsorted(cdf, u, side="right")
        return int(k) if size is None else k.astype(np.int64)

    def sample_field(self, rho: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Independent draws eta(x) ~ nu_{1, rho(x)}."""
        rho = np.asarray(rho, dtype=float)
        if np.any(rho < 0):
            raise DomainError("density field must be non-negative")
        alpha = np.atleast_1d(self.fugacity_of_density(rho))
        lw = self._log_weights(alpha)
        w = np.exp(lw - lw.max(axis=1, keepdims=True))
        cdf = np.cumsum(w, axis=1)
        cdf /= cdf[:, -1:]
        u = rng.random(rho.size)
        k = (cdf <= u[:, None]).sum(axis=1)
        k[rho == 0] = 0
        return np.minimum(k, self.k_trunc).astype(np.int64)

    def export_rows(self, alphas) -> list[dict]:
        alphas = np.asarray(alphas, dtype=float)
        Z = np.atleast_1d(self.partition_function(alphas))
        rho = np.atleast_1d(self.mean_density(alphas))
        var = np.atleast_1d(self.variance_at_fugacity(alphas))
        return [
            {"alpha": float(a), "Z": float(z), "rho": float(r), "chi1": float(v)}
            for a, z, r, v in zip(alphas, Z, rho, var)
        ]


def _truncated_cdf(p: np.ndarray, tail: float = 1e-14) -> np.ndarray:
    cdf = np.cumsum(p)
    cut = np.searchsorted(cdf, 1.0 - tail) + 1
    cdf = cdf[:cut]
    return cdf / cdf[-1]


def _unwrap(arr, like):
    arr = np.asarray(arr)
    return float(arr[0]) if np.ndim(like) == 0 else arr


def chi2(rho2):
    r = np.asarray(rho2, dtype=float)
    if np.any((r < 0) | (r > 1)):
        raise DomainError("exclusion density must lie in [0, 1]")
    out = r * (1 - r)
    return float(out) if np.ndim(rho2) == 0 else out


def sample_product_config(grid: TorusGrid, u, v, table: ThermoTable, rng: np.random.Generator):
    """Draw eta ~ nu_{1,u} (x) nu_{2,v}, independent over sites."""
    from .simulator import ParticleConfig

    u = u.values if isinstance(u, LatticeField) else np.asarray(u, dtype=float)
    v = v.values if isinstance(v, LatticeField) else np.asarray(v, dtype=float)
    if np.any(u < 0):
        raise DomainError("type-1 density must be non-negative")
    if np.any((v < 0) | (v > 1)):
        raise DomainError("type-2 density must lie in [0, 1]")
    eta1 = table.sample_field(u, rng)
    eta2 = (rng.random(grid.size) < v).astype(np.int64)
    return ParticleConfig(grid, eta1, eta2)
