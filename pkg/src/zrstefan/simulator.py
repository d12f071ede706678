"""Event-driven simulation of the generator

    L_N = N^2 L_Z + eps N^2 L_K + K L_G

on the discrete torus.  Zero-range particles (type 1) jump from x to each
neighbour at rate N^2 g(eta1(x)); exclusion particles (type 2) jump to each
empty neighbour at rate eps N^2; at each site a pair (one of each type) is
removed at rate K eta1(x) eta2(x).

A single aggregate exponential clock drives the chain.  Per-site channel
totals live in a binary sum tree; internal nodes are recomputed from their
children on every update, so the stored total never drifts.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numba
import numpy as np

from .lattice import TorusGrid
from .zrmeasure import DomainError, JumpRateSpec

CH_ZR, CH_KAW, CH_KILL = 0, 1, 2
UNIFORMS_PER_EVENT = 3
STATUS_HORIZON, STATUS_FROZEN, STATUS_EXHAUSTED, STATUS_BUDGET = 0, 1, 2, 3


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class ParticleConfig:
    grid: TorusGrid
    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        self.eta1 = np.asarray(self.eta1, dtype=np.int64)
        self.eta2 = np.asarray(self.eta2, dtype=np.int64)
        if self.eta1.shape != (self.grid.size,) or self.eta2.shape != (self.grid.size,):
            raise ValueError("occupation arrays must have one entry per site")
        if np.any(self.eta1 < 0):
            raise ValueError("eta1 must be non-negative")
        if np.any((self.eta2 != 0) & (self.eta2 != 1)):
            raise ValueError("eta2 must be 0 or 1")

    @property
    def n1(self) -> int:
        return int(self.eta1.sum())

    @property
    def n2(self) -> int:
        return int(self.eta2.sum())

    def copy(self) -> "ParticleConfig":
        return ParticleConfig(self.grid, self.eta1.copy(), self.eta2.copy())


@dataclass(frozen=True)
class ScalingSchedule:
    K: float
    eps: float
    rule: dict | None = None

    def __post_init__(self):
        if self.K < 0:
            raise DomainError("reaction rate K must be non-negative")
        if not 0 <= self.eps <= 1:
            raise DomainError("eps must lie in [0, 1]")

    @staticmethod
    def k_cap(N: int, delta1: float, delta2: float) -> float:
        inner = delta2 * math.log(N)
        if inner <= 1.0:
            return 0.0
        return math.sqrt(max(delta1 * math.log(inner), 0.0))

    @classmethod
    def from_rule(cls, N: int, delta1: float, delta2: float, alpha_eps: float,
                  k_fraction: float = 1.0) -> "ScalingSchedule":
        """K(N) = k_fraction * (delta1 log(delta2 log N))^{1/2}, eps(N) = N^{-alpha_eps}.

        Raises if K(N) leaves [1, cap] or eps(N) falls below N^{-alpha_eps}.
        """
        if delta1 <= 0 or delta2 <= 0 or alpha_eps <= 0:
            raise DomainError("rule parameters delta1, delta2, alpha_eps must be positive")
        cap = cls.k_cap(N, delta1, delta2)
        K = k_fraction * cap
        if K > cap * (1 + 1e-12):
            raise DomainError(
                f"K growth bound violated: K(N={N}) = {K:.4g} exceeds cap (delta1 log(delta2 log N))^1/2 = {cap:.4g}"
            )
        if K < 1.0:
            raise DomainError(
                f"K growth bound violated: K(N={N}) = {K:.4g} < 1 (cap {cap:.4g}); increase delta1 or delta2"
            )
        eps = N ** (-alpha_eps)
        return cls(K=K, eps=eps, rule=dict(delta1=delta1, delta2=delta2,
                                           alpha_eps=alpha_eps, k_fraction=k_fraction, N=N))


def site_rates(cfg: ParticleConfig, sched: ScalingSchedule, spec: JumpRateSpec, x: int):
    """(r_Z, r_K, r_G) at site x."""
    grid = cfg.grid
    grid._check(x)
    N2 = grid.N**2
    nbr = grid.neighbor_table()[x]
    g = float(spec(int(cfg.eta1[x])))
    r_z = N2 * g * 2 * grid.d
    empty = int(sum(1 - cfg.eta2[y] for y in nbr))
    r_k = sched.eps * N2 * cfg.eta2[x] * empty
    r_g = sched.K * cfg.eta1[x] * cfg.eta2[x]
    return float(r_z), float(r_k), float(r_g)


# --- numba kernel ------------------------------------------------------------

@numba.njit(cache=True)
def _rates_at(x, eta1, eta2, nbr, gtab, c_zr, c_kaw, K):
    n = eta1[x]
    rz = c_zr * gtab[n]
    rk = 0.0
    if eta2[x] == 1:
        empty = 0
        for j in range(nbr.shape[1]):
            empty += 1 - eta2[nbr[x, j]]
        rk = c_kaw * empty
    rg = K * n * eta2[x]
    return rz, rk, rg


@numba.njit(cache=True)
def _set_leaf(x, eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P):
    rz, rk, rg = _rates_at(x, eta1, eta2, nbr, gtab, c_zr, c_kaw, K)
    rates[x, 0] = rz
    rates[x, 1] = rk
    rates[x, 2] = rg
    i = P + x
    tree[i] = rz + rk + rg
    i >>= 1
    while i >= 1:
        tree[i] = tree[2 * i] + tree[2 * i + 1]
        i >>= 1


@numba.njit(cache=True)
def _build(eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P):
    M = eta1.shape[0]
    tree[:] = 0.0
    for x in range(M):
        rz, rk, rg = _rates_at(x, eta1, eta2, nbr, gtab, c_zr, c_kaw, K)
        rates[x, 0] = rz
        rates[x, 1] = rk
        rates[x, 2] = rg
        tree[P + x] = rz + rk + rg
    for i in range(P - 1, 0, -1):
        tree[i] = tree[2 * i] + tree[2 * i + 1]


@numba.njit(cache=True)
def _descend(tree, P, r):
    i = 1
    while i < P:
        left = tree[2 * i]
        if (r < left or tree[2 * i + 1] <= 0.0) and left > 0.0:
            if r >= left:
                r = left * (1.0 - 1e-16)
            i = 2 * i
        else:
            r -= left
            i = 2 * i + 1
    return i - P, r


@numba.njit(cache=True, nogil=True)
def _run_kernel(eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P,
                U, upos, t, t_stop, counts, budget, max_events):
    """Advance until t_stop, the uniform buffer runs dry, the event budget or
    max_events is hit.  Returns (t, upos, status, fired)."""
    n_nbr = nbr.shape[1]
    fired = 0
    while True:
        if max_events >= 0 and fired >= max_events:
            return t, upos, STATUS_EXHAUSTED, fired
        R = tree[1]
        if R <= 0.0:
            return t_stop, upos, STATUS_FROZEN, fired
        if upos + 3 > U.shape[0]:
            return t, upos, STATUS_EXHAUSTED, fired
        if counts[0] + counts[1] + counts[2] >= budget:
            return t, upos, STATUS_BUDGET, fired
        dt = -math.log(1.0 - U[upos]) / R
        if t + dt > t_stop:
            # memoryless clock: discard the overshooting proposal
            upos += 3
            return t_stop, upos, STATUS_HORIZON, fired
        t += dt
        x, r = _descend(tree, P, U[upos + 1] * R)
        w = U[upos + 2]
        upos += 3
        rz = rates[x, 0]
        rk = rates[x, 1]
        rg = rates[x, 2]
        if r < rz or (rk <= 0.0 and rg <= 0.0):
            j = int(w * n_nbr)
            if j >= n_nbr:
                j = n_nbr - 1
            y = nbr[x, j]
            eta1[x] -= 1
            eta1[y] += 1
            _set_leaf(x, eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P)
            _set_leaf(y, eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P)
            counts[0] += 1
        elif r < rz + rk or rg <= 0.0:
            empty = 0
            for jj in range(n_nbr):
                empty += 1 - eta2[nbr[x, jj]]
            pick = int(w * empty)
            if pick >= empty:
                pick = empty - 1
            y = -1
            for jj in range(n_nbr):
                z = nbr[x, jj]
                if eta2[z] == 0:
                    if pick == 0:
                        y = z
                        break
                    pick -= 1
            eta2[x] = 0
            eta2[y] = 1
            _set_leaf(x, eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P)
            _set_leaf(y, eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P)
            for jj in range(n_nbr):
                _set_leaf(nbr[x, jj], eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P)
                _set_leaf(nbr[y, jj], eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P)
            counts[1] += 1
        else:
            eta1[x] -= 1
            eta2[x] = 0
            _set_leaf(x, eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P)
            for jj in range(n_nbr):
                _set_leaf(nbr[x, jj], eta1, eta2, nbr, gtab, c_zr, c_kaw, K, rates, tree, P)
            counts[2] += 1
        fired += 1


def replica_rng(seed: int, replica: int = 0) -> np.random.Generator:
    """Counter-based Philox stream keyed by (master seed, replica id)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replica),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class RunResult:
    times: np.ndarray
    eta1: np.ndarray  # (n_snapshots, M)
    eta2: np.ndarray
    counts: dict
    wall_time: float
    final: ParticleConfig
    n_diff: int = 0
    frozen_at: float | None = None

    def config(self, k: int) -> ParticleConfig:
        return ParticleConfig(self.final.grid, self.eta1[k], self.eta2[k])

    def summary(self) -> dict:
        return {
            "events": self.counts,
            "total_events": int(sum(self.counts.values())),
            "final_n1": self.final.n1,
            "final_n2": self.final.n2,
            "wall_time_s": self.wall_time,
            "frozen_at": self.frozen_at,
        }


class KMCSimulator:
    """Holds one chain: configuration, rate index, clock and uniform stream."""

    def __init__(self, cfg: ParticleConfig, sched: ScalingSchedule, spec: JumpRateSpec,
                 rng: np.random.Generator, budget: int = 5_000_000_000,
                 block: int = 1 << 18, diffusion: bool = True):
        self.grid = cfg.grid
        self.eta1 = cfg.eta1.copy()
        self.eta2 = cfg.eta2.copy()
        self.sched = sched
        self.spec = spec
        self.rng = rng
        self.budget = int(budget)
        self.block = int(block)
        self.t = 0.0
        self.nbr = self.grid.neighbor_table()
        N2 = float(self.grid.N**2)
        # diffusion=False leaves only the killing channel (pure-death checks)
        self.c_zr = N2 * 2 * self.grid.d if diffusion else 0.0
        self.c_kaw = sched.eps * N2 if diffusion else 0.0
        self.K = float(sched.K)
        # eta1(x) never exceeds the total type-1 count
        self.gtab = spec.table(int(self.eta1.sum()) + 2)
        M = self.grid.size
        self.P = 1 << max(1, (M - 1).bit_length())
        self.rates = np.zeros((M, 3))
        self.tree = np.zeros(2 * self.P)
        self.counts = np.zeros(3, dtype=np.int64)
        self.n1 = int(self.eta1.sum())
        self.n2 = int(self.eta2.sum())
        self._U = np.empty(0)
        self._upos = 0
        self.rebuild()

    @property
    def config(self) -> ParticleConfig:
        return ParticleConfig(self.grid, self.eta1.copy(), self.eta2.copy())

    @property
    def total_rate(self) -> float:
        return float(self.tree[1])

    def rebuild(self) -> float:
        """Recompute the index from scratch; returns the previous stored total."""
        old = float(self.tree[1])
        _build(self.eta1, self.eta2, self.nbr, self.gtab, self.c_zr, self.c_kaw,
               self.K, self.rates, self.tree, self.P)
        return old

    def _refill(self):
        rest = self._U[self._upos:]
        self._U = np.concatenate([rest, self.rng.random(self.block * UNIFORMS_PER_EVENT)])
        self._upos = 0

    def _advance(self, t_stop: float, max_events: int = -1) -> int:
        fired_total = 0
        while True:
            before = self.counts.copy()
            t, upos, status, fired = _run_kernel(
                self.eta1, self.eta2, self.nbr, self.gtab, self.c_zr, self.c_kaw, self.K,
                self.rates, self.tree, self.P, self._U, self._upos, self.t, t_stop,
                self.counts, self.budget,
                -1 if max_events < 0 else max_events - fired_total,
            )
            self.t, self._upos = t, upos
            fired_total += fired
            kills = int(self.counts[CH_KILL] - before[CH_KILL])
            self.n1 -= kills
            self.n2 -= kills
            if status == STATUS_EXHAUSTED:
                if max_events >= 0 and fired_total >= max_events:
                    return status
                self._refill()
                continue
            if status == STATUS_BUDGET:
                raise BudgetExceeded(
                    f"event budget {self.budget} exhausted at t={self.t:.6g} "
                    f"(counts zr={self.counts[0]}, kaw={self.counts[1]}, kill={self.counts[2]})"
                )
            return status

    def step(self):
        """Fire exactly one event.  Returns the new time, or None when frozen."""
        if self.tree[1] <= 0.0:
            return None
        self._advance(math.inf, max_events=1)
        return self.t

    def run_events(self, n: int) -> int:
        """Fire up to ``n`` events (fewer only if the state freezes)."""
        if self.tree[1] <= 0.0:
            return STATUS_FROZEN
        return self._advance(math.inf, max_events=int(n))

    def run_until(self, t_stop: float) -> int:
        return self._advance(t_stop)

    def run(self, horizon: float, snapshot_times) -> RunResult:
        snaps = np.asarray(snapshot_times, dtype=float)
        if np.any(np.diff(snaps) < 0) or (snaps.size and (snaps[0] < self.t or snaps[-1] > horizon)):
            raise ValueError("snapshot times must be sorted and lie within [0, horizon]")
        n0 = self.n1 - self.n2
        e1 = np.empty((snaps.size, self.grid.size), dtype=np.int64)
        e2 = np.empty_like(e1)
        frozen_at = None
        start = time.perf_counter()
        for k, ts in enumerate(snaps):
            if ts > self.t:
                was = self.t
                if self.run_until(ts) == STATUS_FROZEN and frozen_at is None:
                    frozen_at = was
            e1[k] = self.eta1
            e2[k] = self.eta2
        if horizon > self.t:
            self.run_until(horizon)
        wall = time.perf_counter() - start
        return RunResult(
            times=snaps, eta1=e1, eta2=e2,
            counts={"zero_range": int(self.counts[0]), "kawasaki": int(self.counts[1]),
                    "killing": int(self.counts[2])},
            wall_time=wall, final=self.config, n_diff=n0, frozen_at=frozen_at,
        )


def run(cfg0: ParticleConfig, sched: ScalingSchedule, spec: JumpRateSpec, horizon: float,
        snapshot_times, rng: np.random.Generator, budget: int = 5_000_000_000) -> RunResult:
    return KMCSimulator(cfg0, sched, spec, rng, budget=budget).run(horizon, snapshot_times)
