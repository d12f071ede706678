"""Semi-discrete reaction-diffusion system on the torus

    du/dt = Lap_N phi(u) - K u v
    dv/dt = eps Lap_N v  - K u v

plus the a priori checks it is expected to satisfy: comparison with sub- and
super-solutions, uniform bounds, the reaction-integral bound and energy /
gradient diagnostics.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.interpolate import CubicHermiteSpline
from scipy.sparse.linalg import factorized, spsolve

from .lattice import TorusGrid, discrete_gradient, discrete_laplacian, laplacian_matrix
from .simulator import ScalingSchedule
from .zrmeasure import DomainError, ThermoTable

log = logging.getLogger(__name__)


class SchemeError(RuntimeError):
    """Raised when a step leaves the invariant region or a solve fails."""


class FugacityMap:
    """phi and phi' on [0, rho_hi] by cubic Hermite interpolation of the
    thermodynamic table (exact identity for the linear rate)."""

    def __init__(self, table: ThermoTable, M_u: float, nodes: int = 4001):
        self.table = table
        self.M_u = float(M_u)
        self.linear = table.spec.name == "linear"
        alpha_cap = 2.0 * float(table.fugacity_of_density(self.M_u)) if self.M_u > 0 else 1.0
        alpha_cap = min(max(alpha_cap, 1e-3), table.alpha_max)
        self.rho_hi = float(table.mean_density(alpha_cap))
        if not self.linear:
            r = np.linspace(0.0, self.rho_hi, nodes)
            a = table.fugacity_of_density(r)
            da = table.fugacity_derivative(r)
            self._spline = CubicHermiteSpline(r, a, da)
            self._dspline = self._spline.derivative()

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        if u.size and (u.min() < -1e-12 or u.max() > self.rho_hi):
            raise DomainError(
                f"density outside working range [0, {self.rho_hi:.6g}]: "
                f"min {u.min():.3g}, max {u.max():.3g}"
            )
        return np.maximum(u, 0.0)

    def __call__(self, u):
        u = self._check(u)
        return u.copy() if self.linear else self._spline(u)

    def derivative(self, u):
        u = self._check(u)
        return np.ones_like(u) if self.linear else self._dspline(u)

    def lipschitz(self, upper: float | None = None, points: int = 10_000) -> float:
        """sup of phi' over [0, upper] on a uniform grid (upper defaults to M_u)."""
        upper = self.M_u if upper is None else upper
        r = np.linspace(0.0, upper, points)
        return float(np.max(self.table.fugacity_derivative(r)))


@dataclass
class FieldPair:
    grid: TorusGrid
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def copy(self) -> "FieldPair":
        return FieldPair(self.grid, self.u.copy(), self.v.copy(), self.t)


# --- initial data --------------------------------------------------------------

def _smooth_step(s):
    """C-infinity transition from 0 (s <= 0) to 1 (s >= 1)."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s > 0, np.exp(-1.0 / np.maximum(s, 1e-300)), 0.0)
        b = np.where(s < 1, np.exp(-1.0 / np.maximum(1 - s, 1e-300)), 0.0)
    return a / (a + b)


def bump_profile(theta, center, width):
    z = (np.asarray(theta) - center + 0.5) % 1.0 - 0.5
    s = np.clip(np.abs(z) / width, 0, 1)
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(s < 1, np.exp(1 - 1 / np.maximum(1 - s**2, 1e-300)), 0.0)


def plateau_profile(theta, center, half, ramp):
    """1 on |z| <= half, smooth ramp of width ``ramp`` to 0."""
    z = np.abs((np.asarray(theta) - center + 0.5) % 1.0 - 0.5)
    return _smooth_step((half + ramp - z) / ramp)


@dataclass
class InitialProfileSpec:
    """Initial data with the floor e^{-C1 K}, amplitudes M_u, M_v and gradient
    budgets C0 K (u, first), C0 K^3 (u, second), C0 eps^{-1/2} K (v, first).

    family: ``bump`` (disjoint smooth bumps centred at 1/4 and 3/4 along the
    first axis), ``plateau`` (smoothed plateaus at the same centres) or
    ``table`` (explicit arrays u0, v0)."""

    family: str = "bump"
    M_u: float = 1.0
    M_v: float = 0.5
    C0: float = 100.0
    C1: float = 1.0
    width: float = 0.25
    u0: np.ndarray | None = None
    v0: np.ndarray | None = None

    def __post_init__(self):
        if self.M_u < 0 or not 0 <= self.M_v < 1:
            raise DomainError("need M_u >= 0 and 0 <= M_v < 1")
        if self.family not in ("bump", "plateau", "table"):
            raise DomainError(f"unknown profile family {self.family!r}")

    def shapes(self, grid: TorusGrid):
        th = grid.positions()[:, 0]
        if self.family == "bump":
            return bump_profile(th, 0.25, self.width), bump_profile(th, 0.75, self.width)
        if self.family == "plateau":
            half = self.width / 2
            return (plateau_profile(th, 0.25, half, self.width - half),
                    plateau_profile(th, 0.75, half, self.width - half))
        raise DomainError("table profiles carry explicit values")

    def build(self, grid: TorusGrid, sched: ScalingSchedule, check: bool = True) -> FieldPair:
        floor = math.exp(-self.C1 * sched.K)
        if self.family == "table":
            u = np.asarray(self.u0, dtype=float).copy()
            v = np.asarray(self.v0, dtype=float).copy()
        else:
            bl, br = self.shapes(grid)
            u = floor + (self.M_u - floor) * bl
            v = floor + (self.M_v - floor) * br
        pair = FieldPair(grid, u, v, 0.0)
        if check:
            check_initial(pair, self, sched)
        return pair

    def macroscopic_w0(self, grid: TorusGrid) -> np.ndarray:
        """u0 - v0 without the floor: the limit data for the Stefan problem."""
        bl, br = self.shapes(grid)
        return self.M_u * bl - self.M_v * br


def check_initial(pair: FieldPair, spec: InitialProfileSpec, sched: ScalingSchedule):
    """Reject data outside the floor/amplitude/gradient envelope."""
    grid, u, v, K = pair.grid, pair.u, pair.v, sched.K
    floor = math.exp(-spec.C1 * K)
    tol = 1e-12
    if u.min() < floor * (1 - tol) or u.max() > spec.M_u * (1 + tol):
        raise DomainError(f"u0 outside [{floor:.3g}, {spec.M_u}]")
    if v.min() < floor * (1 - tol) or v.max() > spec.M_v * (1 + tol):
        raise DomainError(f"v0 outside [{floor:.3g}, {spec.M_v}]")
    gu = discrete_gradient(u, grid)
    if np.abs(gu).max() > spec.C0 * K:
        raise DomainError(f"|grad u0| = {np.abs(gu).max():.3g} exceeds C0 K = {spec.C0 * K:.3g}")
    for i in range(grid.d):
        for j in range(grid.d):
            second = discrete_gradient(gu[j], grid)[i]
            if np.abs(second).max() > spec.C0 * K**3:
                raise DomainError(
                    f"|d_{i + 1} d_{j + 1} u0| = {np.abs(second).max():.3g} exceeds C0 K^3 = {spec.C0 * K**3:.3g}"
                )
    gv = np.abs(discrete_gradient(v, grid)).max()
    budget_v = spec.C0 * K / math.sqrt(sched.eps) if sched.eps > 0 else math.inf
    if gv > budget_v:
        raise DomainError(f"|grad v0| = {gv:.3g} exceeds C0 eps^-1/2 K = {budget_v:.3g}")


# --- scheme ----------------------------------------------------------------------

def rhs(pair: FieldPair, sched: ScalingSchedule, phi: FugacityMap):
    react = sched.K * pair.u * pair.v
    du = discrete_laplacian(phi(pair.u), pair.grid) - react
    dv = sched.eps * discrete_laplacian(pair.v, pair.grid) - react
    return du, dv


def stable_dt(sched: ScalingSchedule, phi: FugacityMap, grid: TorusGrid, M_v: float,
              safety: float = 0.2) -> float:
    """safety / (2 d N^2 L_phi + K M_v) with L_phi = sup phi' on [0, M_u]."""
    L = phi.lipschitz()
    return safety / (2 * grid.d * grid.N**2 * L + sched.K * M_v)


@dataclass
class TimeStepper:
    scheme: str = "explicit"
    dt: float = 1e-5
    newton_tol: float = 1e-11
    newton_max: int = 50

    def __post_init__(self):
        if self.scheme not in ("explicit", "semi-implicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


class _Operators:
    """Sparse Laplacian and cached linear factorizations for one grid."""

    def __init__(self, grid: TorusGrid):
        self.grid = grid
        self.L = laplacian_matrix(grid)
        self.I = sp.identity(grid.size, format="csc")
        self._v_solvers: dict = {}

    def v_solver(self, coeff: float):
        key = round(coeff, 15)
        if key not in self._v_solvers:
            self._v_solvers[key] = factorized((self.I - coeff * self.L).tocsc())
        return self._v_solvers[key]


def _check_bounds(pair: FieldPair, M_u: float, M_v: float):
    tol = 1e-12
    u, v = pair.u, pair.v
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise SchemeError(f"non-finite values at t={pair.t:.6g}")
    if u.min() < -tol * max(M_u, 1) or u.max() > M_u * (1 + tol) + tol:
        raise SchemeError(f"u left [0, {M_u}] at t={pair.t:.6g}: [{u.min():.3g}, {u.max():.3g}]")
    if v.min() < -tol or v.max() > M_v * (1 + tol) + tol:
        raise SchemeError(f"v left [0, {M_v}] at t={pair.t:.6g}: [{v.min():.3g}, {v.max():.3g}]")


def step(pair: FieldPair, stepper: TimeStepper, sched: ScalingSchedule, phi: FugacityMap,
         dt: float | None = None, ops: _Operators | None = None) -> FieldPair:
    """Advance by dt (default stepper.dt).  Explicit: forward Euler.
    Semi-implicit: backward Euler in both diffusions, explicit reaction."""
    dt = stepper.dt if dt is None else dt
    grid = pair.grid
    if stepper.scheme == "explicit":
        du, dv = rhs(pair, sched, phi)
        return FieldPair(grid, pair.u + dt * du, pair.v + dt * dv, pair.t + dt)
    ops = ops or _Operators(grid)
    react = sched.K * pair.u * pair.v
    b_u = pair.u - dt * react
    b_v = pair.v - dt * react
    v_new = ops.v_solver(dt * sched.eps)(b_v)
    u_new = _newton_u(b_u, pair.u.copy(), dt, phi, ops, stepper)
    return FieldPair(grid, u_new, v_new, pair.t + dt)


def _newton_u(b, u, dt, phi, ops, stepper):
    """Solve u - dt Lap phi(u) = b by damped Newton."""
    tol = stepper.newton_tol * math.sqrt(ops.grid.size)

    def resid(w):
        return w - dt * (ops.L @ phi(np.maximum(w, 0.0))) - b

    F = resid(u)
    nrm = np.linalg.norm(F)
    for _ in range(stepper.newton_max):
        if nrm < tol:
            return u
        J = (ops.I - dt * ops.L @ sp.diags(phi.derivative(np.maximum(u, 0.0)))).tocsc()
        du = spsolve(J, -F)
        lam = 1.0
        while lam > 1e-4:
            trial = u + lam * du
            if trial.min() >= -1e-12 and trial.max() <= phi.rho_hi:
                Ft = resid(trial)
                nt = np.linalg.norm(Ft)
                if nt < nrm:
                    break
            lam *= 0.5
        else:
            break
        u, F, nrm = trial, Ft, nt
    if nrm < tol:
        return u
    raise SchemeError(f"Newton did not converge (residual {nrm:.3g}, tolerance {tol:.3g})")


@dataclass
class Trajectory:
    grid: TorusGrid
    times: np.ndarray
    u: np.ndarray  # (n_snap, M)
    v: np.ndarray
    sched: ScalingSchedule
    reaction_cumulative: np.ndarray = field(default=None)  # scheme-exact, per snapshot
    step_dts: np.ndarray = field(default=None)
    M_u: float = math.inf
    M_v: float = math.inf

    def pair(self, k: int) -> FieldPair:
        return FieldPair(self.grid, self.u[k], self.v[k], float(self.times[k]))

    def evaluate(self, k: int, theta) -> tuple[np.ndarray, np.ndarray]:
        """Snapshot k as a step function on T^d: each site owns the cell
        [x/N - 1/(2N), x/N + 1/(2N))^d."""
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        cell = np.floor(th * self.grid.N + 0.5).astype(int) % self.grid.N
        idx = np.ravel_multi_index(cell.T, self.grid.shape)
        return self.u[k][idx], self.v[k][idx]

    def sub_times_factor(self, rate: float) -> np.ndarray:
        """prod over steps up to each snapshot of (1 - dt K rate): the scheme's
        own decay of a spatially homogeneous sub-solution."""
        out = np.ones(self.times.size)
        logs = np.log1p(-self.step_dts * self.sched.K * rate)
        cum = np.concatenate([[0.0], np.cumsum(logs)])
        step_times = np.concatenate([[self.times[0]], self.times[0] + np.cumsum(self.step_dts)])
        for k, t in enumerate(self.times):
            n = int(np.searchsorted(step_times, t, side="right") - 1)
            out[k] = math.exp(cum[n])
        return out


def solve(init, sched: ScalingSchedule, table: ThermoTable, horizon: float, snapshot_times,
          stepper: TimeStepper | None = None, grid: TorusGrid | None = None,
          phi: FugacityMap | None = None) -> Trajectory:
    """Integrate from ``init`` (a FieldPair, or an InitialProfileSpec together
    with ``grid``) to ``horizon``, recording the requested snapshots."""
    if isinstance(init, InitialProfileSpec):
        if grid is None:
            raise ValueError("grid required with a profile spec")
        M_u, M_v = init.M_u, init.M_v
        pair = init.build(grid, sched)
    else:
        pair = init.copy()
        M_u = float(pair.u.max())
        M_v = float(pair.v.max())
    grid = pair.grid
    phi = phi or FugacityMap(table, max(M_u, 1e-12))
    if stepper is None:
        stepper = TimeStepper("explicit", stable_dt(sched, phi, grid, M_v))
    if stepper.scheme == "explicit":
        L = phi.lipschitz(max(M_u, 1e-12))
        limit = 1.0 / (2 * grid.d * grid.N**2 * max(L, sched.eps) + sched.K * max(M_u, M_v))
        if stepper.dt > limit * (1 + 1e-12):
            raise SchemeError(f"explicit dt {stepper.dt:.3g} exceeds monotonicity limit {limit:.3g}")
    elif stepper.dt * sched.K * max(M_u, M_v) > 1:
        raise SchemeError("reaction step dt K max(M_u, M_v) must not exceed 1")
    snaps = np.asarray(snapshot_times, dtype=float)
    if np.any(np.diff(snaps) < 0) or snaps.min() < 0 or snaps.max() > horizon:
        raise ValueError("snapshot times must be sorted within [0, horizon]")
    ops = _Operators(grid) if stepper.scheme == "semi-implicit" else None
    u_out = np.empty((snaps.size, grid.size))
    v_out = np.empty_like(u_out)
    react = np.empty(snaps.size)
    dts = []
    acc = 0.0
    k = 0
    eps_t = 1e-12 * max(horizon, 1.0)
    while True:
        while k < snaps.size and snaps[k] <= pair.t + eps_t:
            u_out[k], v_out[k], react[k] = pair.u, pair.v, acc
            k += 1
        if pair.t >= horizon - eps_t:
            break
        target = snaps[k] if k < snaps.size else horizon
        h = min(stepper.dt, target - pair.t)
        acc += h * sched.K * float(np.mean(pair.u * pair.v))
        new = step(pair, stepper, sched, phi, dt=h, ops=ops)
        if abs(new.t - target) <= eps_t:
            new.t = target
        _check_bounds(new, M_u, M_v)
        dts.append(h)
        pair = new
    return Trajectory(grid, snaps, u_out, v_out, sched, react, np.array(dts), M_u, M_v)


# --- a priori checks -----------------------------------------------------------------

@dataclass
class ComparisonReport:
    holds: bool
    max_violation: float
    first_violation: dict | None = None


def check_comparison(sub: Trajectory, sol: Trajectory, sup: Trajectory,
                     slack: float = 1e-10) -> ComparisonReport:
    """Pointwise sub <= sol <= super on every snapshot, both components."""
    if not (np.array_equal(sub.times, sol.times) and np.array_equal(sup.times, sol.times)):
        raise DomainError("trajectories must share snapshot times")
    if not (sub.grid == sol.grid == sup.grid):
        raise DomainError("trajectories must share the grid")
    for comp in ("u", "v"):
        lo, mid, hi = (getattr(t, comp)[0] for t in (sub, sol, sup))
        if np.any(lo > mid) or np.any(mid > hi):
            raise DomainError(f"initial data not ordered in component {comp}")
    worst, first = 0.0, None
    for k, t in enumerate(sol.times):
        for comp in ("u", "v"):
            below = getattr(sub, comp)[k] - getattr(sol, comp)[k]
            above = getattr(sol, comp)[k] - getattr(sup, comp)[k]
            gap = np.maximum(below, above)
            x = int(np.argmax(gap))
            worst = max(worst, float(gap[x]))
            if gap[x] > slack and first is None:
                first = {"time": float(t), "site": x, "component": comp, "amount": float(gap[x])}
    return ComparisonReport(first is None, worst, first)


def constant_trajectory(like: Trajectory, u_val, v_val) -> Trajectory:
    """Spatially homogeneous trajectory; u_val, v_val are scalars or per-snapshot arrays."""
    n, M = like.u.shape
    uu = np.broadcast_to(np.asarray(u_val, dtype=float).reshape(-1, 1), (n, M)).copy()
    vv = np.broadcast_to(np.asarray(v_val, dtype=float).reshape(-1, 1), (n, M)).copy()
    return Trajectory(like.grid, like.times.copy(), uu, vv, like.sched,
                      np.zeros(n), like.step_dts, like.M_u, like.M_v)


def a_priori_bounds(traj: Trajectory, M_u: float, M_v: float, C1: float, discrete: bool = True):
    """Sub- and super-solutions of the uniform-bound construction.

    super: (M_u, M_v).  sub: floor * decay with floor = e^{-C1 K} and decay
    e^{-M_v K t} for u, e^{-M_u K t} for v (``discrete`` uses the scheme's own
    per-step factors (1 - dt K M), which is what the discrete comparison
    principle propagates)."""
    K = traj.sched.K
    floor = math.exp(-C1 * K)
    if discrete:
        du, dv = traj.sub_times_factor(M_v), traj.sub_times_factor(M_u)
    else:
        du, dv = np.exp(-M_v * K * traj.times), np.exp(-M_u * K * traj.times)
    sub = constant_trajectory(traj, floor * du, floor * dv)
    sup = constant_trajectory(traj, M_u, M_v)
    return sub, sup


@dataclass
class EnergyReport:
    E_u: float
    E_v: float
    reaction_integral: float
    reaction_integral_scheme: float
    grad_max_u: np.ndarray
    grad_max_v: np.ndarray
    lap_phi_over_K3: float

    def as_dict(self) -> dict:
        return {
            "E_u": self.E_u,
            "E_v": self.E_v,
            "reaction_integral": self.reaction_integral,
            "reaction_integral_scheme": self.reaction_integral_scheme,
            "grad_max_u": float(self.grad_max_u[-1]),
            "grad_max_v": float(self.grad_max_v[-1]),
            "lap_phi_over_K3": self.lap_phi_over_K3,
        }


def energy_report(traj: Trajectory, phi: FugacityMap | None = None) -> EnergyReport:
    if traj.times.size < 2:
        raise ValueError("need at least two snapshots")
    grid, sched = traj.grid, traj.sched
    gu = np.array([np.sum(discrete_gradient(u, grid) ** 2) for u in traj.u])
    gv = np.array([np.sum(discrete_gradient(v, grid) ** 2) for v in traj.v])
    mu = np.array([np.abs(discrete_gradient(u, grid)).max() for u in traj.u])
    mv = np.array([np.abs(discrete_gradient(v, grid)).max() for v in traj.v])
    react = sched.K * np.mean(traj.u * traj.v, axis=1)
    lap_ratio = math.nan
    if phi is not None and sched.K > 0:
        lap_ratio = max(float(np.abs(discrete_laplacian(phi(u), grid)).max()) for u in traj.u) / sched.K**3
    return EnergyReport(
        E_u=float(trapezoid(gu, traj.times)),
        E_v=float(sched.eps * trapezoid(gv, traj.times)),
        reaction_integral=float(trapezoid(react, traj.times)),
        reaction_integral_scheme=float(traj.reaction_cumulative[-1]),
        grad_max_u=np.maximum.accumulate(mu),
        grad_max_v=np.maximum.accumulate(mv),
        lap_phi_over_K3=lap_ratio,
    )
