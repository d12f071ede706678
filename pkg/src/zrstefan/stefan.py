"""One-phase Stefan problem  dw/dt = Lap D(w),  D(s) = phi(s) 1{s >= 0}.

Backward Euler in time with a damped semismooth Newton solve per step; the
slope of D is regularized to delta_reg on {w <= 0}.  Also: the weak-form
residual against space-time test functions, segregation metrics, interface
location and fine-to-coarse restriction used for reference comparisons.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .lattice import TorusGrid, discrete_gradient, laplacian_matrix
from .observables import TestFunction, catalog
from .pde import FugacityMap, SchemeError
from .zrmeasure import DomainError, ThermoTable

DELTA_REG = 1e-8
TAU_NEG = 1e-6


def d_phi(phi: FugacityMap, s):
    """D(s) = phi(s) for s > 0 and 0 otherwise."""
    s = np.asarray(s, dtype=float)
    if np.any(s > phi.rho_hi):
        raise DomainError(f"value {s.max():.6g} above working range {phi.rho_hi:.6g}")
    out = np.where(s > 0, phi(np.clip(s, 0.0, None)), 0.0)
    return float(out) if out.ndim == 0 else out


def d_phi_slope(phi: FugacityMap, s, delta: float = DELTA_REG):
    s = np.asarray(s, dtype=float)
    return np.where(s > 0, np.maximum(phi.derivative(np.clip(s, 0.0, None)), delta), delta)


@dataclass
class StefanTrajectory:
    grid: TorusGrid
    times: np.ndarray
    w: np.ndarray  # (n_snap, M)
    dt: float
    frozen_drift: float = 0.0
    newton_iterations: int = 0
    halvings: int = 0
    mass: np.ndarray = field(default=None)

    @property
    def u(self):
        return np.maximum(self.w, 0.0)

    @property
    def v(self):
        return np.maximum(-self.w, 0.0)


def solve_stefan(w0, horizon: float, grid: TorusGrid, table: ThermoTable | None = None,
                 dt: float = 1e-4, snapshot_times=None, phi: FugacityMap | None = None,
                 tol: float = 1e-12, delta: float = DELTA_REG, max_halvings: int = 8
                 ) -> StefanTrajectory:
    """Backward Euler w^{n+1} = w^n + dt Lap D(w^{n+1}).

    Snapshots default to every step.  ``frozen_drift`` records the largest
    per-step change at sites whose value and neighbours were all <= 0 after
    the step, where the exact update is zero."""
    w = np.asarray(w0, dtype=float).copy()
    if w.shape != (grid.size,):
        raise ValueError("w0 must have one value per site")
    if phi is None:
        if table is None:
            raise ValueError("need a thermodynamic table or a fugacity map")
        phi = FugacityMap(table, max(float(w.max()), 1e-12))
    if w.max() > phi.rho_hi:
        raise DomainError("positive part of w0 exceeds the working range")
    n_steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
    dt = horizon / n_steps
    if snapshot_times is None:
        snap_steps = np.arange(n_steps + 1)
    else:
        snaps = np.asarray(snapshot_times, dtype=float)
        snap_steps = np.rint(snaps / dt).astype(int)
        if np.any(np.abs(snap_steps * dt - snaps) > 1e-9 * max(horizon, 1)):
            raise ValueError("snapshot times must be multiples of dt")
    L = laplacian_matrix(grid)
    I = sp.identity(grid.size, format="csr")
    nbr = grid.neighbor_table()
    scale = math.sqrt(grid.size)
    out, masses = [], []
    want = set(snap_steps.tolist())
    frozen = 0.0
    iters = halvings = 0
    if 0 in want:
        out.append(w.copy())
        masses.append(w.sum())
    for n in range(1, n_steps + 1):
        w_new, it, hv = _be_step(w, dt, L, I, phi, tol * scale, delta, max_halvings)
        iters += it
        halvings += hv
        nonpos = w_new <= 0
        quiet = nonpos & np.all(nonpos[nbr], axis=1)
        if quiet.any():
            frozen = max(frozen, float(np.abs(w_new[quiet] - w[quiet]).max()))
        w = w_new
        if n in want:
            out.append(w.copy())
            masses.append(w.sum())
    times = np.array(sorted(want)) * dt
    return StefanTrajectory(grid, times, np.array(out), dt, frozen, iters, halvings, np.array(masses))


def _be_step(w_old, dt, L, I, phi, tol, delta, max_halvings):
    """One backward-Euler step; on Newton failure, split into two half steps."""
    try:
        w, it = _newton(w_old, dt, L, I, phi, tol, delta)
        return w, it, 0
    except SchemeError:
        if max_halvings == 0:
            raise
    w_mid, it1, h1 = _be_step(w_old, dt / 2, L, I, phi, tol, delta, max_halvings - 1)
    w_new, it2, h2 = _be_step(w_mid, dt / 2, L, I, phi, tol, delta, max_halvings - 1)
    return w_new, it1 + it2, 1 + h1 + h2


def _newton(w_old, dt, L, I, phi, tol, delta, max_iter: int = 50):
    def resid(w):
        return w - w_old - dt * (L @ d_phi(phi, w))

    w = w_old.copy()
    F = resid(w)
    nrm = np.linalg.norm(F)
    for it in range(max_iter):
        if nrm < tol:
            return w, it
        J = (I - dt * L @ sp.diags(d_phi_slope(phi, w, delta))).tocsc()
        dw = spsolve(J, -F)
        lam = 1.0
        while True:
            trial = w + lam * dw
            if trial.max() <= phi.rho_hi:
                Ft = resid(trial)
                nt = np.linalg.norm(Ft)
                if nt < (1 - 1e-4 * lam) * nrm or nt < tol:
                    break
            lam *= 0.5
            if lam < 1e-6:
                raise SchemeError(f"line search failed (residual {nrm:.3g})")
        w, F, nrm = trial, Ft, nt
    if nrm < tol:
        return w, max_iter
    raise SchemeError(f"Newton did not converge (residual {nrm:.3g})")


# --- weak form ---------------------------------------------------------------

@dataclass(frozen=True)
class SpaceTimeTest:
    """psi(t, theta) = (1 - t/T)^2 * spatial(theta); vanishes at t = T."""

    spatial: TestFunction
    T: float
    power: int = 2

    @property
    def name(self) -> str:
        return self.spatial.name

    def envelope(self, t):
        return (1.0 - np.asarray(t) / self.T) ** self.power

    def envelope_dt(self, t):
        return -self.power / self.T * (1.0 - np.asarray(t) / self.T) ** (self.power - 1)


def test_catalog(T: float, d: int = 1, size: int = 8) -> list[SpaceTimeTest]:
    return [SpaceTimeTest(f, T) for f in catalog(d, size)]


test_catalog.__test__ = False


def weak_form_residual(traj: StefanTrajectory, w0, psi, phi: FugacityMap,
                       form: str = "full") -> float:
    """|<w0, psi(0)> + int_0^T <w, d_t psi> - <grad D(w), grad psi> dt|

    with <.,.> = N^-d sum_x, discrete forward gradients and trapezoidal time
    quadrature.  ``form="positive_part"`` uses w_+ in the time term instead
    of w."""
    if psi is None:
        return 0.0
    if form not in ("full", "positive_part"):
        raise ValueError("form must be 'full' or 'positive_part'")
    if abs(psi.envelope(psi.T)) > 0 or abs(traj.times[-1] - psi.T) > 1e-9 * psi.T:
        raise DomainError("test function must vanish at the final time T of the trajectory")
    grid = traj.grid
    spatial = psi.spatial.on_grid(grid)
    grad_psi = discrete_gradient(spatial, grid)
    w0 = np.asarray(w0, dtype=float)
    init = np.mean(w0 * spatial) * psi.envelope(traj.times[0])
    time_vals = []
    for k, t in enumerate(traj.times):
        w = traj.w[k]
        wt = w if form == "full" else np.maximum(w, 0.0)
        grad_d = discrete_gradient(d_phi(phi, w), grid)
        time_vals.append(
            np.mean(wt * spatial) * psi.envelope_dt(t)
            - np.mean(np.sum(grad_d * grad_psi, axis=0)) * psi.envelope(t)
        )
    return float(abs(init + trapezoid(time_vals, traj.times)))


def zero_test(T: float) -> SpaceTimeTest:
    return SpaceTimeTest(TestFunction("zero", lambda th: np.zeros(th.shape[0]), 0.0), T)


# --- diagnostics --------------------------------------------------------------

def segregation_report(u, v, grid: TorusGrid, tau: float = 1e-3) -> dict:
    """Overlap N^-d sum u v and the torus distance between {u > tau} and {v > tau}."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    overlap = float(np.mean(u * v))
    U = grid.positions()[u > tau]
    V = grid.positions()[v > tau]
    if len(U) == 0 or len(V) == 0:
        gap = math.inf
    else:
        tree = cKDTree(U % 1.0, boxsize=1.0)
        gap = float(tree.query(V % 1.0, k=1)[0].min())
    return {"overlap": overlap, "support_gap": gap}


def interface_positions(w, grid: TorusGrid) -> np.ndarray:
    """Zero crossings of the piecewise-linear interpolant of w along the
    first axis (d = 1 only), as macroscopic positions in [0, 1)."""
    if grid.d != 1:
        raise ValueError("interface positions are reported in d = 1 only")
    w = np.asarray(w, dtype=float)
    nxt = np.roll(w, -1)
    idx = np.nonzero((w > 0) != (nxt > 0))[0]
    frac = w[idx] / (w[idx] - nxt[idx])
    return np.sort(((idx + frac) / grid.N) % 1.0)


def restrict(w_fine, fine: TorusGrid, coarse: TorusGrid) -> np.ndarray:
    """Average fine values over each coarse cell [x/N - 1/2N, x/N + 1/2N)^d."""
    r = fine.N // coarse.N
    if r * coarse.N != fine.N or fine.d != coarse.d:
        raise ValueError("fine grid must refine the coarse grid by an integer factor")
    a = np.asarray(w_fine, dtype=float).reshape(fine.shape)
    # fine offsets j in [-r/2, r/2) around r*x; odd r uses the symmetric window
    shift = r // 2
    for j in range(fine.d):
        a = np.roll(a, shift, axis=j)
        a = a.reshape(a.shape[:j] + (coarse.N, r) + a.shape[j + 1:]).mean(axis=j + 1)
    return a.ravel()


def space_time_l2(times, a, b) -> float:
    """(int_0^T N^-d sum_x (a - b)^2 dt)^{1/2} by trapezoid."""
    sq = np.mean((np.asarray(a) - np.asarray(b)) ** 2, axis=1)
    return float(math.sqrt(trapezoid(sq, times)))


def dirichlet_energy(traj: StefanTrajectory, phi: FugacityMap) -> float:
    """int_0^T sum_x |grad D(w)|^2 dt: reported, no threshold."""
    vals = [np.sum(discrete_gradient(d_phi(phi, w), traj.grid) ** 2) for w in traj.w]
    return float(trapezoid(vals, traj.times))
