import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zrstefan.lattice import TorusGrid
from zrstefan.pde import FugacityMap
from zrstefan.stefan import (
    SpaceTimeTest,
    d_phi,
    dirichlet_energy,
    interface_positions,
    restrict,
    segregation_report,
    solve_stefan,
    space_time_l2,
    test_catalog as make_catalog,
    weak_form_residual,
    zero_test,
)
from zrstefan.zrmeasure import DomainError, ThermoTable, affine_rate, linear_rate


@pytest.fixture(scope="module")
def aff_phi():
    return FugacityMap(ThermoTable(affine_rate()), 1.0)


@pytest.fixture(scope="module")
def lin_phi():
    return FugacityMap(ThermoTable(linear_rate()), 1.0)


def test_d_phi_examples(lin_phi, aff_phi):
    assert d_phi(lin_phi, -1.0) == 0
    assert d_phi(aff_phi, 0.0) == 0
    assert d_phi(FugacityMap(ThermoTable(linear_rate()), 2.0), 2.0) == pytest.approx(2.0)
    with pytest.raises(DomainError):
        d_phi(aff_phi, 100.0)


@settings(max_examples=200)
@given(st.floats(-2, 2.3), st.floats(-2, 2.3))
def test_d_phi_monotone(a, b):
    phi = FugacityMap(ThermoTable(affine_rate()), 1.0)
    assert (a - b) * (d_phi(phi, a) - d_phi(phi, b)) >= 0


def test_nonnegative_data_is_discrete_heat(lin_phi):
    N = 64
    g = TorusGrid(1, N)
    x = np.arange(N)
    w0 = 0.5 + 0.25 * np.cos(2 * np.pi * x / N)
    lam = 4 * N**2 * math.sin(math.pi / N) ** 2
    T = 0.01
    errs = []
    for dt in (1e-5, 5e-6):
        tr = solve_stefan(w0, T, g, phi=lin_phi, dt=dt, snapshot_times=[0, T])
        # backward Euler eigenvalue for the mode
        be = 0.5 + 0.25 * (1 + lam * dt) ** (-round(T / dt)) * np.cos(2 * np.pi * x / N)
        assert np.abs(tr.w[-1] - be).max() < 1e-10
        exact = 0.5 + 0.25 * math.exp(-lam * T) * np.cos(2 * np.pi * x / N)
        errs.append(np.abs(tr.w[-1] - exact).max())
    assert errs[1] < 1e-4 and errs[0] / errs[1] == pytest.approx(2, rel=0.05)


def test_nonpositive_data_is_frozen(aff_phi):
    g = TorusGrid(1, 32)
    w0 = -0.3 - 0.2 * np.sin(2 * np.pi * np.arange(32) / 32) ** 2
    tr = solve_stefan(w0, 0.01, g, phi=aff_phi, dt=1e-3)
    assert np.all(tr.w == w0)


def half_half(N):
    g = TorusGrid(1, N)
    th = g.positions()[:, 0]
    return g, np.where(th < 0.5, 0.8, -0.4)


def test_half_half_front_and_conservation(aff_phi):
    g, w0 = half_half(128)
    times = [0, 0.005, 0.01]
    tr = solve_stefan(w0, 0.01, g, phi=aff_phi, dt=1e-4, snapshot_times=times)
    assert np.allclose(tr.mass, w0.sum(), rtol=0, atol=1e-10)
    fronts = [interface_positions(w, g) for w in tr.w]
    # interfaces move into the negative phase on both sides
    assert fronts[1][0] > fronts[0][0] and fronts[2][0] > fronts[1][0]
    assert fronts[1][1] < fronts[0][1] and fronts[2][1] < fronts[1][1]
    # u-mass lost equals v-mass consumed
    du = tr.u[0].sum() - tr.u[-1].sum()
    dv = tr.v[0].sum() - tr.v[-1].sum()
    assert du == pytest.approx(dv, abs=1e-9)


def test_half_half_self_convergence(aff_phi):
    """Fine-grid (N = 1024) reference; coarse errors decrease under refinement."""
    T, dt = 0.005, 2.5e-5
    gf, wf = half_half(1024)
    ref = solve_stefan(wf, T, gf, phi=aff_phi, dt=dt / 4, snapshot_times=[T])
    errs, fronts = [], []
    front_ref = interface_positions(ref.w[-1], gf)
    for N in (64, 128, 256):
        g, w0 = half_half(N)
        tr = solve_stefan(w0, T, g, phi=aff_phi, dt=dt, snapshot_times=[T])
        errs.append(np.mean(np.abs(tr.w[-1] - restrict(ref.w[-1], gf, g))))
        fronts.append(np.abs(interface_positions(tr.w[-1], g) - front_ref).max())
    assert errs[0] > errs[1] > errs[2]
    assert fronts[2] < 2.0 / 256


def test_frozen_plateau_far_from_interface(aff_phi):
    g = TorusGrid(1, 128)
    th = g.positions()[:, 0]
    w0 = np.where(th < 0.3, 0.5, -0.6)
    tr = solve_stefan(w0, 0.002, g, phi=aff_phi, dt=1e-4)
    interior = (th > 0.55) & (th < 0.75)
    assert np.abs(tr.w[-1][interior] - w0[interior]).max() < 1e-9
    assert tr.frozen_drift < 1e-9


def test_ordering_preserved(aff_phi):
    g = TorusGrid(1, 64)
    rng = np.random.default_rng(0)
    lo = rng.uniform(-0.5, 0.5, 64)
    hi = lo + rng.uniform(0, 0.3, 64)
    a = solve_stefan(lo, 0.005, g, phi=aff_phi, dt=2.5e-4)
    b = solve_stefan(hi, 0.005, g, phi=aff_phi, dt=2.5e-4)
    assert np.all(a.w <= b.w + 1e-10)


def test_weak_residual_zero_psi(aff_phi):
    g, w0 = half_half(32)
    tr = solve_stefan(w0, 0.01, g, phi=aff_phi, dt=1e-3)
    assert weak_form_residual(tr, w0, zero_test(0.01), aff_phi) == 0
    assert weak_form_residual(tr, w0, None, aff_phi) == 0


def test_weak_residual_frozen_solution(aff_phi):
    g = TorusGrid(1, 32)
    th = g.positions()[:, 0]
    w0 = -0.2 - 0.1 * np.cos(2 * np.pi * th)
    T = 0.01
    tr = solve_stefan(w0, T, g, phi=aff_phi, dt=1e-4)
    for psi in make_catalog(T):
        init = abs(np.mean(w0 * psi.spatial.on_grid(g)))
        # positive-part form: w_+ = 0, so only the initial pairing survives
        assert weak_form_residual(tr, w0, psi, aff_phi, form="positive_part") == pytest.approx(init, abs=1e-15)
        # full form: the frozen state is an exact solution
        assert weak_form_residual(tr, w0, psi, aff_phi) < 1e-7


def test_weak_residual_requires_vanishing_psi(aff_phi):
    g, w0 = half_half(32)
    tr = solve_stefan(w0, 0.01, g, phi=aff_phi, dt=1e-3)
    with pytest.raises(DomainError):
        weak_form_residual(tr, w0, SpaceTimeTest(make_catalog(0.02)[1].spatial, 0.02), aff_phi)


def test_catalog_has_eight_members():
    cat = make_catalog(1.0)
    assert len(cat) == 8
    assert all(p.envelope(1.0) == 0 for p in cat)


def test_segregation_examples():
    g = TorusGrid(1, 100)
    th = g.positions()[:, 0]
    u = np.where((th > 0.1) & (th < 0.3), 1.0, 0.0)
    v = np.where((th > 0.5) & (th < 0.7), 0.5, 0.0)
    rep = segregation_report(u, v, g)
    assert rep["overlap"] == 0
    assert rep["support_gap"] == pytest.approx(0.22, abs=1e-9)
    rep = segregation_report(np.ones(100), np.ones(100), g)
    assert rep == {"overlap": 1.0, "support_gap": 0.0}
    # periodic distance across the seam
    u = np.where(th < 0.05, 1.0, 0.0)
    v = np.where(th > 0.9, 1.0, 0.0)
    assert segregation_report(u, v, g)["support_gap"] == pytest.approx(0.01, abs=1e-9)


def test_restrict_averages_cells():
    coarse, fine = TorusGrid(1, 4), TorusGrid(1, 16)
    w = np.arange(16.0)
    got = restrict(w, fine, coarse)
    assert got[1] == pytest.approx(np.mean([2, 3, 4, 5]))
    assert got[0] == pytest.approx(np.mean([14, 15, 0, 1]))
    c2, f2 = TorusGrid(2, 4), TorusGrid(2, 8)
    assert restrict(np.ones(64), f2, c2).tolist() == [1.0] * 16


def test_space_time_l2():
    t = np.linspace(0, 1, 11)
    a = np.ones((11, 4))
    assert space_time_l2(t, a, 0 * a) == pytest.approx(1.0)


def test_dirichlet_energy_reported(aff_phi):
    g, w0 = half_half(64)
    tr = solve_stefan(w0, 0.005, g, phi=aff_phi, dt=2.5e-4)
    assert dirichlet_energy(tr, aff_phi) > 0
