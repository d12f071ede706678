"""Experiment plans, sweeps and result persistence.

Three experiment kinds run end to end:

* ``hydrodynamic``: particle replicas against the semi-discrete PDE over a list of N.
* ``fast_reaction``: the PDE along a (K, eps) ladder against a fine Stefan reference.
* ``stationarity``: K = 0 homogeneous product data, time-averaged pairings.

Plans come from an INI file (see ``docs/config_schema.md``); unknown sections
or keys are rejected.  ``emit`` writes rows.csv, summary.json and a manifest
holding the resolved config text, its hash, the seed and library versions.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import os
import platform
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .lattice import TorusGrid
from .observables import block_field, catalog, default_block_radius, time_integral
from .pde import FugacityMap, InitialProfileSpec, energy_report, plateau_profile, solve
from .simulator import BudgetExceeded, KMCSimulator, ScalingSchedule, replica_rng
from .stefan import (
    interface_positions,
    restrict,
    segregation_report,
    solve_stefan,
    space_time_l2,
    test_catalog,
    weak_form_residual,
)
from .zrmeasure import DomainError, ThermoTable, rate_from_config, sample_product_config

log = logging.getLogger(__name__)

KINDS = ("hydrodynamic", "fast_reaction", "stationarity", "unit_oracles")

# section -> key -> (type, default); every accepted key is listed here
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "experiment": {
        "kind": (str, "hydrodynamic"),
        "seed": (int, 20240501),
        "replicas": (int, 32),
        "horizon": (float, 0.05),
        "snapshots": (int, 21),
        "out": (str, "results"),
        "threads": (int, 1),
        "budget": (int, 5_000_000_000),
    },
    "grid": {
        "d": (int, 1),
        "sizes": (str, "64, 128, 256"),
    },
    "schedule": {
        "delta1": (float, 1.0),
        "delta2": (float, 1.0),
        "alpha_eps": (float, 0.5),
        "k_fraction": (float, 1.0),
        "ladder": (str, ""),
    },
    "rate": {
        "kind": (str, "linear"),
        "a": (float, 1.0),
    },
    "initial": {
        "family": (str, "bump"),
        "M_u": (float, 1.0),
        "M_v": (float, 0.5),
        "C0": (float, 5000.0),
        "C1": (float, 10.0),
        "width": (float, 0.08),
        "rho1": (float, 1.0),
        "rho2": (float, 0.3),
    },
    "stefan": {
        "dt": (float, 1e-4),
        "ref_factor": (int, 4),
        "ref_dt_divisor": (int, 16),
    },
}


def _parse_list(text: str, cast) -> list:
    return [cast(s) for s in text.replace(";", ",").split(",") if s.strip()]


def _parse_ladder(text: str) -> list[tuple[float, float]]:
    rungs = []
    for item in _parse_list(text, str):
        try:
            K, eps = item.split(":")
            rungs.append((float(K), float(eps)))
        except ValueError:
            raise DomainError(f"ladder rung {item!r} is not of the form K:eps") from None
    return rungs


@dataclass
class ExperimentPlan:
    kind: str = "hydrodynamic"
    d: int = 1
    sizes: list[int] = field(default_factory=lambda: [64, 128, 256])
    rule: dict | None = field(default_factory=lambda: dict(delta1=1.0, delta2=1.0, alpha_eps=0.5, k_fraction=1.0))
    ladder: list[tuple[float, float]] = field(default_factory=list)
    replicas: int = 32
    seed: int = 20240501
    horizon: float = 0.05
    snapshots: int = 21
    out: str = "results"
    threads: int = 1
    budget: int = 5_000_000_000
    rate: dict = field(default_factory=lambda: {"kind": "linear"})
    initial: dict = field(default_factory=lambda: dict(family="bump", M_u=1.0, M_v=0.5, C0=5000.0,
                                                       C1=10.0, width=0.08, rho1=1.0, rho2=0.3))
    stefan: dict = field(default_factory=lambda: dict(dt=1e-4, ref_factor=4, ref_dt_divisor=16))
    config_text: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown experiment kind {self.kind!r} (expected one of {', '.join(KINDS)})")
        if self.replicas < 1 or self.snapshots < 2 or self.horizon <= 0:
            raise DomainError("need replicas >= 1, snapshots >= 2 and horizon > 0")
        if self.ladder:
            Ks = [k for k, _ in self.ladder]
            es = [e for _, e in self.ladder]
            if self.kind in ("hydrodynamic", "fast_reaction") and (
                    any(b <= a for a, b in zip(Ks, Ks[1:])) or any(b >= a for a, b in zip(es, es[1:]))):
                raise DomainError("ladder must have K strictly increasing and eps strictly decreasing")
        elif self.kind == "fast_reaction":
            raise DomainError("fast_reaction needs an explicit (K, eps) ladder")
        if self.kind == "hydrodynamic" and not self.ladder:
            for N in self.sizes:
                self.schedule(N)  # raises naming the K growth bound on violation

    def schedule(self, N: int, rung: int | None = None) -> ScalingSchedule:
        if self.ladder:
            K, eps = self.ladder[rung or 0]
            return ScalingSchedule(K=K, eps=eps)
        r = self.rule
        return ScalingSchedule.from_rule(N, r["delta1"], r["delta2"], r["alpha_eps"], r.get("k_fraction", 1.0))

    def snapshot_times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.snapshots)

    def rate_spec(self):
        params = {k: v for k, v in self.rate.items() if k != "kind"}
        return rate_from_config(self.rate["kind"], **params)

    def profile(self) -> InitialProfileSpec:
        keys = ("family", "M_u", "M_v", "C0", "C1", "width")
        return InitialProfileSpec(**{k: self.initial[k] for k in keys})

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def canonical(self) -> str:
        """Fully resolved INI text; loading it reproduces this plan."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["experiment"] = {k: str(getattr(self, k)) for k in SCHEMA["experiment"]}
        cp["grid"] = {"d": str(self.d), "sizes": ", ".join(map(str, self.sizes))}
        sched = {k: str(v) for k, v in (self.rule or {}).items()}
        sched["ladder"] = ", ".join(f"{K!r}:{e!r}" for K, e in self.ladder)
        cp["schedule"] = sched
        cp["rate"] = {k: str(v) for k, v in self.rate.items()}
        cp["initial"] = {k: str(v) for k, v in self.initial.items()}
        cp["stefan"] = {k: str(v) for k, v in self.stefan.items()}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)


def parse_plan(text: str) -> ExperimentPlan:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case sensitive (M_u, C0, ...)
    cp.read_string(text)
    values: dict[str, dict] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise DomainError(f"unknown config section [{sec}]")
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise DomainError(f"unknown key {key!r} in section [{sec}]")
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (typ, default) in keys.items():
            raw = cp.get(sec, key, fallback=None)
            values[sec][key] = default if raw is None else typ(raw)
            if raw is None:
                log.debug("default %s.%s = %r", sec, key, default)
    e, s = values["experiment"], values["schedule"]
    ladder = _parse_ladder(s["ladder"])
    rate = {"kind": values["rate"]["kind"]}
    if rate["kind"] == "affine":
        rate["a"] = values["rate"]["a"]
    return ExperimentPlan(
        kind=e["kind"], d=values["grid"]["d"], sizes=_parse_list(values["grid"]["sizes"], int),
        rule=None if ladder else {k: s[k] for k in ("delta1", "delta2", "alpha_eps", "k_fraction")},
        ladder=ladder, replicas=e["replicas"], seed=e["seed"], horizon=e["horizon"],
        snapshots=e["snapshots"], out=e["out"], threads=e["threads"], budget=e["budget"],
        rate=rate, initial=values["initial"], stefan=values["stefan"], config_text=text,
    )


def load_plan(path) -> ExperimentPlan:
    return parse_plan(Path(path).read_text())


@dataclass
class ResultRow:
    experiment: str
    metric: str
    value: float
    N: int
    K: float
    eps: float
    replicas: int = 1
    stderr: float | None = None
    wall_time: float = 0.0
    complete: bool = True

    def __post_init__(self):
        if (self.stderr is not None) != (self.replicas > 1):
            raise ValueError("standard error must be given exactly for replica-averaged metrics")


def _replica_stats(values) -> tuple[float, float | None]:
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return math.nan, None
    if a.size < 2:
        return float(a.mean()), None
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))  # ordered by item, not completion


# --- hydrodynamic limit --------------------------------------------------------

def hydrodynamic_experiment(plan: ExperimentPlan) -> list[ResultRow]:
    """Particles vs the semi-discrete PDE for each N in ``plan.sizes``.

    Per replica: the pairing gap |int_0^T <pi_t - u_t, psi> dt| averaged over
    the catalog and both species, and the L1 distance between block-averaged
    eta_1 and u, averaged over the snapshot grid.  Rows carry replica means and
    standard errors."""
    spec = plan.rate_spec()
    table = ThermoTable(spec)
    prof = plan.profile()
    times = plan.snapshot_times()
    rows = []
    for N in plan.sizes:
        start = time.perf_counter()
        grid = TorusGrid(plan.d, N)
        sched = plan.schedule(N)
        traj = solve(prof, sched, table, plan.horizon, times, grid=grid)
        psis = np.array([p.on_grid(grid) for p in catalog(plan.d)])
        ell = default_block_radius(grid)
        u_blocks = traj.u  # compared pointwise, as in l1_profile_distance

        def one(r):
            cfg = sample_product_config(grid, traj.u[0], traj.v[0], table, replica_rng(plan.seed, r))
            sim = KMCSimulator(cfg, sched, spec, replica_rng(plan.seed, 10_000 + r), budget=plan.budget)
            try:
                res = sim.run(plan.horizon, times)
            except BudgetExceeded as exc:
                log.warning("N=%d replica %d incomplete: %s", N, r, exc)
                return None
            gaps = []
            for eta, f in ((res.eta1, traj.u), (res.eta2, traj.v)):
                diff = (eta - f) @ psis.T / grid.size  # (n_snap, n_psi)
                gaps.extend(abs(time_integral(times, diff[:, j])) for j in range(psis.shape[0]))
            blocks = np.array([block_field(e, grid, ell) for e in res.eta1])
            l1_t = np.mean(np.abs(blocks - u_blocks), axis=1)
            mass0 = float(np.mean(res.eta1[0] - traj.u[0]))
            return float(np.mean(gaps)), time_integral(times, l1_t) / plan.horizon, float(l1_t[-1]), mass0, blocks[-1]

        out = _map(one, range(plan.replicas), plan.threads)
        done = [o for o in out if o is not None]
        complete = len(done) == plan.replicas
        wall = time.perf_counter() - start
        R = len(done)
        common = dict(experiment="hydrodynamic", N=N, K=sched.K, eps=sched.eps, replicas=R,
                      wall_time=wall, complete=complete)
        for j, name in enumerate(("pairing_gap", "l1_distance", "l1_distance_final", "initial_mass_gap")):
            m, se = _replica_stats([o[j] for o in done])
            rows.append(ResultRow(metric=name, value=m, stderr=se, **common))
        dist = math.nan
        if done:
            avg_profile = np.mean([o[4] for o in done], axis=0)
            dist = float(np.mean(np.abs(avg_profile - traj.u[-1])))
        rows.append(ResultRow(experiment="hydrodynamic", metric="l1_distance_of_mean_profile",
                              value=dist, N=N, K=sched.K,
                              eps=sched.eps, wall_time=wall, complete=complete))
    return rows


# --- stationarity ----------------------------------------------------------------

def stationarity_experiment(plan: ExperimentPlan) -> list[ResultRow]:
    """K = 0, homogeneous product data: time-averaged <pi_1, psi> per catalog
    member, with the target rho1 * int psi stored in the row metric name."""
    spec = plan.rate_spec()
    table = ThermoTable(spec)
    rho1, rho2 = plan.initial["rho1"], plan.initial["rho2"]
    times = plan.snapshot_times()
    rows = []
    for N in plan.sizes:
        start = time.perf_counter()
        grid = TorusGrid(plan.d, N)
        base = plan.schedule(N) if not plan.ladder else plan.schedule(N, 0)
        sched = ScalingSchedule(K=0.0, eps=base.eps)
        cat = catalog(plan.d)
        psis = np.array([p.on_grid(grid) for p in cat])
        u = np.full(grid.size, rho1)
        v = np.full(grid.size, rho2)

        def one(r):
            cfg = sample_product_config(grid, u, v, table, replica_rng(plan.seed, r))
            res = KMCSimulator(cfg, sched, spec, replica_rng(plan.seed, 10_000 + r), budget=plan.budget).run(
                plan.horizon, times)
            pair = res.eta1 @ psis.T / grid.size
            return [time_integral(times, pair[:, j]) / plan.horizon for j in range(len(cat))]

        out = np.array(_map(one, range(plan.replicas), plan.threads))
        wall = time.perf_counter() - start
        for j, p in enumerate(cat):
            m, se = _replica_stats(out[:, j])
            rows.append(ResultRow(experiment="stationarity", metric=f"time_avg_pairing[{p.name}]", value=m,
                                  stderr=se, N=N, K=0.0, eps=sched.eps, replicas=plan.replicas, wall_time=wall))
            rows.append(ResultRow(experiment="stationarity", metric=f"target[{p.name}]",
                                  value=rho1 * p.integral, N=N, K=0.0, eps=sched.eps, wall_time=0.0))
    return rows


# --- fast reaction ----------------------------------------------------------------

def stefan_reference(plan: ExperimentPlan, N: int, table: ThermoTable):
    """Fine-grid backward-Euler Stefan solution restricted to the N-grid."""
    prof = plan.profile()
    fine = TorusGrid(plan.d, plan.stefan["ref_factor"] * N)
    coarse = TorusGrid(plan.d, N)
    dt_ref = plan.stefan["dt"] / plan.stefan["ref_dt_divisor"]
    phi = FugacityMap(table, prof.M_u)
    ref = solve_stefan(prof.macroscopic_w0(fine), plan.horizon, fine, phi=phi, dt=dt_ref,
                       snapshot_times=plan.snapshot_times())
    return np.array([restrict(w, fine, coarse) for w in ref.w]), ref


def fast_reaction_sweep(plan: ExperimentPlan, reference=None) -> list[ResultRow]:
    """PDE along the (K, eps) ladder on the grid ``plan.sizes[-1]``; space-time
    L2 distance of w_K = u - v to the Stefan reference and the overlap mass
    int_0^T N^{-d} sum u v dt (equal to the reaction integral over K)."""
    table = ThermoTable(plan.rate_spec())
    N = plan.sizes[-1]
    grid = TorusGrid(plan.d, N)
    prof = plan.profile()
    times = plan.snapshot_times()
    t0 = time.perf_counter()
    w_ref = reference if reference is not None else stefan_reference(plan, N, table)[0]
    ref_wall = time.perf_counter() - t0
    rows = [ResultRow(experiment="fast_reaction", metric="stefan_reference_mass_drift",
                      value=float(np.abs(w_ref.sum(axis=1) - w_ref[0].sum()).max() / grid.size),
                      N=N, K=math.inf, eps=0.0, wall_time=ref_wall)]
    phi = FugacityMap(table, prof.M_u)

    def one(i):
        K, eps = plan.ladder[i]
        sched = ScalingSchedule(K=K, eps=eps)
        start = time.perf_counter()
        traj = solve(prof, sched, table, plan.horizon, times, grid=grid, phi=phi)
        rep = energy_report(traj, phi)
        w = traj.u - traj.v
        seg = segregation_report(traj.u[-1], traj.v[-1], grid)
        wall = time.perf_counter() - start
        common = dict(experiment="fast_reaction", N=N, K=K, eps=eps, wall_time=wall)
        return [
            ResultRow(metric="l2_distance_to_stefan", value=space_time_l2(times, w, w_ref), **common),
            ResultRow(metric="overlap_mass", value=rep.reaction_integral_scheme / K, **common),
            ResultRow(metric="overlap_bound", value=prof.M_u / K, **common),
            ResultRow(metric="reaction_integral", value=rep.reaction_integral_scheme, **common),
            ResultRow(metric="final_overlap", value=seg["overlap"], **common),
            ResultRow(metric="final_support_gap", value=seg["support_gap"], **common),
            ResultRow(metric="E_u", value=rep.E_u, **common),
        ]

    for chunk in _map(one, range(len(plan.ladder)), plan.threads):
        rows.extend(chunk)
    return rows


# --- Stefan refinement ----------------------------------------------------------------

def two_phase_w0(grid: TorusGrid, M_u: float = 0.8, M_v: float = 0.4) -> np.ndarray:
    """Smoothed plateaus: positive phase on [0.1, 0.4], negative on [0.5, 0.9]."""
    th = grid.positions()[:, 0]
    return M_u * plateau_profile(th, 0.25, 0.15, 0.05) - M_v * plateau_profile(th, 0.7, 0.2, 0.05)


def residual_refinement(sizes, horizon: float = 0.01, dt_times_N: float = 0.0064,
                        table: ThermoTable | None = None, frozen_core=(0.65, 0.8)) -> list[dict]:
    """Weak-form residual of the Stefan solver over the 8-member catalog for each N,
    with dt = dt_times_N / N, plus the change of w on the frozen negative core."""
    table = table or ThermoTable(rate_from_config("affine", a=1.0))
    out = []
    for N in sizes:
        grid = TorusGrid(1, N)
        w0 = two_phase_w0(grid)
        phi = FugacityMap(table, max(float(w0.max()), 1e-12))
        dt = dt_times_N / N
        start = time.perf_counter()
        traj = solve_stefan(w0, horizon, grid, phi=phi, dt=dt)
        res = {p.name: weak_form_residual(traj, w0, p, phi) for p in test_catalog(horizon)}
        th = grid.positions()[:, 0]
        core = (th > frozen_core[0]) & (th < frozen_core[1])
        worst = max(res.values())
        out.append({"N": N, "dt": traj.dt, "residuals": res, "max_residual": worst,
                    "C": worst / (1.0 / N + traj.dt),
                    "frozen_change": float(np.abs(traj.w[:, core] - w0[core]).max()),
                    "frozen_drift": traj.frozen_drift,
                    "mass_drift": float(np.abs(traj.mass - traj.mass[0]).max()),
                    "interfaces": interface_positions(traj.w[-1], grid).tolist(),
                    "wall_time": time.perf_counter() - start})
    return out


def run_plan(plan: ExperimentPlan) -> list[ResultRow]:
    if plan.kind == "hydrodynamic":
        return hydrodynamic_experiment(plan)
    if plan.kind == "fast_reaction":
        return fast_reaction_sweep(plan)
    if plan.kind == "stationarity":
        return stationarity_experiment(plan)
    raise DomainError("unit_oracles plans are run through the test suite (zrstefan check)")


def metric(rows, name: str, **match) -> list[ResultRow]:
    """Rows with the given metric whose fields equal ``match``, in input order."""
    return [r for r in rows if r.metric == name and all(getattr(r, k) == v for k, v in match.items())]


# --- persistence ------------------------------------------------------------------

def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def versions() -> dict:
    import numba
    import scipy

    return {"zrstefan": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def emit(rows: list[ResultRow], plan: ExperimentPlan, out_dir=None) -> dict[str, Path]:
    """Write rows.csv, summary.json and manifest.json into ``out_dir``."""
    out = Path(out_dir or plan.out)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=lambda r: (r.experiment, r.N, r.K, -r.eps, r.metric))
    names = list(asdict(ordered[0]).keys()) if ordered else [f for f in ResultRow.__dataclass_fields__]
    lines = [",".join(names)]
    for r in ordered:
        d = asdict(r)
        lines.append(",".join("" if d[k] is None else repr(d[k]) if isinstance(d[k], float) else str(d[k])
                              for k in names))
    paths = {"rows": out / "rows.csv", "summary": out / "summary.json", "manifest": out / "manifest.json"}
    _atomic_write(paths["rows"], "\n".join(lines) + "\n")
    _atomic_write(paths["summary"], json.dumps([asdict(r) for r in ordered], indent=1, default=str))
    manifest = {"config": plan.canonical(), "config_sha256": plan.config_hash(), "seed": plan.seed,
                "kind": plan.kind, "versions": versions()}
    _atomic_write(paths["manifest"], json.dumps(manifest, indent=1))
    return paths


def plan_from_manifest(path) -> ExperimentPlan:
    data = json.loads(Path(path).read_text())
    plan = parse_plan(data["config"])
    if plan.config_hash() != data["config_sha256"]:
        raise DomainError("manifest config hash mismatch")
    return plan


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
