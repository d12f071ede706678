"""Command line entry point: ``zrstefan <command> [--config PATH] ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .harness import (
    ExperimentPlan,
    emit,
    fast_reaction_sweep,
    hydrodynamic_experiment,
    load_plan,
    residual_refinement,
    stationarity_experiment,
)
from .lattice import TorusGrid, write_snapshot
from .pde import FugacityMap, energy_report, solve
from .simulator import KMCSimulator, replica_rng
from .zrmeasure import ThermoTable, sample_product_config

DEFAULT_LADDER = [(10.0, 1e-1), (100.0, 1e-2), (1000.0, 1e-3)]


def _plan(args, **overrides) -> ExperimentPlan:
    plan = load_plan(args.config) if args.config else ExperimentPlan(**overrides)
    changes = {}
    for name in ("seed", "out", "threads", "budget"):
        value = getattr(args, name)
        if value is not None:
            changes[name] = value
    return replace(plan, **changes) if changes else plan


def _write_dicts(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [])
        w.writeheader()
        w.writerows(rows)


def _out(plan: ExperimentPlan) -> Path:
    out = Path(plan.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_thermo(args) -> int:
    plan = _plan(args)
    table = ThermoTable(plan.rate_spec())
    rows = table.export_rows(np.linspace(0.0, args.alpha_max, args.points))
    path = _out(plan) / "thermo.csv"
    _write_dicts(path, rows)
    print(path)
    return 0


def cmd_simulate(args) -> int:
    plan = _plan(args)
    spec = plan.rate_spec()
    table = ThermoTable(spec)
    N = plan.sizes[0]
    grid = TorusGrid(plan.d, N)
    sched = plan.schedule(N)
    pair = plan.profile().build(grid, sched)
    cfg = sample_product_config(grid, pair.u, pair.v, table, replica_rng(plan.seed, 0))
    res = KMCSimulator(cfg, sched, spec, replica_rng(plan.seed, 10_000), budget=plan.budget).run(
        plan.horizon, plan.snapshot_times())
    out = _out(plan)
    with open(out / "particles.bin", "wb") as fh:
        for k in range(res.times.size):
            write_snapshot(fh, grid, [res.eta1[k], res.eta2[k]])
    summary = res.summary() | {"N": N, "K": sched.K, "eps": sched.eps, "times": res.times.tolist()}
    (out / "simulate.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary["events"]))
    return 0


def cmd_pde(args) -> int:
    plan = _plan(args)
    table = ThermoTable(plan.rate_spec())
    N = plan.sizes[-1]
    grid = TorusGrid(plan.d, N)
    sched = plan.schedule(N)
    prof = plan.profile()
    phi = FugacityMap(table, prof.M_u)
    traj = solve(prof, sched, table, plan.horizon, plan.snapshot_times(), grid=grid, phi=phi)
    out = _out(plan)
    with open(out / "pde.bin", "wb") as fh:
        for k in range(traj.times.size):
            write_snapshot(fh, grid, [traj.u[k], traj.v[k]])
    report = energy_report(traj, phi).as_dict() | {"N": N, "K": sched.K, "eps": sched.eps}
    (out / "energy.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report))
    return 0


def cmd_stefan(args) -> int:
    plan = _plan(args)
    rows = residual_refinement(plan.sizes, horizon=args.horizon)
    out = _out(plan)
    (out / "residuals.json").write_text(json.dumps(rows, indent=1))
    _write_dicts(out / "interfaces.csv", [{"N": r["N"], "left": r["interfaces"][0], "right": r["interfaces"][-1]}
                                          for r in rows if r["interfaces"]])
    for r in rows:
        print(f"N={r['N']:5d}  max residual {r['max_residual']:.3e}  C {r['C']:.4f}")
    return 0


def _sweep(args, run, **defaults) -> int:
    plan = _plan(args, **defaults)
    rows = run(plan)
    paths = emit(rows, plan)
    for r in rows:
        se = "" if r.stderr is None else f" +- {r.stderr:.2e}"
        print(f"{r.experiment:14s} N={r.N:5d} K={r.K:<8.4g} eps={r.eps:<8.3g} {r.metric:28s} {r.value:.6g}{se}")
    print(paths["manifest"])
    return 0


def cmd_hydro(args) -> int:
    return _sweep(args, hydrodynamic_experiment)


def cmd_fast(args) -> int:
    return _sweep(args, fast_reaction_sweep, kind="fast_reaction", sizes=[256], rule=None,
                  ladder=list(DEFAULT_LADDER), rate={"kind": "affine", "a": 1.0},
                  initial=dict(family="bump", M_u=1.0, M_v=0.5, C0=100.0, C1=1.0, width=0.25,
                               rho1=1.0, rho2=0.3))


def cmd_stationarity(args) -> int:
    return _sweep(args, stationarity_experiment, kind="stationarity", sizes=[128], horizon=0.5)


def cmd_check(args) -> int:
    try:
        import pytest
    except ImportError:
        print("pytest is not installed; install the 'test' extra", file=sys.stderr)
        return 2
    tests = Path(args.tests) if args.tests else Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        print(f"test directory {tests} not found; pass --tests", file=sys.stderr)
        return 2
    return int(pytest.main([str(tests), "-q"] + (["-m", "not slow"] if args.quick else [])))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment file (see docs/config_schema.md)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads for replicas and rungs")
    common.add_argument("--budget", type=int, help="per-run event budget")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="zrstefan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("thermo", parents=[common], help="dump Z, rho and chi1 over a fugacity grid")
    p.add_argument("--alpha-max", type=float, default=10.0)
    p.add_argument("--points", type=int, default=101)
    p.set_defaults(func=cmd_thermo)
    sub.add_parser("simulate", parents=[common], help="one particle replica").set_defaults(func=cmd_simulate)
    sub.add_parser("pde", parents=[common], help="semi-discrete reaction-diffusion run").set_defaults(func=cmd_pde)
    p = sub.add_parser("stefan", parents=[common], help="Stefan solver refinement and weak-form residuals")
    p.add_argument("--horizon", type=float, default=0.01)
    p.set_defaults(func=cmd_stefan)
    sub.add_parser("hydro-sweep", parents=[common], help="particles vs PDE over N").set_defaults(func=cmd_hydro)
    sub.add_parser("fast-reaction-sweep", parents=[common],
                   help="PDE along a (K, eps) ladder vs Stefan").set_defaults(func=cmd_fast)
    sub.add_parser("stationarity", parents=[common],
                   help="K = 0 homogeneous stationarity check").set_defaults(func=cmd_stationarity)
    p = sub.add_parser("check", parents=[common], help="run the property and acceptance suites")
    p.add_argument("--tests", help="path to the tests directory")
    p.add_argument("--quick", action="store_true", help="skip tests marked slow")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
