import json

import numpy as np
import pytest

from zrstefan.cli import main
from zrstefan.harness import (
    SCHEMA,
    ExperimentPlan,
    ResultRow,
    emit,
    fast_reaction_sweep,
    hydrodynamic_experiment,
    metric,
    parse_plan,
    plan_from_manifest,
    read_rows,
    stationarity_experiment,
)
from zrstefan.zrmeasure import DomainError


def test_minimal_config_resolves_documented_defaults():
    plan = parse_plan("[experiment]\nkind = hydrodynamic\n")
    assert plan.sizes == [64, 128, 256]
    assert plan.replicas == 32 and plan.seed == SCHEMA["experiment"]["seed"][1]
    assert plan.rule == {"delta1": 1.0, "delta2": 1.0, "alpha_eps": 0.5, "k_fraction": 1.0}
    assert plan.initial["M_u"] == 1.0 and plan.rate == {"kind": "linear"}
    # defaults in the dataclass and the schema agree
    assert parse_plan("").canonical() == ExperimentPlan().canonical()


def test_unknown_keys_rejected():
    with pytest.raises(DomainError, match="unknown key 'delta3'"):
        parse_plan("[schedule]\ndelta3 = 1\n")
    with pytest.raises(DomainError, match=r"unknown config section \[solver\]"):
        parse_plan("[solver]\ndt = 1\n")


def test_rule_beyond_cap_rejected():
    with pytest.raises(DomainError, match="K growth bound violated"):
        parse_plan("[schedule]\ndelta1 = 0.5\ndelta2 = 0.5\n")
    with pytest.raises(DomainError, match="K growth bound violated"):
        parse_plan("[schedule]\nk_fraction = 1.5\n")


def test_ladder_must_be_monotone():
    with pytest.raises(DomainError, match="strictly"):
        parse_plan("[experiment]\nkind = fast_reaction\n[schedule]\nladder = 100:0.01, 10:0.1\n")
    with pytest.raises(DomainError, match="K:eps"):
        parse_plan("[schedule]\nladder = 10\n")
    with pytest.raises(DomainError, match="needs an explicit"):
        parse_plan("[experiment]\nkind = fast_reaction\n")


def test_result_row_stderr_invariant():
    ResultRow("x", "m", 1.0, N=8, K=1.0, eps=0.1, replicas=4, stderr=0.1)
    with pytest.raises(ValueError):
        ResultRow("x", "m", 1.0, N=8, K=1.0, eps=0.1, replicas=4)
    with pytest.raises(ValueError):
        ResultRow("x", "m", 1.0, N=8, K=1.0, eps=0.1, stderr=0.1)


def small_hydro():
    return ExperimentPlan(sizes=[16, 32], replicas=4, horizon=0.01, snapshots=5, seed=3,
                          initial=dict(family="bump", M_u=1.0, M_v=0.5, C0=5000.0, C1=10.0,
                                       width=0.25, rho1=1.0, rho2=0.3),
                          rule=dict(delta1=4.0, delta2=4.0, alpha_eps=0.5, k_fraction=1.0))


def test_hydro_rows_and_manifest_round_trip(tmp_path):
    plan = small_hydro()
    rows = hydrodynamic_experiment(plan)
    assert {r.metric for r in rows} >= {"pairing_gap", "l1_distance", "initial_mass_gap"}
    assert all(r.complete for r in rows)
    paths = emit(rows, plan, tmp_path / "a")
    manifest = json.loads(paths["manifest"].read_text())
    assert manifest["seed"] == 3 and len(manifest["config_sha256"]) == 64
    assert set(manifest["versions"]) >= {"numpy", "scipy", "numba", "python"}
    again = plan_from_manifest(paths["manifest"])
    paths2 = emit(hydrodynamic_experiment(again), again, tmp_path / "b")
    strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_time"} for r in rs]
    first, second = read_rows(paths["rows"]), read_rows(paths2["rows"])
    assert len(first) == len(rows)
    assert strip(first) == strip(second)  # bit-identical apart from timings


def test_budget_exhaustion_marks_rows_incomplete():
    plan = small_hydro()
    plan.budget = 10
    rows = hydrodynamic_experiment(plan)
    assert not any(r.complete for r in rows)


def test_threads_do_not_change_results():
    a = hydrodynamic_experiment(small_hydro())
    plan = small_hydro()
    plan.threads = 2
    b = hydrodynamic_experiment(plan)
    assert [r.value for r in a] == [r.value for r in b]


def test_initial_mass_gap_is_sampling_noise():
    plan = small_hydro()
    plan.replicas = 16
    rows = metric(hydrodynamic_experiment(plan), "initial_mass_gap")
    for r in rows:
        assert abs(r.value) < 4 * r.stderr


def test_stationarity_rows():
    plan = ExperimentPlan(kind="stationarity", sizes=[32], replicas=6, horizon=0.02, snapshots=5,
                          rule=dict(delta1=4.0, delta2=4.0, alpha_eps=0.5, k_fraction=1.0))
    rows = stationarity_experiment(plan)
    const = metric(rows, "time_avg_pairing[const]")[0]
    assert const.replicas == 6 and const.stderr is not None
    assert metric(rows, "target[const]")[0].value == pytest.approx(1.0)


def test_fast_reaction_rung_deterministic():
    plan = ExperimentPlan(kind="fast_reaction", sizes=[32], rule=None, ladder=[(10.0, 0.1), (100.0, 0.01)],
                          rate={"kind": "affine", "a": 1.0}, horizon=0.004, snapshots=5,
                          initial=dict(family="bump", M_u=1.0, M_v=0.5, C0=100.0, C1=1.0, width=0.25,
                                       rho1=1.0, rho2=0.3))
    a = fast_reaction_sweep(plan)
    b = fast_reaction_sweep(plan)
    assert [r.value for r in a] == [r.value for r in b]
    for K in (10.0, 100.0):
        assert metric(a, "overlap_mass", K=K)[0].value <= 1.0 / K


def test_cli_thermo_and_config(tmp_path):
    cfg = tmp_path / "p.ini"
    cfg.write_text("[rate]\nkind = affine\n")
    assert main(["thermo", "--config", str(cfg), "--out", str(tmp_path), "--points", "3",
                 "--alpha-max", "2"]) == 0
    text = (tmp_path / "thermo.csv").read_text().splitlines()
    assert text[0] == "alpha,Z,rho,chi1" and len(text) == 4
    # Z = (e^a - 1)/a for g(k) = k + 1
    assert float(text[2].split(",")[1]) == pytest.approx(np.expm1(1.0), rel=1e-12)


def test_cli_rejects_bad_config(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[grid]\nsize = 64\n")
    with pytest.raises(DomainError):
        main(["pde", "--config", str(cfg)])
