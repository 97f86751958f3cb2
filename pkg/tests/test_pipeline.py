import json

import numpy as np
import pytest
import yaml

from sareach.cli import main
from sareach.errors import InvalidArgumentError, ScenarioError
from sareach.grids import ValueGrid, uniform_axes
from sareach.pipeline import (STAGES, StageError, Workspace, bundled_scenarios, compare_sets, run_pipeline,
                              run_stage, scenario_from_dict)

SMALL = {
    "name": "small_reach", "sense": "reach", "seed": 3, "T": 1.0, "horizons": [0.25, 0.5],
    "system": {"name": "slow_manifold", "params": {"mu": -0.05, "lam": -1.0, "u_radius": 0.5, "d_radius": 0.25}},
    "lift": {"kind": "slow_manifold"}, "model": {"kind": "analytic"},
    "target": {"center": [0.0, 1.25], "radius": 1.0}, "augmented": {"eta": 0.0667},
    "tube": {"h": 0.02}, "error": {"grid_per_dim": 9},
    "grids": {"base": {"lo": [-1.5, 0.0], "hi": [1.5, 2.5], "n": 9},
              "dp": {"lo": [-2.5, -1.5], "hi": [2.5, 4.5], "n": [51, 61]}},
    "solver": {"restarts": 2, "max_iters": 60, "n_t": 20},
    "rollout": {"enabled": True, "horizon": 0.25, "n_points": 2, "margin": 0.05, "replan_every": 5, "h": 0.02},
}


def _yaml(tmp_path, raw, name="s.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return str(p)


def test_bundled_scenarios_validate():
    from sareach.pipeline import load_scenario

    names = bundled_scenarios()
    assert {"slow_manifold_reach", "slow_manifold_exact", "vanderpol_avoid_poly3", "vanderpol_avoid_poly3_ablation"} <= set(names)
    for p in names.values():
        load_scenario(p)


@pytest.mark.parametrize("patch", [
    {"target": {"center": [0.0, 1.25], "radius": -1.0}},
    {"system": {"name": "slow_manifold", "params": {"u_radius": -0.5}}},
    {"horizons": [0.5, 0.25]},
    {"horizons": [2.0]},
    {"T": 0.0},
    {"sense": "sideways"},
    {"wobble": 1},
    {"tube": {"h": 0.01, "colour": "red"}},
    {"model": {"kind": "neural"}},
])
def test_invalid_scenarios_rejected(tmp_path, patch):
    raw = {**SMALL, **patch}
    with pytest.raises(ScenarioError):
        scenario_from_dict(raw)
    assert main(["tube", "--scenario", _yaml(tmp_path, raw), "--out", str(tmp_path / "o")]) == 2


def test_missing_scenario_file_is_validation_error(tmp_path):
    assert main(["pipeline", "--scenario", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 2


def test_stage_needs_upstream_artifacts(tmp_path):
    scn = scenario_from_dict(SMALL)
    with pytest.raises(Exception):
        run_stage("solve", scn, Workspace(tmp_path))
    assert main(["compare", "--scenario", _yaml(tmp_path, SMALL), "--out", str(tmp_path / "o")]) == 2


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("small") / "run"
    summary = run_pipeline(scenario_from_dict(SMALL), out)
    return out, summary


def test_pipeline_artifacts(small_run):
    out, summary = small_run
    for name in ["tube.csv", "lift.json", "model.json", "delta.json", "hopf_h0.25.bin", "hopf_h0.5.csv", "dp_h0.5.bin",
                 "containment.json", "rollout.json", "contours_hopf_h0.25.csv", "summary.json", "scenario.json"]:
        assert (out / name).exists(), name
    assert list(summary["stages"]) == list(STAGES)
    cont = json.loads((out / "containment.json").read_text())
    assert cont["total_violations"] == 0 and [r["horizon"] for r in cont["horizons"]] == [0.25, 0.5]
    hdr = (out / "hopf_h0.25.csv").read_text().splitlines()[0]
    assert hdr.startswith("x1,x2,")


def test_overwrite_refused_without_force(small_run, tmp_path):
    out, _ = small_run
    with pytest.raises(InvalidArgumentError, match="force"):
        run_pipeline(scenario_from_dict(SMALL), out)
    with pytest.raises(InvalidArgumentError):
        run_stage("tube", scenario_from_dict(SMALL), Workspace(out))
    assert main(["tube", "--scenario", _yaml(tmp_path, SMALL), "--out", str(out)]) == 2


def test_stages_compose_to_pipeline(small_run, tmp_path):
    out, _ = small_run
    src = _yaml(tmp_path, SMALL)
    dst = tmp_path / "staged"
    for stage in STAGES:
        assert main([stage, "--scenario", src, "--out", str(dst)]) == 0, stage
    for name in ["tube.csv", "hopf_h0.25.csv", "hopf_h0.5.csv", "contours_dp_h0.5.csv", "contours_hopf_h0.5.csv"]:
        assert (dst / name).read_bytes() == (out / name).read_bytes(), name
    a = json.loads((dst / "rollout.json").read_text())
    b = json.loads((out / "rollout.json").read_text())
    assert a == b


def test_pipeline_is_deterministic(small_run, tmp_path):
    out, _ = small_run
    again = tmp_path / "again"
    assert main(["pipeline", "--scenario", _yaml(tmp_path, SMALL), "--out", str(again), "--threads", "1"]) == 0
    for name in ["hopf_h0.25.csv", "hopf_h0.5.csv", "delta.json", "containment.json"]:
        assert (again / name).read_bytes() == (out / name).read_bytes(), name


def test_force_overwrites(small_run, tmp_path):
    out = tmp_path / "f"
    src = _yaml(tmp_path, SMALL)
    assert main(["tube", "--scenario", src, "--out", str(out)]) == 0
    assert main(["tube", "--scenario", src, "--out", str(out), "--force"]) == 0


def test_seed_override_changes_rollout_sample(tmp_path):
    raw = {**SMALL, "horizons": [0.25], "rollout": {**SMALL["rollout"], "n_points": 3}}
    src = _yaml(tmp_path, raw)
    assert main(["pipeline", "--scenario", src, "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert json.loads((tmp_path / "a" / "summary.json").read_text())["seed"] == 1
    assert main(["pipeline", "--scenario", src, "--out", str(tmp_path / "b"), "--seed", "-1"]) == 2


def test_strict_ablation_exit(tmp_path):
    raw = {**SMALL, "horizons": [0.25], "error": {"grid_per_dim": 9, "force_zero": True},
           "rollout": {"enabled": False}}
    src = _yaml(tmp_path, raw)
    assert main(["pipeline", "--scenario", src, "--out", str(tmp_path / "a")]) == 0
    assert main(["compare", "--scenario", src, "--out", str(tmp_path / "a"), "--force", "--strict"]) == 4


def test_stage_error_names_stage(tmp_path):
    raw = {**SMALL, "rollout": {**SMALL["rollout"], "margin": 1e9}}
    with pytest.raises(StageError) as ei:
        run_pipeline(scenario_from_dict(raw), tmp_path / "x")
    assert ei.value.stage == "rollout"


def test_list_command(capsys):
    assert main(["list"]) == 0
    assert "slow_manifold_reach" in capsys.readouterr().out


def _grid(vals, sense="reach"):
    ax = uniform_axes([0, 0], [1, 1], 3)
    return ValueGrid(ax, np.asarray(vals, float).reshape(3, 3), 0.5, sense)


def test_compare_sets_counts():
    hop = _grid([-1, -1, 1, 1, 1, 1, 1, 1, 1])
    dp = _grid([-1, 1, -1, 1, 1, 1, 1, 1, 1])
    r = compare_sets(hop, dp, "reach", tol=0.05)
    assert (r["certified"], r["confirmed"], r["violations"]) == (2, 1, 1)
    r = compare_sets(hop, dp, "reach", tol=0.05, mask=[1, 0, 0, 0, 0, 0, 0, 0, 0])
    assert (r["certified"], r["violations"]) == (1, 0)
    hop_a = _grid([1, 1, -1, -1, -1, -1, -1, -1, -1], "avoid")
    dp_a = _grid([-1, 1, 1, 1, 1, 1, 1, 1, 1], "avoid")
    r = compare_sets(hop_a, dp_a, "avoid", tol=0.05)
    assert (r["certified"], r["violations"]) == (2, 1)


def test_compare_sets_rejects_mismatch():
    hop = _grid(np.zeros(9))
    small = ValueGrid(uniform_axes([0, 0], [0.5, 0.5], 3), np.zeros((3, 3)), 0.5, "reach")
    with pytest.raises(InvalidArgumentError):
        compare_sets(hop, small, "reach", 0.05)
    with pytest.raises(InvalidArgumentError):
        compare_sets(hop, hop, "reach", 0.05, mask=[True])
    with pytest.raises(InvalidArgumentError):
        compare_sets(hop, hop, "both", 0.05)
