"""Scenario files and the staged pipeline: tube, fit, error bound, Hopf grids, DP grids, comparison, rollouts."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .contours import emit_contours
from .dp import lipschitz_tolerance, solve_dp_horizons
from .errors import InvalidArgumentError, ScenarioError
from .grids import SENSES, ValueGrid, load_grid, save_grid, uniform_axes, value_at
from .hopf import HopfOptions, HopfProblem, solve_grid
from .lifting import identity_lift, lift, lift_from_spec, rbf_centers
from .models import (analytic_slow_manifold_model, fit_dmd, fit_edmd, load_model, sample_trajectories,
                     save_model, taylor_model)
from .rollout import DisturbancePolicy, batch_rollouts
from .systems import make_demo_system
from .targets import QuadTarget, make_aug_targets, valid_level
from .tube import BoxTube, backward_tube, consistent_tube, error_bound_delta, load_tube_csv, save_tube_csv

# defaults per section; keys outside these are rejected
_DEFAULTS = {
    "system": {"name": None, "params": {}},
    "lift": {"kind": None, "degree": 3, "constant": True, "n_centers": 9, "scale": 2.0, "centers_box": "target"},
    "model": {"kind": None, "center": None, "n_samples": 2000, "ridge": 1e-8, "sample_box": "tube", "snippet_steps": 10},
    "target": {"center": None, "shape": None, "radius": 1.0},
    "augmented": {"eta": None, "level": None, "margin": 0.02, "audit_samples": 10000},
    "tube": {"h": 0.01, "method": "box", "cell": None, "lipschitz": None, "cells_per_dim": 1, "cap": 1e3},
    "error": {"grid_per_dim": 41, "inflation": 0.1, "shape": "ball", "force_zero": False},
    "grids": {"base": None, "dp": None},
    "solver": {"restarts": 8, "max_iters": 200, "step": 1.0, "tol": 1e-5, "n_t": 50},
    "compare": {"tol": 0.05},
    "rollout": {"enabled": False, "horizon": None, "n_points": 50, "margin": 0.05,
                "policies": ["random", "extremal_costate"], "replan_every": 10, "h": 0.01},
}
_TOP = {"name", "sense", "T", "horizons", "baselines", "seed", "output"} | set(_DEFAULTS)
_GRID_KEYS = {"lo", "hi", "n", "cfl", "dissipation"}
MODEL_KINDS = ("analytic", "taylor", "edmd", "dmd")
BASELINES = ("taylor", "dmd")


def _merge(section: str, raw) -> dict:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ScenarioError(f"section {section!r} must be a mapping")
    extra = set(raw) - set(_DEFAULTS[section])
    if extra:
        raise ScenarioError(f"unknown key(s) in {section!r}: {', '.join(sorted(extra))}")
    out = copy.deepcopy(_DEFAULTS[section])
    out.update(raw)
    return out


def _positive(value, what):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ScenarioError(f"{what} must be a number, got {value!r}") from None
    if not (np.isfinite(v) and v > 0):
        raise ScenarioError(f"{what} must be positive, got {value!r}")
    return v


def _grid_spec(raw, what, dp=False) -> dict:
    if not isinstance(raw, dict):
        raise ScenarioError(f"grids.{what} must be a mapping with lo, hi, n")
    extra = set(raw) - (_GRID_KEYS if dp else {"lo", "hi", "n"})
    if extra:
        raise ScenarioError(f"unknown key(s) in grids.{what}: {', '.join(sorted(extra))}")
    try:
        lo = np.asarray(raw["lo"], float)
        hi = np.asarray(raw["hi"], float)
        n = np.broadcast_to(np.asarray(raw["n"], int), lo.shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"grids.{what} needs numeric lo, hi and n ({exc})") from None
    if lo.shape != (2,) or hi.shape != (2,) or np.any(hi <= lo) or np.any(n < 2):
        raise ScenarioError(f"grids.{what} must be 2D with lo < hi and n >= 2")
    out = {"lo": lo.tolist(), "hi": hi.tolist(), "n": n.tolist()}
    if dp:
        out["cfl"] = float(raw.get("cfl", 0.8))
        out["dissipation"] = raw.get("dissipation", "local")
        if not 0 < out["cfl"] <= 1:
            raise ScenarioError("grids.dp.cfl must be in (0, 1]")
        if out["dissipation"] not in ("local", "global"):
            raise ScenarioError("grids.dp.dissipation must be 'local' or 'global'")
    return out


@dataclass(frozen=True)
class Scenario:
    name: str
    sense: str
    T: float
    horizons: tuple
    system: dict
    lift: dict
    model: dict
    target: dict
    augmented: dict
    tube: dict
    error: dict
    grids: dict
    solver: dict
    compare: dict
    rollout: dict
    baselines: tuple = ()
    seed: int = 0
    output: Optional[str] = None
    source: Optional[str] = None

    @property
    def ablation(self) -> bool:
        return bool(self.error["force_zero"])

    def with_seed(self, seed: int) -> "Scenario":
        d = dict(self.__dict__)
        d["seed"] = int(seed)
        return Scenario(**d)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "source"}
        d["horizons"], d["baselines"] = list(self.horizons), list(self.baselines)
        return d


def scenario_from_dict(raw: dict, source=None) -> Scenario:
    """Validate a parsed scenario mapping; raises :class:`ScenarioError`."""
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping")
    extra = set(raw) - _TOP
    if extra:
        raise ScenarioError(f"unknown top-level key(s): {', '.join(sorted(extra))}")
    sec = {k: _merge(k, raw.get(k)) for k in _DEFAULTS}
    sense = raw.get("sense")
    if sense not in SENSES:
        raise ScenarioError(f"sense must be one of {SENSES}, got {sense!r}")
    T = float(raw.get("T", 1.0))
    hz = raw.get("horizons", [0.25, 0.5, 0.75, 1.0])
    if not isinstance(hz, (list, tuple)) or not hz:
        raise ScenarioError("horizons must be a nonempty list")
    hz = tuple(_positive(h, "horizon") for h in hz)
    if any(b <= a for a, b in zip(hz, hz[1:])):
        raise ScenarioError("horizons must be strictly increasing")
    if hz[-1] > T + 1e-12:
        raise ScenarioError(f"largest horizon {hz[-1]} exceeds T={T}")
    if not sec["system"]["name"]:
        raise ScenarioError("system.name is required")
    for k, v in sec["system"]["params"].items():
        if k.endswith("radius") and (not isinstance(v, (int, float)) or v < 0):
            raise ScenarioError(f"system.params.{k} must be a nonnegative number, got {v!r}")
    if sec["lift"]["kind"] not in ("identity", "polynomial", "rbf", "slow_manifold"):
        raise ScenarioError(f"lift.kind must be identity, polynomial, rbf or slow_manifold, got {sec['lift']['kind']!r}")
    if sec["lift"]["centers_box"] not in ("target", "tube"):
        raise ScenarioError("lift.centers_box must be 'target' or 'tube'")
    if int(sec["lift"]["degree"]) < 1 or int(sec["lift"]["n_centers"]) < 1:
        raise ScenarioError("lift.degree and lift.n_centers must be >= 1")
    if sec["model"]["kind"] not in MODEL_KINDS:
        raise ScenarioError(f"model.kind must be one of {MODEL_KINDS}, got {sec['model']['kind']!r}")
    if int(sec["model"]["n_samples"]) < 1:
        raise ScenarioError("model.n_samples must be >= 1")
    if sec["target"]["center"] is None:
        raise ScenarioError("target.center is required")
    _positive(sec["target"]["radius"], "target.radius")
    _positive(sec["augmented"]["eta"], "augmented.eta")
    lev = sec["augmented"]["level"]
    if lev is not None and lev != "auto":
        _positive(lev, "augmented.level")
    _positive(sec["tube"]["h"], "tube.h")
    if sec["tube"]["method"] not in ("box", "raster"):
        raise ScenarioError("tube.method must be 'box' or 'raster'")
    if sec["tube"]["cell"] is not None:
        _positive(sec["tube"]["cell"], "tube.cell")
    if sec["tube"]["lipschitz"] is not None:
        _positive(sec["tube"]["lipschitz"], "tube.lipschitz")
    if int(sec["error"]["grid_per_dim"]) < 2:
        raise ScenarioError("error.grid_per_dim must be >= 2")
    if float(sec["error"]["inflation"]) < 0:
        raise ScenarioError("error.inflation must be >= 0")
    if sec["error"]["shape"] not in ("ball", "box"):
        raise ScenarioError("error.shape must be 'ball' or 'box'")
    sec["grids"] = {"base": _grid_spec(sec["grids"]["base"], "base"), "dp": _grid_spec(sec["grids"]["dp"], "dp", dp=True)}
    for k in ("restarts", "max_iters", "n_t"):
        if int(sec["solver"][k]) < (0 if k == "max_iters" else 1):
            raise ScenarioError(f"solver.{k} is out of range")
    _positive(sec["solver"]["tol"], "solver.tol")
    _positive(sec["compare"]["tol"], "compare.tol")
    ro = sec["rollout"]
    if ro["enabled"]:
        if ro["horizon"] is not None and not any(abs(float(ro["horizon"]) - h) < 1e-12 for h in hz):
            raise ScenarioError("rollout.horizon must be one of the horizons")
        for p in ro["policies"]:
            if p not in ("zero", "random", "extremal_costate", "extremal_dp"):
                raise ScenarioError(f"unknown rollout policy {p!r}")
        if int(ro["replan_every"]) < 0 or int(ro["n_points"]) < 1:
            raise ScenarioError("rollout.replan_every >= 0 and rollout.n_points >= 1 required")
    base = raw.get("baselines") or []
    for b in base:
        if b not in BASELINES:
            raise ScenarioError(f"unknown baseline {b!r}; valid: {', '.join(BASELINES)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ScenarioError("seed must be a nonnegative integer")
    return Scenario(str(raw.get("name", "scenario")), sense, T, hz, baselines=tuple(base), seed=seed,
                    output=raw.get("output"), source=None if source is None else str(source), **sec)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ScenarioError(f"scenario {path} is not valid YAML: {exc}") from None
    return scenario_from_dict(raw, path)


def bundled_scenarios() -> dict:
    """Name -> path of the scenarios shipped next to the package source."""
    root = Path(__file__).resolve().parents[2] / "scenarios"
    return {p.stem: p for p in sorted(root.glob("*.yaml"))}


# --- building blocks --------------------------------------------------------


def build_system(scn: Scenario):
    return make_demo_system(scn.system["name"], scn.system["params"])


def build_target(scn: Scenario) -> QuadTarget:
    c = np.asarray(scn.target["center"], float)
    Q = np.eye(len(c)) if scn.target["shape"] is None else np.asarray(scn.target["shape"], float)
    return QuadTarget(c, Q / float(scn.target["radius"]) ** 2, 1.0)


def horizon_label(h: float) -> str:
    return f"h{h:g}"


def _base_axes(scn):
    g = scn.grids["base"]
    return uniform_axes(g["lo"], g["hi"], g["n"])


def _base_points(scn):
    ax = _base_axes(scn)
    return ax, np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 2)


def _lift_spec(scn: Scenario, tube: Optional[BoxTube]) -> dict:
    lf = scn.lift
    if lf["kind"] == "identity":
        return {"kind": "identity", "n_x": 2}
    if lf["kind"] == "polynomial":
        return {"kind": "polynomial", "n_x": 2, "degree": int(lf["degree"]), "constant": bool(lf["constant"])}
    if lf["kind"] == "slow_manifold":
        return {"kind": "slow_manifold"}
    if lf["centers_box"] == "target":
        box = build_target(scn).bounding_box()
    elif tube is None:
        raise InvalidArgumentError("rbf centres over the tube need the tube stage first")
    else:
        box = tube.union_box
    c, w = rbf_centers(*box, int(lf["n_centers"]), float(lf["scale"]))
    return {"kind": "rbf", "centers": c.tolist(), "widths": [w] * len(c)}


def _sample_box(scn, tube):
    box = scn.model["sample_box"]
    if box == "tube":
        if tube is None:
            raise InvalidArgumentError("model.sample_box 'tube' needs the tube stage")
        return tube.union_box
    return np.asarray(box[0], float), np.asarray(box[1], float)


def _fit(scn, sys, m, kind, tube):
    md = scn.model
    if kind == "analytic":
        if sys.name != "slow_manifold" or (m.spec or {}).get("kind") != "slow_manifold":
            raise InvalidArgumentError("the analytic model exists only for the slow-manifold system with its exact lift")
        center = scn.target["center"] if md["center"] is None else md["center"]
        p = sys.params
        return analytic_slow_manifold_model(center, p["mu"], p["lam"])
    if kind == "taylor":
        center = scn.target["center"] if md["center"] is None else md["center"]
        return taylor_model(sys, m, center)
    data = sample_trajectories(sys, *_sample_box(scn, tube), int(md["n_samples"]), scn.seed, int(md["snippet_steps"]))
    if kind == "dmd":
        return fit_dmd(data, float(md["ridge"]))
    return fit_edmd(m, data, float(md["ridge"]))


def _aug_target(scn, m, base):
    mode = "reach_inner" if scn.sense == "reach" else "avoid_outer"
    eta = float(scn.augmented["eta"])
    level = scn.augmented["level"]
    if level == "auto":
        level = valid_level(base, m, eta, mode, float(scn.augmented["margin"]))
    pair = make_aug_targets(base, m, eta, mode, None if level is None else float(level),
                            int(scn.augmented["audit_samples"]), scn.seed)
    return pair.active


def _opts(scn) -> HopfOptions:
    s = scn.solver
    return HopfOptions(restarts=int(s["restarts"]), max_iters=int(s["max_iters"]), step=float(s["step"]),
                       tol=float(s["tol"]), seed=scn.seed)


# --- artifacts --------------------------------------------------------------


class Workspace:
    """Output directory with overwrite protection."""

    def __init__(self, root, force: bool = False):
        self.root = Path(root)
        self.force = force
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str, write: bool = False) -> Path:
        p = self.root / name
        if write and p.exists() and not self.force:
            raise InvalidArgumentError(f"{p} exists; pass --force to overwrite")
        return p

    def need(self, name: str) -> Path:
        p = self.root / name
        if not p.exists():
            raise InvalidArgumentError(f"missing artifact {p}; run the producing stage first")
        return p

    def write_json(self, name, obj):
        self.path(name, True).write_text(json.dumps(obj, indent=1, default=_jsonable), encoding="utf-8")

    def read_json(self, name):
        return json.loads(self.need(name).read_text(encoding="utf-8"))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


# --- stages -----------------------------------------------------------------


def stage_tube(scn: Scenario, ws: Workspace) -> BoxTube:
    """Backward feasible tube over the longest horizon (shorter ones are truncations)."""
    sys = build_system(scn)
    base = build_target(scn)
    tb = scn.tube
    t0 = scn.T - scn.horizons[-1]
    kw = dict(cap=float(tb["cap"]), cells_per_dim=int(tb["cells_per_dim"]), target=base,
              method=tb["method"], cell=None if tb["cell"] is None else float(tb["cell"]))
    lo, hi = base.bounding_box()
    if tb["lipschitz"] is None:
        tube = consistent_tube(sys, lo, hi, t0, scn.T, float(tb["h"]), **kw)
    else:
        tube = backward_tube(sys, lo, hi, t0, scn.T, float(tb["h"]), lipschitz=float(tb["lipschitz"]), **kw)
    save_tube_csv(tube, ws.path("tube.csv", True))
    ws.write_json("tube.json", tube.method)
    return tube


def load_tube(ws: Workspace) -> BoxTube:
    return load_tube_csv(ws.need("tube.csv"), ws.read_json("tube.json"))


def stage_fit(scn: Scenario, ws: Workspace, tube: Optional[BoxTube] = None):
    """Lift spec and model (plus baseline models on the identity lift)."""
    sys = build_system(scn)
    if tube is None and ((scn.lift["kind"] == "rbf" and scn.lift["centers_box"] == "tube") or scn.model["kind"] in ("edmd", "dmd") or scn.baselines):
        tube = load_tube(ws)
    spec = _lift_spec(scn, tube)
    m = lift_from_spec(spec)
    kind = scn.model["kind"]
    if kind == "dmd" and spec["kind"] != "identity":
        raise InvalidArgumentError("dmd models live on the identity lift")
    model = _fit(scn, sys, m, kind, tube)
    ws.write_json("lift.json", spec)
    save_model(model, ws.path("model.json", True))
    for b in scn.baselines:
        save_model(_fit(scn, sys, identity_lift(2), b, tube), ws.path(f"model_{b}.json", True))
    return m, model


def _variants(scn, ws):
    """(tag, lift, model) for the main model and each baseline."""
    out = [("", lift_from_spec(ws.read_json("lift.json")), load_model(ws.need("model.json")))]
    for b in scn.baselines:
        out.append((f"{b}_", identity_lift(2), load_model(ws.need(f"model_{b}.json"))))
    return out


def stage_errbound(scn: Scenario, ws: Workspace) -> dict:
    """Error bound per horizon over the truncated tube."""
    sys = build_system(scn)
    tube = load_tube(ws)
    rep = {"ablation": scn.ablation, "shape": scn.error["shape"], "variants": {}}
    for tag, m, model in _variants(scn, ws):
        rows = []
        for h in scn.horizons:
            eb = error_bound_delta(model, m, sys, tube.truncate(scn.T - h), int(scn.error["grid_per_dim"]),
                                   float(scn.error["inflation"]))
            d = eb.to_dict()
            d.update(horizon=h, t=scn.T - h, delta_used=0.0 if scn.ablation or scn.error["shape"] == "box" else eb.delta_star)
            d["error_box"] = None if scn.ablation or scn.error["shape"] == "ball" else d["coordinate_bounds"]
            rows.append(d)
        rep["variants"][tag or "main"] = rows
    ws.write_json("delta.json", rep)
    return rep


def stage_solve(scn: Scenario, ws: Workspace) -> dict:
    """Hopf values at the lifted base grid, one grid per horizon and variant."""
    sys = build_system(scn)
    base = build_target(scn)
    deltas = ws.read_json("delta.json")["variants"]
    axes, X = _base_points(scn)
    opts = _opts(scn)
    out = {}
    for tag, m, model in _variants(scn, ws):
        tgt = _aug_target(scn, m, base)
        G = lift(m, X)
        for row in deltas[tag or "main"]:
            h = row["horizon"]
            prob = HopfProblem(model, tgt, scn.T - h, scn.T, row["delta_used"], scn.sense, sys.u_ball, sys.d_ball,
                               int(scn.solver["n_t"]), row["error_box"])
            hg = solve_grid(prob, G, opts, base_points=X, axes=axes)
            name = f"hopf_{tag}{horizon_label(h)}"
            vg = hg.to_value_grid()
            meta = dict(vg.meta, n_converged=hg.n_converged, n_points=len(hg.values), level=tgt.level, ablation=scn.ablation)
            save_grid(ValueGrid(vg.axes, vg.values, vg.time, vg.sense, 0.0, meta), ws.path(name + ".bin", True))
            hg.to_csv(ws.path(name + ".csv", True))
            out[name] = hg.summary()
    return out


def stage_dp(scn: Scenario, ws: Workspace) -> list:
    sys = build_system(scn)
    g = scn.grids["dp"]
    axes = uniform_axes(g["lo"], g["hi"], g["n"])
    grids = solve_dp_horizons(sys, build_target(scn), scn.sense, axes, [scn.T - h for h in scn.horizons], scn.T,
                              g["cfl"], g["dissipation"])
    for h, vg in zip(sorted(scn.horizons, reverse=True), grids):
        save_grid(vg, ws.path(f"dp_{horizon_label(h)}.bin", True))
    return grids


@dataclass
class ContainmentReport:
    """Per-horizon certified / confirmed / violation counts and set areas."""

    rows: list = field(default_factory=list)
    sense: str = "reach"
    ablation: bool = False

    @property
    def violations(self) -> int:
        return int(sum(r["violations"] for r in self.rows))

    @property
    def certified_everywhere(self) -> bool:
        return all(r["certified"] > 0 for r in self.rows)

    def to_dict(self) -> dict:
        return {"sense": self.sense, "ablation": self.ablation, "total_violations": self.violations,
                "certified_nonempty_every_horizon": self.certified_everywhere, "horizons": self.rows}


def compare_sets(hopf: ValueGrid, dp: ValueGrid, sense: str, tol: Optional[float] = None, mask=None) -> dict:
    """Containment counts of the Hopf set against the DP oracle at the Hopf grid nodes.

    ``mask`` restricts reach certification (e.g. to the feasible tube).
    Reach: certified ``hopf <= 0``, violation when ``dp > tol``.
    Avoid: certified-safe ``hopf > 0``, violation when ``dp <= -tol``.
    ``tol`` defaults to one DP cell times the DP field's Lipschitz estimate.
    """
    if sense not in SENSES:
        raise InvalidArgumentError(f"sense must be one of {SENSES}")
    if hopf.ndim != dp.ndim:
        raise InvalidArgumentError("grid dimensions differ")
    X = hopf.nodes()
    for i, a in enumerate(dp.axes):
        if X[:, i].min() < a[0] - 1e-9 or X[:, i].max() > a[-1] + 1e-9:
            raise InvalidArgumentError("hopf grid points leave the DP hull")
    if tol is None:
        tol = lipschitz_tolerance(dp, None)
    vh = hopf.values.reshape(-1)
    vd = np.asarray(value_at(dp, X)).reshape(-1)
    mask = np.ones_like(vh, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    if mask.shape != vh.shape:
        raise InvalidArgumentError("mask does not match the hopf grid")
    if sense == "reach":
        cert = (vh <= 0) & mask
        conf = cert & (vd <= tol)
        bad = cert & (vd > tol)
    else:
        cert = vh > 0
        conf = cert & (vd > -tol)
        bad = cert & (vd <= -tol)
    return {
        "time": hopf.time, "tol": float(tol), "n_points": int(vh.size), "certified": int(cert.sum()),
        "confirmed": int(conf.sum()), "violations": int(bad.sum()),
        "hopf_area": float((vh <= 0).sum() * hopf.cell_area), "dp_area": float((vd <= 0).sum() * hopf.cell_area),
        "dp_grid_area": float(dp.member_mask().sum() * dp.cell_area),
    }


def stage_compare(scn: Scenario, ws: Workspace) -> ContainmentReport:
    tube = load_tube(ws)
    _, X = _base_points(scn)
    report = ContainmentReport([], scn.sense, scn.ablation)
    for h in scn.horizons:
        hop = load_grid(ws.need(f"hopf_{horizon_label(h)}.bin"))
        dp = load_grid(ws.need(f"dp_{horizon_label(h)}.bin"))
        mask = None
        if scn.sense == "reach":
            lo, hi = tube.truncate(scn.T - h).union_box
            mask = np.all((X >= lo) & (X <= hi), axis=1)
        row = compare_sets(hop, dp, scn.sense, float(scn.compare["tol"]), mask)
        row["horizon"] = h
        for b in scn.baselines:
            bh = load_grid(ws.need(f"hopf_{b}_{horizon_label(h)}.bin"))
            row[f"baseline_{b}"] = compare_sets(bh, dp, scn.sense, float(scn.compare["tol"]), mask)
        report.rows.append(row)
    ws.write_json("containment.json", report.to_dict())
    return report


def certified_points(scn: Scenario, ws: Workspace, h: float, margin: float) -> np.ndarray:
    """Base-grid nodes certified with a value margin at horizon ``h``."""
    hop = load_grid(ws.need(f"hopf_{horizon_label(h)}.bin"))
    X = hop.nodes()
    v = hop.values.reshape(-1)
    if scn.sense == "reach":
        lo, hi = load_tube(ws).truncate(scn.T - h).union_box
        ok = (v <= -margin) & np.all((X >= lo) & (X <= hi), axis=1)
    else:
        ok = v > margin
    return X[ok]


def stage_rollout(scn: Scenario, ws: Workspace):
    ro = scn.rollout
    sys = build_system(scn)
    base = build_target(scn)
    m = lift_from_spec(ws.read_json("lift.json"))
    model = load_model(ws.need("model.json"))
    h = float(ro["horizon"] if ro["horizon"] is not None else scn.horizons[0])
    pts = certified_points(scn, ws, h, float(ro["margin"]))
    if len(pts) == 0:
        raise InvalidArgumentError(f"no certified points with margin {ro['margin']} at horizon {h}")
    rng = np.random.default_rng(scn.seed)
    pts = pts[np.sort(rng.choice(len(pts), min(int(ro["n_points"]), len(pts)), replace=False))]
    row = next(r for r in ws.read_json("delta.json")["variants"]["main"] if abs(r["horizon"] - h) < 1e-12)
    prob = HopfProblem(model, _aug_target(scn, m, base), scn.T - h, scn.T, row["delta_used"], scn.sense,
                       sys.u_ball, sys.d_ball, int(scn.solver["n_t"]), row["error_box"])
    policies = []
    for i, kind in enumerate(ro["policies"]):
        grids = ()
        if kind == "extremal_dp":
            grids = (load_grid(ws.need(f"dp_{horizon_label(h)}.bin")),)
        policies.append(DisturbancePolicy(kind, scn.seed + i, grids))
    tube = load_tube(ws).truncate(scn.T - h) if scn.sense == "reach" else None
    rep = batch_rollouts(sys, m, prob, base, pts, policies, int(ro["replan_every"]), float(ro["h"]), _opts(scn), tube)
    rep.settings.update(horizon=h, margin=float(ro["margin"]), seed=scn.seed)
    rep.save(ws.path("rollout.json", True))
    return rep


def stage_contours(scn: Scenario, ws: Workspace) -> dict:
    out = {}
    for h in scn.horizons:
        for kind in ["hopf", "dp"] + [f"hopf_{b}" for b in scn.baselines]:
            name = f"{kind}_{horizon_label(h)}"
            out[name] = emit_contours(load_grid(ws.need(name + ".bin")), 0.0, ws.path(f"contours_{name}.csv", True))
    return out


STAGES = ("tube", "fit", "errbound", "solve", "dp", "compare", "rollout", "contours")


def run_stage(name: str, scn: Scenario, ws: Workspace):
    if name == "fit":
        return stage_fit(scn, ws)
    if name == "rollout" and not scn.rollout["enabled"]:
        return None
    return {"tube": stage_tube, "errbound": stage_errbound, "solve": stage_solve, "dp": stage_dp,
            "compare": stage_compare, "rollout": stage_rollout, "contours": stage_contours}[name](scn, ws)


class StageError(Exception):
    """Wraps a stage failure with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def run_pipeline(scn: Scenario, out, force: bool = False, stages=STAGES, log=None) -> dict:
    """All stages in order; returns the summary written to ``summary.json``."""
    root = Path(out)
    if root.exists() and any(root.iterdir()) and not force:
        raise InvalidArgumentError(f"output directory {root} is not empty; pass --force to overwrite")
    ws = Workspace(root, force)
    ws.write_json("scenario.json", scn.to_dict())
    summary = {"scenario": scn.name, "seed": scn.seed, "ablation": scn.ablation, "stages": {}}
    for name in stages:
        t0 = time.perf_counter()
        try:
            res = run_stage(name, scn, ws)
        except Exception as exc:
            raise StageError(name, exc) from exc
        summary["stages"][name] = round(time.perf_counter() - t0, 3)
        if log:
            log(f"{name}: {summary['stages'][name]:.1f}s")
        if isinstance(res, ContainmentReport):
            summary["containment"] = res.to_dict()
        elif name == "rollout" and res is not None:
            summary["rollout"] = {"success_rate": res.success_rate, "n_trials": len(res.trials)}
    ws.write_json("summary.json", summary)
    return summary
