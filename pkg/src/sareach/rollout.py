"""Closed-loop audits: the true system driven by Hopf-derived control against sampled adversaries."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .grids import ValueGrid, gradient_at
from .hopf import HopfOptions, HopfProblem, build_flow_cache, extract_control, extract_disturbance, solve_value
from .lifting import LiftMap, lift
from .systems import AffineSystem, rk4_step, time_grid
from .targets import QuadTarget, eval_J
from .tube import BoxTube

POLICY_KINDS = ("zero", "random", "extremal_costate", "extremal_dp")


@dataclass(frozen=True)
class DisturbancePolicy:
    """``kind`` in ``zero | random | extremal_costate | extremal_dp``.

    ``random`` draws a fresh uniform sample from ``D`` every step;
    ``extremal_dp`` needs DP snapshots (``dp_grids``) and plays the extremal
    answer to the interpolated DP gradient at the nearest stored time.
    """

    kind: str
    seed: int = 0
    dp_grids: tuple = ()

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise InvalidArgumentError(f"unknown disturbance policy {self.kind!r}; valid: {', '.join(POLICY_KINDS)}")
        if self.kind == "extremal_dp" and not self.dp_grids:
            raise InvalidArgumentError("extremal_dp needs at least one DP grid")

    @property
    def label(self) -> str:
        return f"random({self.seed})" if self.kind == "random" else self.kind


def _dp_disturbance(sys: AffineSystem, grids: Sequence[ValueGrid], x, tau, sense):
    g = min(grids, key=lambda v: abs(v.time - tau))
    lo = np.array([a[0] for a in g.axes])
    hi = np.array([a[-1] for a in g.axes])
    p = gradient_at(g, np.clip(x, lo, hi))
    q = sys.disturbance_matrix(x).T @ p
    d = sys.d_ball.maximizer(q)
    return d if sense == "reach" else -d


@dataclass
class TrialRecord:
    x0: list
    policy: str
    terminal: Optional[list]
    J_terminal: Optional[float]
    status: str
    value0: float
    replans: int

    @property
    def success(self) -> bool:
        return self.status == "success"


def run_rollout(
    sys: AffineSystem,
    m: LiftMap,
    prob: HopfProblem,
    base_target: QuadTarget,
    x0,
    d_policy: DisturbancePolicy,
    replan_every: int = 10,
    h: float = 0.01,
    opts: Optional[HopfOptions] = None,
    tube: Optional[BoxTube] = None,
    audit: bool = False,
    trajectory_path=None,
) -> TrialRecord:
    """Integrate the true dynamics under ``u*`` from the Hopf costate.

    ``replan_every > 0`` re-solves from the current lifted state and remaining
    horizon every that many steps; ``0`` plays the open-loop signal from the
    first solve.  Unless ``audit`` is set, ``x0`` must be certified (value
    ``<= 0`` for reach, ``> 0`` for avoid, and inside the tube when given).
    """
    opts = opts or HopfOptions()
    if replan_every < 0:
        raise InvalidArgumentError("replan_every must be >= 0")
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.shape != (sys.state_dim,):
        raise InvalidArgumentError("initial state has the wrong dimension")
    cache = build_flow_cache(prob)
    res = solve_value(prob, cache, lift(m, x), opts)
    if not audit:
        ok = res.value <= 0 if prob.sense == "reach" else res.value > 0
        if tube is not None and prob.sense == "reach":
            lo, hi = tube.box_at(prob.t)
            ok = ok and bool(np.all((x >= lo) & (x <= hi)))
        if not ok:
            raise InvalidArgumentError(f"initial state {x.tolist()} is not certified (value {res.value:.4g}); use audit mode")
    rng = np.random.default_rng(d_policy.seed)
    ts = time_grid(prob.t, prob.T, h)
    cur, cur_res, replans = prob, res, 0
    rows = []
    for k in range(len(ts) - 1):
        tau, step = ts[k], ts[k + 1] - ts[k]
        if replan_every and k and k % replan_every == 0:
            cur = prob.with_horizon(tau)
            cur_res = solve_value(cur, build_flow_cache(cur), lift(m, x), opts)
            replans += 1
        u = extract_control(cur, None, cur_res, tau)
        if d_policy.kind == "zero" or sys.n_d == 0:
            d = np.zeros(sys.n_d)
        elif d_policy.kind == "random":
            d = sys.d_ball.sample(rng, 1)[0]
        elif d_policy.kind == "extremal_costate":
            d = extract_disturbance(cur, None, cur_res, tau)
        else:
            d = _dp_disturbance(sys, d_policy.dp_grids, x, tau, prob.sense)
        u, d = sys.u_ball.project(u), sys.d_ball.project(d)
        rows.append([tau, *x, *u, *d])
        with np.errstate(all="ignore"):
            x = rk4_step(lambda s, y: sys.field(y, u, d), tau, x, step)
        if not np.all(np.isfinite(x)):
            return TrialRecord(np.asarray(x0, float).tolist(), d_policy.label, None, None, "failed-numerical", res.value, replans)
    rows.append([ts[-1], *x, *([np.nan] * (sys.n_u + sys.n_d))])
    if trajectory_path is not None:
        _dump_trajectory(trajectory_path, rows, sys)
    J = float(eval_J(base_target, x))
    hit = J <= 0 if prob.sense == "reach" else J > 0
    return TrialRecord(np.asarray(x0, float).tolist(), d_policy.label, x.tolist(), J, "success" if hit else "failure", res.value, replans)


def _dump_trajectory(path, rows, sys):
    head = ["time"] + [f"x{i + 1}" for i in range(sys.state_dim)] + [f"u{i + 1}" for i in range(sys.n_u)] + [f"d{i + 1}" for i in range(sys.n_d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for r in rows:
            w.writerow(["" if not np.isfinite(v) else repr(float(v)) for v in r])


@dataclass
class RolloutReport:
    trials: list
    settings: dict = field(default_factory=dict)

    @property
    def n_success(self) -> int:
        return sum(t.success for t in self.trials)

    @property
    def n_numerical(self) -> int:
        return sum(t.status == "failed-numerical" for t in self.trials)

    @property
    def success_rate(self) -> float:
        judged = [t for t in self.trials if t.status != "failed-numerical"]
        return sum(t.success for t in judged) / len(judged) if judged else float("nan")

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate, "n_trials": len(self.trials), "n_success": self.n_success,
            "n_failed_numerical": self.n_numerical, "settings": self.settings,
            "trials": [t.__dict__ for t in self.trials],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


def batch_rollouts(
    sys: AffineSystem,
    m: LiftMap,
    prob: HopfProblem,
    base_target: QuadTarget,
    x0s,
    policies: Sequence[DisturbancePolicy],
    replan_every: int = 10,
    h: float = 0.01,
    opts: Optional[HopfOptions] = None,
    tube: Optional[BoxTube] = None,
    audit: bool = False,
    trajectory_dir=None,
) -> RolloutReport:
    """Every initial state against every policy."""
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if x0s.size == 0 or not policies:
        raise InvalidArgumentError("need at least one initial state and one policy")
    trials = []
    for i, x0 in enumerate(x0s):
        for pol in policies:
            path = None
            if trajectory_dir is not None:
                path = Path(trajectory_dir) / f"trial_{i:04d}_{pol.kind}.csv"
            trials.append(run_rollout(sys, m, prob, base_target, x0, pol, replan_every, h, opts, tube, audit, path))
    settings = {"replan_every": replan_every, "h": h, "policies": [p.label for p in policies], "sense": prob.sense,
                "t": prob.t, "T": prob.T, "delta": prob.delta, "n_points": int(len(x0s))}
    return RolloutReport(trials, settings)
