"""Pointwise values of the error-augmented linear game from the generalized Hopf formula.

With ``z = exp(K (T - t)) g`` and trapezoid weights ``w_k`` on nodes ``s_k``
the costate objective is::

    Phi(p) = J*(p) - p.z + sum_k w_k (c1 |M1_k^T p| + c2 |M2_k^T p| + c0 |M0_k^T p|)

where ``M0_k = exp(K (T - s_k))``, ``M1_k = M0_k L1``, ``M2_k = M0_k L2`` and
``(c1, c2, c0) = (r_U, -r_D, -delta)`` for reach games and the negation for
avoid games.  The value is ``V(g) = -min_p Phi(p)``; ``V <= 0`` marks the set.
"""

from __future__ import annotations

import csv
import time as _time
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import InvalidArgumentError, NumericalError
from .grids import SENSES, ValueGrid
from .models import LiftedLinearModel
from .systems import InputBall
from .targets import QuadTarget


@dataclass(frozen=True)
class HopfProblem:
    model: LiftedLinearModel
    target: QuadTarget
    t: float
    T: float
    delta: float
    sense: str
    u_ball: InputBall
    d_ball: InputBall
    n_t: int = 50
    error_box: Optional[tuple] = None

    def __post_init__(self):
        if self.error_box is not None:
            eb = np.asarray(self.error_box, dtype=float)
            if eb.shape != (self.model.n_k,) or not np.all(np.isfinite(eb)) or np.any(eb < 0):
                raise InvalidArgumentError("error_box must hold one finite nonnegative half-width per lifted coordinate")
            object.__setattr__(self, "error_box", tuple(float(v) for v in eb))
        if not self.t < self.T:
            raise InvalidArgumentError(f"need t < T, got t={self.t}, T={self.T}")
        if not (np.isfinite(self.delta) and self.delta >= 0):
            raise InvalidArgumentError(f"delta must be finite and >= 0, got {self.delta}")
        if self.sense not in SENSES:
            raise InvalidArgumentError(f"sense must be one of {SENSES}, got {self.sense!r}")
        if self.target.dim != self.model.n_k:
            raise InvalidArgumentError(f"target dimension {self.target.dim} != model dimension {self.model.n_k}")
        if self.u_ball.dim != self.model.n_u or self.d_ball.dim != self.model.n_d:
            raise InvalidArgumentError("input ball dimensions do not match the model")
        if self.n_t < 1:
            raise InvalidArgumentError("quadrature needs at least one interval")

    def with_delta(self, delta: float) -> "HopfProblem":
        return replace(self, delta=float(delta))

    def with_horizon(self, t: float, T: Optional[float] = None) -> "HopfProblem":
        return replace(self, t=float(t), T=self.T if T is None else float(T))

    @property
    def coefficients(self):
        c = (self.u_ball.radius, -self.d_ball.radius, -self.delta)
        return c if self.sense == "reach" else tuple(-v for v in c)


@dataclass(frozen=True)
class FlowCache:
    times: np.ndarray
    weights: np.ndarray
    M0: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    end_map: np.ndarray


def build_flow_cache(prob: HopfProblem) -> FlowCache:
    """Matrix exponentials at ``n_t + 1`` uniform nodes on ``[t, T]``."""
    s = np.linspace(prob.t, prob.T, prob.n_t + 1)
    K = prob.model.K
    M0 = linalg.expm((prob.T - s)[:, None, None] * K[None])
    if not np.all(np.isfinite(M0)):
        raise NumericalError("matrix exponential overflowed; the model is too unstable for this horizon")
    w = np.full(len(s), (prob.T - prob.t) / prob.n_t)
    w[0] *= 0.5
    w[-1] *= 0.5
    return FlowCache(s, w, M0, M0 @ prob.model.L1, M0 @ prob.model.L2, M0[0].copy())


def _support_norm(ball_norm: str):
    return "l1" if ball_norm == "box" else "l2"


def _term_specs(prob: HopfProblem, cache: FlowCache):
    c1, c2, c0 = prob.coefficients
    specs = []
    for coef, M, kind in ((c1, cache.M1, _support_norm(prob.u_ball.norm)), (c2, cache.M2, _support_norm(prob.d_ball.norm)), (c0, cache.M0, "l2")):
        if coef != 0 and M.shape[-1] > 0:
            specs.append((coef, M, kind))
    if prob.error_box is not None and any(prob.error_box):
        # box-shaped error set: support is sum_i e_i |(M0^T p)_i|
        specs.append((-1.0 if prob.sense == "reach" else 1.0, cache.M0 * np.asarray(prob.error_box)[None, None, :], "l1"))
    return specs


def _norm(Y, kind):
    return np.abs(Y).sum(axis=-1) if kind == "l1" else np.sqrt(np.einsum("...i,...i->...", Y, Y))


def hamiltonian_integrand(prob: HopfProblem, cache: FlowCache, p, k: int) -> float:
    """Input-and-error part of the Hamiltonian at node ``k`` after the change of coordinates."""
    p = np.asarray(p, dtype=float)
    if p.shape != (prob.model.n_k,):
        raise InvalidArgumentError("costate dimension mismatch")
    return float(-sum(coef * _norm(M[k].T @ p, kind) for coef, M, kind in _term_specs(prob, cache)))


def hopf_objective(prob: HopfProblem, cache: FlowCache, g, p) -> float:
    """``Phi(p)`` for the point ``g`` (trapezoid quadrature over the cache nodes)."""
    g, p = np.asarray(g, dtype=float), np.asarray(p, dtype=float)
    if g.shape != (prob.model.n_k,) or p.shape != (prob.model.n_k,):
        raise InvalidArgumentError("point/costate dimension mismatch")
    ev = _Objective(prob, cache)
    phi, _, _, _ = ev(p[None], (cache.end_map @ g)[None], grad=False)
    return float(phi[0])


class _Objective:
    """Batched ``Phi`` and a subgradient (zero at norm kinks) for rows of costates."""

    def __init__(self, prob: HopfProblem, cache: FlowCache):
        tg = prob.target
        self.Qinv, self.c, self.r = tg.Q_inv, tg.center, tg.level
        self.Q2 = 2.0 * tg.Q
        self.terms = []
        n = prob.model.n_k
        for coef, M, kind in _term_specs(prob, cache):
            m = M.shape[-1]
            S = np.ascontiguousarray(M.transpose(1, 0, 2).reshape(n, -1))
            self.terms.append((S, m, kind, coef * cache.weights))

    def norm_part(self, P, grad=True):
        val = np.zeros(len(P))
        g = np.zeros_like(P) if grad else None
        for S, m, kind, cw in self.terms:
            Y = (P @ S).reshape(len(P), -1, m)
            nrm = _norm(Y, kind)
            val += nrm @ cw
            if grad:
                if kind == "l1":
                    U = np.sign(Y)
                else:
                    U = Y / np.where(nrm > 0, nrm, 1.0)[..., None]
                g += (U * cw[None, :, None]).reshape(len(P), -1) @ S.T
        return val, g

    def __call__(self, P, Z, grad=True):
        PQ = P @ self.Qinv
        quad = 0.25 * np.einsum("bi,bi->b", PQ, P)
        nv, ng = self.norm_part(P, grad)
        lin = P @ self.c - np.einsum("bi,bi->b", P, Z) + nv
        G = (0.5 * PQ + self.c - Z + ng) if grad else None
        return self.r + quad + lin, quad, lin, G


def _radial(P, quad, lin, r):
    """Exact minimisation of ``Phi(s p)`` over ``s >= 0`` (quadratic plus degree-one part)."""
    neg = (lin < 0) & (quad > 0)
    s = np.where(neg, -lin / (2 * np.where(quad > 0, quad, 1.0)), 0.0)
    phi = np.where(neg, r - lin ** 2 / (4 * np.where(quad > 0, quad, 1.0)), r)
    return P * s[:, None], phi


@dataclass(frozen=True)
class HopfOptions:
    restarts: int = 8
    max_iters: int = 200
    step: float = 1.0
    tol: float = 1e-5
    ftol: float = 1e-12
    seed: int = 0
    chunk_rows: int = 16384

    def __post_init__(self):
        if self.restarts < 1:
            raise InvalidArgumentError("restarts must be >= 1")
        if self.max_iters < 0 or self.step <= 0 or self.tol <= 0:
            raise InvalidArgumentError("max_iters >= 0, step > 0 and tol > 0 required")


@dataclass(frozen=True)
class HopfResult:
    value: float
    p_star: np.ndarray
    objective_at_p: float
    restarts_used: int
    converged: bool
    gradient_norm: float


_LADDER = np.array([1.0, 0.5, 0.25, 0.1, 0.01])


def _initial_costates(prob: HopfProblem, G, Z, opts: HopfOptions):
    """Restarts per point: 0, grad J at g, grad J at the flowed point, then seeded Gaussians."""
    tg = prob.target
    n, R = G.shape[1], opts.restarts
    det = [np.zeros_like(G), tg.gradient(G), tg.gradient(Z)]
    inits = np.stack(det[:R], axis=1) if R <= 3 else None
    if R > 3:
        scale = 2.0 * np.sqrt(tg.level * np.linalg.eigvalsh(tg.Q).max()) / np.sqrt(n)
        rand = np.empty((len(G), R - 3, n))
        for i, g in enumerate(G):
            # seed from the point's bytes so results do not depend on its position in a batch
            rng = np.random.default_rng([opts.seed, zlib.crc32(np.ascontiguousarray(g).tobytes())])
            rand[i] = scale * rng.standard_normal((R - 3, n))
        inits = np.concatenate([np.stack(det, axis=1), rand], axis=1)
    return inits


def _descend(ev: _Objective, P, Z, opts: HopfOptions):
    phi, quad, lin, _ = ev(P, Z, grad=False)
    P, phi = _radial(P, quad, lin, ev.r)
    active = np.arange(len(P))
    for k in range(1, opts.max_iters + 1):
        if len(active) == 0:
            break
        Pa, Za = P[active], Z[active]
        _, _, _, Ga = ev(Pa, Za, grad=True)
        # 2Q inverts the Hessian of J*, so a unit step solves the input-free problem exactly
        D = -Ga @ ev.Q2
        best_p, best_phi = Pa, phi[active]
        for a in np.append(opts.step * _LADDER, opts.step / np.sqrt(k)):
            Pc = Pa + a * D
            _, qc, lc, _ = ev(Pc, Za, grad=False)
            Pc, fc = _radial(Pc, qc, lc, ev.r)
            better = fc < best_phi
            best_p = np.where(better[:, None], Pc, best_p)
            best_phi = np.where(better, fc, best_phi)
        gain = phi[active] - best_phi
        P[active], phi[active] = best_p, best_phi
        active = active[gain > opts.ftol * (1.0 + np.abs(best_phi))]
    return P, phi


def _stationarity(ev: _Objective, P, Z, rng_seed=0):
    """Norm of the subgradient at ``P``; at ``P = 0`` the largest descent rate over probe directions."""
    _, _, _, G = ev(P, Z, grad=True)
    out = np.linalg.norm(G, axis=1)
    zero = np.linalg.norm(P, axis=1) == 0
    if np.any(zero):
        n = P.shape[1]
        rng = np.random.default_rng(rng_seed)
        V = np.concatenate([np.eye(n), -np.eye(n), rng.standard_normal((4 * n, n))])
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        nv, _ = ev.norm_part(V, grad=False)
        for i in np.flatnonzero(zero):
            # directional derivative of Phi at 0 is v.(c - z) + norm part(v)
            rate = V @ (ev.c - Z[i]) + nv
            out[i] = max(0.0, -rate.min())
    return out


def _solve_points(prob: HopfProblem, cache: FlowCache, G, opts: HopfOptions):
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if G.shape[1] != prob.model.n_k:
        raise InvalidArgumentError(f"points must have dimension {prob.model.n_k}")
    ev = _Objective(prob, cache)
    Z = G @ cache.end_map.T
    R, n = opts.restarts, G.shape[1]
    inits = _initial_costates(prob, G, Z, opts)
    per = max(1, opts.chunk_rows // R)
    Pbest = np.empty_like(G)
    Fbest = np.empty(len(G))
    for i in range(0, len(G), per):
        sl = slice(i, i + per)
        P = inits[sl].reshape(-1, n).copy()
        Zr = np.repeat(Z[sl], R, axis=0)
        P, phi = _descend(ev, P, Zr, opts)
        phi = phi.reshape(-1, R)
        j = np.argmin(phi, axis=1)
        Pbest[sl] = P.reshape(-1, R, n)[np.arange(len(j)), j]
        Fbest[sl] = phi[np.arange(len(j)), j]
    gnorm = _stationarity(ev, Pbest, Z)
    return -Fbest, Pbest, Fbest, gnorm


def solve_value(prob: HopfProblem, cache: FlowCache, g, opts: Optional[HopfOptions] = None) -> HopfResult:
    """Multi-start descent on ``Phi``; returns the best costate and ``V = -Phi(p*)``."""
    opts = opts or HopfOptions()
    v, P, F, gn = _solve_points(prob, cache, np.asarray(g, float)[None], opts)
    return HopfResult(float(v[0]), P[0], float(F[0]), opts.restarts, bool(gn[0] <= opts.tol), float(gn[0]))


@dataclass(frozen=True)
class HopfGrid:
    """Values at a list of augmented points, optionally tied to a base-space grid."""

    points: np.ndarray
    values: np.ndarray
    p_star: np.ndarray
    converged: np.ndarray
    gradient_norm: np.ndarray
    time: float
    sense: str
    base_points: Optional[np.ndarray] = None
    axes: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    @property
    def member(self) -> np.ndarray:
        return self.values <= 0

    @property
    def n_converged(self) -> int:
        return int(np.sum(self.converged))

    def to_value_grid(self) -> ValueGrid:
        if self.axes is None:
            raise InvalidArgumentError("points are not tied to a base grid")
        shape = tuple(len(a) for a in self.axes)
        return ValueGrid(self.axes, self.values.reshape(shape), self.time, self.sense, 0.0, dict(self.meta))

    def summary(self) -> dict:
        return {
            "n_points": int(len(self.values)), "n_member": int(self.member.sum()), "n_converged": self.n_converged,
            "time": self.time, "sense": self.sense, **self.meta,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            nx = 0 if self.base_points is None else self.base_points.shape[1]
            w.writerow([f"x{i + 1}" for i in range(nx)] + [f"g{i + 1}" for i in range(self.points.shape[1])] + ["value", "converged"])
            for i in range(len(self.values)):
                xs = [] if self.base_points is None else [repr(float(v)) for v in self.base_points[i]]
                w.writerow(xs + [repr(float(v)) for v in self.points[i]] + [repr(float(self.values[i])), int(self.converged[i])])


def solve_grid(
    prob: HopfProblem,
    points,
    opts: Optional[HopfOptions] = None,
    cache: Optional[FlowCache] = None,
    base_points=None,
    axes=None,
) -> HopfGrid:
    """Independent solves at every point (each is seeded from the point itself)."""
    opts = opts or HopfOptions()
    G = np.atleast_2d(np.asarray(points, dtype=float))
    if G.size == 0:
        raise InvalidArgumentError("no points to solve")
    cache = cache or build_flow_cache(prob)
    t0 = _time.perf_counter()
    v, P, _, gn = _solve_points(prob, cache, G, opts)
    meta = {"delta": prob.delta, "horizon": prob.T - prob.t, "restarts": opts.restarts, "n_t": prob.n_t,
            "seconds": round(_time.perf_counter() - t0, 3)}
    return HopfGrid(G, v, P, gn <= opts.tol, gn, prob.t, prob.sense,
                    None if base_points is None else np.asarray(base_points, float), axes, meta)


def _costate_map(prob: HopfProblem, tau: float, L: np.ndarray) -> np.ndarray:
    if not prob.t - 1e-12 <= tau <= prob.T + 1e-12:
        raise InvalidArgumentError(f"time {tau} outside [{prob.t}, {prob.T}]")
    return linalg.expm((prob.T - tau) * prob.model.K) @ L


def extract_control(prob: HopfProblem, cache: FlowCache, result: HopfResult, tau: float) -> np.ndarray:
    """Ball extremizer of ``q = M1(tau)^T p*``: minimiser for reach, maximiser for avoid."""
    q = _costate_map(prob, tau, prob.model.L1).T @ result.p_star
    u = prob.u_ball.maximizer(q)
    return -u if prob.sense == "reach" else u


def extract_disturbance(prob: HopfProblem, cache: FlowCache, result: HopfResult, tau: float) -> np.ndarray:
    """The disturbance's extremal answer to ``p*``: maximiser for reach, minimiser for avoid."""
    q = _costate_map(prob, tau, prob.model.L2).T @ result.p_star
    d = prob.d_ball.maximizer(q)
    return d if prob.sense == "reach" else -d
