"""Ground-truth 2D value functions by first-order Lax-Friedrichs level-set dynamic programming."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, NumericalError
from .grids import SENSES, ValueGrid, gradient_at, value_at
from .systems import AffineSystem
from .targets import QuadTarget, eval_J

SAFETY = 1.2


def _dual(ball):
    """Row-wise dual norm used by the ball's support function."""
    if ball.norm == "box":
        return lambda q: np.abs(q).sum(axis=-1)
    return lambda q: np.sqrt(np.einsum("...i,...i->...", q, q))


class _Hamiltonian:
    """``H(x, p) = p.f_x + s_u r_U |h1^T p|_* + s_d r_D |h2^T p|_*`` sampled on the grid nodes."""

    def __init__(self, sys: AffineSystem, X: np.ndarray, sense: str):
        self.F = sys.drift(X)
        self.H1 = np.asarray(sys.control_matrix(X))
        self.H2 = np.asarray(sys.disturbance_matrix(X))
        su, sd = (-1.0, 1.0) if sense == "reach" else (1.0, -1.0)
        self.terms = []
        for s, B, ball in ((su, self.H1, sys.u_ball), (sd, self.H2, sys.d_ball)):
            if B.shape[-1] and ball.radius:
                self.terms.append((s * ball.radius, B, _dual(ball), ball.norm))
        if not (np.all(np.isfinite(self.F)) and np.all(np.isfinite(self.H1)) and np.all(np.isfinite(self.H2))):
            raise NumericalError("dynamics are not finite on the grid")

    def __call__(self, P):
        out = np.einsum("...i,...i->...", P, self.F)
        for c, B, dual, _ in self.terms:
            out += c * dual(np.einsum("...ij,...i->...j", B, P))
        return out

    def node_bounds(self) -> np.ndarray:
        """``|dH/dp_i|`` bound at every node (independent of ``p`` for ball inputs)."""
        a = np.abs(self.F)
        for c, B, _, norm in self.terms:
            a = a + abs(c) * (np.abs(B).sum(axis=-1) if norm == "box" else np.linalg.norm(B, axis=-1))
        return a

    def dissipation(self, local: bool = True) -> np.ndarray:
        """Safety factor times the bound: grid max per axis, or per node (max over its 3x3 block)."""
        a = self.node_bounds()
        if not local:
            return SAFETY * a.reshape(-1, a.shape[-1]).max(axis=0)
        return SAFETY * ndimage.maximum_filter(a, size=(3, 3, 1), mode="nearest")


def _pad_linear(V):
    """Ghost layer by linear extrapolation on every side."""
    V = np.concatenate([2 * V[:1] - V[1:2], V, 2 * V[-1:] - V[-2:-1]], axis=0)
    return np.concatenate([2 * V[:, :1] - V[:, 1:2], V, 2 * V[:, -1:] - V[:, -2:-1]], axis=1)


def _lf_rate(V, ham: _Hamiltonian, alpha, dx):
    W = _pad_linear(V)
    c = W[1:-1, 1:-1]
    pm1 = (c - W[:-2, 1:-1]) / dx[0]
    pp1 = (W[2:, 1:-1] - c) / dx[0]
    pm2 = (c - W[1:-1, :-2]) / dx[1]
    pp2 = (W[1:-1, 2:] - c) / dx[1]
    P = np.stack([0.5 * (pm1 + pp1), 0.5 * (pm2 + pp2)], axis=-1)
    # backward-time march: dissipation enters with a plus sign
    return ham(P) + 0.5 * alpha[..., 0] * (pp1 - pm1) + 0.5 * alpha[..., 1] * (pp2 - pm2)


def solve_dp_horizons(
    sys: AffineSystem,
    tgt: QuadTarget,
    sense: str,
    axes: Sequence[np.ndarray],
    times: Sequence[float],
    T: float,
    cfl: float = 0.8,
    dissipation: str = "local",
) -> list:
    """Values at every requested ``t < T`` from one backward sweep, returned in increasing time.

    ``dissipation="global"`` uses one coefficient per axis (the grid max);
    ``"local"`` uses each node's own bound, which is still monotone under the
    same CFL step but far less diffusive where the dynamics are slow.
    """
    if sys.state_dim != 2 or len(axes) != 2:
        raise InvalidArgumentError("the DP oracle is 2D only")
    if not 0 < cfl <= 1:
        raise InvalidArgumentError(f"cfl must be in (0, 1], got {cfl}")
    if sense not in SENSES:
        raise InvalidArgumentError(f"sense must be one of {SENSES}, got {sense!r}")
    if dissipation not in ("local", "global"):
        raise InvalidArgumentError(f"dissipation must be 'local' or 'global', got {dissipation!r}")
    if tgt.dim != 2:
        raise InvalidArgumentError("target must be 2D")
    times = sorted((float(t) for t in times), reverse=True)
    if not times or times[0] >= T:
        raise InvalidArgumentError("need at least one time and all times < T")
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    dx = np.array([a[1] - a[0] for a in axes])
    ham = _Hamiltonian(sys, X, sense)
    alpha = ham.dissipation(dissipation == "local")
    speed = float(np.max(np.sum(alpha / dx, axis=-1)))
    dt_max = cfl / max(speed, 1e-12)
    V = eval_J(tgt, X)
    out, now, step = {}, float(T), 0
    for t_stop in times:
        n = max(1, int(np.ceil((now - t_stop) / dt_max - 1e-9)))
        dt = (now - t_stop) / n
        for _ in range(n):
            V = V + dt * _lf_rate(V, ham, alpha, dx)
            step += 1
        if not np.all(np.isfinite(V)):
            raise NumericalError(f"non-finite values at step {step}")
        now = t_stop
        meta = {"dt": dt, "steps": step, "dissipation": dissipation, "alpha_max": alpha.reshape(-1, 2).max(axis=0).tolist(), "T": float(T)}
        out[t_stop] = ValueGrid(axes, V.copy(), t_stop, sense, dt * speed, meta)
    return [out[t] for t in sorted(out)]


def solve_dp(
    sys: AffineSystem,
    tgt: QuadTarget,
    sense: str,
    axes: Sequence[np.ndarray],
    t: float,
    T: float,
    cfl: float = 0.8,
    dissipation: str = "local",
) -> ValueGrid:
    """``V(., t)`` for ``V_t + H(x, grad V) = 0``, ``V(., T) = J``.

    ``T == t`` returns ``J`` sampled on the nodes.
    """
    if t > T:
        raise InvalidArgumentError("need t <= T")
    if t == T:
        axes = tuple(np.asarray(a, dtype=float) for a in axes)
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return ValueGrid(axes, eval_J(tgt, X), float(T), sense, 0.0, {"steps": 0, "T": float(T)})
    return solve_dp_horizons(sys, tgt, sense, axes, [t], T, cfl, dissipation)[0]


def dp_value_at(grid: ValueGrid, x):
    """Bilinear interpolation of the stored field."""
    return value_at(grid, x)


def dp_gradient_at(grid: ValueGrid, x) -> np.ndarray:
    return gradient_at(grid, x)


def dp_dissipation(sys: AffineSystem, axes, sense: str = "reach", local: bool = True) -> np.ndarray:
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return _Hamiltonian(sys, X, sense).dissipation(local)


def lipschitz_tolerance(grid: ValueGrid, lipschitz: Optional[float]) -> float:
    """One cell's worth of value change: ``max spacing * L``."""
    if lipschitz is None:
        g = np.gradient(grid.values, *grid.axes)
        lipschitz = float(np.max(np.sqrt(sum(gi ** 2 for gi in g))))
    return float(np.max(grid.spacing) * lipschitz)
