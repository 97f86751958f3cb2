"""Control- and disturbance-affine systems, RK4 integration and the demo benchmarks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import DivergenceError, EvaluationError, InvalidArgumentError, NotFoundError
from .intervals import Interval, stack

Signal = Callable[[float], np.ndarray]


@dataclass(frozen=True)
class InputBall:
    """Norm ball ``{v : ||v|| <= radius}`` centred at the origin.

    ``norm`` is ``"euclidean"`` (default) or ``"box"`` (infinity norm).
    """

    dim: int
    radius: float
    norm: str = "euclidean"

    def __post_init__(self):
        if self.dim < 0:
            raise InvalidArgumentError(f"ball dimension must be >= 0, got {self.dim}")
        if not np.isfinite(self.radius) or self.radius < 0:
            raise InvalidArgumentError(f"ball radius must be finite and >= 0, got {self.radius}")
        if self.norm not in ("euclidean", "box"):
            raise InvalidArgumentError(f"unknown norm {self.norm!r}")

    def _norm(self, v):
        v = np.asarray(v, dtype=float)
        if self.norm == "euclidean":
            return np.linalg.norm(v, axis=-1)
        return np.max(np.abs(v), axis=-1, initial=0.0)

    def contains(self, v, tol: float = 0.0) -> bool:
        return bool(np.all(self._norm(v) <= self.radius + tol))

    def support(self, q):
        """Support function ``sup_{v in ball} q.v`` (vectorised over leading axes)."""
        q = np.asarray(q, dtype=float)
        if self.norm == "euclidean":
            return self.radius * np.linalg.norm(q, axis=-1)
        return self.radius * np.sum(np.abs(q), axis=-1)

    def maximizer(self, q):
        """A point of the ball attaining ``support(q)``; zero where ``q`` vanishes."""
        q = np.asarray(q, dtype=float)
        if self.norm == "box":
            return self.radius * np.sign(q)
        n = np.linalg.norm(q, axis=-1, keepdims=True)
        safe = np.where(n > 0, n, 1.0)
        return np.where(n > 0, self.radius * q / safe, 0.0)

    def project(self, v):
        v = np.asarray(v, dtype=float)
        if self.norm == "box":
            return np.clip(v, -self.radius, self.radius)
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        scale = np.where(n > self.radius, self.radius / np.where(n > 0, n, 1.0), 1.0)
        return v * scale

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform samples from the ball."""
        if self.dim == 0:
            return np.zeros((n, 0))
        if self.norm == "box":
            return rng.uniform(-self.radius, self.radius, size=(n, self.dim))
        g = rng.standard_normal((n, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = self.radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / self.dim)
        return g * r

    def bounding_box(self) -> Interval:
        return Interval(-self.radius * np.ones(self.dim), self.radius * np.ones(self.dim))


@dataclass(frozen=True)
class AffineSystem:
    """``xdot = f_x(x) + h1(x) u + h2(x) d`` with ball-bounded inputs.

    All callables are vectorised: ``drift`` maps ``(..., n_x) -> (..., n_x)``,
    ``control_matrix`` maps ``(..., n_x) -> (..., n_x, n_u)`` and likewise for
    ``disturbance_matrix``.  ``interval_field``, when given, maps interval
    enclosures of ``(x, u, d)`` to an enclosure of ``f``; the tube module falls
    back to a Lipschitz-padded sampled enclosure without it.
    """

    state_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    control_matrix: Callable[[np.ndarray], np.ndarray]
    disturbance_matrix: Callable[[np.ndarray], np.ndarray]
    u_ball: InputBall
    d_ball: InputBall
    lipschitz_bound: Optional[float] = None
    interval_field: Optional[Callable[[Interval, Interval, Interval], Interval]] = None
    name: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def n_u(self) -> int:
        return self.u_ball.dim

    @property
    def n_d(self) -> int:
        return self.d_ball.dim

    def field(self, x, u, d):
        """Vectorised vector field; no dimension checks."""
        x = np.asarray(x, dtype=float)
        out = self.drift(x)
        if self.n_u:
            out = out + np.einsum("...ij,...j->...i", self.control_matrix(x), np.asarray(u, dtype=float))
        if self.n_d:
            out = out + np.einsum("...ij,...j->...i", self.disturbance_matrix(x), np.asarray(d, dtype=float))
        return out

    def with_lipschitz(self, bound: float) -> "AffineSystem":
        return AffineSystem(
            self.state_dim, self.drift, self.control_matrix, self.disturbance_matrix,
            self.u_ball, self.d_ball, float(bound), self.interval_field, self.name, dict(self.params),
        )


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: Optional[np.ndarray] = None
    disturbances: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise InvalidArgumentError("times and states differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise InvalidArgumentError("trajectory times must be strictly increasing")

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def _check_vec(v, n, what):
    v = np.asarray(v, dtype=float).reshape(-1) if np.ndim(v) else np.asarray([v], dtype=float)
    if v.shape != (n,):
        raise InvalidArgumentError(f"{what} has dimension {v.size}, expected {n}")
    return v


def eval_dynamics(sys: AffineSystem, x, u=None, d=None) -> np.ndarray:
    """Evaluate ``f(x, u, d)`` at a single point, checking dimensions."""
    x = _check_vec(x, sys.state_dim, "state")
    u = np.zeros(sys.n_u) if u is None else _check_vec(u, sys.n_u, "control")
    d = np.zeros(sys.n_d) if d is None else _check_vec(d, sys.n_d, "disturbance")
    out = sys.field(x, u, d)
    if not np.all(np.isfinite(out)):
        raise EvaluationError(f"non-finite dynamics at x={x}")
    return out


def zero_signal(dim: int) -> Signal:
    z = np.zeros(dim)
    return lambda t: z


def zoh_signal(times, values) -> Signal:
    """Zero-order hold: ``values[i]`` is held on ``[times[i], times[i+1])``.

    The last value is held past the final knot.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(times) != len(values):
        raise InvalidArgumentError("zoh_signal needs one value per knot")

    def sig(t):
        i = np.searchsorted(times, t, side="right") - 1
        return values[min(max(i, 0), len(values) - 1)]

    return sig


def time_grid(t: float, T: float, h: float) -> np.ndarray:
    """``t, t+h, ...`` up to ``T`` with a shortened last step landing on ``T``."""
    if not h > 0:
        raise InvalidArgumentError(f"step must be positive, got {h}")
    if not t < T:
        raise InvalidArgumentError(f"need t < T, got t={t}, T={T}")
    n = int(np.floor((T - t) / h + 1e-9))
    ts = t + h * np.arange(n + 1)
    if T - ts[-1] > 1e-12 * max(1.0, abs(T)):
        ts = np.append(ts, T)
    else:
        ts[-1] = T
    return ts


def rk4_step(fun, t, x, h):
    k1 = fun(t, x)
    k2 = fun(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = fun(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = fun(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    sys: AffineSystem,
    x0,
    u_sig: Optional[Signal] = None,
    d_sig: Optional[Signal] = None,
    t: float = 0.0,
    T: float = 1.0,
    h: float = 1e-2,
) -> Trajectory:
    """Fixed-step classical RK4 from ``(x0, t)`` to ``T``.

    Input signals are callables of time (see :func:`zoh_signal`); ``None``
    means identically zero.  Raises :class:`DivergenceError` if the state
    becomes non-finite.
    """
    x = _check_vec(x0, sys.state_dim, "initial state")
    u_sig = u_sig or zero_signal(sys.n_u)
    d_sig = d_sig or zero_signal(sys.n_d)
    ts = time_grid(t, T, h)

    def fun(s, y):
        return sys.field(y, u_sig(s), d_sig(s))

    states = np.empty((len(ts), sys.state_dim))
    states[0] = x
    for i in range(len(ts) - 1):
        x = rk4_step(fun, ts[i], x, ts[i + 1] - ts[i])
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"state became non-finite at t={ts[i + 1]:.6g}", time=float(ts[i + 1]))
        states[i + 1] = x
    controls = np.array([u_sig(s) for s in ts]).reshape(len(ts), sys.n_u)
    dists = np.array([d_sig(s) for s in ts]).reshape(len(ts), sys.n_d)
    return Trajectory(ts, states, controls, dists)


def estimate_lipschitz(sys: AffineSystem, lo, hi, n_per_dim: int = 21, safety: float = 1.5, eps: float = 1e-6) -> float:
    """Sampled bound on ``||df/dx||_2`` over a box, inputs at ball-box corners.

    Finite-difference Jacobians on a uniform grid, times ``safety``.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    axes = [np.linspace(a, b, n_per_dim) for a, b in zip(lo, hi)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, sys.state_dim)
    corners_u = _box_corners(sys.n_u, sys.u_ball.radius)
    corners_d = _box_corners(sys.n_d, sys.d_ball.radius)
    best = 0.0
    for u in corners_u:
        for d in corners_d:
            U = np.broadcast_to(u, (len(X), sys.n_u))
            D = np.broadcast_to(d, (len(X), sys.n_d))
            cols = []
            for j in range(sys.state_dim):
                e = np.zeros(sys.state_dim)
                e[j] = eps
                cols.append((sys.field(X + e, U, D) - sys.field(X - e, U, D)) / (2 * eps))
            jac = np.stack(cols, axis=-1)
            best = max(best, float(np.max(np.linalg.norm(jac, ord=2, axis=(-2, -1)))))
    return safety * best


def _box_corners(dim, r):
    if dim == 0:
        return [np.zeros(0)]
    grids = np.meshgrid(*[[-r, r]] * dim, indexing="ij")
    return list(np.stack(grids, axis=-1).reshape(-1, dim))


# --- demo systems -----------------------------------------------------------


def slow_manifold(mu: float = -0.05, lam: float = -1.0, u_radius: float = 0.5, d_radius: float = 0.25) -> AffineSystem:
    """``xdot = (mu x1, lam (x2 - x1^2)) + u + d`` with identity input maps."""

    def drift(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([mu * x1, lam * (x2 - x1 ** 2)], axis=-1)

    def eye(x):
        return np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2))

    def ifield(x: Interval, u: Interval, d: Interval) -> Interval:
        return stack([mu * x[0] + u[0] + d[0], lam * (x[1] - x[0] ** 2) + u[1] + d[1]])

    return AffineSystem(
        2, drift, eye, eye, InputBall(2, u_radius), InputBall(2, d_radius),
        interval_field=ifield, name="slow_manifold",
        params={"mu": mu, "lam": lam, "u_radius": u_radius, "d_radius": d_radius},
    )


def vanderpol(mu: float = 1.0, u_radius: float = 0.5) -> AffineSystem:
    """Controlled Van der Pol: ``xdot = (x2, mu (1 - x1^2) x2 - x1) + (0, 1) u``; no disturbance."""

    def drift(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, mu * (1.0 - x1 ** 2) * x2 - x1], axis=-1)

    def h1(x):
        return np.broadcast_to(np.array([[0.0], [1.0]]), np.shape(x)[:-1] + (2, 1))

    def h2(x):
        return np.zeros(np.shape(x)[:-1] + (2, 0))

    def ifield(x: Interval, u: Interval, d: Interval) -> Interval:
        return stack([x[1], mu * (1.0 - x[0] ** 2) * x[1] - x[0] + u[0]])

    return AffineSystem(
        2, drift, h1, h2, InputBall(1, u_radius), InputBall(0, 0.0),
        interval_field=ifield, name="vanderpol", params={"mu": mu, "u_radius": u_radius},
    )


DEMO_SYSTEMS = {"slow_manifold": slow_manifold, "vanderpol": vanderpol}


def make_demo_system(name: str, params: Optional[Mapping[str, float]] = None) -> AffineSystem:
    try:
        factory = DEMO_SYSTEMS[name]
    except KeyError:
        raise NotFoundError(f"unknown demo system {name!r}; valid names: {', '.join(sorted(DEMO_SYSTEMS))}") from None
    try:
        return factory(**dict(params or {}))
    except TypeError as exc:
        raise InvalidArgumentError(f"bad parameters for {name!r}: {exc}") from None
