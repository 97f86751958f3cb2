"""State-inclusive lifting functions, their Jacobians and the lifted nonlinear dynamics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EvaluationError, InvalidArgumentError
from .systems import AffineSystem


@dataclass(frozen=True)
class LiftMap:
    """``Psi(x) = [x, psi_1(x), ..., psi_m(x)]``.

    ``features`` maps ``(..., n_x) -> (..., m)`` and ``feature_jacobian`` maps
    ``(..., n_x) -> (..., m, n_x)``; both are vectorised.  ``spec`` is the
    serialisable description (``None`` for custom lifts).
    """

    n_x: int
    n_k: int
    features: Callable[[np.ndarray], np.ndarray]
    feature_jacobian: Callable[[np.ndarray], np.ndarray]
    names: Sequence[str]
    kind: str
    spec: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        if self.n_x < 1:
            raise InvalidArgumentError("n_x must be positive")
        if self.kind == "identity":
            if self.n_k != self.n_x:
                raise InvalidArgumentError("identity lift must have n_k == n_x")
        elif self.n_k <= self.n_x:
            raise InvalidArgumentError(f"lift must add coordinates: n_k={self.n_k}, n_x={self.n_x}")
        if len(self.names) != self.n_k - self.n_x:
            raise InvalidArgumentError("need one name per lifted feature")

    @property
    def projection(self) -> np.ndarray:
        """``P = [I 0]`` as an explicit ``(n_x, n_k)`` matrix."""
        return np.eye(self.n_x, self.n_k)

    @property
    def lift_id(self) -> str:
        if self.spec is None:
            return f"custom:{self.n_x}->{self.n_k}"
        s = self.spec
        if s["kind"] == "polynomial":
            return f"poly{s['degree']}{'c' if s.get('constant', True) else ''}:{self.n_k}"
        if s["kind"] == "rbf":
            return f"rbf{len(s['centers'])}:{self.n_k}"
        return f"{s['kind']}:{self.n_k}"


def _checked_x(m: LiftMap, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (m.n_x,):
        raise InvalidArgumentError(f"state has trailing dimension {x.shape[-1:]}, expected {m.n_x}")
    return x


def _check_finite(m: LiftMap, vals):
    if not np.all(np.isfinite(vals)):
        i = int(np.argwhere(~np.isfinite(vals))[0, -1])
        raise EvaluationError(f"lift feature {m.names[i]!r} produced a non-finite value")


def lift(m: LiftMap, x) -> np.ndarray:
    """``Psi(x)``; vectorised over leading axes."""
    x = _checked_x(m, x)
    if m.kind == "identity":
        return x.copy()
    feats = np.asarray(m.features(x), dtype=float)
    _check_finite(m, feats)
    return np.concatenate([x, feats], axis=-1)


def lift_jacobian(m: LiftMap, x) -> np.ndarray:
    """``d Psi / dx`` with shape ``(..., n_k, n_x)``; top block is the identity."""
    x = _checked_x(m, x)
    eye = np.broadcast_to(np.eye(m.n_x), x.shape[:-1] + (m.n_x, m.n_x))
    if m.kind == "identity":
        return eye.copy()
    jac = np.asarray(m.feature_jacobian(x), dtype=float)
    if not np.all(np.isfinite(jac)):
        rows = np.argwhere(~np.isfinite(jac))
        raise EvaluationError(f"lift feature {m.names[int(rows[0, -2])]!r} produced a non-finite gradient")
    return np.concatenate([eye, jac], axis=-2)


def project(m: LiftMap, g) -> np.ndarray:
    return np.asarray(g, dtype=float)[..., : m.n_x]


def on_manifold_distance(m: LiftMap, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    return np.max(np.abs(g - lift(m, project(m, g))), axis=-1)


def is_on_manifold(m: LiftMap, g, tol: float = 1e-6) -> bool:
    """True iff ``||g - Psi(P g)||_inf <= tol``."""
    g = np.asarray(g, dtype=float)
    if g.shape[-1:] != (m.n_k,):
        raise InvalidArgumentError(f"augmented vector has dimension {g.shape[-1:]}, expected {m.n_k}")
    return bool(np.all(on_manifold_distance(m, g) <= tol))


def lifted_dynamics(m: LiftMap, sys: AffineSystem) -> AffineSystem:
    """``f_G(g, u, d) = dPsi(Pg) f(Pg, u, d)`` as an affine system on ``R^{n_k}``.

    Only ``Pg`` is read, so the field is defined off the manifold too.  The
    slow-manifold system with its exact lift is the exception: its drift is
    written natively as the linear map ``(mu g1, lam (g2 - g3), 2 mu g3)``,
    which agrees on the manifold and fixes the off-manifold extension.
    """
    if sys.state_dim != m.n_x:
        raise InvalidArgumentError("lift and system state dimensions differ")
    native = _native_drift(m, sys)

    def drift(g):
        if native is not None:
            return native(np.asarray(g, dtype=float))
        x = project(m, g)
        return np.einsum("...ij,...j->...i", lift_jacobian(m, x), sys.drift(x))

    def h1(g):
        x = project(m, g)
        return lift_jacobian(m, x) @ sys.control_matrix(x)

    def h2(g):
        x = project(m, g)
        return lift_jacobian(m, x) @ sys.disturbance_matrix(x)

    return AffineSystem(m.n_k, drift, h1, h2, sys.u_ball, sys.d_ball, name=f"{sys.name}/lifted[{m.lift_id}]")


def _native_drift(m: LiftMap, sys: AffineSystem):
    if sys.name != "slow_manifold" or (m.spec or {}).get("kind") != "slow_manifold":
        return None
    mu, lam = sys.params["mu"], sys.params["lam"]
    K = np.array([[mu, 0.0, 0.0], [0.0, lam, -lam], [0.0, 0.0, 2 * mu]])
    return lambda g: g @ K.T


@dataclass(frozen=True)
class ManifoldGrid:
    base_points: np.ndarray
    lifted_points: np.ndarray
    axes: Optional[tuple] = None

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes) if self.axes is not None else (len(self.base_points),)


def manifold_grid(m: LiftMap, axes: Sequence[np.ndarray]) -> ManifoldGrid:
    """Tensor grid over the base space (``ij`` ordering), lifted onto the manifold."""
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, m.n_x)
    return ManifoldGrid(X, lift(m, X), axes)


# --- constructors -----------------------------------------------------------


def identity_lift(n_x: int) -> LiftMap:
    return LiftMap(
        n_x, n_x, lambda x: np.zeros(np.shape(x)[:-1] + (0,)), lambda x: np.zeros(np.shape(x)[:-1] + (0, n_x)),
        (), "identity", {"kind": "identity", "n_x": n_x},
    )


def monomial_exponents(n_x: int, degree: int) -> list:
    """Exponent tuples of total degree 2..degree in graded lexicographic order."""
    out = []
    for deg in range(2, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_x), deg):
            e = [0] * n_x
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


def polynomial_lift(n_x: int, degree: int, constant: bool = True) -> LiftMap:
    """Monomials of degree 2..``degree`` after the state, then (optionally) a constant 1.

    With the constant, a 2-D state gives ``n_k = 10`` for degree 3 and 15 for
    degree 4.
    """
    if degree < 2:
        raise InvalidArgumentError("polynomial lift needs degree >= 2")
    exps = np.array(monomial_exponents(n_x, degree), dtype=int)
    names = ["*".join(f"x{i + 1}^{p}" if p > 1 else f"x{i + 1}" for i, p in enumerate(e) if p) for e in exps]
    if constant:
        names.append("1")

    def features(x):
        x = np.asarray(x, dtype=float)
        vals = np.prod(x[..., None, :] ** exps, axis=-1)
        if constant:
            vals = np.concatenate([vals, np.ones(x.shape[:-1] + (1,))], axis=-1)
        return vals

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        cols = []
        for j in range(n_x):
            e = exps.copy()
            coef = e[:, j].astype(float)
            e[:, j] = np.maximum(e[:, j] - 1, 0)
            cols.append(coef * np.prod(x[..., None, :] ** e, axis=-1))
        jac = np.stack(cols, axis=-1)
        if constant:
            jac = np.concatenate([jac, np.zeros(x.shape[:-1] + (1, n_x))], axis=-2)
        return jac

    m = len(exps) + (1 if constant else 0)
    spec = {"kind": "polynomial", "n_x": n_x, "degree": degree, "constant": constant}
    return LiftMap(n_x, n_x + m, features, jacobian, tuple(names), "polynomial", spec)


def rbf_lift(centers, widths) -> LiftMap:
    """Gaussian kernels ``exp(-||x - c_i||^2 / (2 w_i^2))``."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    widths = np.broadcast_to(np.asarray(widths, dtype=float), (len(centers),)).copy()
    if np.any(widths <= 0):
        raise InvalidArgumentError("RBF widths must be positive")
    n_x = centers.shape[1]

    def features(x):
        diff = np.asarray(x, dtype=float)[..., None, :] - centers
        return np.exp(-np.sum(diff ** 2, axis=-1) / (2 * widths ** 2))

    def jacobian(x):
        diff = np.asarray(x, dtype=float)[..., None, :] - centers
        phi = np.exp(-np.sum(diff ** 2, axis=-1) / (2 * widths ** 2))
        return -(diff / widths[:, None] ** 2) * phi[..., None]

    names = tuple(f"rbf{i}" for i in range(len(centers)))
    spec = {"kind": "rbf", "n_x": n_x, "centers": centers.tolist(), "widths": widths.tolist()}
    return LiftMap(n_x, n_x + len(centers), features, jacobian, names, "rbf", spec)


def rbf_centers(lo, hi, n_centers: int, scale: float = 2.0):
    """Centres on a uniform grid over ``[lo, hi]`` scaled about its midpoint.

    A ``k^d`` grid with ``k = ceil(n^(1/d))`` is laid out and the ``n`` nodes
    nearest the box centre kept (grid order breaks ties).  The width is the
    mean nearest-centre spacing.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * scale
    d = len(lo)
    k = int(np.ceil(n_centers ** (1.0 / d) - 1e-9))
    axes = [np.linspace(m - h, m + h, k) if k > 1 else np.array([m]) for m, h in zip(mid, half)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    dist = np.linalg.norm((nodes - mid) / np.where(half > 0, half, 1.0), axis=1)
    order = np.argsort(np.round(dist, 12), kind="stable")
    centers = nodes[order[:n_centers]]
    if len(centers) > 1:
        dd = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        np.fill_diagonal(dd, np.inf)
        width = float(np.mean(dd.min(axis=1)))
    else:
        width = float(np.mean(half)) or 1.0
    return centers, width


def custom_lift(n_x: int, features, feature_jacobian, names, spec: Optional[dict] = None) -> LiftMap:
    names = tuple(names)
    return LiftMap(n_x, n_x + len(names), features, feature_jacobian, names, "custom", spec)


def slow_manifold_lift() -> LiftMap:
    """``Psi(x) = [x1, x2, x1^2]``."""
    return custom_lift(
        2,
        lambda x: np.asarray(x, float)[..., :1] ** 2,
        lambda x: np.stack([2 * np.asarray(x, float)[..., :1], np.zeros(np.shape(x)[:-1] + (1,))], axis=-1),
        ["x1^2"],
        spec={"kind": "slow_manifold", "n_x": 2},
    )


def lift_from_spec(spec: dict) -> LiftMap:
    kind = spec.get("kind")
    if kind == "identity":
        return identity_lift(int(spec["n_x"]))
    if kind == "polynomial":
        return polynomial_lift(int(spec.get("n_x", 2)), int(spec["degree"]), bool(spec.get("constant", True)))
    if kind == "rbf":
        return rbf_lift(spec["centers"], spec["widths"])
    if kind == "slow_manifold":
        return slow_manifold_lift()
    raise InvalidArgumentError(f"cannot build lift of kind {kind!r} from a spec")
