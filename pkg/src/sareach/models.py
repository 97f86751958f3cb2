"""Linear models ``kappa(g, u, d) = K g + L1 u + L2 d`` in the lifted space."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import EvaluationError, InvalidArgumentError, SingularFitError
from .lifting import LiftMap, identity_lift, lift, lift_jacobian, lifted_dynamics
from .systems import AffineSystem, rk4_step


@dataclass(frozen=True)
class LiftedLinearModel:
    K: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    provenance: dict = field(default_factory=dict)
    lift_id: str = ""

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        n = K.shape[0]
        L1 = np.asarray(self.L1, dtype=float).reshape(n, -1)
        L2 = np.asarray(self.L2, dtype=float).reshape(n, -1)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "L1", L1)
        object.__setattr__(self, "L2", L2)
        if K.shape != (n, n):
            raise InvalidArgumentError(f"K must be square, got {K.shape}")
        for name, M in (("K", K), ("L1", L1), ("L2", L2)):
            if not np.all(np.isfinite(M)):
                raise InvalidArgumentError(f"{name} has non-finite entries")

    @property
    def n_k(self) -> int:
        return self.K.shape[0]

    @property
    def n_u(self) -> int:
        return self.L1.shape[1]

    @property
    def n_d(self) -> int:
        return self.L2.shape[1]

    def __call__(self, g, u, d):
        g = np.asarray(g, dtype=float)
        out = g @ self.K.T
        if self.n_u:
            out = out + np.asarray(u, dtype=float) @ self.L1.T
        if self.n_d:
            out = out + np.asarray(d, dtype=float) @ self.L2.T
        return out

    def to_dict(self) -> dict:
        return {
            "n_k": self.n_k, "n_u": self.n_u, "n_d": self.n_d,
            "K": self.K.tolist(), "L1": self.L1.tolist(), "L2": self.L2.tolist(),
            "provenance": self.provenance, "lift_id": self.lift_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LiftedLinearModel":
        n, nu, nd = int(d["n_k"]), int(d["n_u"]), int(d["n_d"])
        return cls(
            np.asarray(d["K"], float).reshape(n, n),
            np.asarray(d["L1"], float).reshape(n, nu),
            np.asarray(d["L2"], float).reshape(n, nd),
            dict(d.get("provenance", {})), d.get("lift_id", ""),
        )


def save_model(model: LiftedLinearModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1), encoding="utf-8")


def load_model(path) -> LiftedLinearModel:
    return LiftedLinearModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TrajectorySample:
    """Samples ``(x, u, d, xdot)`` stacked row-wise."""

    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    xdot: np.ndarray
    seed: Optional[int] = None

    def __len__(self):
        return len(self.x)


def sample_trajectories(
    sys: AffineSystem, lo, hi, n_points: int = 2000, seed: int = 0, snippet_steps: int = 10, h: float = 0.01
) -> TrajectorySample:
    """Random short RK4 snippets from uniform initial states in ``[lo, hi]``.

    Inputs are drawn uniformly from their balls and held for one step.
    ``xdot`` is the exact vector field at each recorded state.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n_snip = -(-n_points // snippet_steps)
    x = rng.uniform(lo, hi, size=(n_snip, sys.state_dim))
    xs, us, ds = [], [], []
    for _ in range(snippet_steps):
        u = sys.u_ball.sample(rng, n_snip)
        d = sys.d_ball.sample(rng, n_snip)
        xs.append(x)
        us.append(u)
        ds.append(d)
        x = rk4_step(lambda t, y: sys.field(y, u, d), 0.0, x, h)
    rows = n_snip * snippet_steps
    X = np.stack(xs, axis=1).reshape(rows, sys.state_dim)[:n_points]
    U = np.stack(us, axis=1).reshape(rows, sys.n_u)[:n_points]
    D = np.stack(ds, axis=1).reshape(rows, sys.n_d)[:n_points]
    Xdot = sys.field(X, U, D)
    if not np.all(np.isfinite(Xdot)):
        raise EvaluationError("non-finite derivative in trajectory sample; shrink the sampling box")
    return TrajectorySample(X, U, D, Xdot, seed)


def analytic_slow_manifold_model(c, mu: float = -0.05, lam: float = -1.0) -> LiftedLinearModel:
    """Exact lifted slow-manifold drift with the input term frozen at ``g1 = c1``."""
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.shape != (2,):
        raise InvalidArgumentError("centre must be 2-dimensional")
    K = np.array([[mu, 0.0, 0.0], [0.0, lam, -lam], [0.0, 0.0, 2 * mu]])
    L = np.array([[1.0, 0.0], [0.0, 1.0], [2 * c[0], 0.0]])
    return LiftedLinearModel(K, L, L.copy(), {"kind": "analytic", "center": c.tolist()}, "slow_manifold:3")


def _regressors(m: LiftMap, data: TrajectorySample):
    Z = np.concatenate([lift(m, data.x), data.u, data.d], axis=1)
    Y = np.einsum("nij,nj->ni", lift_jacobian(m, data.x), data.xdot)
    return Z, Y


def _split(W, n_k, n_u):
    W = W.T
    return W[:, :n_k], W[:, n_k:n_k + n_u], W[:, n_k + n_u:]


def edmd_objective(model: LiftedLinearModel, m: LiftMap, data: TrajectorySample, ridge: float = 0.0) -> float:
    """Sum of squared lifted-derivative residuals plus ridge penalty."""
    Z, Y = _regressors(m, data)
    W = np.concatenate([model.K, model.L1, model.L2], axis=1).T
    return float(np.sum((Z @ W - Y) ** 2) + ridge * np.sum(W ** 2))


def fit_edmd(m: LiftMap, data: TrajectorySample, ridge: float = 1e-8, kind: str = "edmd") -> LiftedLinearModel:
    """Continuous-time least squares: ``dPsi(x) xdot ~ K Psi(x) + L1 u + L2 d``.

    Solved through the (ridge-regularised) normal equations.
    """
    if len(data) == 0:
        raise InvalidArgumentError("empty trajectory sample")
    if ridge < 0:
        raise InvalidArgumentError("ridge must be nonnegative")
    Z, Y = _regressors(m, data)
    G = Z.T @ Z
    if ridge == 0.0:
        rank = np.linalg.matrix_rank(Z)
        if rank < Z.shape[1]:
            raise SingularFitError(
                f"regressor matrix has rank {rank} < {Z.shape[1]}; use ridge > 0 (e.g. 1e-8)"
            )
    G = G + ridge * np.eye(G.shape[0])
    try:
        W = linalg.solve(G, Z.T @ Y, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise SingularFitError(f"normal equations are singular ({exc}); increase ridge") from None
    K, L1, L2 = _split(W, m.n_k, data.u.shape[1])
    resid = Z @ W - Y
    prov = {
        "kind": kind, "n_samples": len(data), "seed": data.seed, "ridge": ridge,
        "rms_residual": float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1)))),
    }
    return LiftedLinearModel(K, L1, L2, prov, m.lift_id)


def fit_dmd(data: TrajectorySample, ridge: float = 1e-8) -> LiftedLinearModel:
    """Input-aware DMD: the EDMD fit on the identity lift."""
    return fit_edmd(identity_lift(data.x.shape[1]), data, ridge, kind="dmd")


def taylor_model(sys: AffineSystem, m: LiftMap, center, step: float = 1e-6) -> LiftedLinearModel:
    """First-order expansion of the lifted field at ``Psi(center)``.

    ``K`` is the central-difference Jacobian of ``g -> dPsi(Pg) f_x(Pg)``;
    the input maps are ``dPsi(center) h_i(center)``.
    """
    center = np.asarray(center, dtype=float).reshape(-1)
    if center.shape != (m.n_x,):
        raise InvalidArgumentError("centre dimension does not match the lift")
    fg = lifted_dynamics(m, sys)
    g0 = lift(m, center)
    cols = []
    for j in range(m.n_k):
        e = np.zeros(m.n_k)
        e[j] = step
        cols.append((fg.drift(g0 + e) - fg.drift(g0 - e)) / (2 * step))
    K = np.stack(cols, axis=1)
    if not np.all(np.isfinite(K)):
        raise EvaluationError("non-finite Taylor Jacobian")
    jac = lift_jacobian(m, center)
    L1 = jac @ sys.control_matrix(center)
    L2 = jac @ sys.disturbance_matrix(center)
    return LiftedLinearModel(K, L1, L2, {"kind": "taylor", "center": center.tolist()}, m.lift_id)


def model_residual(model: LiftedLinearModel, m: LiftMap, sys: AffineSystem, x, u, d) -> dict:
    """Exact ``||f_G - kappa||_2`` at lifted points ``g = Psi(x)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if len(x) == 0:
        raise InvalidArgumentError("no points given")
    u = np.broadcast_to(np.asarray(u, dtype=float), (len(x), sys.n_u))
    d = np.broadcast_to(np.asarray(d, dtype=float), (len(x), sys.n_d))
    g = lift(m, x)
    true = np.einsum("nij,nj->ni", lift_jacobian(m, x), sys.field(x, u, d))
    per = np.linalg.norm(true - model(g, u, d), axis=1)
    return {"max": float(per.max()), "mean": float(per.mean()), "per_point": per}
