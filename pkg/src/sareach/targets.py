"""Ellipsoidal targets, their level functions and conjugates, and augmented inner/outer targets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import InvalidArgumentError, InvalidTargetError
from .lifting import LiftMap, lift


@dataclass(frozen=True)
class QuadTarget:
    """``{y : (y - c)^T Q (y - c) <= r}`` with level function ``J(y) = (y-c)^T Q (y-c) - r``."""

    center: np.ndarray
    Q: np.ndarray
    level: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "Q", Q)
        if Q.shape != (c.size, c.size):
            raise InvalidArgumentError(f"shape matrix {Q.shape} does not match centre of size {c.size}")
        if np.max(np.abs(Q - Q.T), initial=0.0) > 1e-12:
            raise InvalidArgumentError("shape matrix must be symmetric")
        if np.linalg.eigvalsh(Q).min() <= 0:
            raise InvalidArgumentError("shape matrix must be positive definite")
        if not self.level > 0:
            raise InvalidArgumentError(f"target level must be positive, got {self.level}")
        object.__setattr__(self, "level", float(self.level))

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def Q_inv(self) -> np.ndarray:
        return linalg.inv(self.Q)

    def half_widths(self) -> np.ndarray:
        """Half side lengths of the axis-aligned bounding box."""
        return np.sqrt(self.level * np.diag(self.Q_inv))

    def bounding_box(self):
        hw = self.half_widths()
        return self.center - hw, self.center + hw

    def gradient(self, y) -> np.ndarray:
        return 2.0 * (np.asarray(y, float) - self.center) @ self.Q

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "Q": self.Q.tolist(), "level": self.level}

    @classmethod
    def from_dict(cls, d) -> "QuadTarget":
        c = np.asarray(d["center"], dtype=float)
        Q = np.asarray(d.get("Q", np.ones(c.size)), dtype=float)
        if Q.ndim == 1:
            Q = np.diag(Q)
        return cls(c, Q, float(d["level"]))


def eval_J(tgt: QuadTarget, y) -> np.ndarray:
    """Level function; vectorised over leading axes of ``y``."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1:] != (tgt.dim,):
        raise InvalidArgumentError(f"point dimension {y.shape[-1:]} does not match target dimension {tgt.dim}")
    e = y - tgt.center
    out = np.einsum("...i,ij,...j->...", e, tgt.Q, e) - tgt.level
    return out if out.ndim else float(out)


def conjugate_J(tgt: QuadTarget, p) -> np.ndarray:
    """``J*(p) = p.c + p^T Q^{-1} p / 4 + r``."""
    p = np.asarray(p, dtype=float)
    if p.shape[-1:] != (tgt.dim,):
        raise InvalidArgumentError(f"costate dimension {p.shape[-1:]} does not match target dimension {tgt.dim}")
    out = p @ tgt.center + 0.25 * np.einsum("...i,ij,...j->...", p, tgt.Q_inv, p) + tgt.level
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class AugTargetPair:
    base: QuadTarget
    eta: float
    inner: Optional[QuadTarget] = None
    outer: Optional[QuadTarget] = None

    @property
    def active(self) -> QuadTarget:
        return self.inner if self.inner is not None else self.outer


MODES = ("reach_inner", "avoid_outer")


def _aug_shape(base: QuadTarget, m: LiftMap, eta: float) -> np.ndarray:
    extra = m.n_k - m.n_x
    return linalg.block_diag(base.Q, eta * np.eye(extra)) if extra else base.Q.copy()


def _audit_points(base: QuadTarget, n: int, seed: int) -> np.ndarray:
    """Uniform samples over twice the target's bounding box plus points on its boundary."""
    rng = np.random.default_rng(seed)
    lo, hi = base.bounding_box()
    mid, half = 0.5 * (lo + hi), hi - lo
    box = rng.uniform(mid - half, mid + half, size=(n, base.dim))
    # boundary points: scale random directions onto the ellipsoid
    v = rng.standard_normal((max(n // 4, 1), base.dim))
    s = np.sqrt(base.level / np.einsum("ni,ij,nj->n", v, base.Q, v))
    bnd = base.center + v * s[:, None]
    return np.concatenate([box, bnd, base.center[None]], axis=0)


def audit_aug_targets(pair: AugTargetPair, m: LiftMap, n_samples: int = 10_000, seed: int = 0, tol: float = 1e-9):
    """First sample breaking inner/outer validity on the manifold, or ``None``.

    ``tol`` absorbs rounding for samples placed on the base boundary.
    """
    X = _audit_points(pair.base, n_samples, seed)
    G = lift(m, X)
    Jb = eval_J(pair.base, X)
    if pair.inner is not None:
        bad = (eval_J(pair.inner, G) <= 0) & (Jb > tol)
        if np.any(bad):
            return X[np.argmax(bad)]
    if pair.outer is not None:
        bad = (Jb <= 0) & (eval_J(pair.outer, G) > tol)
        if np.any(bad):
            return X[np.argmax(bad)]
    return None


def make_aug_targets(
    base: QuadTarget,
    m: LiftMap,
    eta: float,
    mode: str,
    level: Optional[float] = None,
    n_samples: int = 10_000,
    seed: int = 0,
) -> AugTargetPair:
    """Build the inner (reach) or outer (avoid) augmented target and audit it.

    ``reach_inner`` centres the ellipsoid ``diag(Q_base, eta I)`` at the lifted
    base centre; ``avoid_outer`` centres it at the origin.  ``level`` defaults
    to the base level.  Raises :class:`InvalidTargetError` carrying the first
    violating base-space sample when the manifold restriction is not an
    inner/outer bound.
    """
    if not eta > 0:
        raise InvalidArgumentError(f"eta must be positive, got {eta}")
    if mode not in MODES:
        raise InvalidArgumentError(f"mode must be one of {MODES}, got {mode!r}")
    if base.dim != m.n_x:
        raise InvalidArgumentError("base target and lift dimensions differ")
    Qg = _aug_shape(base, m, eta)
    level = base.level if level is None else float(level)
    if mode == "reach_inner":
        pair = AugTargetPair(base, eta, inner=QuadTarget(lift(m, base.center), Qg, level))
    else:
        pair = AugTargetPair(base, eta, outer=QuadTarget(np.zeros(m.n_k), Qg, level))
    bad = audit_aug_targets(pair, m, n_samples, seed)
    if bad is not None:
        which = "inner" if mode == "reach_inner" else "outer"
        raise InvalidTargetError(f"{which} augmented target (eta={eta}, level={level}) fails at x={bad.tolist()}", sample=bad)
    return pair


def valid_level(base: QuadTarget, m: LiftMap, eta: float, mode: str, margin: float = 0.02, n_samples: int = 20_000, seed: int = 1) -> float:
    """Level making the augmented target valid on the audit samples, with a relative margin.

    For ``avoid_outer`` this is the sampled max of ``g^T Q g`` over the target
    (times ``1 + margin``); for ``reach_inner`` the sampled min of the lifted
    quadratic outside the target (times ``1 - margin``).
    """
    Qg = _aug_shape(base, m, eta)
    X = _audit_points(base, n_samples, seed)
    inside = eval_J(base, X) <= 0
    if mode == "avoid_outer":
        G = lift(m, X[inside])
        return float(np.max(np.einsum("ni,ij,nj->n", G, Qg, G)) * (1 + margin))
    if mode == "reach_inner":
        G = lift(m, X[~inside]) - lift(m, base.center)
        return float(np.min(np.einsum("ni,ij,nj->n", G, Qg, G)) * (1 - margin))
    raise InvalidArgumentError(f"mode must be one of {MODES}, got {mode!r}")
