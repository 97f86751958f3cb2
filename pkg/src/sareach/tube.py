"""Backward feasible tube over-approximation and the model-error bound on its lifted image."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import BlowUpError, InvalidArgumentError
from .intervals import Interval
from .lifting import LiftMap, lift, lift_jacobian
from .models import LiftedLinearModel
from .systems import AffineSystem, estimate_lipschitz, time_grid
from .targets import QuadTarget


@dataclass(frozen=True)
class BoxTube:
    """One axis-aligned box per time; ``times`` run backward from ``T`` to ``t``."""

    times: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    method: dict = field(default_factory=dict)

    @property
    def union_box(self):
        return self.lo.min(axis=0), self.hi.max(axis=0)

    def box_at(self, tau: float):
        """Smallest stored box covering time ``tau`` (union of the bracketing boxes)."""
        ts = self.times[::-1]
        if tau < ts[0] - 1e-12 or tau > ts[-1] + 1e-12:
            raise InvalidArgumentError(f"time {tau} outside tube [{ts[0]}, {ts[-1]}]")
        j = int(np.clip(np.searchsorted(ts, tau), 0, len(ts) - 1))
        i = max(j - 1, 0) if ts[j] > tau else j
        a, b = len(ts) - 1 - i, len(ts) - 1 - j
        return np.minimum(self.lo[a], self.lo[b]), np.maximum(self.hi[a], self.hi[b])

    def truncate(self, t: float) -> "BoxTube":
        """Sub-tube covering ``[t, T]``, keeping the bracketing node just below ``t``."""
        keep = self.times >= t - 1e-12
        below = np.flatnonzero(~keep)
        if below.size and not np.any(np.abs(self.times - t) <= 1e-12):
            keep[below[np.argmax(self.times[below])]] = True
        return BoxTube(self.times[keep], self.lo[keep], self.hi[keep], dict(self.method))

    def contains_union(self, x) -> np.ndarray:
        lo, hi = self.union_box
        x = np.asarray(x, float)
        return np.all((x >= lo) & (x <= hi), axis=-1)


def field_enclosure(sys: AffineSystem, box: Interval, lipschitz: Optional[float] = None, n_per_dim: int = 5) -> Interval:
    """Enclosure of ``f(box, U, D)`` for a batch of boxes of shape ``(N, n)``.

    Uses the system's interval extension when present; otherwise samples a
    grid in each box and pads by ``L * (max distance to the nearest sample)``.
    """
    U, D = sys.u_ball.bounding_box(), sys.d_ball.bounding_box()
    if sys.interval_field is not None:
        out = sys.interval_field(Interval(box.lo.T, box.hi.T), U, D)
        return Interval(np.broadcast_to(out.lo, box.lo.shape), np.broadcast_to(out.hi, box.hi.shape))
    if lipschitz is None:
        raise InvalidArgumentError("no interval extension: a Lipschitz bound is required")
    n = sys.state_dim
    frac = np.stack(np.meshgrid(*[np.linspace(0, 1, n_per_dim)] * n, indexing="ij"), axis=-1).reshape(-1, n)
    X = box.lo[:, None, :] + frac[None] * (box.hi - box.lo)[:, None, :]
    gap = 0.5 * np.linalg.norm(box.hi - box.lo, axis=1) / (n_per_dim - 1)
    lo = np.full(box.lo.shape, np.inf)
    hi = -lo
    flat = X.reshape(-1, n)
    for u in _corners(U):
        for d in _corners(D):
            # input terms enter affinely, so box corners of U x D bound them
            F = sys.field(flat, np.broadcast_to(u, (len(flat), sys.n_u)), np.broadcast_to(d, (len(flat), sys.n_d)))
            F = F.reshape(X.shape)
            lo, hi = np.minimum(lo, F.min(axis=1)), np.maximum(hi, F.max(axis=1))
    return Interval(lo - lipschitz * gap[:, None], hi + lipschitz * gap[:, None])


def _corners(iv: Interval):
    if iv.lo.size == 0:
        return [np.zeros(0)]
    g = np.meshgrid(*[[a, b] for a, b in zip(iv.lo, iv.hi)], indexing="ij")
    return list(np.stack(g, axis=-1).reshape(-1, iv.lo.size))


def _backward_increment(F: Interval, h: float) -> Interval:
    """``{-s f : s in [0, h], f in F}``."""
    return Interval(np.minimum(0.0, -h * F.hi), np.maximum(0.0, -h * F.lo))


def _initial_cells(lo, hi, cells_per_dim: int, target: Optional[QuadTarget]):
    n = lo.size
    edges = [np.linspace(a, b, cells_per_dim + 1) for a, b in zip(lo, hi)]
    idx = np.stack(np.meshgrid(*[np.arange(cells_per_dim)] * n, indexing="ij"), axis=-1).reshape(-1, n)
    clo = np.stack([edges[i][idx[:, i]] for i in range(n)], axis=1)
    chi = np.stack([edges[i][idx[:, i] + 1] for i in range(n)], axis=1)
    if target is not None and cells_per_dim > 1:
        keep = _meets_target(Interval(clo, chi), target)
        clo, chi = clo[keep], chi[keep]
    return Interval(clo, chi)


def backward_tube(
    sys: AffineSystem,
    target_lo,
    target_hi,
    t: float,
    T: float,
    h: float = 0.01,
    lipschitz: Optional[float] = None,
    cap: float = 1e3,
    cells_per_dim: int = 1,
    target: Optional[QuadTarget] = None,
    method: str = "box",
    cell: Optional[float] = None,
) -> BoxTube:
    """Interval backward-Euler tube with Lipschitz bloating.

    Every propagated box ``B`` first gets an a-priori enclosure ``B~`` of all
    states on the step (verified fixed point of ``B - [0, h] f(B~)``); its
    image is ``B - h f(B~)`` with the increment's radius scaled by
    ``exp(L h)``.

    ``method="box"`` propagates the target box (split into
    ``cells_per_dim**n`` cells, dropping cells that miss ``target``).
    ``method="raster"`` (2D) keeps the set as a raster of ``cell``-sized
    squares, pushes only its boundary cells and fills holes, which is sound
    because each input signal's flow is a homeomorphism of the plane and so
    maps a set inside the filled image of its boundary.  Either way the box
    stored per time is the hull of the propagated set.
    """
    L = sys.lipschitz_bound if lipschitz is None else lipschitz
    if L is None:
        raise InvalidArgumentError("backward_tube needs a Lipschitz bound (pass lipschitz= or set it on the system)")
    if cells_per_dim < 1:
        raise InvalidArgumentError("cells_per_dim must be >= 1")
    target_lo, target_hi = np.asarray(target_lo, float), np.asarray(target_hi, float)
    if np.any(target_lo > target_hi):
        raise InvalidArgumentError("target box has lo > hi")
    ts = time_grid(t, T, h)[::-1]
    if method == "raster":
        return _raster_tube(sys, target_lo, target_hi, ts, L, cap, target, cell)
    if method != "box":
        raise InvalidArgumentError(f"unknown tube method {method!r}")
    cells = _initial_cells(target_lo, target_hi, cells_per_dim, target)
    los, his = [target_lo.copy()], [target_hi.copy()]
    for k in range(len(ts) - 1):
        cells = _step(sys, cells, ts[k] - ts[k + 1], L)
        lo, hi = cells.lo.min(axis=0), cells.hi.max(axis=0)
        _check_cap(lo, hi, cap, ts[k + 1])
        los.append(lo)
        his.append(hi)
    meta = {"method": "interval-euler", "h": h, "lipschitz": L, "cap": cap, "cells": int(len(cells.lo))}
    return BoxTube(ts, np.array(los), np.array(his), meta)


def consistent_tube(sys: AffineSystem, target_lo, target_hi, t: float, T: float, h: float = 0.01,
                    max_rounds: int = 10, margin: float = 0.01, **kw) -> BoxTube:
    """Tube whose Lipschitz bound is at least the sampled estimate on the tube's own hull.

    Starts from the estimate on the target box and re-runs with the hull
    estimate (times ``1 + margin``) until it stops growing.
    """
    L = estimate_lipschitz(sys, target_lo, target_hi) * (1 + margin)
    for _ in range(max_rounds):
        tube = backward_tube(sys, target_lo, target_hi, t, T, h, lipschitz=L, **kw)
        need = estimate_lipschitz(sys, *tube.union_box)
        if need <= L:
            return tube
        L = need * (1 + margin)
    raise BlowUpError(f"Lipschitz bound did not settle after {max_rounds} rounds (last {L:.4g})")


def _step(sys, boxes: Interval, h: float, L: float) -> Interval:
    enc = _a_priori_enclosure(sys, boxes, h, L)
    inc = _backward_increment(field_enclosure(sys, enc, L), h)
    mid, rad = inc.mid, inc.rad * np.exp(L * h)
    return Interval(boxes.lo + mid - rad, boxes.hi + mid + rad)


def _check_cap(lo, hi, cap, when):
    if np.any(hi - lo > cap) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise BlowUpError(f"tube box exceeded diameter cap {cap:g} at t={when:.6g}", time=float(when))


def _raster_tube(sys, target_lo, target_hi, ts, L, cap, target, cell):
    if sys.state_dim != 2:
        raise InvalidArgumentError("raster tubes are 2D only")
    if cell is None:
        cell = float(np.min(target_hi - target_lo)) / 40
    if not cell > 0:
        raise InvalidArgumentError("cell size must be positive")
    origin = target_lo.copy()
    n0 = np.maximum(np.ceil((target_hi - target_lo) / cell - 1e-9).astype(int), 1)
    mask = np.ones(tuple(n0), dtype=bool)
    if target is not None:
        idx = np.argwhere(mask)
        lo = origin + idx * cell
        mask[tuple(idx.T)] = _meets_target(Interval(lo, lo + cell), target)
    los, his = [target_lo.copy()], [target_hi.copy()]
    for k in range(len(ts) - 1):
        edge = mask & ~ndimage.binary_erosion(mask, border_value=0)
        idx = np.argwhere(edge)
        lo = origin + idx * cell
        img = _step(sys, Interval(lo, lo + cell), ts[k] - ts[k + 1], L)
        _check_cap(img.lo.min(axis=0), img.hi.max(axis=0), cap, ts[k + 1])
        a = np.floor((img.lo - origin) / cell).astype(int)
        b = np.floor((img.hi - origin) / cell).astype(int)
        shift = np.minimum(a.min(axis=0), 0)
        size = np.maximum(b.max(axis=0) - shift + 1, np.array(mask.shape) - shift)
        painted = np.zeros(tuple(size), dtype=bool)
        a, b = a - shift, b - shift
        for i in range(len(a)):
            painted[a[i, 0]:b[i, 0] + 1, a[i, 1]:b[i, 1] + 1] = True
        origin = origin + shift * cell
        mask = ndimage.binary_fill_holes(painted)
        nz = np.argwhere(mask)
        los.append(origin + nz.min(axis=0) * cell)
        his.append(origin + (nz.max(axis=0) + 1) * cell)
    meta = {"method": "interval-euler-raster", "h": float(ts[0] - ts[1]) if len(ts) > 1 else 0.0,
            "lipschitz": L, "cap": cap, "cell": cell, "cells": int(mask.sum())}
    return BoxTube(ts, np.array(los), np.array(his), meta)


def _meets_target(cells: Interval, target: QuadTarget) -> np.ndarray:
    """Cells whose interval lower bound of ``J`` is nonpositive (a superset of those meeting it)."""
    e = Interval(cells.lo - target.center, cells.hi - target.center)
    acc = Interval(np.zeros(len(cells.lo)))
    for i in range(target.dim):
        acc = acc + target.Q[i, i] * e[:, i] ** 2
        for j in range(i + 1, target.dim):
            acc = acc + 2 * target.Q[i, j] * (e[:, i] * e[:, j])
    return acc.lo <= target.level


def _a_priori_enclosure(sys, box: Interval, h: float, L: float, max_iter: int = 60) -> Interval:
    cand = box + _backward_increment(field_enclosure(sys, box, L), h)
    todo = np.ones(len(box.lo), dtype=bool)
    lo, hi = cand.lo.copy(), cand.hi.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            widen = 0.1 * (hi[todo] - lo[todo]) + 1e-9
            c = Interval(lo[todo] - widen, hi[todo] + widen)
            b = Interval(box.lo[todo], box.hi[todo])
            nxt = b + _backward_increment(field_enclosure(sys, c, L), h)
            ok = np.all((nxt.lo >= c.lo) & (nxt.hi <= c.hi), axis=1)
            idx = np.flatnonzero(todo)
            lo[idx[ok]], hi[idx[ok]] = c.lo[ok], c.hi[ok]
            bad = idx[~ok]
            lo[bad] = np.minimum(c.lo[~ok], nxt.lo[~ok])
            hi[bad] = np.maximum(c.hi[~ok], nxt.hi[~ok])
            todo[idx[ok]] = False
            if not todo.any():
                return Interval(lo, hi)
            if not (np.all(np.isfinite(lo[todo])) and np.all(np.isfinite(hi[todo]))):
                break
    raise BlowUpError("could not verify an a-priori enclosure; reduce the step")


def save_tube_csv(tube: BoxTube, path) -> None:
    n = tube.lo.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"lo{i + 1}" for i in range(n)] + [f"hi{i + 1}" for i in range(n)])
        for tau, lo, hi in zip(tube.times, tube.lo, tube.hi):
            w.writerow([repr(float(tau))] + [repr(float(v)) for v in lo] + [repr(float(v)) for v in hi])


def load_tube_csv(path, method: Optional[dict] = None) -> BoxTube:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    n = (len(rows[0]) - 1) // 2
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return BoxTube(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:], method or {})


# --- error bound ------------------------------------------------------------


@dataclass(frozen=True)
class ErrorBound:
    delta_star: float
    grid_max: float
    points: np.ndarray
    contributions: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    grid_per_dim: int
    inflation: float
    coordinate_bounds: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        i = int(np.argmax(self.contributions))
        return {
            "delta_star": self.delta_star, "grid_max": self.grid_max, "inflation": self.inflation,
            "grid_per_dim": self.grid_per_dim, "box_lo": self.box_lo.tolist(), "box_hi": self.box_hi.tolist(),
            "argmax": self.points[i].tolist(),
            "coordinate_bounds": None if self.coordinate_bounds is None else self.coordinate_bounds.tolist(),
        }


def error_terms(model: LiftedLinearModel, m: LiftMap, sys: AffineSystem, x):
    """Affine decomposition of ``f_G - kappa`` at ``g = Psi(x)``: offset and input maps."""
    x = np.atleast_2d(np.asarray(x, float))
    jac = lift_jacobian(m, x)
    a = np.einsum("nij,nj->ni", jac, sys.drift(x)) - lift(m, x) @ model.K.T
    B1 = jac @ sys.control_matrix(x) - model.L1
    B2 = jac @ sys.disturbance_matrix(x) - model.L2
    return a, B1, B2


def _input_gain(B, ball):
    if B.shape[-1] == 0 or ball.radius == 0:
        return np.zeros(B.shape[0])
    if ball.norm == "box":
        return ball.radius * np.linalg.norm(B, axis=-2).sum(axis=-1)
    return ball.radius * np.linalg.norm(B, ord=2, axis=(-2, -1))


def pointwise_error_bound(model, m, sys, x) -> np.ndarray:
    """``||a|| + r_U sigma_max(B1) + r_D sigma_max(B2)`` per base point."""
    a, B1, B2 = error_terms(model, m, sys, x)
    return np.linalg.norm(a, axis=1) + _input_gain(B1, sys.u_ball) + _input_gain(B2, sys.d_ball)


def coordinate_error_bounds(model, m, sys, x) -> np.ndarray:
    """Per-coordinate bounds ``|a_i| + r_U |B1_i| + r_D |B2_i|`` (rows use the dual norm of each ball)."""
    a, B1, B2 = error_terms(model, m, sys, x)
    out = np.abs(a)
    for B, ball in ((B1, sys.u_ball), (B2, sys.d_ball)):
        if B.shape[-1] and ball.radius:
            out = out + ball.radius * (np.abs(B).sum(axis=-1) if ball.norm == "box" else np.linalg.norm(B, axis=-1))
    return out


def error_bound_delta(
    model: LiftedLinearModel,
    m: LiftMap,
    sys: AffineSystem,
    tube: BoxTube,
    grid_per_dim: int = 41,
    inflation: float = 0.1,
    chunk: int = 50_000,
) -> ErrorBound:
    """Grid estimate of the max model error over the lifted tube, inflated.

    The grid lives in the base space over the tube's union box and is lifted
    onto the manifold; the input sup is taken in closed form.
    """
    if grid_per_dim < 2:
        raise InvalidArgumentError("grid_per_dim must be >= 2")
    if tube is None or len(tube.times) == 0:
        raise InvalidArgumentError("empty tube")
    lo, hi = tube.union_box
    axes = [np.linspace(a, b, grid_per_dim) for a, b in zip(lo, hi)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, m.n_x)
    contrib = np.concatenate([pointwise_error_bound(model, m, sys, X[i:i + chunk]) for i in range(0, len(X), chunk)])
    gmax = float(contrib.max())
    coord = np.max([coordinate_error_bounds(model, m, sys, X[i:i + chunk]).max(axis=0) for i in range(0, len(X), chunk)], axis=0)
    return ErrorBound(gmax * (1 + inflation), gmax, X, contrib, lo, hi, grid_per_dim, inflation, coord * (1 + inflation))


def save_error_bound(eb: ErrorBound, path) -> None:
    Path(path).write_text(json.dumps(eb.to_dict(), indent=1), encoding="utf-8")
