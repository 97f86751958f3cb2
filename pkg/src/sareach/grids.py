"""Dense value fields on uniform 2D (or nD) grids: interpolation, gradients and file I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, OutOfDomainError

SENSES = ("reach", "avoid")

_MAGIC = b"SAVG"


@dataclass(frozen=True)
class ValueGrid:
    axes: tuple
    values: np.ndarray
    time: float
    sense: str
    cfl_used: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", vals)
        if vals.shape != tuple(len(a) for a in axes):
            raise InvalidArgumentError(f"values shape {vals.shape} does not match axes {[len(a) for a in axes]}")
        if self.sense not in SENSES:
            raise InvalidArgumentError(f"sense must be one of {SENSES}, got {self.sense!r}")
        for a in axes:
            if len(a) < 2 or np.any(np.diff(a) <= 0):
                raise InvalidArgumentError("axes must be increasing with at least two nodes")

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def cell_area(self) -> float:
        return float(np.prod(self.spacing))

    def nodes(self) -> np.ndarray:
        """All grid nodes, row-major (``ij`` indexing), shape ``(N, ndim)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, self.ndim)

    def member_mask(self) -> np.ndarray:
        """``V <= 0``: the reach set, or for avoid games the set that cannot escape the target."""
        return self.values <= 0


def uniform_axes(lo, hi, n) -> tuple:
    n = np.broadcast_to(np.asarray(n), np.shape(lo))
    return tuple(np.linspace(a, b, int(k)) for a, b, k in zip(lo, hi, n))


def _locate(grid: ValueGrid, x: np.ndarray, extrapolate: bool):
    idx, frac = [], []
    for i, a in enumerate(grid.axes):
        xi = x[..., i]
        if not extrapolate and (np.any(xi < a[0] - 1e-12) or np.any(xi > a[-1] + 1e-12)):
            raise OutOfDomainError(f"coordinate {i} outside grid hull [{a[0]}, {a[-1]}]")
        h = a[1] - a[0]
        j = np.clip(np.floor((xi - a[0]) / h).astype(int), 0, len(a) - 2)
        idx.append(j)
        frac.append((xi - a[j]) / h)
    return idx, frac


def value_at(grid: ValueGrid, x, extrapolate: bool = False):
    """Multilinear interpolation; raises :class:`OutOfDomainError` outside the hull."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != grid.ndim:
        raise InvalidArgumentError(f"point dimension {x.shape[-1]} does not match grid dimension {grid.ndim}")
    idx, frac = _locate(grid, x, extrapolate)
    out = np.zeros(x.shape[:-1])
    for corner in np.ndindex(*(2,) * grid.ndim):
        w = np.ones(x.shape[:-1])
        ind = []
        for i, c in enumerate(corner):
            w = w * (frac[i] if c else 1.0 - frac[i])
            ind.append(idx[i] + c)
        out = out + w * grid.values[tuple(ind)]
    return out if out.ndim else float(out)


def gradient_at(grid: ValueGrid, x) -> np.ndarray:
    """Central differences of the interpolated field with half-spacing steps.

    Steps that would leave the hull fall back to one-sided differences.
    """
    x = np.asarray(x, dtype=float)
    value_at(grid, x)  # domain check
    out = np.zeros(x.shape)
    for i, a in enumerate(grid.axes):
        h = 0.5 * (a[1] - a[0])
        hi = np.minimum(x[..., i] + h, a[-1])
        lo = np.maximum(x[..., i] - h, a[0])
        xp, xm = x.copy(), x.copy()
        xp[..., i], xm[..., i] = hi, lo
        out[..., i] = (np.asarray(value_at(grid, xp)) - np.asarray(value_at(grid, xm))) / (hi - lo)
    return out


def save_grid(grid: ValueGrid, path) -> None:
    """Flat binary: magic, ndim, per-axis (n, lo, hi), then row-major float64 values; JSON sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", grid.ndim))
        for a in grid.axes:
            fh.write(struct.pack("<Qdd", len(a), a[0], a[-1]))
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())
    side = {"time": grid.time, "sense": grid.sense, "cfl_used": grid.cfl_used, "shape": list(grid.values.shape), "meta": grid.meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=1), encoding="utf-8")


def load_grid(path) -> ValueGrid:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise InvalidArgumentError(f"{path} is not a value-grid file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    off, axes = 8, []
    for _ in range(ndim):
        n, lo, hi = struct.unpack_from("<Qdd", raw, off)
        off += 24
        axes.append(np.linspace(lo, hi, n))
    vals = np.frombuffer(raw, dtype="<f8", offset=off).reshape([len(a) for a in axes]).copy()
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    return ValueGrid(tuple(axes), vals, side["time"], side["sense"], side.get("cfl_used", 0.0), side.get("meta", {}))
