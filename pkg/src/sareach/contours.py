"""Level-set polylines of 2D value grids for plotting."""

from __future__ import annotations

import csv

import numpy as np
from skimage import measure

from .errors import InvalidArgumentError
from .grids import ValueGrid


def contour_polylines(grid: ValueGrid, level: float = 0.0) -> list:
    """Marching-squares polylines of ``{V = level}`` in state coordinates."""
    if grid.ndim != 2:
        raise InvalidArgumentError("contours need a 2D grid")
    V = grid.values
    if not (np.nanmin(V) <= level <= np.nanmax(V)):
        return []
    out = []
    for c in measure.find_contours(V, level):
        # fractional indices -> coordinates (uniform axes)
        xy = np.column_stack([np.interp(c[:, i], np.arange(len(a)), a) for i, a in enumerate(grid.axes)])
        out.append(xy)
    return out


def emit_contours(grid: ValueGrid, level: float, path) -> int:
    """Write ``polyline_id, x1, x2`` rows; returns the number of polylines (zero leaves just the header)."""
    lines = contour_polylines(grid, level)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["polyline_id", "x1", "x2"])
        for k, xy in enumerate(lines):
            for p in xy:
                w.writerow([k, repr(float(p[0])), repr(float(p[1]))])
    return len(lines)
