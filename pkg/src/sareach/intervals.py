"""Minimal interval arithmetic on numpy arrays (elementwise, outward-safe up to round-off)."""

from __future__ import annotations

import numpy as np


class Interval:
    """Elementwise interval ``[lo, hi]`` over numpy arrays."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi=None):
        lo = np.asarray(lo, dtype=float)
        hi = lo if hi is None else np.asarray(hi, dtype=float)
        if np.any(lo > hi):
            raise ValueError("interval with lo > hi")
        self.lo = lo
        self.hi = hi

    @staticmethod
    def _coerce(other):
        if isinstance(other, Interval):
            return other
        return Interval(other, other)

    def __add__(self, other):
        o = self._coerce(other)
        return Interval(self.lo + o.lo, self.hi + o.hi)

    __radd__ = __add__

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        o = self._coerce(other)
        cands = np.stack([self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi])
        return Interval(cands.min(axis=0), cands.max(axis=0))

    __rmul__ = __mul__

    def __pow__(self, n: int):
        if not isinstance(n, (int, np.integer)) or n < 0:
            raise ValueError("only nonnegative integer powers are supported")
        if n == 0:
            return Interval(np.ones_like(self.lo))
        a, b = self.lo ** n, self.hi ** n
        if n % 2 == 1:
            return Interval(a, b)
        lo = np.where((self.lo <= 0) & (self.hi >= 0), 0.0, np.minimum(a, b))
        return Interval(lo, np.maximum(a, b))

    def __getitem__(self, idx):
        return Interval(self.lo[idx], self.hi[idx])

    @property
    def mid(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def rad(self):
        return 0.5 * (self.hi - self.lo)

    def mag(self):
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def __repr__(self):
        return f"Interval(lo={self.lo!r}, hi={self.hi!r})"


def stack(items, axis=-1) -> Interval:
    """Stack scalars/intervals into one interval array."""
    ivs = [Interval._coerce(it) for it in items]
    return Interval(np.stack([iv.lo for iv in ivs], axis=axis), np.stack([iv.hi for iv in ivs], axis=axis))


def matvec(A: Interval, v: Interval) -> Interval:
    """Interval product of an (n, m) interval matrix and an m-vector."""
    prod = A * Interval(v.lo[None, :], v.hi[None, :])
    return Interval(prod.lo.sum(axis=1), prod.hi.sum(axis=1))
