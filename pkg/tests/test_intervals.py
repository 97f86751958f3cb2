import numpy as np
from hypothesis import given, settings, strategies as st

from sareach.intervals import Interval, matvec, stack

box = st.tuples(st.floats(-5, 5), st.floats(0, 3)).map(lambda t: (t[0], t[0] + t[1]))


def _pts(lo, hi, n=64):
    return np.linspace(lo, hi, n)


@settings(max_examples=100, deadline=None)
@given(box, box)
def test_arithmetic_encloses_samples(a, b):
    A, B = Interval(*a), Interval(*b)
    xs, ys = np.meshgrid(_pts(*a, 16), _pts(*b, 16))
    for iv, vals in ((A + B, xs + ys), (A - B, xs - ys), (A * B, xs * ys), (A ** 2, xs ** 2), (A ** 3, xs ** 3)):
        assert np.all(vals >= iv.lo - 1e-12) and np.all(vals <= iv.hi + 1e-12)


def test_even_power_straddling_zero():
    iv = Interval(-1.0, 2.0) ** 2
    assert iv.lo == 0.0 and iv.hi == 4.0


def test_stack_and_matvec():
    v = stack([Interval(0.0, 1.0), 2.0])
    assert np.allclose(v.lo, [0, 2]) and np.allclose(v.hi, [1, 2])
    A = Interval(np.array([[1.0, -1.0]]), np.array([[1.0, -1.0]]))
    r = matvec(A, v)
    assert np.allclose([r.lo[0], r.hi[0]], [-2.0, -1.0])
