import numpy as np
import pytest

from sareach.errors import BlowUpError, InvalidArgumentError
from sareach.lifting import lift, slow_manifold_lift
from sareach.models import analytic_slow_manifold_model, model_residual
from sareach.systems import estimate_lipschitz, rk4_step, slow_manifold
from sareach.targets import QuadTarget
from sareach.tube import (BoxTube, backward_tube, consistent_tube, error_bound_delta, load_tube_csv, pointwise_error_bound,
                          save_tube_csv)

from conftest import feasible_endpoints, integrator_1d, linear_system

SLOW = QuadTarget([0.0, 1.25], np.eye(2), 1.0)




def test_zero_field_tube_is_constant():
    s = linear_system(np.zeros((2, 2)), 0.0, 0.0)
    tb = backward_tube(s, [-1, -1], [1, 1], 0.0, 1.0, 0.1)
    assert np.allclose(tb.lo, -1) and np.allclose(tb.hi, 1)


def test_integrator_tube_contains_exact_set():
    tb = backward_tube(integrator_1d(), [-1.0], [1.0], 0.0, 1.0, 0.01)
    lo, hi = tb.box_at(0.0)
    assert lo[0] <= -2 and hi[0] >= 2 and hi[0] < 2.1
    assert np.allclose(tb.times[[0, -1]], [1.0, 0.0])


def test_tube_monte_carlo_slow_manifold():
    sm = slow_manifold()
    L = estimate_lipschitz(sm, [-4, -3], [4, 5])
    tb = backward_tube(sm, *SLOW.bounding_box(), 0.0, 1.0, 0.01, lipschitz=L)
    path = feasible_endpoints(sm, SLOW, 1.0, 300, np.random.default_rng(1))
    for k, tau in enumerate(np.round(1.0 - 0.01 * np.arange(len(path)), 12)):
        lo, hi = tb.box_at(max(tau, 0.0))
        assert np.all((path[k] >= lo - 1e-12) & (path[k] <= hi + 1e-12))


def test_raster_tube_monte_carlo(vdp):
    unit = QuadTarget([0.0, 0.0], np.eye(2), 1.0)
    tb = consistent_tube(vdp, *unit.bounding_box(), 0.5, 1.0, 0.01, target=unit, method="raster", cell=0.01)
    path = feasible_endpoints(vdp, unit, 0.5, 300, np.random.default_rng(2))
    for k in range(len(path)):
        lo, hi = tb.box_at(max(1.0 - 0.01 * k, 0.5))
        assert np.all((path[k] >= lo - 1e-12) & (path[k] <= hi + 1e-12))


def test_blow_up_reports_time():
    s = linear_system(np.eye(2) * -5.0, 1.0, 0.0)
    with pytest.raises(BlowUpError) as exc:
        backward_tube(s, [-1, -1], [1, 1], 0.0, 5.0, 0.05, cap=50.0)
    assert exc.value.time is not None and 0 < exc.value.time < 5


def test_tube_needs_lipschitz():
    s = slow_manifold()
    with pytest.raises(InvalidArgumentError):
        backward_tube(s, [-1, -1], [1, 1], 0, 1)


def test_tube_csv_round_trip(tmp_path):
    tb = backward_tube(integrator_1d(), [-1.0], [1.0], 0.0, 0.5, 0.1)
    save_tube_csv(tb, tmp_path / "t.csv")
    back = load_tube_csv(tmp_path / "t.csv")
    assert np.array_equal(back.lo, tb.lo) and np.array_equal(back.times, tb.times)


def _box_tube(M, lo2=-1.0, hi2=3.0):
    return BoxTube(np.array([1.0, 0.0]), np.array([[-M, lo2]] * 2), np.array([[M, hi2]] * 2))


def test_exact_autonomous_delta_vanishes():
    s = slow_manifold(u_radius=0.0, d_radius=0.0)
    eb = error_bound_delta(analytic_slow_manifold_model([0, 1.25]), slow_manifold_lift(), s, _box_tube(2.0))
    assert eb.grid_max <= 1e-10


def test_delta_closed_form():
    # per-point error is |2 x1| (|u| + |d|) in the third coordinate
    for M in (0.5, 1.0, 1.7):
        eb = error_bound_delta(analytic_slow_manifold_model([0, 1.25]), slow_manifold_lift(), slow_manifold(), _box_tube(M))
        assert np.isclose(eb.grid_max, 2 * M * 0.75, rtol=1e-12)
        assert np.isclose(eb.delta_star, 1.1 * eb.grid_max)


def test_delta_monotone_in_tube():
    args = (analytic_slow_manifold_model([0, 1.25]), slow_manifold_lift(), slow_manifold())
    a = error_bound_delta(*args, _box_tube(1.0))
    b = error_bound_delta(*args, _box_tube(1.3, -2.0, 4.0))
    assert b.delta_star >= a.delta_star


def test_delta_preconditions():
    args = (analytic_slow_manifold_model([0, 1.25]), slow_manifold_lift(), slow_manifold())
    with pytest.raises(InvalidArgumentError):
        error_bound_delta(*args, _box_tube(1.0), grid_per_dim=1)
    with pytest.raises(InvalidArgumentError):
        error_bound_delta(*args, BoxTube(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2))))


def test_delta_sampling_audit_small():
    sm = slow_manifold()
    m = slow_manifold_lift()
    model = analytic_slow_manifold_model([0, 1.25])
    tb = _box_tube(1.9, -1.5, 4.0)
    eb = error_bound_delta(model, m, sm, tb)
    rng = np.random.default_rng(0)
    X = rng.uniform(tb.lo[0], tb.hi[0], (2000, 2))
    U = sm.u_ball.sample(rng, 2000)
    D = sm.d_ball.sample(rng, 2000)
    per = model_residual(model, m, sm, X, U, D)["per_point"]
    assert np.all(per <= eb.delta_star)
    assert np.all(per <= pointwise_error_bound(model, m, sm, X) + 1e-12)
