import numpy as np
import pytest

from sareach.hopf import HopfProblem
from sareach.models import LiftedLinearModel
from sareach.systems import AffineSystem, InputBall, rk4_step, slow_manifold, vanderpol
from sareach.targets import QuadTarget

# acceptance outcomes, reported once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {msg}")


@pytest.fixture
def sm():
    return slow_manifold()


@pytest.fixture
def vdp():
    return vanderpol()


def integrator_1d():
    """xdot = u, |u| <= 1, no disturbance."""
    return AffineSystem(
        1, lambda x: np.zeros_like(x), lambda x: np.ones(np.shape(x)[:-1] + (1, 1)),
        lambda x: np.zeros(np.shape(x)[:-1] + (1, 0)), InputBall(1, 1.0), InputBall(0, 0.0), lipschitz_bound=0.0,
    )


def oned_problem(delta=0.0, sense="reach", t=0.0, T=1.0):
    model = LiftedLinearModel(np.zeros((1, 1)), np.ones((1, 1)), np.zeros((1, 0)))
    return HopfProblem(model, QuadTarget([0.0], [[1.0]], 1.0), t, T, delta, sense, InputBall(1, 1.0), InputBall(0, 0.0))


def oned_value(g):
    return np.maximum(np.abs(g) - 1.0, 0.0) ** 2 - 1.0


def linear_system(K, r_u=0.5, r_d=0.25):
    K = np.asarray(K, float)
    n = len(K)
    eye = lambda x: np.broadcast_to(np.eye(n), np.shape(x)[:-1] + (n, n))
    return AffineSystem(n, lambda x: x @ K.T, eye, eye, InputBall(n, r_u), InputBall(n, r_d), lipschitz_bound=float(np.linalg.norm(K, 2)))


def feasible_endpoints(sys, target, t_span, n, rng, h=0.01, segments=5):
    """Backward-integrate random bang-ish inputs from target points: every path is feasible by construction."""
    th = rng.uniform(0, 2 * np.pi, n)
    r = np.sqrt(rng.uniform(0, 1, n))
    x = target.center + np.stack([r * np.cos(th), r * np.sin(th)], 1)
    steps = int(round(t_span / h))
    path = [x]
    for k in range(steps):
        if k % (steps // segments) == 0:
            u = sys.u_ball.project(sys.u_ball.sample(rng, n) * rng.uniform(1, 4, (n, 1)))
            d = sys.d_ball.project(sys.d_ball.sample(rng, n) * rng.uniform(1, 4, (n, 1)))
        x = rk4_step(lambda s, y: -sys.field(y, u, d), 0.0, x, h)
        path.append(x)
    return np.array(path)  # path[k] sits at time T - k h
