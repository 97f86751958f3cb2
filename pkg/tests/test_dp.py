import numpy as np
import pytest

from sareach.dp import dp_gradient_at, dp_value_at, lipschitz_tolerance, solve_dp, solve_dp_horizons
from sareach.errors import InvalidArgumentError, OutOfDomainError
from sareach.grids import ValueGrid, load_grid, save_grid, uniform_axes, value_at
from sareach.systems import AffineSystem, InputBall
from sareach.targets import QuadTarget, eval_J

from conftest import linear_system, oned_value


def _embed():
    # x1dot = u, x2dot = 0
    return AffineSystem(2, lambda x: np.zeros_like(x), lambda x: np.broadcast_to(np.array([[1.0], [0.0]]), np.shape(x)[:-1] + (2, 1)),
                        lambda x: np.zeros(np.shape(x)[:-1] + (2, 0)), InputBall(1, 1.0), InputBall(0, 0.0))


THIN = QuadTarget([0, 0], np.diag([1, 1e-9]), 1.0)


def test_zero_dynamics_keep_J():
    s = linear_system(np.zeros((2, 2)), 0, 0)
    tgt = QuadTarget([0.2, -0.1], np.eye(2), 0.5)
    ax = uniform_axes([-2, -2], [2, 2], 41)
    g = solve_dp(s, tgt, "reach", ax, 0.0, 1.0)
    X = np.stack(np.meshgrid(*ax, indexing="ij"), -1)
    assert np.allclose(g.values, eval_J(tgt, X), atol=1e-12)


def test_terminal_exact():
    ax = uniform_axes([-2, -2], [2, 2], 21)
    g = solve_dp(_embed(), THIN, "reach", ax, 1.0, 1.0)
    X = np.stack(np.meshgrid(*ax, indexing="ij"), -1)
    assert np.array_equal(g.values, eval_J(THIN, X))


@pytest.mark.parametrize("dissipation", ["local", "global"])
def test_oned_embedding(dissipation):
    ax = (np.linspace(-3, 3, 201), np.linspace(-1, 1, 5))
    g = solve_dp(_embed(), THIN, "reach", ax, 0.0, 1.0, dissipation=dissipation)
    assert np.max(np.abs(g.values[:, 2] - oned_value(ax[0]))) <= 0.05


def test_refinement_first_order():
    errs = []
    for n in (101, 201):
        ax = (np.linspace(-3, 3, n), np.linspace(-1, 1, 5))
        errs.append(np.max(np.abs(solve_dp(_embed(), THIN, "reach", ax, 0.0, 1.0).values[:, 2] - oned_value(ax[0]))))
    h_coarse = 6 / 100
    assert abs(errs[0] - errs[1]) <= h_coarse and errs[1] <= errs[0]


def test_reach_sets_grow_backward():
    # drift-free game: the exact set is a disk of radius 1 + (r_U - r_D)(T - t)
    s = linear_system(np.zeros((2, 2)), 0.5, 0.25)
    tgt = QuadTarget([0, 0], np.eye(2), 1.0)
    ax = uniform_axes([-2, -2], [2, 2], 101)
    grids = solve_dp_horizons(s, tgt, "reach", ax, [0.0, 0.25, 0.5, 0.75], 1.0)
    masks = [g.member_mask() for g in grids]
    for a, b in zip(masks, masks[1:]):
        assert np.all(b <= a)
    assert [g.time for g in grids] == [0.0, 0.25, 0.5, 0.75]


def test_dp_rejects_bad_arguments():
    ax = uniform_axes([-1, -1], [1, 1], 11)
    with pytest.raises(InvalidArgumentError):
        solve_dp(_embed(), THIN, "reach", ax, 0.0, 1.0, cfl=1.5)
    with pytest.raises(InvalidArgumentError):
        solve_dp(_embed(), THIN, "reach", ax, 2.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        solve_dp(_embed(), THIN, "neither", ax, 0.0, 1.0)


def _linear_grid():
    ax = uniform_axes([-1, 0], [1, 2], [11, 21])
    X = np.stack(np.meshgrid(*ax, indexing="ij"), -1)
    return ValueGrid(ax, X[..., 0] * 1.0, 0.0, "reach")


def test_interpolation_examples():
    g = _linear_grid()
    assert dp_value_at(g, [g.axes[0][3], g.axes[1][5]]) == g.values[3, 5]
    rng = np.random.default_rng(0)
    X = rng.uniform([-1, 0], [1, 2], (100, 2))
    assert np.allclose(dp_value_at(g, X), X[:, 0], atol=1e-12)
    V = rng.normal(size=(11, 21))
    h = ValueGrid(g.axes, V, 0.0, "reach")
    c = [0.5 * (g.axes[0][2] + g.axes[0][3]), 0.5 * (g.axes[1][4] + g.axes[1][5])]
    assert np.isclose(dp_value_at(h, c), V[2:4, 4:6].mean())
    with pytest.raises(OutOfDomainError):
        dp_value_at(g, [1.5, 0.5])


def test_gradient_examples():
    g = _linear_grid()
    assert np.allclose(dp_gradient_at(g, [0.33, 1.1]), [1, 0], atol=1e-10)
    assert np.all(np.isfinite(dp_gradient_at(g, [1.0, 2.0])))
    ax = uniform_axes([-2, -2], [2, 2], 81)
    X = np.stack(np.meshgrid(*ax, indexing="ij"), -1)
    r = ValueGrid(ax, (X ** 2).sum(-1) - 1, 0.0, "reach")
    gr = dp_gradient_at(r, [1.13, 0.0])
    assert abs(gr[0] - 2.26) <= 0.05 * 2.26 and abs(gr[1]) <= 0.05 * 2.26


def test_grid_file_round_trip(tmp_path):
    g = ValueGrid(uniform_axes([-1, 0], [1, 2], [5, 7]), np.arange(35.0).reshape(5, 7), 0.25, "avoid", 0.7, {"k": 1})
    save_grid(g, tmp_path / "g.bin")
    raw = (tmp_path / "g.bin").read_bytes()
    assert raw[:4] == b"SAVG" and len(raw) == 8 + 2 * 24 + 35 * 8
    back = load_grid(tmp_path / "g.bin")
    assert np.array_equal(back.values, g.values) and back.time == 0.25 and back.sense == "avoid" and back.meta == {"k": 1}


def test_value_grid_validation():
    with pytest.raises(InvalidArgumentError):
        ValueGrid(uniform_axes([0, 0], [1, 1], 3), np.zeros((3, 4)), 0.0, "reach")
    with pytest.raises(InvalidArgumentError):
        value_at(_linear_grid(), [0.0, 0.0, 0.0])


def test_lipschitz_tolerance():
    g = _linear_grid()
    assert np.isclose(lipschitz_tolerance(g, 2.0), 0.4)
    assert np.isclose(lipschitz_tolerance(g, None), 0.2)
