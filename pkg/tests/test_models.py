import numpy as np
import pytest

from sareach.errors import InvalidArgumentError, SingularFitError
from sareach.lifting import identity_lift, lift, polynomial_lift, slow_manifold_lift
from sareach.models import (LiftedLinearModel, TrajectorySample, analytic_slow_manifold_model, edmd_objective, fit_dmd,
                            fit_edmd, load_model, model_residual, sample_trajectories, save_model, taylor_model)
from sareach.systems import slow_manifold

SLOW_K = np.array([[-0.05, 0, 0], [0, -1.0, 1.0], [0, 0, -0.1]])


def test_analytic_input_rows():
    assert np.allclose(analytic_slow_manifold_model([0, 1.25]).L1[2], [0, 0])
    assert np.allclose(analytic_slow_manifold_model([1, 0]).L1[2], [2, 0])


def test_analytic_spectrum():
    ev = np.sort(np.linalg.eigvals(analytic_slow_manifold_model([0, 0]).K).real)
    assert np.allclose(ev, [-1.0, -0.1, -0.05])


def test_edmd_recovers_exact_lifted_drift():
    s = slow_manifold(u_radius=0.0, d_radius=0.0)
    data = sample_trajectories(s, [-2, -1], [2, 3], 500, seed=1)
    # input columns are identically zero here, so a tiny ridge is required
    mod = fit_edmd(slow_manifold_lift(), data, ridge=1e-12)
    assert np.linalg.norm(mod.K - SLOW_K) <= 1e-6


def test_edmd_with_inputs_recovers_input_columns():
    data = sample_trajectories(slow_manifold(), [-0.1, -1], [0.1, 1], 500, seed=2)
    mod = fit_edmd(identity_lift(2), data, ridge=0.0)
    assert np.allclose(mod.L1 + mod.L2, 2 * np.eye(2), atol=0.1)


def test_empty_data_rejected():
    z = np.zeros((0, 2))
    with pytest.raises(InvalidArgumentError):
        fit_edmd(identity_lift(2), TrajectorySample(z, z, z, z))


def test_rank_deficient_without_ridge():
    s = slow_manifold(u_radius=0.0, d_radius=0.0)
    data = sample_trajectories(s, [-1, -1], [1, 1], 200, seed=0)
    with pytest.raises(SingularFitError, match="ridge"):
        fit_edmd(polynomial_lift(2, 2), data, ridge=0.0)


def test_vanderpol_degree3_fit(vdp):
    data = sample_trajectories(vdp, [-2, -3], [2, 3], 2000, seed=0)
    assert len(data) == 2000 and data.d.shape == (2000, 0)
    mod = fit_edmd(polynomial_lift(2, 3), data)
    assert mod.K.shape == (10, 10) and mod.L2.shape == (10, 0)
    assert np.isfinite(mod.provenance["rms_residual"])


def test_edmd_local_optimality(vdp):
    m = polynomial_lift(2, 3)
    data = sample_trajectories(vdp, [-1, -1], [1, 1], 400, seed=4)
    mod = fit_edmd(m, data, ridge=1e-8)
    f0 = edmd_objective(mod, m, data, 1e-8)
    rng = np.random.default_rng(0)
    for _ in range(20):
        i, j = rng.integers(0, 10, 2)
        for s in (1e-3, -1e-3):
            K = mod.K.copy()
            K[i, j] += s
            assert edmd_objective(LiftedLinearModel(K, mod.L1, mod.L2), m, data, 1e-8) >= f0


def test_dmd_is_identity_lift_fit(vdp):
    data = sample_trajectories(vdp, [-1, -1], [1, 1], 300, seed=5)
    a, b = fit_dmd(data), fit_edmd(identity_lift(2), data)
    assert np.allclose(a.K, b.K) and a.provenance["kind"] == "dmd"


def test_taylor_examples(sm, vdp):
    mod = taylor_model(vdp, identity_lift(2), [0, 0])
    assert np.allclose(mod.K, [[0, 1], [-1, 1]], atol=1e-6)
    for c in ([0.0, 0.0], [1.0, -2.0]):
        assert np.allclose(taylor_model(sm, slow_manifold_lift(), c).K, SLOW_K, atol=1e-5)


def test_taylor_identity_is_jacobian(vdp):
    c = np.array([0.4, -0.3])
    mod = taylor_model(vdp, identity_lift(2), c)
    x1, x2 = c
    J = np.array([[0, 1], [-2 * x1 * x2 - 1, 1 - x1 ** 2]])
    assert np.allclose(mod.K, J, atol=1e-4)


def test_residual_examples(sm):
    m = slow_manifold_lift()
    exact = analytic_slow_manifold_model([0, 0])
    rng = np.random.default_rng(0)
    r = model_residual(exact, m, sm, rng.uniform(-2, 2, (50, 2)), [0, 0], [0, 0])
    assert r["max"] <= 1e-12
    r = model_residual(analytic_slow_manifold_model([0, 1.25]), m, sm, [[1.0, 0.0]], [1.0, 0.0], [0.0, 0.0])
    assert np.isclose(r["max"], 2.0)


def test_model_round_trip(tmp_path):
    mod = analytic_slow_manifold_model([0.5, 1])
    save_model(mod, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert np.array_equal(back.K, mod.K) and np.array_equal(back.L2, mod.L2) and back.provenance == mod.provenance


def test_model_validation():
    with pytest.raises(InvalidArgumentError):
        LiftedLinearModel(np.ones((2, 3)), np.zeros((2, 1)), np.zeros((2, 0)))
    with pytest.raises(InvalidArgumentError):
        LiftedLinearModel(np.array([[np.nan]]), np.zeros((1, 1)), np.zeros((1, 0)))


def test_sampling_is_seeded(vdp):
    a = sample_trajectories(vdp, [-1, -1], [1, 1], 100, seed=7)
    b = sample_trajectories(vdp, [-1, -1], [1, 1], 100, seed=7)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.xdot, vdp.field(a.x, a.u, a.d))
