from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from mssl.b_step import (BStepWorkspace, _objective_1d, cm_step_B, compute_z, coordinate_sweep,
                         refined_coordinate_ascent, theta_gradient, update_entry, update_theta)
from mssl.core import EcmState, FitOptions, PenaltyConfig, ValidationError, standardize
from mssl.simlab import ar1_precision, generate, score_support, simulation
from mssl.spike_slab import BetaMixture, delta_upper, lambda_star, log_mixture_density

from oracles import kron_lasso, subgradient_residual

TIGHT = FitOptions(tol=1e-12, max_iter_cd=20000)


def four_point_data(scale=2.5):
    x = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    return standardize(x, scale * x)


# --- z statistic ---------------------------------------------------------------

def test_z_at_zero_is_xty(random_data):
    d = random_data(20, 4, 3)
    ws = BStepWorkspace(d, np.zeros((4, 3)))
    for j in range(4):
        for k in range(3):
            assert compute_z(j, k, np.eye(3), ws) == pytest.approx(d.X[:, j] @ d.Y[:, k])


def test_z_identity_omega_no_borrowing(random_data):
    d = random_data(20, 4, 3, seed=1)
    B = np.random.default_rng(0).normal(size=(4, 3))
    ws = BStepWorkspace(d, B)
    R = d.Y - d.X @ B
    assert compute_z(2, 1, np.eye(3), ws) == pytest.approx(20 * B[2, 1] + d.X[:, 2] @ R[:, 1])


def test_z_borrows_with_half_ratio(random_data):
    d = random_data(20, 3, 2, seed=2)
    Omega = np.array([[2.0, 1.0], [1.0, 3.0]])  # omega_12 / omega_11 = 0.5
    ws = BStepWorkspace(d, np.zeros((3, 2)))
    want = d.X[:, 0] @ d.Y[:, 0] + 0.5 * d.X[:, 0] @ d.Y[:, 1]
    assert compute_z(0, 0, Omega, ws) == pytest.approx(want)


def test_z_rejects_nonpositive_diagonal(random_data):
    d = random_data(10, 2, 2)
    ws = BStepWorkspace(d, np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        compute_z(0, 0, np.array([[0.0, 0.0], [0.0, 1.0]]), ws)


# --- single update -------------------------------------------------------------

def test_update_entry_lasso_plugin():
    d = four_point_data()
    ws = BStepWorkspace(d, np.zeros((1, 1)))
    assert compute_z(0, 0, np.eye(1), ws) == pytest.approx(10.0)
    mix = BetaMixture(2.0, 2.0)
    assert delta_upper(0.5, 1.0, 4, mix) == pytest.approx(2.0)
    assert update_entry(0, 0, np.eye(1), ws, 0.5, mix) == pytest.approx(2.0)
    # the cache follows the update
    np.testing.assert_allclose(ws.xr, d.X.T @ (d.Y - d.X @ ws.B), atol=1e-12)


def test_update_entry_sign_antisymmetry():
    mix = BetaMixture(1.0, 30.0)
    pos = update_entry(0, 0, np.eye(1), BStepWorkspace(four_point_data(2.5), np.zeros((1, 1))),
                       0.5, mix)
    neg = update_entry(0, 0, np.eye(1), BStepWorkspace(four_point_data(-2.5), np.zeros((1, 1))),
                       0.5, mix)
    assert pos == -neg and pos != 0


def test_update_entry_zero_below_threshold():
    d = four_point_data(0.1)
    mix = BetaMixture(1.0, 30.0)
    ws = BStepWorkspace(d, np.zeros((1, 1)))
    assert abs(compute_z(0, 0, np.eye(1), ws)) <= delta_upper(0.5, 1.0, 4, mix)
    assert update_entry(0, 0, np.eye(1), ws, 0.5, mix) == 0.0


def test_accepted_updates_never_lower_coordinate_objective(sim_small):
    data, _, Omega0 = sim_small
    mix = BetaMixture(1.0, float(data.n))
    rng = np.random.default_rng(0)
    ws = BStepWorkspace(data, rng.normal(size=(data.p, data.q)) * 0.3)
    for _ in range(3):
        for j in range(data.p):
            for k in range(data.q):
                z = compute_z(j, k, Omega0, ws)
                okk = Omega0[k, k]
                before = _objective_1d(ws.B[j, k], z, okk, data.n, 0.2, mix)
                new = update_entry(j, k, Omega0, ws, 0.2, mix)
                after = _objective_1d(new, z, okk, data.n, 0.2, mix)
                assert after >= before - 1e-10 * (1 + abs(before))


def test_compiled_sweep_matches_reference_path(sim_small):
    data, _, Omega0 = sim_small
    mix = BetaMixture(1.0, 40.0)
    B0 = np.random.default_rng(1).normal(size=(data.p, data.q)) * 0.2
    ref = BStepWorkspace(data, B0)
    fast = BStepWorkspace(data, B0)
    for _ in range(4):
        for j in range(data.p):
            for k in range(data.q):
                update_entry(j, k, Omega0, ref, 0.3, mix)
        coordinate_sweep(fast, Omega0, 0.3, mix)
        np.testing.assert_allclose(fast.B, ref.B, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(fast.xr, ref.xr, rtol=1e-10, atol=1e-10)


def test_workspace_cache_and_active_set(sim_small):
    data, _, Omega0 = sim_small
    ws = BStepWorkspace(data, np.zeros((data.p, data.q)))
    for _ in range(5):
        coordinate_sweep(ws, Omega0, 0.3, BetaMixture(1.0, 20.0))
    np.testing.assert_allclose(ws.xr_cache, data.X.T @ ws.residuals(), atol=1e-10)
    for k, rows in enumerate(ws.active_set):
        np.testing.assert_array_equal(rows, np.flatnonzero(ws.B[:, k]))


# --- full sweeps ---------------------------------------------------------------

def test_zero_response_gives_zero_coefficients(random_data):
    d = random_data(20, 5, 3)
    d = standardize(d.X, np.zeros((20, 3)))
    B, conv, sweeps = refined_coordinate_ascent(d, np.zeros((5, 3)), np.eye(3), 0.5,
                                                BetaMixture(1.0, 10.0))
    assert conv and sweeps == 1 and not B.any()


def test_scalar_lasso_closed_form():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(15, 1))
    Y = 0.8 * X + rng.normal(size=(15, 1))
    d = standardize(X, Y)
    lam = 3.0
    B, conv, _ = refined_coordinate_ascent(d, np.zeros((1, 1)), np.eye(1), 0.5,
                                           BetaMixture(lam, lam), TIGHT)
    xy = float(d.X[:, 0] @ d.Y[:, 0])
    want = math.copysign(max(abs(xy) - lam, 0.0), xy) / 15
    assert conv and B[0, 0] == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_equal_penalties_reduce_to_multivariate_lasso(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, 3))
    Y = X @ rng.normal(size=(3, 2)) + 0.3 * rng.normal(size=(5, 2))
    d = standardize(X, Y)
    A = rng.normal(size=(2, 2))
    Omega = A @ A.T + np.eye(2)
    lam = float(rng.uniform(0.2, 2.0))
    cfg = PenaltyConfig(lambda1=lam, xi1=0.1, lambda_ladder=[lam], xi_ladder=[1.0])
    st = EcmState.from_params(d, np.zeros((3, 2)), 0.5, Omega, 0.5)
    res = cm_step_B(d, st, cfg, lam, TIGHT)
    want = kron_lasso(d.X, d.Y, Omega, lam)
    np.testing.assert_allclose(res.B, want, atol=1e-8)


def test_subgradient_certificate(sim_small):
    data, _, Omega0 = sim_small
    n = data.n
    cfg = PenaltyConfig(lambda1=1.0, xi1=0.6, lambda_ladder=[float(n)], xi_ladder=[30.0],
                        a_theta=1.0, b_theta=float(data.p * data.q))
    st = EcmState.from_params(data, np.zeros((data.p, data.q)), 0.5, Omega0, 0.5)
    res = cm_step_B(data, st, cfg, float(n), FitOptions(tol=1e-10, max_iter_cd=20000))
    assert res.converged
    mix = BetaMixture(1.0, float(n))
    R = data.Y - data.X @ res.B
    G = data.X.T @ R @ Omega0
    worst = 0.0
    for j in range(data.p):
        for k in range(data.q):
            b = res.B[j, k]
            if b != 0:
                worst = max(worst, abs(G[j, k] - lambda_star(b, res.theta, mix) * np.sign(b)))
            else:
                z = G[j, k] / Omega0[k, k]
                assert abs(z) <= delta_upper(res.theta, Omega0[k, k], n, mix) + 1e-8
    assert worst < 1e-4 * n
    assert subgradient_residual(data.X, data.Y, res.B, Omega0, res.theta, mix)[0] < 1e-4 * n
    assert np.count_nonzero(res.B) > 0


def test_oracle_precision_recovers_support():
    # true Omega and theta = 0.2 held fixed, warm-started along the lambda0 ladder [10, n]
    scn = simulation(1, seed=3)
    data, B0, Omega0, _ = generate(scn, 0)
    B = np.zeros((data.p, data.q))
    for lam in np.linspace(10.0, data.n, 10):
        B, conv, _ = refined_coordinate_ascent(data, B, Omega0, 0.2, BetaMixture(1.0, lam))
    assert score_support(B, B0).mcc > 0.85


# --- theta ---------------------------------------------------------------------

def _theta_objective_oracle(theta, B, l1, l0, a, b):
    val = (a - 1) * math.log(theta) + (b - 1) * math.log(1 - theta)
    for x in B.ravel():
        val += math.log(theta * l1 * math.exp(-l1 * abs(x)) + (1 - theta) * l0 * math.exp(-l0 * abs(x)))
    return val


def test_theta_equal_penalties_prior_mode():
    mix = BetaMixture(2.0, 2.0)
    B = np.random.default_rng(0).normal(size=(4, 3))
    upd = update_theta(B, mix, 2.0, 2.0, 0.1)
    assert upd.theta == pytest.approx(0.5, abs=1e-10)


def test_theta_all_large_goes_to_upper_boundary():
    mix = BetaMixture(1.0, 10.0)
    B = np.full((5, 4), 50.0)
    upd = update_theta(B, mix, 1.0, 1.0, 0.5)
    assert upd.theta > 1 - 1e-6
    assert upd.boundary


def test_theta_sparse_solution_matches_grid_oracle():
    p, q = 50, 25
    B = np.zeros((p, q))
    mix = BetaMixture(1.0, 100.0)
    upd = update_theta(B, mix, 1.0, float(p * q), 0.5)
    assert upd.theta < 0.01
    res = minimize_scalar(lambda t: -_theta_objective_oracle(t, B, 1.0, 100.0, 1.0, p * q),
                          bounds=(1e-12, 0.5), method="bounded", options={"xatol": 1e-14})
    assert upd.theta == pytest.approx(res.x, rel=1e-6, abs=1e-12)


def test_theta_stationarity_on_random_problems():
    rng = np.random.default_rng(8)
    for _ in range(20):
        B = rng.normal(size=(8, 5)) * (rng.uniform(size=(8, 5)) < 0.3)
        mix = BetaMixture(1.0, float(rng.uniform(5, 80)))
        a, b = 1.0, float(rng.choice([1.0, 8.0, 40.0]))
        upd = update_theta(B, mix, a, b, float(rng.uniform(0.05, 0.95)))
        if not upd.boundary:
            g, _ = theta_gradient(upd.theta, B, mix, a, b)
            assert abs(g) < 1e-8 * B.size
            grid = np.linspace(1e-4, 1 - 1e-4, 2001)
            vals = [_theta_objective_oracle(t, B, 1.0, mix.lambda0, a, b) for t in grid]
            assert _theta_objective_oracle(upd.theta, B, 1.0, mix.lambda0, a, b) >= max(vals) - 1e-9


def test_theta_rejects_bad_start():
    with pytest.raises(ValidationError):
        update_theta(np.zeros((2, 2)), BetaMixture(1.0, 2.0), 1.0, 1.0, 1.0)


def test_selective_shrinkage_direction():
    mix = BetaMixture(1.0, 25.0)
    x = np.linspace(0, 3, 100)
    assert np.all(np.diff(lambda_star(x, 0.1, mix)) <= 0)
