from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import null_space

from hps_sim.kkt import (
    DUAL_BLOCKS,
    PRIMAL_BLOCKS,
    SingularKKTError,
    _qp_data,
    assemble_kkt,
    constraint_residuals,
    current_sharing_error,
    lagrangian,
    objective,
    solve_kkt,
)
from hps_sim.model import HumanParams, WelfareWeights, steady_grid
from hps_sim.workflows import pi_c_sweep, random_scenario

from conftest import toy_scenario, with_nodes

N = 4
BLK = {name: slice(k * N, (k + 1) * N) for k, name in enumerate(PRIMAL_BLOCKS + DUAL_BLOCKS)}


def test_system_shape(bundled):
    K, rhs = assemble_kkt(bundled)
    assert K.shape == (48, 48) and rhs.shape == (48,)


def test_saddle_structure(bundled):
    K, _ = assemble_kkt(bundled)
    np.testing.assert_array_equal(K, K.T)
    assert not K[28:, 28:].any()


def test_u_d_stationarity_row(bundled):
    K, _ = assemble_kkt(bundled)
    rows = K[BLK["u_d"]]
    nonzero = [name for name, sl in BLK.items() if rows[:, sl].any()]
    assert nonzero == ["u_d", "lambda_c"]
    np.testing.assert_array_equal(rows[:, BLK["u_d"]], bundled.weights.gamma * np.eye(N))
    np.testing.assert_array_equal(rows[:, BLK["lambda_c"]], -np.eye(N))


def test_residuals_are_small(bundled):
    sol = solve_kkt(bundled)
    bound = 1e-9 * (1 + np.linalg.norm(sol.vector()))
    assert sol.stationarity_residual < bound and sol.feasibility_residual < bound
    assert sol.objective_value == pytest.approx(objective(bundled, sol.primal), rel=1e-15)


def test_objective_zero_point(bundled):
    primal = {"z_l": np.ones(N), "I_td": np.zeros(N), "I_tq": np.zeros(N), "u_d": np.zeros(N),
              "u_q": np.zeros(N), "V_d": bundled.V_r, "s": np.zeros(N)}
    assert objective(bundled, primal) == 0.0


def test_alpha_scales_only_its_term(bundled):
    sol = solve_kkt(bundled)
    w = bundled.weights
    doubled = bundled.replace(weights=WelfareWeights(2 * w.alpha, w.beta, w.gamma, w.delta, w.epsilon, w.eta))
    first = 0.5 * w.alpha * np.sum(bundled.pi_u * bundled.I_L2 * (1 - sol.primal["z_l"]) ** 2)
    assert objective(doubled, sol.primal) - objective(bundled, sol.primal) == pytest.approx(first, rel=1e-12)


def test_lagrangian_equals_objective_at_saddle(bundled):
    sol = solve_kkt(bundled)
    assert lagrangian(bundled, sol.primal, sol.dual) == pytest.approx(sol.objective_value, rel=1e-9)


def test_constraints_describe_the_grid_steady_state(bundled):
    """At a feasible point the plant's own steady state reproduces V_d and
    the generated currents, with V_q = 0."""
    sol = solve_kkt(bundled)
    P = sol.primal
    gs = steady_grid(bundled, P["z_l"], P["u_d"], P["u_q"])
    np.testing.assert_allclose(gs.V_d, P["V_d"], rtol=1e-10)
    np.testing.assert_allclose(gs.I_td, P["I_td"], rtol=1e-9)
    np.testing.assert_allclose(gs.I_tq, P["I_tq"], rtol=1e-9)
    assert np.abs(gs.V_q).max() < 1e-8


def test_null_space_oracle(bundled):
    """Independent reduced-space solve: x = x_p + Z y with A Z = 0."""
    Hq, g, A, r = _qp_data(bundled, bundled.p_bar)
    x_p = np.linalg.lstsq(A, r, rcond=None)[0]
    Z = null_space(A)
    y = np.linalg.solve(Z.T @ Hq @ Z, -Z.T @ (g + Hq @ x_p))
    x = x_p + Z @ y
    ref = np.concatenate([solve_kkt(bundled).primal[k] for k in PRIMAL_BLOCKS])
    np.testing.assert_allclose(x, ref, rtol=1e-7, atol=1e-8 * np.abs(ref).max())


def test_feasible_perturbations_do_not_improve(bundled):
    sol = solve_kkt(bundled)
    _, _, A, _ = _qp_data(bundled, bundled.p_bar)
    Z = null_space(A)
    x0 = np.concatenate([sol.primal[k] for k in PRIMAL_BLOCKS])
    rng = np.random.default_rng(7)
    best = sol.objective_value
    for _ in range(1000):
        x = x0 + Z @ rng.standard_normal(Z.shape[1]) * 10 ** rng.uniform(-6, 0)
        primal = {k: x[BLK[k]] for k in PRIMAL_BLOCKS}
        assert np.abs(constraint_residuals(bundled, primal)).max() < 1e-8 * (1 + np.abs(x).max())
        assert objective(bundled, primal) >= best - 1e-9 * abs(best)


def test_symmetric_scenario_gives_symmetric_solution():
    params = toy_scenario(2)
    sol = solve_kkt(params)
    for v in list(sol.primal.values()) + list(sol.dual.values()):
        assert v[0] == pytest.approx(v[1], rel=1e-10, abs=1e-12)
    assert current_sharing_error(sol.primal, params.pi_c) < 1e-10


def test_singular_system_is_reported(bundled):
    # with h = 0 and eta = 0 the incentive has neither curvature nor constraint
    w, hp = bundled.weights, bundled.human
    free = bundled.replace(weights=WelfareWeights(w.alpha, w.beta, w.gamma, w.delta, w.epsilon, 0.0),
                         human=HumanParams(hp.a, hp.c, hp.d, np.zeros(N), hp.p_bio))
    with pytest.raises(SingularKKTError):
        solve_kkt(free)


def test_voltage_priority_sweep(bundled):
    gaps = []
    for eps in np.geomspace(10, 1e4, 5):
        w = bundled.weights
        p = bundled.replace(weights=WelfareWeights(w.alpha, w.beta, w.gamma, w.delta, eps, w.eta))
        gaps.append(np.linalg.norm(solve_kkt(p).primal["V_d"] - p.V_r))
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))


def test_current_sharing_sweep(bundled):
    uniform = with_nodes(bundled, pi_c=1.0)
    errs = []
    for beta in np.geomspace(0.01, 100, 5):
        w = uniform.weights
        p = uniform.replace(weights=WelfareWeights(w.alpha, beta, w.gamma, w.delta, w.epsilon, w.eta))
        errs.append(current_sharing_error(solve_kkt(p).primal, p.pi_c))
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_uniform_costs_share_the_demand(bundled):
    sol = solve_kkt(bundled)
    I = sol.primal["I_td"]
    assert current_sharing_error(sol.primal, bundled.pi_c) < 0.25 * I.mean()


def test_expensive_source_is_relieved(bundled):
    I = pi_c_sweep(bundled, node=3, value=100.0)
    np.testing.assert_allclose(I, [35, 27, 35, 4.2], rtol=0.10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_scenarios_plug_back(seed):
    params = random_scenario(np.random.default_rng(seed))
    sol = solve_kkt(params)
    bound = 1e-9 * (1 + np.linalg.norm(sol.vector()))
    assert max(sol.stationarity_residual, sol.feasibility_residual) < bound
