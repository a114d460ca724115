from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hps_sim.model import (
    HumanParams,
    LineParams,
    SocialCase,
    Topology,
    ValidationError,
    consistent_u_q,
    controller_P1,
    current_matching_residual,
    grid_steady_matrix,
    line_reduction,
    lyapunov_solve,
    reduced_grid_residuals,
    social_laplacian,
    steady_grid,
    steady_norms,
    validate,
)

from conftest import with_nodes

RING = np.array([[1, 0, 0, -1], [-1, 1, 0, 0], [0, -1, 1, 0], [0, 0, -1, 1]], dtype=float)
CASE_I_HUMAN = HumanParams(a=[0.5] * 4, c=[0.08, 0.08, 0.12, 0.12], d=[0.12, 0.12, 0.08, 0.08],
                           p_ego=[0.9] * 4, p_bio=[0.6] * 4)


def kron_lyapunov(A, Q):
    """Independent oracle: solve A^T P + P A = Q through the Kronecker form."""
    n = A.shape[0]
    K = np.kron(np.eye(n), A.T) + np.kron(A.T, np.eye(n))
    return np.linalg.solve(K, Q.reshape(-1, order="F")).reshape(n, n, order="F")


# ---------------------------------------------------------------------------
# validation


def test_bundled_scenario_is_valid(bundled):
    assert validate(bundled) is bundled


def test_zero_filter_resistance_names_node_and_field(bundled):
    nodes = list(bundled.nodes)
    nodes[0] = nodes[0].__class__(**{**nodes[0].__dict__, "R_t": 0.0})
    with pytest.raises(ValidationError) as exc:
        validate(bundled.replace(nodes=tuple(nodes)))
    assert any("node 1" in p and "R_t" in p for p in exc.value.problems)


def test_malformed_incidence_column_names_line(bundled):
    inc = bundled.B.copy()
    inc[:, 0] = [1, 1, 0, 0]
    with pytest.raises(ValidationError) as exc:
        validate(bundled.replace(topology=Topology(inc, bundled.topology.social_weights)))
    assert any(p.startswith("line 1") for p in exc.value.problems)


def test_validation_reports_every_problem(bundled):
    bad = with_nodes(bundled, C_t=-1.0, I_Lq=5.0)
    with pytest.raises(ValidationError) as exc:
        validate(bad)
    assert len(exc.value.problems) == 2 * bundled.N


def test_incentive_gain_is_the_egoistic_value(bundled):
    assert bundled.human.h is bundled.human.p_ego


# ---------------------------------------------------------------------------
# social Laplacian


def test_ring_laplacian_matches_incidence_product():
    W = 0.4 * ((np.abs(RING) @ np.abs(RING).T) > 0) * (1 - np.eye(4))
    L = social_laplacian(Topology(RING, W))
    np.testing.assert_allclose(L, 0.4 * RING @ RING.T, atol=1e-15)
    np.testing.assert_allclose(L[0], [0.8, -0.4, 0.0, -0.4], atol=1e-15)


def test_empty_and_single_edge_graphs():
    assert not social_laplacian(Topology(RING)).any()
    L = social_laplacian(Topology([[1.0], [-1.0]], [[0, 1], [1, 0]]))
    np.testing.assert_array_equal(L, [[1, -1], [-1, 1]])


@given(arrays(float, (5, 5), elements=st.floats(0, 10)))
def test_laplacian_rows_sum_to_zero(W):
    L = social_laplacian(Topology(np.zeros((5, 1)), W))
    np.testing.assert_allclose(L.sum(axis=1), 0.0, atol=1e-12)
    off = L[~np.eye(5, dtype=bool)]
    assert np.all(off <= 0)


# ---------------------------------------------------------------------------
# line reduction


def test_reduction_without_rotation():
    lines = [LineParams(0.5, 1e-3), LineParams(2.0, 3e-3)]
    topo = Topology([[1, 0], [-1, 1], [0, -1]])
    J, K = line_reduction(lines, topo, 0.0)
    np.testing.assert_allclose(J, -np.diag([2.0, 0.5]) @ topo.incidence.T)
    assert not K.any()


def test_unit_resistance_line():
    J, K = line_reduction([LineParams(1.0, 1e-300)], Topology([[1.0], [-1.0]]), 377.0)
    np.testing.assert_allclose(J, [[-1.0, 1.0]])
    np.testing.assert_allclose(K, 0.0, atol=1e-290)


def test_reduction_residual_on_bundled_lines(bundled):
    J, _ = bundled.reduction
    w = bundled.omega_0
    R, L = bundled.R_line, bundled.L_line
    inner = np.diag(-R - w ** 2 * L * L / R)
    np.testing.assert_allclose(inner @ J, bundled.B.T, atol=1e-14)


@given(st.lists(st.tuples(st.floats(1e-3, 10), st.floats(1e-9, 1e-1)), min_size=1, max_size=6),
       st.floats(0, 1e3))
def test_reduction_inner_matrix_is_negative(lines, w):
    R = np.array([r for r, _ in lines])
    L = np.array([l for _, l in lines])
    assert np.all(-R - w ** 2 * L * L / R < 0)


# ---------------------------------------------------------------------------
# personal norms


def test_case_i_norms():
    L = 0.4 * RING @ RING.T
    np.testing.assert_allclose(steady_norms(CASE_I_HUMAN, L, "i"), [0.72, 0.72, 0.78, 0.78], atol=1e-12)


def test_equal_weights_give_midpoint():
    h = HumanParams(a=[1, 1], c=[0.2, 0.3], d=[0.2, 0.3], p_ego=[0.9, 0.8], p_bio=[0.5, 0.6])
    np.testing.assert_allclose(steady_norms(h, np.zeros((2, 2)), "i"), [0.7, 0.7], atol=1e-15)


def test_case_ii_narrows_the_spread():
    L = 0.4 * RING @ RING.T
    p = steady_norms(CASE_I_HUMAN, L, SocialCase.CASE_II)
    assert np.ptp(p) < 0.06


def test_spread_shrinks_with_stronger_influence():
    L = 0.4 * RING @ RING.T
    spreads = [np.ptp(steady_norms(CASE_I_HUMAN, k * L, "ii")) for k in (1, 10, 100, 1000)]
    assert all(b <= a for a, b in zip(spreads, spreads[1:]))


@given(arrays(float, 4, elements=st.floats(0.01, 1)), arrays(float, 4, elements=st.floats(0.01, 1)),
       arrays(float, 4, elements=st.floats(0, 1)), arrays(float, 4, elements=st.floats(0, 1)))
def test_case_i_norms_are_convex_combinations(c, d, pe, pb):
    h = HumanParams(a=np.ones(4), c=c, d=d, p_ego=pe, p_bio=pb)
    p = steady_norms(h, np.zeros((4, 4)), "i")
    assert np.all(p >= np.minimum(pe, pb) - 1e-12)
    assert np.all(p <= np.maximum(pe, pb) + 1e-12)


# ---------------------------------------------------------------------------
# forced grid equilibrium


def test_unforced_grid_rests_at_zero(bundled):
    quiet = with_nodes(bundled, I_Ld=0.0, I_Lq=0.0, R_L=1e9)
    gs = steady_grid(quiet, np.ones(4), np.zeros(4), np.zeros(4))
    for v in (gs.V_d, gs.V_q, gs.I_td, gs.I_tq, gs.I_d, gs.I_q):
        np.testing.assert_array_equal(v, 0.0)


def test_grid_steady_matrix_is_nonsingular(bundled):
    G = grid_steady_matrix(bundled)
    assert np.linalg.matrix_rank(G) == G.shape[0]


@settings(max_examples=50, deadline=None)
@given(arrays(float, 4, elements=st.floats(0, 1)), arrays(float, 4, elements=st.floats(100, 250)))
def test_current_matching_and_decoupling(z, u_d):
    from hps_sim.scenario import reference_scenario

    params = reference_scenario()
    u_q = consistent_u_q(params, z, u_d)
    gs = steady_grid(params, z, u_d, u_q)
    assert np.abs(gs.V_q).max() < 1e-9
    res = reduced_grid_residuals(params, gs, z, u_d, u_q)
    assert np.abs(res).max() < 1e-9 * (1 + np.abs(u_d).max())
    assert abs(current_matching_residual(params, z, gs.V_d, gs.I_td)) < 1e-10 * (1 + np.abs(gs.I_td).sum())


# ---------------------------------------------------------------------------
# Lyapunov equations


def test_diagonal_closed_form():
    a, q = np.array([0.5, 2.0, 3.0]), np.array([1.0, 4.0, 9.0])
    np.testing.assert_allclose(lyapunov_solve(np.diag(a), q), np.diag(q / (2 * a)), rtol=1e-14)
    np.testing.assert_allclose(lyapunov_solve(0.5 * np.eye(4), np.eye(4)), np.eye(4), atol=1e-15)


def test_norm_matrix_residual_and_oracle(bundled_ii):
    A = bundled_ii.norm_matrix()
    P = lyapunov_solve(A, np.eye(4))
    assert np.abs(-A.T @ P - P @ A + np.eye(4)).max() < 1e-12
    np.testing.assert_allclose(P, kron_lyapunov(A, np.eye(4)), rtol=1e-12)


def test_lyapunov_is_linear_in_q(bundled_ii):
    A = bundled_ii.norm_matrix()
    Q = np.diag([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(lyapunov_solve(A, 2 * Q), 2 * lyapunov_solve(A, Q), rtol=1e-13)


def test_lyapunov_rejects_unstable():
    with pytest.raises(ValueError, match="Hurwitz"):
        lyapunov_solve(np.diag([1.0, -0.1]), np.eye(2))


@given(arrays(float, 5, elements=st.floats(0.01, 2)), arrays(float, (5, 5), elements=st.floats(0, 1)),
       arrays(float, 5, elements=st.floats(0.1, 10)))
def test_lyapunov_random_diagonal_plus_laplacian(diag, W, q):
    A = np.diag(diag) + social_laplacian(Topology(np.zeros((5, 1)), W))
    P = lyapunov_solve(A, q)
    scale = max(1.0, np.abs(P).max() * np.abs(A).max())
    assert np.abs(-A.T @ P - P @ A + np.diag(q)).max() < 1e-12 * scale
    assert np.linalg.eigvalsh(P).min() > 0


def test_controller_p1_follows_monitor(bundled):
    np.testing.assert_allclose(controller_P1(bundled), np.diag(bundled.monitor.Q_1 / (2 * bundled.human.a)), rtol=1e-14)


def test_ill_conditioned_solve_warns():
    h = HumanParams(a=[1, 1], c=[1e-14, 1.0], d=[0.0, 0.0], p_ego=[0.5, 0.5], p_bio=[0.5, 0.5])
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        steady_norms(h, np.zeros((2, 2)), "i")
    assert any("condition number" in str(r.message) for r in rec)
