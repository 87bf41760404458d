import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from risksens.hamiltonians import (
    AdjointState,
    GeneralProblem,
    check_minimum_condition,
    eval_G,
    eval_H,
    eval_Hcal,
    factor_problem,
    fd_derivatives,
    hjb_residual,
    minimize_G,
    variational_lhs,
)
from risksens.portfolio import baseline_params

P0 = baseline_params()
TH, S, C, L = P0.theta, P0.S, P0.c, P0.L


# Hand-written scalar forms for the factor model (independent of the einsum code).
def G_hand(x, u, p, P):
    l = 0.5 * (TH + 1) * S * u * u - 0.02 - u * (0.08 + 0.2 * x - 0.02)
    f = 0.1 - 0.5 * x - TH * C * u
    return l + p * f + 0.5 * TH * p * p * L + 0.5 * P * L


def H_hand(x, u, p, q):
    l = 0.5 * (TH + 1) * S * u * u - 0.02 - u * (0.08 + 0.2 * x - 0.02)
    f = 0.1 - 0.5 * x - TH * C * u
    return p * f + l + q[0] * 0.1 + q[1] * 0.2 + TH * p * p * L


def adj(p, q, P):
    return AdjointState(p=[p], q=np.reshape(q, (1, 2)), P=[[P]], Q=np.zeros((2, 1, 1)),
                        sigma_bar=np.reshape(P0.lam, (1, 2)))


@pytest.fixture(scope="module")
def prob():
    return factor_problem(P0)


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-3, 3), u=st.floats(-5, 5), p=st.floats(-2, 2), P=st.floats(-1, 1))
def test_G_matches_hand_form(prob, x, u, p, P):
    assert eval_G(0.3, x, u, p, P, prob) == pytest.approx(G_hand(x, u, p, P), abs=1e-13)


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-3, 3), u=st.floats(-5, 5), p=st.floats(-2, 2), q1=st.floats(-1, 1),
       q2=st.floats(-1, 1), P=st.floats(-1, 1))
def test_H_and_Hcal_match_hand_forms(prob, x, u, p, q1, q2, P):
    a = adj(p, [q1, q2], P)
    assert eval_H(0.3, x, u, a, prob) == pytest.approx(H_hand(x, u, p, (q1, q2)), abs=1e-13)
    # sigma does not depend on u here, so sigma - sigma_bar = 0
    expected = H_hand(x, u, p, (q1, q2)) - 0.5 * (P + TH * p * p) * L
    assert eval_Hcal(0.3, x, u, a, prob) == pytest.approx(expected, abs=1e-13)


def test_G_broadcasts_over_controls(prob):
    u = np.linspace(-1, 1, 7)[:, None]
    vals = eval_G(0.0, 1.0, u, 0.2, -0.1, prob)
    assert vals.shape == (7,)
    assert np.allclose(vals, [G_hand(1.0, v, 0.2, -0.1) for v in u[:, 0]], atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-3, 3), p=st.floats(-1, 1), P=st.floats(-1, 1))
def test_minimize_G_finds_the_vertex(prob, x, p, P):
    u_star = (0.06 + 0.2 * x + TH * C * p) / ((TH + 1) * S)
    u, g = minimize_G(0.0, x, p, P, prob)
    assert u[0] == pytest.approx(u_star, abs=1e-8)
    assert g == pytest.approx(G_hand(x, u_star, p, P), abs=1e-12)


def test_minimize_G_respects_the_box(prob):
    box = factor_problem(P0, control_box=((-1.0, 1.0),))
    u, _ = minimize_G(0.0, 3.0, 0.0, 0.0, box)  # unconstrained vertex near 4.4
    assert u[0] == 1.0


def test_ties_go_to_smallest_control():
    zero = lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]))
    flat = GeneralProblem(
        1, 1, 1,
        f=lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u))),
        sigma=lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x)[:-1],
                                                           np.shape(u)[:-1]) + (1, 1)),
        l=zero, g=lambda x: np.zeros(np.shape(x)[:-1]), mu=1.0, control_box=((-2.0, 3.0),))
    u, g = minimize_G(0.0, 0.0, 0.0, 0.0, flat)
    assert u[0] == -2.0 and g == 0.0


def test_two_dimensional_control():
    # G = (u1 - 0.3)^2 + 2 (u2 + 0.7)^2 via l only
    def l(t, x, u):
        return (u[..., 0] - 0.3) ** 2 + 2 * (u[..., 1] + 0.7) ** 2 + 0 * x[..., 0]

    prob2 = GeneralProblem(
        1, 1, 2, f=lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x)[:-1],
                                                                 np.shape(u)[:-1]) + (1,)),
        sigma=lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x)[:-1],
                                                           np.shape(u)[:-1]) + (1, 1)),
        l=l, g=lambda x: 0 * x[..., 0], mu=0.5, control_box=((-1, 1), (-1, 1)))
    u, g = minimize_G(0.0, 0.0, 0.0, 0.0, prob2, n_grid=101)
    assert np.allclose(u, [0.3, -0.7], atol=1e-7)
    assert g == pytest.approx(0.0, abs=1e-12)


def test_minimum_condition_on_the_optimal_control(prob):
    p, P, x = -0.15, 0.01, 0.4
    u_bar = (0.06 + 0.2 * x + TH * C * p) / ((TH + 1) * S)
    a = adj(p, [-0.01, -0.02], P)
    rep = check_minimum_condition(0.2, x, u_bar, a, prob)
    assert rep.passed and rep.lhs_passed
    assert rep.violation == 0.0


def test_minimum_condition_detects_a_wrong_control(prob):
    p, P, x, eps = -0.15, 0.01, 0.4, 0.3
    u_bar = (0.06 + 0.2 * x + TH * C * p) / ((TH + 1) * S)
    a = adj(p, [-0.01, -0.02], P)
    rep = check_minimum_condition(0.2, x, u_bar + eps, a, prob)
    assert not rep.passed
    # the cost is quadratic in u with curvature (theta+1) S
    assert rep.violation == pytest.approx(0.5 * (TH + 1) * S * eps * eps, rel=1e-3)
    lhs = variational_lhs(0.2, x, u_bar, u_bar + eps, a, prob)
    assert lhs < 0


def test_adjoint_state_validation():
    with pytest.raises(ValueError):
        AdjointState(p=[0.0, 0.0], q=np.zeros((2, 1)), P=[[1.0, 2.0], [0.0, 1.0]],
                     Q=np.zeros((1, 2, 2)))
    a = AdjointState(p=[1.0], q=[[0.0, 0.0]], P=[[0.5]], Q=np.zeros((2, 1, 1)))
    assert np.allclose(a.weight(2.0), [[2.5]])
    with pytest.raises(ValueError):
        eval_H(0.0, 0.0, 0.0, a, factor_problem(P0))


def test_fd_derivatives_on_a_polynomial():
    V = lambda t, x: t * t * x ** 3 + 2 * x
    V_t, V_x, V_xx = fd_derivatives(V)
    assert V_t(0.5, 1.2) == pytest.approx(2 * 0.5 * 1.2 ** 3, abs=1e-8)
    assert V_x(0.5, 1.2) == pytest.approx(3 * 0.25 * 1.44 + 2, abs=1e-8)
    assert V_xx(0.5, 1.2) == pytest.approx(6 * 0.25 * 1.2, abs=1e-4)
    V_t1, _, _ = fd_derivatives(V, t_range=(0.0, 1.0))
    assert V_t1(1.0, 1.0) == pytest.approx(2.0, abs=1e-4)


def test_hjb_residual_with_finite_differences(prob):
    # V from the closed-form coefficients, derivatives by finite differences only
    from risksens.gridfn import make_grid
    from risksens.lq_coeffs import solve_coefficients

    c = solve_coefficients(P0, make_grid(0.0, 1.0, 2560))
    V = lambda t, x: 0.5 * c.gamma.hermite(t) * x * x + c.phi.hermite(t) * x + c.k.hermite(t)
    V_t, V_x, V_xx = fd_derivatives(V, t_range=(0.0, 1.0))
    for t, x in ((0.1, -1.0), (0.5, 0.5), (0.9, 2.0)):
        assert abs(hjb_residual(V_t, V_x, V_xx, t, x, prob)) < 1e-6


def test_problem_validation():
    with pytest.raises(ValueError):
        factor_problem(P0, control_box=((1.0, -1.0),))
    with pytest.raises(ValueError):
        factor_problem(P0, control_box=((-1.0, 1.0), (-1.0, 1.0)))
