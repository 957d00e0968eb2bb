import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from mortensen.dynamics import ObservationPath
from mortensen.geometry import Domain
from mortensen.kalman import KalmanError, LinearModel, kalman_cost_to_come, kalman_estimate, mortensen_rate, riccati_solve


def scalar(P0, A=0.0, S=1.0, H=1.0, x0=0.0):
    return LinearModel([[A]], [[S]], [[H]], [[P0]], [x0])


@settings(max_examples=30, deadline=None)
@given(P0=st.floats(0.05, 20.0))
def test_riccati_matches_hyperbolic_closed_form(P0):
    # P' = 1 - P^2: P = coth(t + arccoth P0) above 1, tanh(t + arctanh P0) below
    path = riccati_solve(scalar(P0), 1.0, 1e-3)
    t = path.times
    if P0 > 1:
        exact = 1.0 / np.tanh(t + np.arctanh(1.0 / P0))
    elif P0 < 1:
        exact = np.tanh(t + np.arctanh(P0))
    else:
        exact = np.ones_like(t)
    np.testing.assert_allclose(path.P[:, 0, 0], exact, rtol=1e-8, atol=1e-10)


def test_riccati_coarse_step_at_moderate_prior():
    P = riccati_solve(scalar(2.0), 1.0, 1e-2).P[-1, 0, 0]
    assert P == pytest.approx(1.0 / np.tanh(1.0 + np.arctanh(0.5)), abs=1e-8)


def test_riccati_fixed_points():
    np.testing.assert_array_equal(riccati_solve(scalar(1.0), 2.0, 1e-2).P, 1.0)
    model = LinearModel(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((1, 2)), [[2.0, 0.3], [0.3, 1.0]], [0.0, 0.0])
    path = riccati_solve(model, 1.0, 0.1)
    np.testing.assert_array_equal(path.P, np.broadcast_to(model.P0, path.P.shape))


def test_riccati_against_adaptive_ode_solver():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    S = np.array([[0.5, 0.0], [0.2, 1.0]])
    H = np.array([[1.0, 0.5]])
    P0 = np.array([[1.0, 0.2], [0.2, 0.5]])
    model = LinearModel(A, S, H, P0, [0.0, 0.0])
    path = riccati_solve(model, 1.0, 1e-3)

    def rhs(_, p):
        P = p.reshape(2, 2)
        return (A @ P + P @ A.T + S @ S.T - P @ H.T @ H @ P).ravel()

    ref = solve_ivp(rhs, (0.0, 1.0), P0.ravel(), method="DOP853", rtol=1e-12, atol=1e-14).y[:, -1].reshape(2, 2)
    np.testing.assert_allclose(path.P[-1], ref, atol=1e-9)
    asym = np.max(np.abs(path.P - np.transpose(path.P, (0, 2, 1))))
    assert asym <= 1e-12


def test_steady_estimator_closed_form():
    # P = 1 stays put; xhat' = c - xhat, so xhat = c + (x0 - c) e^{-t}
    c, x0 = 0.7, -0.4
    obs = ObservationPath(0.0, 1e-2, np.full((100, 1), c))
    kp = kalman_estimate(scalar(1.0, x0=x0), obs)
    exact = c + (x0 - c) * np.exp(-kp.times)
    np.testing.assert_allclose(kp.xhat[:, 0], exact, atol=1e-8)
    assert np.all(np.diff(np.abs(kp.xhat[:, 0] - c)) < 0)


def test_zero_innovation_keeps_estimate():
    model = LinearModel(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2), [0.3, -0.2])
    obs = ObservationPath(0.0, 0.05, np.tile([0.3, -0.2], (20, 1)))
    kp = kalman_estimate(model, obs)
    np.testing.assert_allclose(kp.xhat, np.tile([0.3, -0.2], (21, 1)), atol=1e-15)


def test_cost_to_come_structure():
    model = scalar(2.0, A=-0.5, x0=0.4)
    obs = ObservationPath(0.0, 1e-2, np.sin(np.linspace(0, 3, 100))[:, None])
    kp = kalman_estimate(model, obs)
    x = np.linspace(-2, 2, 401)[:, None]
    # t = 0 recovers psi
    np.testing.assert_allclose(kalman_cost_to_come(model, obs, 0.0, x), 0.5 * (x[:, 0] - 0.4) ** 2 / 2.0)
    psi = model.initial_cost(Domain.interval(-2.0, 2.0))
    np.testing.assert_allclose(psi(x), 0.5 * (x[:, 0] - 0.4) ** 2 / 2.0)
    # the minimiser is xhat and the minimum is the running misfit integral
    k = 60
    assert kp.cost_at(k, kp.xhat[k][None, :])[0] == pytest.approx(kp.offset[k], abs=1e-15)
    vals = kp.cost_at(k, x)
    assert abs(x[np.argmin(vals), 0] - kp.xhat[k, 0]) <= 0.5 * (x[1, 0] - x[0, 0])


def test_mortensen_rate_is_kalman_gain_in_linear_case():
    model = scalar(0.5, A=-1.0)
    vf = model.vector_field(Domain.interval(-5.0, 5.0))
    P, xh, yd = 0.8, 0.3, 1.1
    rate = mortensen_rate(vf, 0.0, [xh], [[1.0 / P]], [yd])
    assert rate[0] == pytest.approx(-xh + P * (yd - xh), rel=1e-8)


def test_errors():
    with pytest.raises(KalmanError):
        scalar(-1.0)
    with pytest.raises(KalmanError):
        LinearModel.from_config({"A": [[0.0]]})
    obs = ObservationPath(0.0, 1e-2, np.zeros((10, 1)))
    with pytest.raises(KalmanError):
        kalman_estimate(scalar(1.0), obs, dt=3e-3)
    with pytest.raises(KalmanError):
        kalman_estimate(scalar(1.0), ObservationPath(0.0, 1e-2, np.zeros((10, 2))))
    with pytest.raises(KalmanError):
        kalman_estimate(scalar(1.0), obs).cost_to_come(0.005, np.zeros((1, 1)))
    cfg = scalar(1.0, x0=0.2).to_config()
    assert LinearModel.from_config(cfg).x0[0] == 0.2
