import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackelberg_po.errors import NonFinite
from stackelberg_po.model import Dims, TimeGrid, make_spec
from stackelberg_po.odesolve import (MatrixTrajectory, integrate_matrix_ode, observed_order,
                                     solve_filter_covariance, solve_terminal_riccati)

from conftest import scalar_game


def tanh_oracle(steps, T=1.0):
    # P' = P^2 - 1, P(T) = 0  ->  P(t) = tanh(T - t)
    g = TimeGrid(T, steps)
    P = solve_terminal_riccati([[0.0]], [[1.0]], [[0.0]], [[1.0]], [[1.0]], [[0.0]], g)
    return np.abs(P.values[:, 0, 0] - np.tanh(T - g.times)).max()


def test_riccati_tanh_oracle():
    assert tanh_oracle(1000) < 1e-6


def test_rk4_order_on_oracle():
    errs = [tanh_oracle(s, T=3.0) for s in (10, 20, 40, 80)]
    orders = observed_order(errs)
    assert np.all((orders > 3.5) & (orders < 4.5)), orders


def test_forward_linear_ode_exact():
    g = TimeGrid(1.0, 200)
    sol = integrate_matrix_ode(lambda t, x: -2.0 * x, np.ones(1), "forward", g)
    assert np.abs(sol.values[:, 0] - np.exp(-2.0 * g.times)).max() < 1e-9


def test_escape_reports_time():
    # P' = -P^2 backward from a large terminal value escapes at T - 1/P(T)
    g = TimeGrid(1.0, 1000)
    with pytest.raises(NonFinite) as info:
        integrate_matrix_ode(lambda t, P: -P @ P, 10.0 * np.eye(1), "backward", g)
    assert info.value.t == pytest.approx(0.9, abs=0.01)


def test_substeps_do_not_change_output_nodes():
    g = TimeGrid(1.0, 10)
    a = integrate_matrix_ode(lambda t, x: np.cos(t) * x, np.ones(1), "forward", g)
    b = integrate_matrix_ode(lambda t, x: np.cos(t) * x, np.ones(1), "forward", g, substeps=8)
    exact = np.exp(np.sin(g.times))
    assert np.abs(b.values[:, 0] - exact).max() < np.abs(a.values[:, 0] - exact).max()


def test_trajectory_rejects_asymmetry():
    g = TimeGrid(1.0, 1)
    bad = np.array([[[1.0, 2.0], [0.0, 1.0]]] * 2)
    with pytest.raises(Exception):
        MatrixTrajectory(g, bad, symmetric=True)


def test_filter_covariance_scalar_closed_form():
    # with f1 = 0 the error covariance is the plain Lyapunov solution
    spec = scalar_game(C2=0.4)
    S = solve_filter_covariance(spec)
    t = spec.grid.times
    exact = 0.16 * (np.exp(0.6 * t) - 1.0) / 0.6
    assert np.abs(S.values[:, 0, 0] - exact).max() < 1e-9


def test_filter_covariance_steady_state_with_observation():
    # Sigma' = 2a Sigma - (f Sigma / K)^2 + c^2 tends to the positive root
    spec = make_spec(Dims(1, 1, 1, 1, 1), TimeGrid(20.0, 2000), A=0.3, C2=0.5, f1=1.0, K1=0.5)
    S = solve_filter_covariance(spec)
    a, f, K, c = 0.3, 1.0, 0.5, 0.5
    q = f ** 2 / K ** 2
    root = (2 * a + np.sqrt(4 * a ** 2 + 4 * q * c ** 2)) / (2 * q)
    assert S.values[-1, 0, 0] == pytest.approx(root, rel=1e-8)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16), n=st.integers(1, 3))
def test_riccati_stays_symmetric_psd(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    B = rng.normal(size=(n, 1))
    M = rng.normal(size=(n, n))
    Q = M @ M.T
    G = np.eye(n) * rng.uniform(0, 2)
    P = solve_terminal_riccati(A, B, np.zeros((1, n)), np.eye(1), Q, G, TimeGrid(1.0, 100))
    for Pk in P.values:
        assert np.allclose(Pk, Pk.T)
        assert np.linalg.eigvalsh(Pk).min() > -1e-9
