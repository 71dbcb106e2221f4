import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackelberg_po.errors import GridMismatch
from stackelberg_po.filtering import solve_covariance_system
from stackelberg_po.follower import solve_followers
from stackelberg_po.odesolve import integrate_matrix_ode
from stackelberg_po.simulate import (BestResponseFollowers, OpenLoopLeader, SimConfig, Strategy,
                                     run_strategy)

from conftest import scalar_game, two_follower_game


def test_deterministic_branch_converges_immediately(scalar_spec):
    cs = solve_covariance_system(scalar_spec, solve_followers(scalar_spec))
    assert cs.sweeps == 2
    assert np.abs(cs.PhiErrSq).max() == 0.0


@settings(max_examples=10, deadline=None)
@given(c1=st.floats(0.05, 1.0), a=st.floats(-1.0, 1.0), b=st.floats(0.2, 2.0))
def test_leader_error_is_state_variance_without_leader_noise(c1, a, b):
    # C2 = 0: the leader's observation is pure noise, so its filter is the mean
    # and its error covariance is Var(X) under the followers' feedback.
    spec = scalar_game(steps=100, C1=c1, A=a, B1=[b])
    fol = solve_followers(spec)
    cs = solve_covariance_system(spec, fol)
    K = fol[0].gain_state.as_fn()
    V = integrate_matrix_ode(lambda t, v: 2 * (a + b * K(t)[0, 0]) * v + c1 ** 2,
                             np.zeros((1, 1)), "forward", spec.grid)
    assert np.abs(cs.SigmaTilde.values - V.values).max() < 1e-8


def test_random_branch_fixed_point():
    spec = scalar_game(steps=200, C2=0.5, f1=1.0, K1=0.6, f2=0.8, K2=0.7)
    cs = solve_covariance_system(spec, solve_followers(spec))
    assert cs.residual < 1e-8
    for name in ("SigmaTilde", "CrossHatCheckSq"):
        for M in getattr(cs, name).values:
            assert np.allclose(M, M.T)
            assert np.linalg.eigvalsh(M).min() > -1e-12


def test_two_follower_system_shapes(tmp_path):
    spec = two_follower_game(steps=50)
    cs = solve_covariance_system(spec, solve_followers(spec))
    assert len(cs.SigmaCheck) == 2
    assert cs.SigmaTilde.values.shape == (51, 2, 2)
    cs.to_csv(tmp_path)
    assert (tmp_path / "sigma_tilde.csv").exists()


def test_grid_mismatch(scalar_spec):
    fol = solve_followers(scalar_spec.regrid(50))
    with pytest.raises(GridMismatch):
        solve_covariance_system(scalar_spec, fol)


def test_noiseless_filters_track_state():
    spec = scalar_game(steps=100, C1=0.0)
    fol = solve_followers(spec)
    cs = solve_covariance_system(spec, fol)
    strat = Strategy(OpenLoopLeader(np.zeros((101, 1))), BestResponseFollowers(fol))
    res = run_strategy(spec, strat, fol[0].Sigma, cs.SigmaTilde, SimConfig(paths=3))
    assert np.allclose(res.terminal["X"], res.terminal["xhat"])
    assert np.allclose(res.terminal["X"], res.terminal["xcheck"])
