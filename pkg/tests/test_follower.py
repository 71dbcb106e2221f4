import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackelberg_po.errors import GridMismatch, NonDeterministicDriver
from stackelberg_po.follower import (follower_cost_closed_form, solve_follower,
                                     solve_followers, trapezoid)
from stackelberg_po.model import TimeGrid
from stackelberg_po.odesolve import solve_terminal_riccati
from stackelberg_po.simulate import (BestResponseFollowers, OpenLoopLeader, SimConfig, Strategy,
                                     run_strategy)

from conftest import scalar_game, two_follower_game


def noiseless_cost(spec, fol, u2, shift=None):
    strat = Strategy(OpenLoopLeader(u2), BestResponseFollowers(fol),
                     follower_shift={} if shift is None else {0: shift})
    res = run_strategy(spec, strat, fol[0].Sigma, fol[0].Sigma, SimConfig(paths=1))
    return res.estimate("follower_1")[0]


def test_riccati_matches_direct_solve(scalar_spec):
    sol = solve_follower(scalar_spec, 0)
    P = solve_terminal_riccati(scalar_spec.A, scalar_spec.B1[0], [[0.0]], [[1.0]], [[1.0]],
                               [[0.5]], scalar_spec.grid)
    assert np.abs(sol.P1i.values - P.values).max() == 0.0


def test_trapezoid_exact_on_linear():
    g = TimeGrid(2.0, 7)
    assert trapezoid(3.0 * g.times + 1.0, g) == pytest.approx(8.0)


def test_closed_form_matches_noiseless_rollout():
    spec = scalar_game(steps=2000, C1=0.0)
    u2 = np.sin(3 * spec.grid.times)[:, None]
    fol = solve_followers(spec, u2)
    exact = follower_cost_closed_form(spec, fol[0])
    assert noiseless_cost(spec, fol, u2) == pytest.approx(exact, rel=2e-3)


def test_best_response_beats_deviations():
    spec = scalar_game(steps=400, C1=0.0)
    u2 = np.cos(spec.grid.times)[:, None]
    fol = solve_followers(spec, u2)
    base = noiseless_cost(spec, fol, u2)
    v = (1.0 + spec.grid.times)[:, None]
    for eps in (-0.2, -0.05, 0.05, 0.2):
        assert noiseless_cost(spec, fol, u2, eps * v) > base


@settings(max_examples=15, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(-2, 2), seed=st.integers(0, 1000))
def test_adjoint_is_affine_in_leader_path(a, b, seed):
    spec = scalar_game(steps=50)
    rng = np.random.default_rng(seed)
    v, w = rng.normal(size=(2, 51, 1))
    phi = lambda u: solve_follower(spec, 0, u).phi1i.values
    lhs = phi(a * v + b * w) - phi(0 * v)
    rhs = a * (phi(v) - phi(0 * v)) + b * (phi(w) - phi(0 * v))
    assert np.abs(lhs - rhs).max() < 1e-9 * (1 + np.abs(rhs).max())


def test_followers_are_independent():
    spec = two_follower_game()
    both = solve_followers(spec)
    one = solve_follower(spec, 1)
    assert np.array_equal(both[1].P1i.values, one.P1i.values)
    threaded = solve_followers(spec, threads=2)
    assert np.array_equal(threaded[0].phi1i.values, both[0].phi1i.values)


def test_random_leader_input_rejected(scalar_spec):
    with pytest.raises(NonDeterministicDriver):
        solve_follower(scalar_spec, 0, lambda t: 0.0)
    with pytest.raises(NonDeterministicDriver):
        solve_follower(scalar_spec, 0, np.zeros((10, 201, 1)))


def test_grid_mismatch(scalar_spec):
    with pytest.raises(GridMismatch):
        solve_follower(scalar_spec, 0, np.zeros((50, 1)))
    sol = solve_follower(scalar_spec.regrid(100), 0)
    with pytest.raises(GridMismatch):
        follower_cost_closed_form(scalar_spec, sol)
