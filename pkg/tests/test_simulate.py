import json

import numpy as np
import pytest

from stackelberg_po.errors import NonDeterministicDriver
from stackelberg_po.pipeline import require_deterministic_leader, solve_game
from stackelberg_po.simulate import (SimConfig, brownian_increments, equilibrium_leader_path,
                                     leader_is_deterministic, run_closed_loop)

from conftest import scalar_game


def closed_loop(sol, **cfg):
    return run_closed_loop(sol.spec, sol.followers, sol.stack, sol.covsys, SimConfig(**cfg))


def test_increments_are_keyed_by_path():
    a = brownian_increments(3, 17, 10, 2, 0.01)
    b = brownian_increments(3, 17, 10, 2, 0.01)
    c = brownian_increments(3, 18, 10, 2, 0.01)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_antithetic_pairs():
    a = brownian_increments(1, 4, 5, 1, 0.1, antithetic=True)
    b = brownian_increments(1, 5, 5, 1, 0.1, antithetic=True)
    assert np.array_equal(a, -b)


def test_increment_variance():
    dW = np.concatenate([brownian_increments(0, p, 50, 1, 0.02) for p in range(200)])
    assert dW.var() == pytest.approx(0.02, rel=0.1)


def test_seed_reproducible_and_chunk_invariant(scalar_solution):
    a = closed_loop(scalar_solution, paths=300, seed=5, chunk=300)
    b = closed_loop(scalar_solution, paths=300, seed=5, chunk=64)
    c = closed_loop(scalar_solution, paths=300, seed=5, chunk=64, threads=3)
    for r in (b, c):
        assert np.array_equal(a.costs["leader"], r.costs["leader"])
        assert np.array_equal(a.terminal["X"], r.terminal["X"])


def test_single_path_reports_no_standard_error(scalar_solution):
    res = closed_loop(scalar_solution, paths=1)
    assert res.estimate("leader")[1] is None
    summary = json.loads(json.dumps(res.summary()))
    assert summary["costs"]["leader"]["se"] == "n/a"


def test_estimates_near_closed_form(scalar_solution):
    res = closed_loop(scalar_solution, paths=4000, seed=9)
    for player, exact in (("leader", scalar_solution.costs["leader"]["total"]),
                          ("follower_1", scalar_solution.costs["follower_1"])):
        mean, se = res.estimate(player)
        assert abs(mean - exact) < 4 * se


def test_equilibrium_path_matches_closed_loop_mean(scalar_solution):
    u2, xs, hs = equilibrium_leader_path(scalar_solution.stack)
    res = closed_loop(scalar_solution, paths=2000, seed=2)
    # the leader's filter is a deterministic path here; Euler vs RK4 is O(dt)
    assert np.ptp(res.terminal["xcheck"]) == 0.0
    assert np.abs(res.terminal["xcheck"][0] - xs[-1]).max() < 2 * scalar_solution.spec.grid.dt


def test_random_leader_detected():
    spec = scalar_game(steps=100, C2=0.5, f2=0.8, K2=0.7)
    sol = solve_game(spec)
    assert not leader_is_deterministic(sol.stack)
    assert sol.costs["follower_1"] is None
    with pytest.raises(NonDeterministicDriver):
        equilibrium_leader_path(sol.stack)
    with pytest.raises(NonDeterministicDriver):
        require_deterministic_leader(sol)
    res = closed_loop(sol, paths=2000, seed=1)
    mean, se = res.estimate("leader")
    assert abs(mean - sol.costs["leader"]["total"]) < 4 * se


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(paths=0)
    with pytest.raises(ValueError):
        SimConfig(threads=0)
