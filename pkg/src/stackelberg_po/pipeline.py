"""End-to-end equilibrium solve: followers, covariances, leader, costs."""

import logging
from types import SimpleNamespace

import numpy as np

from .errors import M1NotPD, NonDeterministicDriver, P3Singular
from .filtering import solve_covariance_system
from .follower import follower_cost_closed_form, solve_followers
from .leader_fbsde import (DEFAULT_I_SEQUENCE, build_enlarged_system, leader_cost_closed_form,
                           leader_gain, map_leader_problem, solve_direct_p_system,
                           solve_riccati_stack)
from .odesolve import solve_filter_covariance
from .simulate import equilibrium_leader_path, leader_is_deterministic

log = logging.getLogger(__name__)


def solve_leader_stack(problem, definiteness="definite", i_sequence=DEFAULT_I_SEQUENCE,
                       threads=1):
    """Penalized route when its control weight is positive, direct P-system otherwise."""
    if definiteness == "definite":
        try:
            return solve_riccati_stack(build_enlarged_system(problem), problem, i_sequence,
                                       threads=threads)
        except M1NotPD as exc:
            log.info("penalized route unavailable (%s); using the direct P-system", exc)
    return solve_direct_p_system(problem, 0.0)


def solve_game(spec, threads=1, i_sequence=DEFAULT_I_SEQUENCE):
    Sigma = solve_filter_covariance(spec)
    fol0 = solve_followers(spec, None, Sigma, threads)
    covsys = solve_covariance_system(spec, fol0)
    problem = map_leader_problem(spec, fol0, covsys.SigmaTilde)
    stack = solve_leader_stack(problem, spec.leader_definiteness, i_sequence, threads)
    log.info("leader stack solved by the %s route", stack.route)
    u2 = None
    followers = fol0
    if leader_is_deterministic(stack):
        u2, _, _ = equilibrium_leader_path(stack)
        followers = solve_followers(spec, u2, Sigma, threads)
    costs = {"leader": leader_cost_closed_form(stack, spec, covsys, details=True)}
    for i, f in enumerate(followers):
        costs[f"follower_{i + 1}"] = (follower_cost_closed_form(spec, f) if u2 is not None
                                      else None)
    try:
        gain = leader_gain(stack)
    except P3Singular as exc:  # the h-form feedback does not need P3^{-1}
        log.info("state-filter leader gain unavailable: %s", exc)
        gain = None
    return SimpleNamespace(spec=spec, Sigma=Sigma, followers=followers, covsys=covsys,
                           problem=problem, stack=stack, gain=gain, u2_path=u2, costs=costs)


def require_deterministic_leader(sol):
    if sol.u2_path is None:
        raise NonDeterministicDriver("the leader's control is random for this instance")
    return np.asarray(sol.u2_path)
