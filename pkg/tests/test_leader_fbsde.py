import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackelberg_po import leader_fbsde as lf
from stackelberg_po.errors import NonFinite, PreconditionViolated
from stackelberg_po.filtering import solve_covariance_system
from stackelberg_po.follower import solve_followers
from stackelberg_po.model import TimeGrid
from stackelberg_po.pipeline import solve_game, solve_leader_stack

from conftest import scalar_game


@pytest.fixture(scope="module")
def stack(scalar_solution):
    return scalar_solution.stack


@pytest.fixture(scope="module")
def direct(scalar_solution):
    return lf.solve_direct_p_system(scalar_solution.problem, 0.0)


def test_regularized_route_selected(stack):
    assert stack.route == "regularized"
    assert sorted(stack.per_index) == list(lf.DEFAULT_I_SEQUENCE)


def test_recovery_identities_every_index(stack):
    assert max(e["recovery_residual"] for e in stack.report) < 1e-10


def test_extrapolated_limit_matches_direct_system(stack, direct):
    for name in ("P1", "P2", "P3", "phi1", "phi2"):
        assert np.abs(getattr(stack, name).values - getattr(direct, name).values).max() < 1e-7


def test_raw_index_matches_direct_with_penalty_terminal(scalar_solution, stack):
    i = stack.i_max
    d = lf.solve_direct_p_system(scalar_solution.problem, 1.0 / i)
    raw = stack.per_index[i]
    for name in ("P1", "P2", "P3"):
        assert np.abs(np.asarray(raw[name]) - getattr(d, name).values).max() < 1e-9


def test_gain_relation_and_fault_injection(stack):
    assert lf.gain_relation_residual(stack) < 1e-10
    P2 = np.asarray(stack.per_index[stack.i_max]["P2"])
    assert lf.corrupt_check_gain_relation(stack, stack.i_max, P2 + 0.05) > 1e-3


def test_p2_transpose_equation_consistent(direct):
    assert lf.p2_transpose_residual(direct) < 1e-4


def test_definite_route_agrees(scalar_solution, stack):
    p = scalar_solution.problem
    other = lf.stack_from_definite(lf.solve_definite_decoupling(None, p), p)
    assert lf.gain_disagreement(stack, other) < 1e-5


def test_four_term_gain_identity(scalar_solution, stack):
    a = lf.leader_gain(stack)
    b = lf.leader_gain_four_term(scalar_solution.spec, scalar_solution.followers, stack)
    for x, y in ((a.Gx, b.Gx), (a.Gphi, b.Gphi), (a.affine, b.affine)):
        assert np.abs(x[:-1] - y[:-1]).max() < 1e-10


def test_value_matches_moment_route(scalar_solution, stack):
    p = scalar_solution.problem
    assert lf.reduced_cost_by_moments(p, stack) == pytest.approx(0.5 * stack.value, rel=1e-4)


def test_residual_cost_cross_check(scalar_solution):
    d = scalar_solution.costs["leader"]
    assert d["residual"] == pytest.approx(d["residual_crosscheck"], rel=1e-4)
    assert d["total"] == pytest.approx(d["reduced"] + d["residual"])


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5), i=st.sampled_from([4, 16, 64]))
def test_richardson_exact_on_quadratic_tail(a, b, c, i):
    f = lambda j: a + b / j + c / j ** 2
    assert lf.richardson([f(i // 4), f(i // 2), f(i)]) == pytest.approx(a, abs=1e-9 * (1 + abs(b) + abs(c)))


def test_stack_needs_three_doubling_indices(scalar_solution):
    p = scalar_solution.problem
    es = lf.build_enlarged_system(p)
    with pytest.raises(ValueError):
        lf.solve_riccati_stack(es, p, [1, 2])
    with pytest.raises(ValueError):
        lf.solve_riccati_stack(es, p, [1, 3, 9])


def test_mapping_preconditions(scalar_spec):
    fol = solve_followers(scalar_spec)
    cs = solve_covariance_system(scalar_spec, fol)
    spec = scalar_game(leader=dict(Q=1.0, R=1.0, G=1.0, q=0.5))
    with pytest.raises(PreconditionViolated):
        lf.map_leader_problem(spec, fol, cs.SigmaTilde)
    spec = scalar_game(f1=1.0)
    with pytest.raises(PreconditionViolated):
        lf.map_leader_problem(spec, fol, cs.SigmaTilde)


def test_problem_shape_checks():
    g = TimeGrid(1.0, 4)
    with pytest.raises(Exception):
        lf.FbsdeLqProblem(g, [1.0], 1, 1, 1, 1, A1=np.zeros((3, 2, 2)))


def test_indefinite_leader_uses_direct_route():
    spec = scalar_game(leader=dict(Q=1.0, R=-2.0, G=0.2), leader_definiteness="indefinite")
    sol = solve_game(spec)
    assert sol.stack.route == "direct"
    assert np.all(np.isfinite(sol.stack.P1.values))


def test_indefinite_escape_raises_nonfinite():
    spec = scalar_game(A=0.0, leader=dict(Q=0.0, R=-1.0, G=10.0), leader_definiteness="indefinite")
    with pytest.raises(NonFinite) as info:
        solve_game(spec)
    assert info.value.t is not None and 0.0 < info.value.t < 1.0


def test_definite_fallback_when_penalized_route_unavailable(scalar_solution):
    st_direct = solve_leader_stack(scalar_solution.problem, "indefinite")
    assert st_direct.route == "direct"
