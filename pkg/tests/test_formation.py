import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackelberg_po.errors import SpecParseError
from stackelberg_po.formation import (Edge, Graph, build_formation_game, edge_cost_matrix,
                                      formation_error, formation_from_dict, incidence_matrix,
                                      lifted_quadratic, weighted_laplacian)
from stackelberg_po.pipeline import solve_game


def small_config(**over):
    raw = {"vertices": ["leader", "a", "b"], "n_coord": 2, "horizon": 1.0, "steps": 50,
           "edges": [{"tail": "leader", "head": "a", "w": 1.0, "mu": 0.5, "offset": [-1, 0]},
                     {"tail": "a", "head": "b", "w": 2.0, "mu": 1.0, "nu": 0.3,
                      "offset": [0, -1]}],
           "x0": [[0, 0], [0.2, 0.1], [-1, 0.5]], "follower_R": 1.0, "leader_R": -50.0,
           "leader_target": {"position": [0, 0], "velocity": [0.5, 0], "control": [0, 0]}}
    raw.update(over)
    return formation_from_dict(raw)


@st.composite
def connected_graphs(draw):
    nv = draw(st.integers(2, 6))
    edges = []
    for v in range(1, nv):                       # spanning tree keeps it connected
        u = draw(st.integers(0, v - 1))
        edges.append((u, v) if draw(st.booleans()) else (v, u))
    extra = draw(st.lists(st.tuples(st.integers(0, nv - 1), st.integers(0, nv - 1)), max_size=5))
    edges += [e for e in extra if e[0] != e[1]]
    w = draw(st.lists(st.floats(0.0, 10.0), min_size=len(edges), max_size=len(edges)))
    return Graph(tuple(range(nv)), tuple(Edge(t, h, w=x) for (t, h), x in zip(edges, w))), w


@settings(max_examples=50, deadline=None)
@given(connected_graphs())
def test_laplacian_psd_with_ones_kernel(gw):
    g, w = gw
    D = incidence_matrix(g)
    L = weighted_laplacian(D, w)
    assert np.abs(L - L.T).max() == 0.0
    assert np.linalg.eigvalsh(L).min() > -1e-10 * (1 + max(w))
    assert np.abs(L @ np.ones(len(g.vertices))).max() < 1e-10 * (1 + max(w))


def test_incidence_sign_convention():
    D = incidence_matrix(Graph((0, 1), (Edge(0, 1),)))
    assert D[:, 0].tolist() == [-1.0, 1.0]


def test_lifted_quadratic_identity():
    rng = np.random.default_rng(0)
    sel = rng.normal(size=(5, 3))
    W = np.diag([1.0, 2.0, 0.5])
    target = rng.normal(size=3)
    M = lifted_quadratic(sel, W, target, 4)
    for _ in range(100):
        x = rng.normal(size=5)
        X = np.concatenate([x, np.ones(4)])
        d = sel.T @ x - target
        assert X @ M @ X == pytest.approx(d @ W @ d, rel=1e-10)


def test_edge_cost_matches_formation_error():
    fs = small_config()
    M = edge_cost_matrix(fs, np.array([1.0, 2.0]))
    rng = np.random.default_rng(1)
    X = np.concatenate([rng.normal(size=(100, 12)), np.ones((100, 4))], axis=1)
    direct = formation_error(fs, X)
    lifted = np.einsum("pi,ij,pj->p", X, M, X)
    assert np.abs(lifted - direct).max() <= 1e-10 * np.abs(direct).max()


def test_zero_offsets_decouple_constant_block():
    fs = small_config(edges=[{"tail": 0, "head": 1, "w": 1.0}, {"tail": 1, "head": 2, "w": 1.0}])
    M = edge_cost_matrix(fs, np.ones(2))
    assert np.abs(M[:12, 12:]).max() == 0.0 and np.abs(M[12:, 12:]).max() == 0.0


def test_compiled_game_structure():
    fs = small_config()
    spec = build_formation_game(fs)
    nc, N = 2, 2
    assert spec.dims.n == 2 * (N + 2) * nc
    A = spec.A.node(0)
    assert np.count_nonzero(A) == (N + 1) * nc and set(np.unique(A)) == {0.0, 1.0}
    assert spec.leader_definiteness == "indefinite"
    assert spec.x0[-4:].tolist() == [1.0] * 4
    for c in spec.followers:
        for M in (c.Q.node(0), c.G):
            assert np.linalg.eigvalsh(M).min() > -1e-10
    pd = build_formation_game(small_config(leader_R=2.0))
    assert pd.leader_definiteness == "definite"


def test_cycle_inconsistent_offsets_warn(caplog):
    fs = small_config(edges=[{"tail": 0, "head": 1, "w": 1.0, "offset": [1, 0]},
                             {"tail": 1, "head": 2, "w": 1.0, "offset": [1, 0]},
                             {"tail": 0, "head": 2, "w": 1.0, "offset": [0, 0]}])
    with caplog.at_level(logging.WARNING):
        build_formation_game(fs)
    assert "inconsistent" in caplog.text


@pytest.mark.parametrize("edges", [[{"tail": 0, "head": 0}],
                                   [{"tail": 0, "head": 1}],
                                   [{"tail": 0, "head": 1, "w": -1.0}, {"tail": 1, "head": 2}]])
def test_bad_graphs_rejected(edges):
    with pytest.raises(SpecParseError):
        small_config(edges=edges)


def test_unknown_key_rejected():
    with pytest.raises(SpecParseError):
        small_config(colour="red")


def test_zero_weights_give_zero_controls():
    fs = small_config(edges=[{"tail": 0, "head": 1}, {"tail": 1, "head": 2}],
                      track_terminal=0.0, track_running=0.0)
    sol = solve_game(build_formation_game(fs))
    assert np.abs(sol.u2_path).max() < 1e-12
    for f in sol.followers:
        assert np.abs(f.gain_state.values).max() == 0.0
        assert np.abs(f.gain_affine.values).max() == 0.0
