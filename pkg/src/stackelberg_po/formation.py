"""Multi-robot formation control compiled into a leader/follower game.

Each robot is a double integrator in ``n_coord`` dimensions with state
(position, velocity).  Vertex 0 is the leader, vertices 1..N are followers.
The game state is the stack of all robot states followed by a constant block
of ones (length 2 n_coord), so that costs with offsets become purely
quadratic in the lifted state.

Incidence convention: +1 at the head of an edge, -1 at its tail.  An edge's
offset is the desired X_head - X_tail.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import ShapeMismatch, SpecParseError, SpecValidationError
from .model import Dims, TimeGrid, make_spec, validate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Edge:
    tail: int
    head: int
    w: float = 0.0        # follower terminal weight
    mu: float = 0.0       # follower running weight
    nu: float = 0.0       # leader terminal weight
    theta: float = 0.0    # leader running weight
    offset: tuple = ()    # desired X_head - X_tail (positions, optionally velocities)


@dataclass(frozen=True)
class Graph:
    vertices: tuple
    edges: tuple

    def __post_init__(self):
        nv = len(self.vertices)
        if nv < 2:
            raise ValueError("a formation needs a leader and at least one follower")
        for e in self.edges:
            if e.tail == e.head:
                raise ValueError(f"self-loop at vertex {e.tail}")
            if not (0 <= e.tail < nv and 0 <= e.head < nv):
                raise ValueError(f"edge ({e.tail}, {e.head}) references a missing vertex")
            if min(e.w, e.mu, e.nu, e.theta) < 0:
                raise ValueError(f"negative weight on edge ({e.tail}, {e.head})")
        if not self.connected():
            raise ValueError("graph is not connected")

    def connected(self):
        nv = len(self.vertices)
        adj = {v: set() for v in range(nv)}
        for e in self.edges:
            adj[e.tail].add(e.head)
            adj[e.head].add(e.tail)
        seen, stack = {0}, [0]
        while stack:
            for u in adj[stack.pop()] - seen:
                seen.add(u)
                stack.append(u)
        return len(seen) == nv


@dataclass(frozen=True)
class FormationSpec:
    graph: Graph
    n_coord: int
    x0: np.ndarray                  # (N+1, 2 n_coord): positions then velocities
    horizon: float
    steps: int
    follower_R: np.ndarray          # (n_coord, n_coord) shared by followers, PD
    leader_R: np.ndarray            # (n_coord, n_coord), ND
    leader_start: np.ndarray        # target state of the leader at t = 0 (2 n_coord)
    leader_control: np.ndarray      # constant reference acceleration (n_coord)
    track_terminal: np.ndarray      # (2 n_coord, 2 n_coord) PSD
    track_running: np.ndarray       # (2 n_coord, 2 n_coord) PSD
    noise: float = 0.0              # velocity noise intensity of every robot
    leader_obs_gain: float = 0.0    # f2 scale (0: the leader observes nothing)
    meta: dict = field(default_factory=dict)

    @property
    def N(self):
        return len(self.graph.vertices) - 1

    @property
    def robot_dim(self):
        return 2 * self.n_coord

    @property
    def state_dim(self):
        return (self.N + 2) * self.robot_dim


def incidence_matrix(g):
    D = np.zeros((len(g.vertices), len(g.edges)))
    for k, e in enumerate(g.edges):
        D[e.head, k] = 1.0
        D[e.tail, k] = -1.0
    return D


def weighted_laplacian(D, W):
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = np.diag(W)
    if np.any(np.diag(W) < 0) or np.any(W - np.diag(np.diag(W))):
        raise ValueError("edge weights must form a nonnegative diagonal matrix")
    return linalg.sym(D @ W @ D.T)


def _edge_offsets(fs):
    r = fs.robot_dim
    out = np.zeros((len(fs.graph.edges), r))
    for k, e in enumerate(fs.graph.edges):
        off = np.asarray(e.offset, dtype=float).ravel()
        if off.size not in (0, fs.n_coord, r):
            raise ShapeMismatch(f"offset of edge {k} has length {off.size}")
        out[k, :off.size] = off
    return out


def lifted_quadratic(select, weight, target, c):
    """Matrix M with X~'M X~ = |select' X - target|^2_weight for X~ = (X, ones(c)).

    The target enters through the constant block as target 1'/c.
    """
    d = select.shape[0]
    M = np.zeros((d + c, d + c))
    M[:d, :d] = select @ weight @ select.T
    cross = -select @ weight @ np.outer(target, np.ones(c)) / c
    M[:d, d:] = cross
    M[d:, :d] = cross.T
    M[d:, d:] = float(target @ weight @ target) * np.ones((c, c)) / c ** 2
    return linalg.sym(M)


def edge_cost_matrix(fs, weights):
    """Lifted matrix of sum_e weights[e] |X_head - X_tail - offset_e|^2."""
    r = fs.robot_dim
    Dhat = np.kron(incidence_matrix(fs.graph), np.eye(r))
    What = np.kron(np.diag(weights), np.eye(r))
    return lifted_quadratic(Dhat, What, _edge_offsets(fs).ravel(), r)


def leader_target(fs, times):
    """Reference state of the leader: a double integrator with constant input."""
    nc = fs.n_coord
    p0, v0 = fs.leader_start[:nc], fs.leader_start[nc:]
    u = fs.leader_control
    t = np.asarray(times, dtype=float)[:, None]
    return np.concatenate([p0 + v0 * t + 0.5 * u * t ** 2, v0 + u * t], axis=1)


def _tracking_matrix(fs, weight, target):
    r = fs.robot_dim
    sel = np.zeros(((fs.N + 1) * r, r))
    sel[:r] = np.eye(r)
    return lifted_quadratic(sel, weight, target, r)


def _incident(fs, i):
    return np.array([1.0 if i in (e.tail, e.head) else 0.0 for e in fs.graph.edges])


def check_cycle_offsets(fs, tol=1e-9):
    """Warn when offsets around some cycle do not sum to zero."""
    nv = len(fs.graph.vertices)
    offs = _edge_offsets(fs)
    pos = {0: np.zeros(fs.robot_dim)}
    adj = {v: [] for v in range(nv)}
    for k, e in enumerate(fs.graph.edges):
        adj[e.tail].append((e.head, offs[k]))
        adj[e.head].append((e.tail, -offs[k]))
    stack = [0]
    ok = True
    while stack:
        v = stack.pop()
        for u, d in adj[v]:
            if u not in pos:
                pos[u] = pos[v] + d
                stack.append(u)
            elif np.abs(pos[u] - pos[v] - d).max() > tol:
                ok = False
    if not ok:
        log.warning("formation offsets are inconsistent around a cycle")
    return ok


def build_formation_game(fs, f1=None, g1=None, K1=None, f2=None, g2=None, K2=None):
    """Compile the formation into a GameSpec (leader R negative definite)."""
    nc, r, N = fs.n_coord, fs.robot_dim, fs.N
    nv = N + 1
    dim = fs.state_dim
    x0 = np.asarray(fs.x0, dtype=float)
    if x0.shape == (nv, nc):
        x0 = np.concatenate([x0, np.zeros((nv, nc))], axis=1)
    if x0.shape != (nv, r):
        raise ShapeMismatch(f"x0 must have shape {(nv, r)}, got {x0.shape}")
    check_cycle_offsets(fs)
    grid = TimeGrid(fs.horizon, fs.steps)
    a = np.block([[np.zeros((nc, nc)), np.eye(nc)], [np.zeros((nc, nc)), np.zeros((nc, nc))]])
    b = np.vstack([np.zeros((nc, nc)), np.eye(nc)])
    A = np.zeros((dim, dim))
    A[:nv * r, :nv * r] = np.kron(np.eye(nv), a)

    def select(v):
        e = np.zeros((nv + 1, 1))
        e[v] = 1.0
        return np.kron(e, b)

    B2 = select(0)
    B1 = [select(v) for v in range(1, nv)]
    l1 = nv * nc
    C1 = np.zeros((dim, l1))
    C1[:nv * r] = fs.noise * np.kron(np.eye(nv), b)
    l2 = nc
    f2 = (fs.leader_obs_gain * np.hstack([np.eye(nc), np.zeros((nc, dim - nc))])
          if f2 is None else f2)
    followers = []
    for i in range(1, nv):
        inc = _incident(fs, i)
        w = np.array([e.w for e in fs.graph.edges]) * inc
        mu = np.array([e.mu for e in fs.graph.edges]) * inc
        followers.append(dict(Q=edge_cost_matrix(fs, mu), G=edge_cost_matrix(fs, w),
                              R=np.asarray(fs.follower_R, dtype=float)))
    nu = np.array([e.nu for e in fs.graph.edges])
    th = np.array([e.theta for e in fs.graph.edges])
    times = grid.times
    target = leader_target(fs, times)
    Qt = np.stack([edge_cost_matrix(fs, th) + _tracking_matrix(fs, fs.track_running, target[k])
                   for k in range(grid.steps + 1)])
    G2 = edge_cost_matrix(fs, nu) + _tracking_matrix(fs, fs.track_terminal, target[-1])
    spec = make_spec(
        Dims(dim, nc, N, l1, l2), grid, x0=np.concatenate([x0.ravel(), np.ones(r)]), A=A,
        B1=B1, B2=B2, C1=C1, C2=np.zeros((dim, l2)), f1=f1, g1=g1, K1=K1, f2=f2, g2=g2,
        K2=K2, followers=followers,
        leader=dict(Q=Qt, R=np.asarray(fs.leader_R, dtype=float), G=G2),
        leader_definiteness="definite" if linalg.is_pd(fs.leader_R) else "indefinite")
    problems = validate(spec)
    if problems:
        raise SpecValidationError(problems)
    return spec


def formation_error(fs, X, weights=None):
    """sum_e w_e |X_head - X_tail - offset_e|^2 for a batch of lifted states."""
    X = np.atleast_2d(X)
    r = fs.robot_dim
    nv = fs.N + 1
    w = np.array([e.w for e in fs.graph.edges]) if weights is None else np.asarray(weights)
    offs = _edge_offsets(fs)
    robots = X[:, :nv * r].reshape(X.shape[0], nv, r)
    out = np.zeros(X.shape[0])
    for k, e in enumerate(fs.graph.edges):
        dev = robots[:, e.head] - robots[:, e.tail] - offs[k]
        out += w[k] * np.sum(dev * dev, axis=1)
    return out


def run_formation_demo(fs, cfg, observations=None, baseline=False):
    """Equilibrium pipeline plus the mean formation-error trace.

    With ``baseline`` the same paths are also run with the leader's control
    set to zero and the followers best-responding to it.
    """
    from .follower import solve_followers
    from .pipeline import solve_game
    from .simulate import (BestResponseFollowers, OpenLoopLeader, Strategy, run_closed_loop,
                           run_strategy)
    spec = build_formation_game(fs, **(observations or {}))
    sol = solve_game(spec, threads=cfg.threads)
    obs = {"formation_error": lambda X: formation_error(fs, X)}
    res = run_closed_loop(spec, sol.followers, sol.stack, sol.covsys, cfg, observables=obs)
    out = {"spec": spec, "solution": sol, "result": res,
           "formation_error": res.traces["formation_error"]}
    if baseline:
        zero = np.zeros((spec.grid.steps + 1, spec.dims.m))
        fol = solve_followers(spec, zero, sol.Sigma, cfg.threads)
        strat = Strategy(OpenLoopLeader(zero), BestResponseFollowers(fol))
        out["baseline"] = run_strategy(spec, strat, sol.Sigma, sol.covsys.SigmaTilde, cfg,
                                       observables=obs)
    return out


# ---------------------------------------------------------------------------
# JSON

def _mat(x, n, name):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return a * np.eye(n)
    if a.shape != (n, n):
        raise SpecParseError(f"{name}: expected a scalar or {n}x{n} matrix")
    return a


def formation_from_dict(raw):
    known = {"vertices", "edges", "n_coord", "x0", "horizon", "steps", "follower_R",
             "leader_R", "leader_target", "track_terminal", "track_running", "noise",
             "leader_obs_gain"}
    unknown = set(raw) - known
    if unknown:
        raise SpecParseError(f"unknown formation keys: {sorted(unknown)}")
    try:
        nc = int(raw["n_coord"])
        verts = tuple(raw["vertices"])
        index = {v: k for k, v in enumerate(verts)}

        def vid(x):
            return index[x] if x in index else int(x)

        edges = tuple(Edge(tail=vid(e["tail"]), head=vid(e["head"]), w=float(e.get("w", 0)),
                           mu=float(e.get("mu", 0)), nu=float(e.get("nu", 0)),
                           theta=float(e.get("theta", 0)),
                           offset=tuple(e.get("offset", ()))) for e in raw["edges"])
        tgt = raw.get("leader_target", {})
        fs = FormationSpec(
            graph=Graph(verts, edges), n_coord=nc, x0=np.asarray(raw["x0"], dtype=float),
            horizon=float(raw["horizon"]), steps=int(raw["steps"]),
            follower_R=_mat(raw.get("follower_R", 1.0), nc, "follower_R"),
            leader_R=_mat(raw["leader_R"], nc, "leader_R"),
            leader_start=np.concatenate([np.asarray(tgt.get("position", [0.0] * nc), float),
                                         np.asarray(tgt.get("velocity", [0.0] * nc), float)]),
            leader_control=np.asarray(tgt.get("control", [0.0] * nc), dtype=float),
            track_terminal=_mat(raw.get("track_terminal", 1.0), 2 * nc, "track_terminal"),
            track_running=_mat(raw.get("track_running", 1.0), 2 * nc, "track_running"),
            noise=float(raw.get("noise", 0.0)),
            leader_obs_gain=float(raw.get("leader_obs_gain", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecParseError(f"bad formation config: {exc}") from exc
    return fs


def load_formation(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecParseError(f"cannot read {path}: {exc}") from exc
    return formation_from_dict(raw)
