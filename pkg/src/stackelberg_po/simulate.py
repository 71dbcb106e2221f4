"""Monte Carlo closed-loop simulation of the game and of the coupled FBSDE.

Paths are Euler-Maruyama discretizations on the shared grid.  Every path has
its own counter-based random stream keyed by (seed, path index), so results do
not depend on the chunking or the thread count, and runs with different
controls but the same seed use common random numbers.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, NonDeterministicDriver, NonFinite
from .filtering import FilterGains, FilterState, filter_step
from .follower import _deterministic_path, solve_followers
from .model import CoefficientFn
from .odesolve import integrate_matrix_ode

log = logging.getLogger(__name__)

MAX_EXCLUDED_FRACTION = 1e-3


@dataclass(frozen=True)
class SimConfig:
    paths: int = 10_000
    seed: int = 0
    record: tuple = ()          # names of per-path trajectories to keep
    antithetic: bool = False
    threads: int = 1
    chunk: int = 1000
    deterministic: bool = True  # fixed reduction order (always honoured)

    def __post_init__(self):
        if self.paths < 1:
            raise ValueError("paths must be >= 1")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


def _estimate(samples):
    s = np.asarray(samples, dtype=float)
    mean = float(s.mean())
    se = float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else None
    return mean, se


@dataclass(eq=False)
class SimResult:
    costs: dict                 # player -> per-path samples
    terminal: dict              # name -> (paths, dim) terminal values
    traces: dict = field(default_factory=dict)     # name -> (nodes,) path-mean
    recorded: dict = field(default_factory=dict)   # name -> (paths, nodes, dim)
    excluded: list = field(default_factory=list)
    residual: dict = field(default_factory=dict)

    def estimate(self, player):
        return _estimate(self.costs[player])

    def summary(self):
        out = {"paths": int(next(iter(self.costs.values())).size) if self.costs else 0,
               "excluded_paths": list(self.excluded), "costs": {}}
        for name in sorted(self.costs):
            mean, se = self.estimate(name)
            out["costs"][name] = {"mean": mean, "se": se if se is not None else "n/a"}
        out["terminal_mean"] = {k: v.mean(axis=0).tolist() for k, v in sorted(self.terminal.items())}
        if self.residual:
            out["residual"] = self.residual
        return out


# ---------------------------------------------------------------------------
# random streams

def brownian_increments(seed, path, steps, width, dt, antithetic=False):
    """(steps, width) increments of path ``path``; antithetic pairs share a stream."""
    key, sign = (path // 2, -1.0 if path % 2 else 1.0) if antithetic else (path, 1.0)
    ss = np.random.SeedSequence(seed, spawn_key=(key,))
    rng = np.random.Generator(np.random.Philox(ss))
    return sign * math.sqrt(dt) * rng.standard_normal((steps, width))


def _chunk_increments(cfg, start, stop, steps, width, dt):
    return np.stack([brownian_increments(cfg.seed, p, steps, width, dt, cfg.antithetic)
                     for p in range(start, stop)], axis=0)


def _map_chunks(cfg, fn):
    bounds = [(s, min(s + cfg.chunk, cfg.paths)) for s in range(0, cfg.paths, cfg.chunk)]
    if cfg.threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            return list(ex.map(lambda b: fn(*b), bounds))
    return [fn(*b) for b in bounds]


# ---------------------------------------------------------------------------
# strategies

class FeedbackLeader:
    """u2 = L6 Xcheck + L7 h + S3 with the auxiliary state h of the leader.

    The followers' adjoint estimate is P2'Xcheck - P3 h + phi2.
    """

    def __init__(self, stack):
        self.s = stack
        p = stack.problem
        self.N7, self.N8, self.N9 = (stack.Nmats[k] for k in ("N7", "N8", "N9"))
        self.L6, self.L7, self.S3 = stack.Lmats["L6"], stack.Lmats["L7"], stack.Smats["S3"]
        self.P2, self.P3, self.phi2 = stack.P2.values, stack.P3.values, stack.phi2.values
        P2, P3, phi2 = self.P2[0], self.P3[0], self.phi2[0]
        Nn = p.Nn
        self.h0 = np.linalg.solve(np.eye(Nn) + p.H @ P3, p.H @ (P2.T @ p.x0 + phi2))

    def start(self, paths):
        return np.tile(self.h0, (paths, 1))

    def control(self, k, xcheck, h):
        return xcheck @ self.L6[k].T + h @ self.L7[k].T + self.S3[k]

    def adjoint_estimate(self, k, xcheck, h):
        return xcheck @ self.P2[k] - h @ self.P3[k].T + self.phi2[k]

    def advance(self, k, xcheck, h, dt):
        return h + (xcheck @ self.N7[k].T + h @ self.N8[k].T + self.N9[k]) * dt


class OpenLoopLeader:
    """Deterministic leader control path."""

    def __init__(self, path):
        self.path = np.asarray(path, dtype=float)

    def start(self, paths):
        return None

    def control(self, k, xcheck, h):
        return np.broadcast_to(self.path[k], (xcheck.shape[0], self.path.shape[1]))

    def adjoint_estimate(self, k, xcheck, h):
        return None

    def advance(self, k, xcheck, h, dt):
        return None


class FilteredFollowers:
    """u1i = -K_i x - R_i^{-1}(B1i' Yi + r_i) with Yi the leader's adjoint estimate."""

    def __init__(self, spec, followers):
        self.spec = spec
        self.gs = [f.gain_state.values for f in followers]

    def control(self, i, k, x, Yest):
        s = self.spec
        n = s.dims.n
        c = s.followers[i]
        B = s.B1[i].node(k)
        Yi = Yest[:, i * n:(i + 1) * n]
        w = Yi @ B + c.r.node(k)
        return x @ self.gs[i][k].T - np.linalg.solve(c.R.node(k), w.T).T


class BestResponseFollowers:
    """u1i = gain_state x + gain_affine from solutions against a fixed leader path."""

    def __init__(self, followers):
        self.gs = [f.gain_state.values for f in followers]
        self.ga = [f.gain_affine.values for f in followers]

    def control(self, i, k, x, Yest):
        return x @ self.gs[i][k].T + self.ga[i][k]


@dataclass
class Strategy:
    leader: object
    followers: object
    leader_shift: np.ndarray = None      # (nodes, m) deterministic additive path
    follower_shift: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# closed loop

def _quad_cost(c, k, X, u):
    """Running cost integrand of one player at node k for a batch of paths."""
    Q, S, R = c.Q.node(k), c.S.node(k), c.R.node(k)
    return (np.einsum("pi,ij,pj->p", X, Q, X) + 2.0 * np.einsum("pi,ij,pj->p", u, S, X)
            + np.einsum("pi,ij,pj->p", u, R, u) + 2.0 * X @ c.q.node(k)
            + 2.0 * u @ c.r.node(k))


def _terminal_cost(c, X):
    return np.einsum("pi,ij,pj->p", X, c.G, X) + 2.0 * X @ c.g


def _simulate_chunk(spec, strategy, Sigma, SigmaTilde, cfg, observables, start, stop):
    grid = spec.grid
    dt = grid.dt
    steps = grid.steps
    n, N, l1, l2 = spec.dims.n, spec.dims.N, spec.dims.l1, spec.dims.l2
    P = stop - start
    dW = _chunk_increments(cfg, start, stop, steps, l1 + l2, dt)
    X = np.tile(spec.x0, (P, 1))
    fs = FilterState.start(spec.x0, P)
    h = strategy.leader.start(P)
    cost = {f"follower_{i + 1}": np.zeros(P) for i in range(N)}
    cost["leader"] = np.zeros(P)
    rec = {name: np.empty((P, steps + 1, n)) for name in cfg.record
           if name in ("X", "xhat", "xcheck")}
    traces = {name: np.zeros(steps + 1) for name in observables}
    for k in range(steps + 1):
        for name, arr in rec.items():
            arr[:, k] = {"X": X, "xhat": fs.xhat, "xcheck": fs.xcheck}[name]
        for name, fn in observables.items():
            traces[name][k] = np.sum(fn(X))
        if k == steps:
            break
        u2 = strategy.leader.control(k, fs.xcheck, h)
        if strategy.leader_shift is not None:
            u2 = u2 + strategy.leader_shift[k]
        Yest = strategy.leader.adjoint_estimate(k, fs.xcheck, h)
        drive_hat = u2 @ spec.B2.node(k).T + spec.alpha.node(k)
        drive_check = drive_hat.copy()
        drift = X @ spec.A.node(k).T + drive_hat
        for i in range(N):
            u_act = strategy.followers.control(i, k, fs.xhat, Yest)
            u_pred = strategy.followers.control(i, k, fs.xcheck, Yest)
            if i in strategy.follower_shift:
                u_act = u_act + strategy.follower_shift[i][k]
                u_pred = u_pred + strategy.follower_shift[i][k]
            B = spec.B1[i].node(k)
            drift = drift + u_act @ B.T
            drive_hat = drive_hat + u_act @ B.T
            drive_check = drive_check + u_pred @ B.T
            cost[f"follower_{i + 1}"] += _quad_cost(spec.followers[i], k, X, u_act) * dt
        cost["leader"] += _quad_cost(spec.leader, k, X, u2) * dt
        dW1 = dW[:, k, :l1]
        dW2 = dW[:, k, l1:]
        dY1 = (X @ spec.f1.node(k).T + spec.g1.node(k)) * dt + dW1 @ spec.K1.node(k).T
        dY2 = (X @ spec.f2.node(k).T + spec.g2.node(k)) * dt + dW2 @ spec.K2.node(k).T
        gains = FilterGains.at_node(spec, k, Sigma[k], SigmaTilde[k])
        h = strategy.leader.advance(k, fs.xcheck, h, dt)
        fs = filter_step(fs, dY1, dY2, spec, gains, dt, k, drive_hat, drive_check)
        X = X + drift * dt + dW1 @ spec.C1.node(k).T + dW2 @ spec.C2.node(k).T
    for i in range(N):
        cost[f"follower_{i + 1}"] += _terminal_cost(spec.followers[i], X)
    cost["leader"] += _terminal_cost(spec.leader, X)
    terminal = {"X": X, "xhat": fs.xhat, "xcheck": fs.xcheck}
    return cost, terminal, traces, rec


def _merge(spec, parts, cfg):
    cost = {k: np.concatenate([p[0][k] for p in parts]) for k in parts[0][0]}
    terminal = {k: np.concatenate([p[1][k] for p in parts]) for k in parts[0][1]}
    traces = {k: sum(p[2][k] for p in parts) for k in parts[0][2]}
    recorded = {k: np.concatenate([p[3][k] for p in parts]) for k in parts[0][3]}
    bad = np.zeros(cfg.paths, dtype=bool)
    for v in list(cost.values()) + list(terminal.values()):
        bad |= ~np.all(np.isfinite(v.reshape(cfg.paths, -1)), axis=1)
    excluded = [int(i) for i in np.flatnonzero(bad)]
    if excluded:
        log.warning("excluding %d non-finite paths (first: %d)", len(excluded), excluded[0])
        if len(excluded) > MAX_EXCLUDED_FRACTION * cfg.paths:
            raise NonFinite(f"{len(excluded)} of {cfg.paths} paths diverged "
                            f"(first path {excluded[0]})")
        keep = ~bad
        cost = {k: v[keep] for k, v in cost.items()}
        terminal = {k: v[keep] for k, v in terminal.items()}
        recorded = {k: v[keep] for k, v in recorded.items()}
    kept = cfg.paths - len(excluded)
    traces = {k: v / kept for k, v in traces.items()}
    return SimResult(cost, terminal, traces, recorded, excluded)


def run_strategy(spec, strategy, Sigma, SigmaTilde, cfg, observables=None):
    """Simulate an explicit strategy profile (controls need not be optimal)."""
    if Sigma.grid != spec.grid or SigmaTilde.grid != spec.grid:
        raise GridMismatch("covariances and spec use different grids")
    observables = observables or {}
    parts = _map_chunks(cfg, lambda a, b: _simulate_chunk(spec, strategy, Sigma, SigmaTilde,
                                                          cfg, observables, a, b))
    return _merge(spec, parts, cfg)


def run_closed_loop(spec, followers, stack, covsys, cfg, observables=None):
    """Equilibrium closed loop: leader feedback on its filter, followers on theirs.

    The followers use the leader's estimate of their adjoint.  For a
    deterministic leader control this coincides with their own adjoint.
    """
    grid = spec.grid
    if stack.grid != grid or covsys.grid != grid or any(f.grid != grid for f in followers):
        raise GridMismatch("solver outputs and spec use different grids")
    strategy = Strategy(FeedbackLeader(stack), FilteredFollowers(spec, followers))
    return run_strategy(spec, strategy, followers[0].Sigma, covsys.SigmaTilde, cfg,
                        observables)


# ---------------------------------------------------------------------------
# deterministic leader

def leader_is_deterministic(stack, tol=0.0):
    """True when the leader's reduced problem has no noise."""
    return bool(np.abs(stack.problem.E2).max() <= tol) and stack.problem.only_additive_noise()


def equilibrium_leader_path(stack):
    """Nodes of (u2, Xcheck, h) when the leader's filter carries no noise."""
    if not leader_is_deterministic(stack):
        raise NonDeterministicDriver("the leader's filter is noisy; its control is random")
    p = stack.problem
    grid = p.grid
    n, Nn = p.n, p.Nn
    Nm = {k: CoefficientFn(stack.Nmats[k], grid) for k in ("N1", "N2", "N3", "N7", "N8", "N9")}
    lead = FeedbackLeader(stack)

    def rhs(t, v):
        x, h = v[:n], v[n:]
        return np.concatenate([Nm["N1"](t) @ x + Nm["N2"](t) @ h + Nm["N3"](t),
                               Nm["N7"](t) @ x + Nm["N8"](t) @ h + Nm["N9"](t)])

    traj = integrate_matrix_ode(rhs, np.concatenate([p.x0, lead.h0]), "forward", grid,
                                name="leader path")
    xs = traj.values[:, :n]
    hs = traj.values[:, n:]
    u2 = np.stack([lead.control(k, xs[k][None], hs[k][None])[0]
                   for k in range(grid.steps + 1)])
    return u2, xs, hs


def perturbation_experiment(spec, solutions, direction, epsilons, cfg, layer="leader"):
    """Cost differences J(u + eps v) - J(u) under common random numbers.

    ``solutions`` needs ``stack`` and ``covsys``; the leader control must be
    deterministic.  ``layer`` is ``"leader"`` (followers re-solve their best
    response to the perturbed leader path) or a zero-based follower index
    (that follower deviates, everybody else keeps the equilibrium strategy).
    """
    stack, covsys = solutions.stack, solutions.covsys
    u2bar, _, _ = equilibrium_leader_path(stack)
    v = _deterministic_path(direction, spec, "direction")
    base = solve_followers(spec, u2bar, solutions.followers[0].Sigma)
    Sigma = base[0].Sigma
    eps_all = sorted(set([0.0] + [float(e) for e in epsilons] + [-float(e) for e in epsilons]))
    samples = {}
    for e in eps_all:
        if layer == "leader":
            fol = base if e == 0.0 else solve_followers(spec, u2bar + e * v, Sigma)
            strat = Strategy(OpenLoopLeader(u2bar + e * v), BestResponseFollowers(fol))
            player = "leader"
        else:
            i = int(layer)
            strat = Strategy(OpenLoopLeader(u2bar), BestResponseFollowers(base),
                             follower_shift={i: e * _deterministic_path(direction, spec)}
                             if e != 0.0 else {})
            player = f"follower_{i + 1}"
        res = run_strategy(spec, strat, Sigma, covsys.SigmaTilde, cfg)
        samples[e] = res.costs[player]
    rows = []
    for e in sorted(x for x in eps_all if x > 0):
        dp = samples[e] - samples[0.0]
        dm = samples[-e] - samples[0.0]
        sq = (samples[e] - samples[-e]) / (2.0 * e)
        rows.append({"eps": e, "diff": _estimate(dp)[0], "diff_se": _estimate(dp)[1],
                     "diff_neg": _estimate(dm)[0], "diff_neg_se": _estimate(dm)[1],
                     "sym_quotient": _estimate(sq)[0], "sym_quotient_se": _estimate(sq)[1]})
    xs = np.array([e for e in eps_all if e != 0.0])
    ys = np.array([_estimate(samples[e] - samples[0.0])[0] for e in xs])
    c = float(np.sum(ys * xs ** 2) / np.sum(xs ** 4))
    ss_res = float(np.sum((ys - c * xs ** 2) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"layer": layer, "rows": rows, "quadratic_coef": c, "r_squared": r2,
            "base_cost": _estimate(samples[0.0])}


# ---------------------------------------------------------------------------
# coupled FBSDE path check

def decoupling_residual(problem, dec, cfg):
    """Pathwise mismatch of Ytilde - Q Xtilde - phi for the definite decoupling.

    Xtilde = (X, h) is simulated forward under the decoupled control; Ytilde =
    (m, Y) is rebuilt backward from its terminal value with the same
    increments, using the integrands implied by the decoupling.  Returns
    max_t of the path-mean residual norm and the per-node trace.
    """
    from .leader_fbsde import hamiltonian_blocks
    p = problem
    grid = p.grid
    dt = grid.dt
    steps = grid.steps
    n, Nn, l2 = p.n, p.Nn, p.l2
    K = n + Nn
    Q = dec.Q.values
    phi = dec.phi.values
    H = [hamiltonian_blocks(p.node(k), n, Nn) for k in range(steps + 1)]
    Zmap = []
    for k in range(steps + 1):
        row = []
        for j in range(l2):
            const = dec.J[k, j] @ phi[k] + dec.I[k, j] @ Q[k] @ H[k].E2[j]
            row.append((dec.k[k, j], const))
        Zmap.append(row)
    Ft = np.block([[p.G, p.F.T], [p.F, np.zeros((Nn, Nn))]])
    xi_t = np.concatenate([np.zeros(n), p.xi])
    h0 = np.linalg.solve(np.eye(Nn) + p.H @ (-Q[0][n:, n:]),
                         p.H @ (Q[0][n:, :n] @ p.x0 + phi[0][n:]))
    x0 = np.concatenate([p.x0, h0])

    def chunk(start, stop):
        P = stop - start
        dB = _chunk_increments(cfg, start, stop, steps, l2, dt)
        Xs = np.empty((steps + 1, P, K))
        Zs = np.empty((steps, l2, P, K))
        Xs[0] = x0
        for k in range(steps):
            hb = H[k]
            x = Xs[k]
            Y = x @ Q[k].T + phi[k]
            drift = x @ hb.A1.T + Y @ hb.B1.T + hb.E1
            diff = np.zeros((P, K))
            for j in range(l2):
                km, kc = Zmap[k][j]
                Z = x @ km.T + kc
                Zs[k, j] = Z
                drift += Z @ hb.C1[j].T
                vol = x @ hb.A2[j].T + Y @ hb.B2[j].T + Z @ hb.C2[j].T + hb.E2[j]
                diff += vol * dB[:, k, j:j + 1]
            Xs[k + 1] = x + drift * dt + diff
        Y = Xs[-1] @ Ft.T + xi_t
        res = np.zeros(steps + 1)
        for k in range(steps, -1, -1):
            if k < steps:
                hb = H[k]
                x = Xs[k]
                gen = x @ hb.A3.T + Y @ hb.A1 + hb.E3
                mart = np.zeros((P, K))
                for j in range(l2):
                    gen += Zs[k, j] @ hb.A2[j]
                    mart += Zs[k, j] * dB[:, k, j:j + 1]
                Y = Y + gen * dt - mart
            r = Y - Xs[k] @ Q[k].T - phi[k]
            res[k] = np.linalg.norm(r, axis=1).sum()
        return res

    parts = _map_chunks(cfg, chunk)
    trace = sum(parts) / cfg.paths
    return {"max_mean_residual": float(trace.max()), "trace": trace,
            "terminal_residual": float(trace[-1])}
