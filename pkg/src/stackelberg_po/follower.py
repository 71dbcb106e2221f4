"""Best response of one follower given a deterministic leader input.

The follower sees only Y1, so its problem splits into a fully observed LQ
problem for the filter X̂ (Riccati P, affine adjoint phi) plus an
uncontrollable error part priced by Pi.  With deterministic inputs the
adjoint equations are ordinary backward ODEs.

Indices ``i`` are zero-based.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch, NonDeterministicDriver
from .model import CoefficientFn
from .odesolve import (MatrixTrajectory, integrate_matrix_ode, observation_gain,
                       solve_filter_covariance, solve_terminal_riccati)


@dataclass(frozen=True, eq=False)
class FollowerSolution:
    index: int
    P1i: MatrixTrajectory
    Pi1i: MatrixTrajectory
    phi1i: MatrixTrajectory
    lambda1i: MatrixTrajectory
    pi1i: MatrixTrajectory
    beta1: MatrixTrajectory
    beta2: MatrixTrajectory
    gain_state: MatrixTrajectory
    gain_affine: MatrixTrajectory
    Delta: MatrixTrajectory
    Sigma: MatrixTrajectory
    u2_affine: np.ndarray

    @property
    def grid(self):
        return self.P1i.grid

    def K(self, k):
        """Positive feedback matrix R^{-1}(B'P + S) at node k."""
        return -self.gain_state[k]


def _deterministic_path(u2, spec, name="u2_affine"):
    m = spec.dims.m
    nodes = spec.grid.steps + 1
    if u2 is None:
        return np.zeros((nodes, m))
    if callable(u2) or isinstance(u2, (list, tuple)) and len(u2) and callable(u2[0]):
        raise NonDeterministicDriver(f"{name} must be a fixed array, not a callable")
    arr = np.asarray(u2, dtype=float)
    if arr.ndim == 1 and m == 1 and arr.shape[0] == nodes:
        arr = arr[:, None]
    if arr.shape == (m,):
        arr = np.broadcast_to(arr, (nodes, m)).copy()
    if arr.ndim != 2:
        raise NonDeterministicDriver(
            f"{name} has shape {arr.shape}; a per-path (random) input is outside the "
            "deterministic branch")
    if arr.shape != (nodes, m):
        raise GridMismatch(f"{name} has shape {arr.shape}, expected {(nodes, m)}")
    return arr


def solve_follower(spec, i, u2_affine=None, Sigma=None):
    """Riccati, adjoint and cost-split quantities of follower ``i``."""
    grid = spec.grid
    n, m, l1, l2 = spec.dims.n, spec.dims.m, spec.dims.l1, spec.dims.l2
    cost = spec.followers[i]
    B = spec.B1[i]
    u2 = _deterministic_path(u2_affine, spec)
    u2fn = CoefficientFn(u2, grid)
    if Sigma is None:
        Sigma = solve_filter_covariance(spec)
    Sig = Sigma.as_fn()

    P = solve_terminal_riccati(spec.A, B, cost.S, cost.R, cost.Q, cost.G, grid,
                               name=f"P1{i + 1}")
    Pfn = P.as_fn()

    def err_drift(t):
        return spec.A(t) - observation_gain(spec, Sig(t), t) @ spec.f1(t)

    def pi_rhs(t, M):
        Af = err_drift(t)
        return -(Af.T @ M + M @ Af + cost.Q(t))

    Pi = integrate_matrix_ode(pi_rhs, cost.G, "backward", grid, symmetric=True,
                              name=f"Pi1{i + 1}")

    def feedback(t, Pt):
        return np.linalg.solve(cost.R(t), B(t).T @ Pt + cost.S(t))

    def phi_rhs(t, phi):
        Pt = Pfn(t)
        K = feedback(t, Pt)
        F = spec.A(t) - B(t) @ K
        src = Pt @ (spec.alpha(t) + spec.B2(t) @ u2fn(t)) + cost.q(t) - K.T @ cost.r(t)
        return -(F.T @ phi + src)

    phi = integrate_matrix_ode(phi_rhs, cost.g, "backward", grid, name=f"phi1{i + 1}")

    def small_pi_rhs(t, v):
        return -(err_drift(t).T @ v + cost.q(t))

    pi = integrate_matrix_ode(small_pi_rhs, cost.g, "backward", grid, name=f"pi1{i + 1}")

    times = grid.times
    gs = np.empty((grid.steps + 1, m, n))
    ga = np.empty((grid.steps + 1, m))
    Delta = np.empty((grid.steps + 1, n, l1))
    for k, t in enumerate(times):
        R = cost.R.node(k)
        Bk = B.node(k)
        gs[k] = -np.linalg.solve(R, Bk.T @ P[k] + cost.S.node(k))
        ga[k] = -np.linalg.solve(R, Bk.T @ phi[k] + cost.r.node(k))
        K1 = spec.K1.node(k)
        Delta[k] = Sigma[k] @ np.linalg.solve(K1, spec.f1.node(k)).T
    zeros = np.zeros
    return FollowerSolution(
        index=i, P1i=P, Pi1i=Pi, phi1i=phi,
        lambda1i=MatrixTrajectory(grid, zeros((grid.steps + 1, n, l1)), name="lambda"),
        pi1i=pi,
        beta1=MatrixTrajectory(grid, zeros((grid.steps + 1, n, l1)), name="beta1"),
        beta2=MatrixTrajectory(grid, zeros((grid.steps + 1, n, l2)), name="beta2"),
        gain_state=MatrixTrajectory(grid, gs, name=f"gain_state{i + 1}"),
        gain_affine=MatrixTrajectory(grid, ga, name=f"gain_affine{i + 1}"),
        Delta=MatrixTrajectory(grid, Delta, name="Delta"), Sigma=Sigma, u2_affine=u2)


def solve_followers(spec, u2_affine=None, Sigma=None, threads=1):
    """Solve every follower; the problems are independent."""
    if Sigma is None:
        Sigma = solve_filter_covariance(spec)
    idx = range(spec.dims.N)
    if threads > 1 and spec.dims.N > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda i: solve_follower(spec, i, u2_affine, Sigma), idx))
    return [solve_follower(spec, i, u2_affine, Sigma) for i in idx]


def trapezoid(values, grid):
    v = np.asarray(values, dtype=float)
    return float(grid.dt * (v.sum() - 0.5 * (v[0] + v[-1])))


def follower_cost_integrand(spec, sol, u2_path):
    """Node values of the running part of the closed-form follower cost."""
    i = sol.index
    cost = spec.followers[i]
    out = np.empty(spec.grid.steps + 1)
    for k in range(spec.grid.steps + 1):
        P, Pi, phi = sol.P1i[k], sol.Pi1i[k], sol.phi1i[k]
        D = sol.Delta[k]
        C1, C2 = spec.C1.node(k), spec.C2.node(k)
        B = spec.B1[i].node(k)
        w = B.T @ phi + cost.r.node(k)
        v = (np.trace(D.T @ Pi @ D) + np.trace(C2.T @ Pi @ C2)
             - 2.0 * np.sum(D * sol.beta1[k])
             - w @ np.linalg.solve(cost.R.node(k), w)
             + np.trace((D + C1).T @ P @ (D + C1))
             + 2.0 * phi @ (spec.B2.node(k) @ u2_path[k] + spec.alpha.node(k))
             + 2.0 * np.sum(C2 * sol.beta2[k])
             + 2.0 * np.sum((D + C1) * sol.lambda1i[k]))
        out[k] = v
    return out


def follower_cost_closed_form(spec, sol, u2_path=None):
    """Optimal cost of follower ``sol.index`` against the deterministic leader path."""
    if sol.grid != spec.grid:
        raise GridMismatch("follower solution and spec use different grids")
    u2 = sol.u2_affine if u2_path is None else _deterministic_path(u2_path, spec, "u2_path")
    x0 = spec.x0
    head = x0 @ sol.P1i[0] @ x0 + 2.0 * sol.phi1i[0] @ x0
    return float(head + trapezoid(follower_cost_integrand(spec, sol, u2), spec.grid))
