"""Fixed-step RK4 for matrix ODEs, terminal-value Riccati and filter covariance.

All solvers work on the shared ``TimeGrid``; backward problems are integrated
in reversed time with a negative step.  Optional substeps subdivide a grid
interval without changing the output nodes (used for stiff boundary layers).
"""

import csv
import math

import numpy as np

from . import linalg
from .errors import NonFinite, SymmetryLoss
from .model import CoefficientFn

BLOWUP = 1e12


class MatrixTrajectory:
    """Node values of a matrix- or vector-valued path on a grid."""

    def __init__(self, grid, values, symmetric=False, name=""):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != grid.steps + 1:
            raise ValueError(f"{name}: {values.shape[0]} nodes for a {grid.steps}-step grid")
        if not np.all(np.isfinite(values)):
            raise NonFinite(f"{name}: non-finite values in trajectory")
        if symmetric:
            asym = np.linalg.norm(values - np.swapaxes(values, -1, -2), axis=(-2, -1))
            size = np.linalg.norm(values, axis=(-2, -1))
            if np.any(asym > 1e-9 * (1.0 + size)):
                k = int(np.argmax(asym - 1e-9 * (1.0 + size)))
                raise SymmetryLoss(f"{name}: symmetry residual {asym[k]:.3e} at node {k}")
        self.grid = grid
        self.values = values
        self.symmetric = symmetric
        self.name = name

    @property
    def shape(self):
        return self.values.shape[1:]

    def __getitem__(self, k):
        return self.values[k]

    def __len__(self):
        return self.values.shape[0]

    def __call__(self, t):
        k, w = self.grid.locate(t)
        if w == 0.0:
            return self.values[k]
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def as_fn(self):
        return CoefficientFn(self.values, self.grid)

    def to_csv(self, path):
        """Write long-format rows t,row,col,value (vectors use col 0)."""
        times = self.grid.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "row", "col", "value"])
            for k, t in enumerate(times):
                v = self.values[k]
                if v.ndim == 0:
                    w.writerow([repr(t), 0, 0, repr(float(v))])
                elif v.ndim == 1:
                    for r, x in enumerate(v):
                        w.writerow([repr(t), r, 0, repr(float(x))])
                else:
                    for r in range(v.shape[0]):
                        for c in range(v.shape[1]):
                            w.writerow([repr(t), r, c, repr(float(v[r, c]))])

    def __repr__(self):
        return f"MatrixTrajectory({self.name or 'unnamed'}, shape={self.shape})"


def as_fn(x, grid):
    """Accept a CoefficientFn, a MatrixTrajectory or a constant array."""
    if isinstance(x, CoefficientFn):
        return x
    if isinstance(x, MatrixTrajectory):
        return x.as_fn()
    return CoefficientFn.constant(np.asarray(x, dtype=float), grid)


def _rk4(rhs, t, M, h):
    k1 = rhs(t, M)
    k2 = rhs(t + 0.5 * h, M + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, M + 0.5 * h * k2)
    k4 = rhs(t + h, M + h * k3)
    return M + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_matrix_ode(rhs, boundary, direction, grid, substeps=None,
                         symmetric=False, name=""):
    """Classic RK4 on the grid.

    ``direction='forward'`` fixes values[0] = boundary, ``'backward'`` fixes
    values[-1] = boundary.  ``substeps`` is an int or a callable
    (t, M, h) -> int giving the number of RK4 substeps for the next interval.
    With ``symmetric=True`` iterates are re-symmetrized after every step.
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    M = np.array(boundary, dtype=float)
    out = np.empty((grid.steps + 1,) + M.shape)
    times = grid.times
    dt = grid.dt
    if direction == "forward":
        order = range(grid.steps)
        out[0] = M
        h = dt
    else:
        order = range(grid.steps, 0, -1)
        out[-1] = M
        h = -dt
    for k in order:
        t = times[k]
        if substeps is None:
            nsub = 1
        elif callable(substeps):
            nsub = max(1, int(substeps(t, M, h)))
        else:
            nsub = int(substeps)
        hs = h / nsub
        for s in range(nsub):
            M = _rk4(rhs, t + s * hs, M, hs)
            if symmetric:
                asym = np.linalg.norm(M - np.swapaxes(M, -1, -2))
                if asym > 1e-9 * (1.0 + np.linalg.norm(M)):
                    raise SymmetryLoss(f"{name}: asymmetric iterate near t={t:.6g}")
                M = linalg.sym(M)
        nxt = k + 1 if direction == "forward" else k - 1
        size = np.linalg.norm(M)
        if not np.isfinite(size) or size > BLOWUP:
            raise NonFinite(
                f"{name or 'ODE'}: solution escapes (norm {size:.3e}) near t={times[nxt]:.6g}",
                t=float(times[nxt]))
        out[nxt] = M
    return MatrixTrajectory(grid, out, symmetric=symmetric, name=name)


def riccati_rhs(A, B, S, R, Q):
    """Right-hand side of P' = -(A'P + PA - (PB + S')R^{-1}(B'P + S) + Q)."""
    def rhs(t, P):
        a, b, s, r, q = A(t), B(t), S(t), R(t), Q(t)
        K = np.linalg.solve(r, b.T @ P + s)
        return -(a.T @ P + P @ a - (P @ b + s.T) @ K + q)
    return rhs


def solve_terminal_riccati(A, B, S, R, Q, G, grid, name="P"):
    """Solve P' + A'P + PA - (PB + S')R^{-1}(B'P + S) + Q = 0, P(T) = G."""
    A, B, S, R, Q = (as_fn(x, grid) for x in (A, B, S, R, Q))
    for k in range(grid.steps + 1):
        linalg.check_cond(R.node(k), "R")
    G = np.asarray(G, dtype=float)
    return integrate_matrix_ode(riccati_rhs(A, B, S, R, Q), linalg.sym(G), "backward",
                                grid, symmetric=True, name=name)


def observation_gain(spec, Sigma_t, t):
    """Filter gain (Sigma f1' + C1 K1')(K1 K1')^{-1} of the follower filter."""
    f1, C1, K1 = spec.f1(t), spec.C1(t), spec.K1(t)
    return np.linalg.solve(K1 @ K1.T, (Sigma_t @ f1.T + C1 @ K1.T).T).T


def solve_filter_covariance(spec):
    """Error covariance of the follower filter: forward Riccati with zero start."""
    def rhs(t, S):
        f1, K1 = spec.f1(t), spec.K1(t)
        KK = K1 @ K1.T
        Af = spec.A(t) - spec.C1(t) @ np.linalg.solve(K1, f1)
        C2 = spec.C2(t)
        return Af @ S + S @ Af.T - S @ f1.T @ np.linalg.solve(KK, f1 @ S) + C2 @ C2.T

    n = spec.dims.n
    return integrate_matrix_ode(rhs, np.zeros((n, n)), "forward", spec.grid,
                                symmetric=True, name="Sigma")


def observed_order(errors, ratio=2.0):
    """Convergence orders between successive refinements."""
    e = np.asarray(errors, dtype=float)
    return np.log(e[:-1] / e[1:]) / math.log(ratio)
