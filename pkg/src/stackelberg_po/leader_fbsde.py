"""LQ control of a fully coupled forward-backward system, and the leader's problem.

The controlled system has a forward state X (dimension n), a stacked backward
state Y = (Y^1..Y^N) with integrands Z^j per Brownian channel j, control u and
cost

    1/2 E[ int X'A4X + Y'B4Y + sum_j Z^j'C4^j Z^j + u'D4u dt + X_T'G X_T + Y_0'H Y_0 ].

Three solution routes are provided.

* ``solve_definite_decoupling``: D4 > 0.  The Hamiltonian system is decoupled
  by a symmetric matrix Riccati equation for Q and an affine term.
* ``solve_riccati_stack``: any sign of D4.  (u, Z^j) is treated as the control
  of an enlarged forward system with state (X, Y) and free initial Y_0.  The
  terminal constraint Y_T = F X_T + xi is replaced by the penalty
  i|Y_T - F X_T - xi|^2; the penalized problems are standard forward LQ
  problems and their solutions are extrapolated to i -> infinity.
* ``solve_direct_p_system``: integrates the (P1, P2, P3, phi1, phi2) system of
  the decoupling ansatz m = P1 X + P2 h + phi1, Y = P2'X - P3 h + phi2
  directly.  It needs no inverse of P3 and is the route used when the
  enlarged problem has no positive definite control weight.

Zero-based follower indices are used throughout.
"""

import math
from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np

from . import linalg
from .errors import (GridMismatch, M1NotPD, NonFinite, P3Singular, PreconditionViolated,
                     RegularizationDiverged, ShapeMismatch, SingularIminusQC)
from .follower import trapezoid
from .odesolve import MatrixTrajectory, integrate_matrix_ode

DEFAULT_I_SEQUENCE = tuple(2 ** k for k in range(11))
STIFF_STEP = 0.02

# name -> (kind, shape builder); kind 'path' = time-dependent, 'chan' = per channel
_LAYOUT = {
    "A1": ("path", lambda n, m, Nn: (n, n)),
    "B1": ("path", lambda n, m, Nn: (Nn, n)),
    "C1": ("chan", lambda n, m, Nn: (Nn, n)),
    "D1": ("path", lambda n, m, Nn: (n, m)),
    "E1": ("path", lambda n, m, Nn: (n,)),
    "A2": ("chan", lambda n, m, Nn: (n, n)),
    "B2": ("chan", lambda n, m, Nn: (Nn, n)),
    "C2": ("chan", lambda n, m, Nn: (Nn, n)),
    "D2": ("chan", lambda n, m, Nn: (n, m)),
    "E2": ("chan", lambda n, m, Nn: (n,)),
    "A3": ("path", lambda n, m, Nn: (Nn, n)),
    "B3": ("path", lambda n, m, Nn: (Nn, Nn)),
    "C3": ("chan", lambda n, m, Nn: (Nn, Nn)),
    "D3": ("path", lambda n, m, Nn: (Nn, m)),
    "E3": ("path", lambda n, m, Nn: (Nn,)),
    "A4": ("path", lambda n, m, Nn: (n, n)),
    "B4": ("path", lambda n, m, Nn: (Nn, Nn)),
    "C4": ("chan", lambda n, m, Nn: (Nn, Nn)),
    "D4": ("path", lambda n, m, Nn: (m, m)),
}
_TERMINAL = {
    "G": lambda n, m, Nn: (n, n),
    "H": lambda n, m, Nn: (Nn, Nn),
    "F": lambda n, m, Nn: (Nn, n),
    "xi": lambda n, m, Nn: (Nn,),
}
# backward-state blocks that must be block diagonal over followers
_BLOCK_DIAGONAL = ("B3", "C3", "B4", "C4", "H")


def _fit(arr, full, name):
    """Accept full node samples, one constant value, or exact-size reshapes."""
    if arr.shape == full:
        return arr
    if arr.size == math.prod(full[1:]):
        return np.broadcast_to(arr.reshape(full[1:]), full).copy()
    if arr.size == math.prod(full):
        return arr.reshape(full).copy()
    raise ShapeMismatch(f"{name}: shape {arr.shape}, expected {full}")


class FbsdeLqProblem:
    """Coefficients of the coupled forward-backward LQ problem on a grid.

    Time-dependent blocks are arrays with a leading node axis; per-channel
    blocks carry a second axis of length l2.  ``N`` counts backward blocks of
    size n each.
    """

    def __init__(self, grid, x0, n, m, N, l2, **blocks):
        self.grid, self.n, self.m, self.N, self.l2 = grid, n, m, N, l2
        self.x0 = np.asarray(x0, dtype=float)
        Nn = N * n
        nodes = grid.steps + 1
        unknown = set(blocks) - set(_LAYOUT) - set(_TERMINAL)
        if unknown:
            raise ShapeMismatch(f"unknown blocks {sorted(unknown)}")
        for name, (kind, shp) in _LAYOUT.items():
            base = shp(n, m, Nn)
            full = (nodes, l2) + base if kind == "chan" else (nodes,) + base
            val = blocks.get(name)
            if val is None:
                arr = np.zeros(full)
            else:
                arr = _fit(np.asarray(val, dtype=float), full, name)
            setattr(self, name, arr)
        for name, shp in _TERMINAL.items():
            val = blocks.get(name)
            base = shp(n, m, Nn)
            arr = np.zeros(base) if val is None else np.asarray(val, dtype=float)
            if arr.size == math.prod(base):
                arr = arr.reshape(base)
            if arr.shape != base:
                raise ShapeMismatch(f"{name}: shape {arr.shape}, expected {base}")
            setattr(self, name, arr)
        if self.x0.shape != (n,):
            raise ShapeMismatch(f"x0: shape {self.x0.shape}, expected {(n,)}")
        for name in _BLOCK_DIAGONAL:
            arr = getattr(self, name)
            mask = np.kron(1.0 - np.eye(N), np.ones((n, n)))
            if np.any(arr * mask != 0.0):
                raise ShapeMismatch(f"{name} must be block diagonal over followers")

    @property
    def Nn(self):
        return self.N * self.n

    def node(self, k):
        return SimpleNamespace(**{name: getattr(self, name)[k] for name in _LAYOUT})

    def at(self, t):
        k, w = self.grid.locate(t)
        if w == 0.0:
            return self.node(k)
        return SimpleNamespace(**{
            name: (1.0 - w) * getattr(self, name)[k] + w * getattr(self, name)[k + 1]
            for name in _LAYOUT})

    def only_additive_noise(self):
        """True when the sole diffusion is the additive term E2."""
        return all(not np.any(getattr(self, name))
                   for name in ("A2", "B2", "C1", "C2", "C3", "C4", "D2"))


# ---------------------------------------------------------------------------
# mapping of the leader's reduced problem

def map_leader_problem(spec, followers, Sigma_tilde):
    """Coefficients of the leader's completely observed reduced problem.

    Forward state: the leader's filter of X.  Backward states: the leader's
    filters of the followers' adjoints.  The noise is the leader's innovation.
    """
    g = spec.grid
    if Sigma_tilde.grid != g or any(f.grid != g for f in followers):
        raise GridMismatch("followers, covariance and spec must share the grid")
    if np.any(spec.f1.samples) or np.any(spec.g1.samples):
        raise PreconditionViolated("leader mapping requires f1 = 0 and g1 = 0")
    lc = spec.leader
    if (np.any(lc.S.samples) or np.any(lc.q.samples) or np.any(lc.r.samples)
            or np.any(lc.g)):
        raise PreconditionViolated("leader mapping requires S2 = q2 = r2 = g2 = 0")
    n, m, N, l2 = spec.dims.n, spec.dims.m, spec.dims.N, spec.dims.l2
    Nn = N * n
    nodes = g.steps + 1
    A1 = np.empty((nodes, n, n))
    B1 = np.empty((nodes, Nn, n))
    E1 = np.empty((nodes, n))
    E2 = np.empty((nodes, l2, n))
    B3 = np.zeros((nodes, Nn, Nn))
    D3 = np.empty((nodes, Nn, m))
    E3 = np.empty((nodes, Nn))
    for k in range(nodes):
        A = spec.A.node(k)
        alpha = spec.alpha.node(k)
        A1[k] = A
        E1[k] = alpha
        for i, f in enumerate(followers):
            c = spec.followers[i]
            B = spec.B1[i].node(k)
            R = c.R.node(k)
            Ki = f.K(k)
            BRB = B @ np.linalg.solve(R, B.T)
            sl = slice(i * n, (i + 1) * n)
            A1[k] -= B @ Ki
            B1[k, sl] = -BRB
            E1[k] -= B @ np.linalg.solve(R, c.r.node(k))
            B3[k, sl, sl] = A - B @ Ki
            P = f.P1i[k]
            D3[k, sl] = P @ spec.B2.node(k)
            E3[k, sl] = P @ alpha + c.q.node(k) - Ki.T @ c.r.node(k)
        K2 = spec.K2.node(k)
        noise = (Sigma_tilde[k] @ spec.f2.node(k).T @ np.linalg.inv(K2.T)
                 + spec.C2.node(k))
        E2[k] = noise.T
    return FbsdeLqProblem(
        g, spec.x0, n, m, N, l2, A1=A1, B1=B1, D1=spec.B2.samples, E1=E1, E2=E2,
        B3=B3, D3=D3, E3=E3, A4=2.0 * lc.Q.samples, D4=2.0 * lc.R.samples,
        G=2.0 * lc.G, xi=np.concatenate([c.g for c in spec.followers]))


# ---------------------------------------------------------------------------
# enlarged forward system

@dataclass(eq=False)
class EnlargedSystem:
    """Forward LQ data for state (X, Y) and per-channel controls (u, Z^j).

    The control weight of u is split evenly over the l2 channels so that the
    total weight equals D4 when every channel uses the same u.
    """
    grid: object
    At: np.ndarray      # (nodes, K, K)
    Bt: np.ndarray      # (nodes, l2, K, m+Nn)
    Ct: np.ndarray      # (nodes, l2, K, K)
    Dt: np.ndarray      # (nodes, l2, K, m+Nn)
    Et: np.ndarray      # (nodes, K)
    EEt: np.ndarray     # (nodes, l2, K)
    Qt: np.ndarray      # (nodes, K, K)
    Rt: np.ndarray      # (nodes, l2, m+Nn, m+Nn)
    n: int
    m: int
    Nn: int

    @property
    def K(self):
        return self.n + self.Nn

    def augmented(self, k):
        """Homogenized blocks for the state (X, Y, 1) at node k."""
        return _augment(self.At[k], self.Bt[k], self.Ct[k], self.Dt[k], self.Et[k],
                        self.EEt[k], self.Qt[k])


def _augment(At, Bt, Ct, Dt, Et, EEt, Qt):
    K = At.shape[0]
    l2, _, p = Bt.shape
    Ab = np.zeros((K + 1, K + 1))
    Ab[:K, :K] = At
    Ab[:K, K] = Et
    Bb = np.zeros((l2, K + 1, p))
    Bb[:, :K] = Bt
    Cb = np.zeros((l2, K + 1, K + 1))
    Cb[:, :K, :K] = Ct
    Cb[:, :K, K] = EEt
    Db = np.zeros((l2, K + 1, p))
    Db[:, :K] = Dt
    Qb = np.zeros((K + 1, K + 1))
    Qb[:K, :K] = Qt
    return Ab, Bb, Cb, Db, Qb


def build_enlarged_system(p):
    n, m, Nn, l2 = p.n, p.m, p.Nn, p.l2
    if l2 > 1 and np.any(p.D2):
        raise PreconditionViolated(
            "the enlarged system splits u across channels; this needs D2 = 0 when l2 > 1")
    nodes = p.grid.steps + 1
    K = n + Nn
    q = m + Nn
    At = np.zeros((nodes, K, K))
    At[:, :n, :n] = p.A1
    At[:, :n, n:] = np.swapaxes(p.B1, 1, 2)
    At[:, n:, :n] = -p.A3
    At[:, n:, n:] = -np.swapaxes(p.B3, 1, 2)
    Bt = np.zeros((nodes, l2, K, q))
    Bt[:, :, :n, :m] = p.D1[:, None] / l2
    Bt[:, :, :n, m:] = np.swapaxes(p.C1, 2, 3)
    Bt[:, :, n:, :m] = -p.D3[:, None] / l2
    Bt[:, :, n:, m:] = -np.swapaxes(p.C3, 2, 3)
    Ct = np.zeros((nodes, l2, K, K))
    Ct[:, :, :n, :n] = p.A2
    Ct[:, :, :n, n:] = np.swapaxes(p.B2, 2, 3)
    Dt = np.zeros((nodes, l2, K, q))
    Dt[:, :, :n, :m] = p.D2
    Dt[:, :, :n, m:] = np.swapaxes(p.C2, 2, 3)
    Dt[:, :, n:, m:] = np.eye(Nn)
    Et = np.concatenate([p.E1, -p.E3], axis=1)
    EEt = np.concatenate([p.E2, np.zeros((nodes, l2, Nn))], axis=2)
    Qt = np.zeros((nodes, K, K))
    Qt[:, :n, :n] = p.A4
    Qt[:, n:, n:] = p.B4
    Rt = np.zeros((nodes, l2, q, q))
    Rt[:, :, :m, :m] = p.D4[:, None] / l2
    Rt[:, :, m:, m:] = p.C4
    es = EnlargedSystem(p.grid, At, Bt, Ct, Dt, Et, EEt, Qt, Rt, n, m, Nn)
    if Dt.shape[-1] != Rt.shape[-1] or At.shape[-1] != Ct.shape[-1]:
        raise ShapeMismatch("inconsistent enlarged blocks")
    return es


# ---------------------------------------------------------------------------
# L / S matrices of the decoupling ansatz

def l_matrices(c, P1, P2, P3, phi1, phi2):
    """Feedback representation of (u, n^j, Z^j) in terms of (X, h).

    ``c`` holds the coefficients at one time.  Returns a namespace with
    L1..L11, S1..S5 (per-channel entries as lists).
    """
    l2 = c.C1.shape[0]
    Nn = P3.shape[0]
    n = P1.shape[0]
    I_Nn = np.eye(Nn)
    I_n = np.eye(n)
    L1, L2, L3, L4, S1, S2 = [], [], [], [], [], []
    L1inv = []
    for j in range(l2):
        A2, B2, C1, C2 = c.A2[j], c.B2[j], c.C1[j], c.C2[j]
        C3, C4, E2 = c.C3[j], c.C4[j], c.E2[j]
        l1 = I_Nn - P2.T @ C2.T + P3 @ C4
        l1i = linalg.inv(l1, "L1")
        W = (P1 @ C2.T + P2 @ C4) @ l1i
        L1.append(l1)
        L1inv.append(l1i)
        L2.append(I_n + W @ P3 @ C2 - P2 @ C2)
        L3.append(P1 @ A2 + P1 @ B2.T @ P2.T + P2 @ C1 @ P1
                  + W @ (P2.T @ A2 + P2.T @ B2.T @ P2.T - P3 @ C1 @ P1))
        L4.append(-P1 @ B2.T @ P3 + W @ (-P2.T @ B2.T @ P3 - P3 @ C3 - P3 @ C1 @ P2)
                  + P2 @ C3 + P2 @ C1 @ P2)
        S1.append(W @ P2.T + P1)
        S2.append((P1 @ B2.T + W @ P2.T @ B2.T) @ phi2
                  + (-W @ P3 @ C1 + P2 @ C1) @ phi1 + W @ P2.T @ E2 + P1 @ E2)
    L2inv = [linalg.inv(x, "L2") for x in L2]
    D2 = c.D2
    L5 = c.D4 + sum(D2[j].T @ L2inv[j] @ S1[j] @ D2[j] for j in range(l2))
    L5i = linalg.inv(L5, "L5")
    L6 = -L5i @ (sum(D2[j].T @ L2inv[j] @ L3[j] for j in range(l2)) + c.D1.T @ P1)
    L7 = -L5i @ (c.D3.T + sum(D2[j].T @ L2inv[j] @ L4[j] for j in range(l2))
                 + c.D1.T @ P2)
    S3 = -L5i @ (c.D1.T @ phi1 + sum(D2[j].T @ L2inv[j] @ S2[j] for j in range(l2)))
    L8, L9, L10, L11, S4, S5 = [], [], [], [], [], []
    for j in range(l2):
        A2, B2, C1, C2, C3, E2 = c.A2[j], c.B2[j], c.C1[j], c.C2[j], c.C3[j], c.E2[j]
        l8 = L2inv[j] @ (L3[j] + S1[j] @ D2[j] @ L6)
        l9 = L2inv[j] @ (L4[j] + S1[j] @ D2[j] @ L7)
        s4 = L2inv[j] @ (S1[j] @ D2[j] @ S3 + S2[j])
        L8.append(l8)
        L9.append(l9)
        S4.append(s4)
        L10.append(L1inv[j] @ (P2.T @ A2 + P2.T @ B2.T @ P2.T + P2.T @ D2[j] @ L6
                               - P3 @ C1 @ P1 - P3 @ C2 @ l8))
        L11.append(L1inv[j] @ (-P2.T @ B2.T @ P3 + P2.T @ D2[j] @ L7 - P3 @ C3
                               - P3 @ C1 @ P2 - P3 @ C2 @ l9))
        S5.append(L1inv[j] @ (P2.T @ B2.T @ phi2 + P2.T @ D2[j] @ S3 + P2.T @ E2
                              - P3 @ C1 @ phi1 - P3 @ C2 @ s4))
    return SimpleNamespace(L1=L1, L2=L2, L3=L3, L4=L4, L5=L5, L6=L6, L7=L7, L8=L8,
                           L9=L9, L10=L10, L11=L11, S1=S1, S2=S2, S3=S3, S4=S4, S5=S5)


def p_system_rhs(c, P1, P2, P3, phi1, phi2, L=None):
    """Time derivatives of (P1, P2, P3, phi1, phi2) and of P2' (redundant check)."""
    if L is None:
        L = l_matrices(c, P1, P2, P3, phi1, phi2)
    l2 = len(L.L1)
    A1, B1, D1, E1 = c.A1, c.B1, c.D1, c.E1
    A3, B3, D3, E3, B4 = c.A3, c.B3, c.D3, c.E3, c.B4
    sC1L10 = sum(c.C1[j].T @ L.L10[j] for j in range(l2))
    sC1L11 = sum(c.C1[j].T @ L.L11[j] for j in range(l2))
    sC1S5 = sum(c.C1[j].T @ L.S5[j] for j in range(l2))
    sYL10 = sum((P2.T @ c.C1[j].T + c.C3[j].T) @ L.L10[j] for j in range(l2))
    sYL11 = sum((P2.T @ c.C1[j].T + c.C3[j].T) @ L.L11[j] for j in range(l2))
    sYS5 = sum((P2.T @ c.C1[j].T + c.C3[j].T) @ L.S5[j] for j in range(l2))
    sB2L8 = sum(c.B2[j] @ L.L8[j] for j in range(l2))
    sB2L9 = sum(c.B2[j] @ L.L9[j] for j in range(l2))
    sB2S4 = sum(c.B2[j] @ L.S4[j] for j in range(l2))
    sML8 = sum((P2 @ c.B2[j] + c.A2[j].T) @ L.L8[j] for j in range(l2))
    sML9 = sum((P2 @ c.B2[j] + c.A2[j].T) @ L.L9[j] for j in range(l2))
    sMS4 = sum((P2 @ c.B2[j] + c.A2[j].T) @ L.S4[j] for j in range(l2))
    dP1 = -(P1 @ (A1 + B1.T @ P2.T) + P2 @ B4 @ P2.T + P1 @ sC1L10 + P1 @ D1 @ L.L6
            + (P2 @ B1 + A1.T) @ P1 + sML8 + c.A4)
    dP2 = -(-(P1 @ B1.T + P2 @ B4) @ P3 + P1 @ sC1L11 + P1 @ D1 @ L.L7 + P2 @ B3
            + (P2 @ B1 + A1.T) @ P2 + sML9 + A3.T)
    dP3 = -(P2.T @ B1.T @ P3 - sYL11 - (P2.T @ D1 + D3) @ L.L7 + P3 @ B3
            + P3 @ B1 @ P2 + P3 @ sB2L9 - P3 @ B4 @ P3 + B3.T @ P3)
    dP2T = -(P2.T @ (A1 + B1.T @ P2.T) + sYL10 + (P2.T @ D1 + D3) @ L.L6
             - P3 @ (B1 @ P1 + B4 @ P2.T) - P3 @ sB2L8 + A3 + B3.T @ P2.T)
    dphi1 = -((P1 @ B1.T + P2 @ B4) @ phi2 + (P2 @ B1 + A1.T) @ phi1 + P1 @ sC1S5
              + P1 @ D1 @ L.S3 + P1 @ E1 + sMS4)
    dphi2 = -((P2.T @ B1.T - P3 @ B4 + B3.T) @ phi2 - P3 @ B1 @ phi1 + sYS5
              + (P2.T @ D1 + D3) @ L.S3 + P2.T @ E1 - P3 @ sB2S4 + E3)
    return dP1, dP2, dP3, dphi1, dphi2, dP2T


# ---------------------------------------------------------------------------
# solution container

@dataclass(eq=False)
class LeaderRiccatiStack:
    route: str
    problem: FbsdeLqProblem
    P1: MatrixTrajectory
    P2: MatrixTrajectory
    P3: MatrixTrajectory
    phi1: MatrixTrajectory
    phi2: MatrixTrajectory
    Lmats: dict
    Smats: dict
    V1: np.ndarray
    V2: np.ndarray
    tildeP: MatrixTrajectory = None
    Mmats: dict = field(default_factory=dict)
    Nmats: dict = field(default_factory=dict)
    tilde_phi: np.ndarray = None
    tilde_V: np.ndarray = None
    gamma_tilde: np.ndarray = None
    value: float = None
    value_per_index: dict = field(default_factory=dict)
    per_index: dict = field(default_factory=dict)
    report: list = field(default_factory=list)
    enlarged: EnlargedSystem = None
    i_max: int = None

    @property
    def grid(self):
        return self.problem.grid

    def summary(self):
        P1 = self.P1.values
        P3 = self.P3.values
        ev1 = np.linalg.eigvalsh(0.5 * (P1 + np.swapaxes(P1, 1, 2)))
        ev3 = np.linalg.eigvalsh(0.5 * (P3 + np.swapaxes(P3, 1, 2)))
        return {
            "route": self.route,
            "convergence": self.report,
            "P1_eig_range": [float(ev1.min()), float(ev1.max())],
            "P3_eig_range": [float(ev3.min()), float(ev3.max())],
            "P3_eig_min_before_T": float(ev3[:-1].min()),
        }


def _derived(p, P1, P2, P3, phi1, phi2):
    """L, S and N trajectories on the grid from (P1, P2, P3, phi1, phi2)."""
    nodes = p.grid.steps + 1
    Lm = {k: [] for k in ("L1", "L2", "L3", "L4", "L5", "L6", "L7", "L8", "L9", "L10",
                          "L11")}
    Sm = {k: [] for k in ("S1", "S2", "S3", "S4", "S5")}
    Nm = {f"N{k}": [] for k in range(1, 13)}
    for k in range(nodes):
        c = p.node(k)
        L = l_matrices(c, P1[k], P2[k], P3[k], phi1[k], phi2[k])
        for name in Lm:
            v = getattr(L, name)
            Lm[name].append(np.array(v))
        for name in Sm:
            v = getattr(L, name)
            Sm[name].append(np.array(v))
        for name, v in _n_matrices(c, L, P1[k], P2[k], P3[k], phi1[k], phi2[k]).items():
            Nm[name].append(v)
    return ({k: np.array(v) for k, v in Lm.items()}, {k: np.array(v) for k, v in Sm.items()},
            {k: np.array(v) for k, v in Nm.items()})


def _n_matrices(c, L, P1, P2, P3, phi1, phi2):
    """Closed-loop coefficients of (X, h) under the feedback (u, n, Z)."""
    l2 = len(L.L1)
    rng = range(l2)
    out = {
        "N1": c.A1 + c.B1.T @ P2.T + sum(c.C1[j].T @ L.L10[j] for j in rng) + c.D1 @ L.L6,
        "N2": -c.B1.T @ P3 + sum(c.C1[j].T @ L.L11[j] for j in rng) + c.D1 @ L.L7,
        "N3": c.B1.T @ phi2 + sum(c.C1[j].T @ L.S5[j] for j in rng) + c.E1 + c.D1 @ L.S3,
        "N4": np.array([c.A2[j] + c.B2[j].T @ P2.T + c.C2[j].T @ L.L10[j] + c.D2[j] @ L.L6
                        for j in rng]),
        "N5": np.array([-c.B2[j].T @ P3 + c.C2[j].T @ L.L11[j] + c.D2[j] @ L.L7
                        for j in rng]),
        "N6": np.array([c.B2[j].T @ phi2 + c.C2[j].T @ L.S5[j] + c.D2[j] @ L.S3 + c.E2[j]
                        for j in rng]),
        "N7": c.B1 @ P1 + sum(c.B2[j] @ L.L8[j] for j in rng) + c.B4 @ P2.T,
        "N8": c.B3 + c.B1 @ P2 + sum(c.B2[j] @ L.L9[j] for j in rng) - c.B4 @ P3,
        "N9": c.B1 @ phi1 + sum(c.B2[j] @ L.S4[j] for j in rng) + c.B4 @ phi2,
        "N10": np.array([c.C1[j] @ P1 + c.C2[j] @ L.L8[j] + c.C4[j] @ L.L10[j] for j in rng]),
        "N11": np.array([c.C3[j] + c.C1[j] @ P2 + c.C2[j] @ L.L9[j] + c.C4[j] @ L.L11[j]
                         for j in rng]),
        "N12": np.array([c.C1[j] @ phi1 + c.C2[j] @ L.S4[j] + c.C4[j] @ L.S5[j]
                         for j in rng]),
    }
    return out


def _traj(p, values, name, symmetric=False):
    return MatrixTrajectory(p.grid, values, symmetric=symmetric, name=name)


# ---------------------------------------------------------------------------
# direct P-system route

def _pack(P1, P2, P3, phi1, phi2):
    return np.concatenate([P1.ravel(), P2.ravel(), P3.ravel(), phi1, phi2])


def _unpack(v, n, Nn):
    o = 0
    P1 = v[o:o + n * n].reshape(n, n)
    o += n * n
    P2 = v[o:o + n * Nn].reshape(n, Nn)
    o += n * Nn
    P3 = v[o:o + Nn * Nn].reshape(Nn, Nn)
    o += Nn * Nn
    phi1 = v[o:o + n]
    o += n
    return P1, P2, P3, phi1, v[o:o + Nn]


def _p_system(p, p3_terminal):
    n, Nn = p.n, p.Nn

    def rhs(t, v):
        P1, P2, P3, phi1, phi2 = _unpack(v, n, Nn)
        P1 = linalg.sym(P1)
        P3 = linalg.sym(P3)
        d = p_system_rhs(p.at(t), P1, P2, P3, phi1, phi2)
        return _pack(linalg.sym(d[0]), d[1], linalg.sym(d[2]), d[3], d[4])

    term = _pack(p.G, p.F.T, p3_terminal * np.eye(Nn), np.zeros(n), p.xi)
    traj = integrate_matrix_ode(rhs, term, "backward", p.grid, name="P-system")
    nodes = p.grid.steps + 1
    P1 = np.empty((nodes, n, n))
    P2 = np.empty((nodes, n, Nn))
    P3 = np.empty((nodes, Nn, Nn))
    phi1 = np.empty((nodes, n))
    phi2 = np.empty((nodes, Nn))
    for k in range(nodes):
        a, b, c3, d1, d2 = _unpack(traj[k], n, Nn)
        P1[k], P2[k], P3[k], phi1[k], phi2[k] = linalg.sym(a), b, linalg.sym(c3), d1, d2
    return P1, P2, P3, phi1, phi2


def solve_direct_p_system(p, p3_terminal=0.0):
    """Integrate the P-system backward; ``p3_terminal`` sets P3(T) = p3_terminal*I."""
    P1, P2, P3, phi1, phi2 = _p_system(p, p3_terminal)
    Lm, Sm, Nm = _derived(p, P1, P2, P3, phi1, phi2)
    nodes = p.grid.steps + 1
    return LeaderRiccatiStack(
        route="direct", problem=p, P1=_traj(p, P1, "P1", True), P2=_traj(p, P2, "P2"),
        P3=_traj(p, P3, "P3", True), phi1=_traj(p, phi1, "phi1"),
        phi2=_traj(p, phi2, "phi2"), Lmats=Lm, Smats=Sm, Nmats=Nm,
        V1=np.zeros((nodes, p.l2, p.n)), V2=np.zeros((nodes, p.l2, p.Nn)))


def p2_transpose_residual(stack):
    """Max-node mismatch between the P2' equation and the derivative of P2'.

    The P2' equation is implied by the others; its residual is an independent
    consistency check (central differences at interior nodes).
    """
    p = stack.problem
    dt = p.grid.dt
    worst = 0.0
    scale = max(1.0, np.abs(stack.P2.values).max())
    for k in range(1, p.grid.steps):
        c = p.node(k)
        d = p_system_rhs(c, stack.P1[k], stack.P2[k], stack.P3[k], stack.phi1[k],
                         stack.phi2[k])
        fd = (stack.P2[k + 1] - stack.P2[k - 1]).T / (2 * dt)
        worst = max(worst, np.abs(fd - d[5]).max() / scale)
    return worst


# ---------------------------------------------------------------------------
# penalized enlarged-system route

def _stack_rhs(es, t_to_k):
    """Riccati right-hand side for the homogenized value matrix."""
    def blocks(t):
        k, w = es.grid.locate(t)
        if w == 0.0:
            return (es.augmented(k), es.Rt[k])
        a0, r0 = es.augmented(k), es.Rt[k]
        a1, r1 = es.augmented(k + 1), es.Rt[k + 1]
        return (tuple((1 - w) * x + w * y for x, y in zip(a0, a1)), (1 - w) * r0 + w * r1)

    cache = {}

    def get(t):
        key = round(t, 14)
        if key not in cache:
            if len(cache) > 64:
                cache.clear()
            cache[key] = blocks(t)
        return cache[key]

    def gains(t, P):
        (Ab, Bb, Cb, Db, Qb), Rt = get(t)
        l2 = Bb.shape[0]
        Ks, M1s, M2s = [], [], []
        for j in range(l2):
            M1 = Rt[j] + Db[j].T @ P @ Db[j]
            M2 = Bb[j].T @ P + Db[j].T @ P @ Cb[j]
            try:
                L = np.linalg.cholesky(linalg.sym(M1))
            except np.linalg.LinAlgError:
                raise M1NotPD(f"M1 not positive definite near t={t:.6g}") from None
            Kj = np.linalg.solve(L.T, np.linalg.solve(L, M2))
            Ks.append(Kj)
            M1s.append(M1)
            M2s.append(M2)
        return Ks, M1s, M2s

    def rhs(t, P):
        (Ab, Bb, Cb, Db, Qb), Rt = get(t)
        Ks, _, M2s = gains(t, P)
        out = P @ Ab + Ab.T @ P + Qb
        for j in range(Bb.shape[0]):
            out += Cb[j].T @ P @ Cb[j] - M2s[j].T @ Ks[j]
        return -linalg.sym(out)

    def substeps(t, P, h):
        (Ab, Bb, Cb, Db, Qb), Rt = get(t)
        Ks, _, _ = gains(t, P)
        Acl = Ab.copy()
        rho = 0.0
        for j in range(Bb.shape[0]):
            Acl -= Bb[j] @ Ks[j]
            rho += np.linalg.norm(Cb[j] - Db[j] @ Ks[j]) ** 2
        rho += 2.0 * np.linalg.norm(Acl)
        return math.ceil(abs(h) * rho / STIFF_STEP)

    return rhs, substeps, gains


def _terminal_value(p, i):
    n, Nn = p.n, p.Nn
    W = np.concatenate([-p.F, np.eye(Nn), -p.xi[:, None]], axis=1)
    Pb = i * W.T @ W
    Pb[:n, :n] += p.G
    return linalg.sym(Pb)


def _recover(Pb, n, Nn):
    """Blocks (P1, P2, P3, phi1, phi2) from the homogenized value matrix."""
    K = n + Nn
    Pxx, Pxy, Pyy = Pb[:n, :n], Pb[:n, n:K], Pb[n:K, n:K]
    psi_x, psi_y = Pb[:n, K], Pb[n:K, K]
    P3 = linalg.inv(Pyy, "tildeP3")
    P3 = linalg.sym(P3)
    P2 = -Pxy @ P3
    P1 = linalg.sym(Pxx - P2 @ Pyy @ P2.T)
    phi1 = psi_x + P2 @ psi_y
    phi2 = -P3 @ psi_y
    return P1, P2, P3, phi1, phi2


def recovery_residual(Pt, P1, P2, P3):
    """Relative mismatch of the block recovery identities at one node."""
    n = P1.shape[0]
    Pyy = Pt[n:, n:]
    Pxy = Pt[:n, n:]
    Pxx = Pt[:n, :n]
    P3i = np.linalg.inv(P3)
    rebuilt = np.block([[P1 + P2 @ P3i @ P2.T, -P2 @ P3i], [-P3i @ P2.T, P3i]])
    target = np.block([[Pxx, Pxy], [Pxy.T, Pyy]])
    return float(np.linalg.norm(rebuilt - target) / max(1.0, np.linalg.norm(target)))


def _initial_value(Pb, x0, H, n, Nn):
    """min over Y0 of (x0, Y0, 1)' Pb (x0, Y0, 1) + Y0' H Y0."""
    K = n + Nn
    Pxx, Pxy, Pyy = Pb[:n, :n], Pb[:n, n:K], Pb[n:K, n:K]
    psi_x, psi_y, c = Pb[:n, K], Pb[n:K, K], Pb[K, K]
    b = Pxy.T @ x0 + psi_y
    M = Pyy + H
    return float(x0 @ Pxx @ x0 + 2 * psi_x @ x0 + c - b @ np.linalg.solve(M, b))


def richardson(seq):
    """Eliminate the 1/i and 1/i^2 terms from values at i/4, i/2, i."""
    a4, a2, a1 = seq
    return (8.0 * a1 - 6.0 * a2 + a4) / 3.0


def _solve_one_index(es, p, i):
    rhs, substeps, _ = _stack_rhs(es, None)
    Pb = integrate_matrix_ode(rhs, _terminal_value(p, i), "backward", p.grid,
                              substeps=substeps, symmetric=True, name=f"tildeP[i={i}]")
    n, Nn = p.n, p.Nn
    nodes = p.grid.steps + 1
    out = {k: [] for k in ("P1", "P2", "P3", "phi1", "phi2")}
    rec = 0.0
    for k in range(nodes):
        blocks = _recover(Pb[k], n, Nn)
        for name, v in zip(("P1", "P2", "P3", "phi1", "phi2"), blocks):
            out[name].append(v)
        rec = max(rec, recovery_residual(Pb[k][:n + Nn, :n + Nn], *blocks[:3]))
    out = {k: np.array(v) for k, v in out.items()}
    out["value"] = _initial_value(Pb[0], p.x0, p.H, n, Nn)
    out["recovery_residual"] = rec
    out["tildeP"] = Pb
    return out


def _rel_change(a, b):
    num = max(np.abs(a[k] - b[k]).max() for k in ("P1", "P2", "P3"))
    den = max(np.abs(a[k]).max() for k in ("P1", "P2", "P3"))
    return float(num / max(den, 1e-300))


def solve_riccati_stack(es, p, i_sequence=DEFAULT_I_SEQUENCE, threads=1, tol=1e-6):
    """Penalized enlarged-system Riccati solves, block recovery and extrapolation."""
    seq = sorted(int(i) for i in i_sequence)
    if len(seq) < 3:
        raise ValueError("need at least three regularization indices")
    if any(b != 2 * a for a, b in zip(seq, seq[1:])):
        raise ValueError("regularization indices must double")
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as ex:
            sols = list(ex.map(lambda i: _solve_one_index(es, p, i), seq))
    else:
        sols = [_solve_one_index(es, p, i) for i in seq]
    per = dict(zip(seq, sols))
    names = ("P1", "P2", "P3", "phi1", "phi2", "value")
    extrap = {}
    for a, b, c in zip(seq, seq[1:], seq[2:]):
        extrap[c] = {k: richardson((per[a][k], per[b][k], per[c][k])) for k in names}
    report = []
    prev_raw = prev_ex = None
    for i in seq:
        entry = {"i": i, "recovery_residual": per[i]["recovery_residual"],
                 "value": per[i]["value"]}
        if prev_raw is not None:
            entry["raw_rel_change"] = _rel_change(per[i], prev_raw)
        if i in extrap:
            entry["extrapolated_value"] = float(extrap[i]["value"])
            if prev_ex is not None:
                entry["rel_change"] = _rel_change(extrap[i], prev_ex)
            prev_ex = extrap[i]
        prev_raw = per[i]
        report.append(entry)
    changes = [e["rel_change"] for e in report if "rel_change" in e]
    final3 = changes[-3:]
    monotone = len(final3) == 3 and final3[0] > final3[1] > final3[2]
    if changes and not monotone and changes[-1] >= tol:
        raise RegularizationDiverged(
            f"relative changes {final3} do not decrease towards zero")
    imax = seq[-1]
    lim = extrap[imax]
    P1, P2, P3 = lim["P1"], lim["P2"], lim["P3"]
    P1 = linalg.sym(P1)
    P3 = linalg.sym(P3)
    phi1, phi2 = lim["phi1"], lim["phi2"]
    Lm, Sm, Nm = _derived(p, P1, P2, P3, phi1, phi2)
    Mm, tphi, gam = _m_matrices(es, p, per[imax]["tildeP"])
    nodes = p.grid.steps + 1
    stack = LeaderRiccatiStack(
        route="regularized", problem=p, P1=_traj(p, P1, "P1", True), P2=_traj(p, P2, "P2"),
        P3=_traj(p, P3, "P3", True), phi1=_traj(p, phi1, "phi1"),
        phi2=_traj(p, phi2, "phi2"), Lmats=Lm, Smats=Sm, Nmats=Nm,
        V1=np.zeros((nodes, p.l2, p.n)), V2=np.zeros((nodes, p.l2, p.Nn)),
        tildeP=_traj(p, per[imax]["tildeP"][:, :p.n + p.Nn, :p.n + p.Nn], "tildeP", True),
        Mmats=Mm, tilde_phi=tphi, tilde_V=np.zeros((nodes, p.l2, p.n + p.Nn)),
        gamma_tilde=gam, value=float(lim["value"]),
        value_per_index={i: per[i]["value"] for i in seq}, per_index=per, report=report,
        enlarged=es, i_max=imax)
    stack.report_summary = {"monotone_final3": monotone,
                            "final_rel_change": changes[-1] if changes else None}
    return stack


def _m_matrices(es, p, Pbar):
    """M1..M4, M5, tilde_phi and its rate at the largest penalty index."""
    rhs, _, gains = _stack_rhs(es, None)
    n, Nn = p.n, p.Nn
    K = n + Nn
    nodes = p.grid.steps + 1
    times = p.grid.times
    M1, M2, M3, M4, M5 = [], [], [], [], []
    tphi = np.empty((nodes, K))
    rate = np.empty((nodes, K))
    for k in range(nodes):
        Pb = Pbar[k]
        Ks, m1, m2 = gains(times[k], Pb)
        Pt = Pb[:K, :K]
        M1.append(np.array(m1))
        M2.append(np.array([x[:, :K] for x in m2]))
        M3.append(np.array([es.Bt[k, j].T @ Pt for j in range(p.l2)]))
        M4.append(np.array([es.Dt[k, j].T @ Pt for j in range(p.l2)]))
        dPb = rhs(times[k], Pb)
        psi = Pb[:K, K]
        ph = -np.linalg.solve(Pt, psi)
        dPt = dPb[:K, :K]
        dpsi = dPb[:K, K]
        dc = dPb[K, K]
        tphi[k] = ph
        rate[k] = -np.linalg.solve(Pt, dPt @ ph + dpsi)
        # constant-term density: c(0) - phi'P phi(0) = int M5
        M5.append(-dc - 2.0 * ph @ dpsi - ph @ dPt @ ph)
    Mm = {"M1": np.array(M1), "M2": np.array(M2), "M3": np.array(M3), "M4": np.array(M4),
          "M5": np.array(M5)}
    return Mm, tphi, rate


def gain_relation_residual(stack, index=None):
    """Max-node mismatch between M1^{-1}M2 and its L-matrix representation.

    Evaluated with the value matrix and the recovered blocks of one penalty
    index (default: the largest), where every quantity is finite.
    """
    if stack.route != "regularized":
        raise PreconditionViolated("the M-matrices exist only on the penalized route")
    p = stack.problem
    es = stack.enlarged
    i = stack.i_max if index is None else index
    sol = stack.per_index[i]
    _, _, gains = _stack_rhs(es, None)
    n, Nn = p.n, p.Nn
    K = n + Nn
    worst = 0.0
    times = p.grid.times
    for k in range(p.grid.steps + 1):
        Pb = sol["tildeP"][k]
        Ks, _, _ = gains(times[k], Pb)
        P1, P2, P3 = sol["P1"][k], sol["P2"][k], sol["P3"][k]
        L = l_matrices(p.node(k), P1, P2, P3, sol["phi1"][k], sol["phi2"][k])
        P3i = np.linalg.inv(P3)
        for j in range(p.l2):
            # the u-rows of each channel carry 1/l2 of the common control
            rep = -np.block([[L.L6 + L.L7 @ P3i @ P2.T, -L.L7 @ P3i],
                             [L.L10[j] + L.L11[j] @ P3i @ P2.T, -L.L11[j] @ P3i]])
            got = Ks[j][:, :K]
            worst = max(worst, np.abs(got - rep).max() / max(1.0, np.abs(rep).max()))
    return worst


def corrupt_check_gain_relation(stack, index, P2_override):
    """Residual of the relation when the recovered P2 is replaced (fault injection)."""
    sol = dict(stack.per_index[index])
    sol["P2"] = P2_override
    clone = replace(stack, per_index={**stack.per_index, index: sol})
    return gain_relation_residual(clone, index)


# ---------------------------------------------------------------------------
# definite case

@dataclass(eq=False)
class DefiniteDecoupling:
    Q: MatrixTrajectory
    phi: MatrixTrajectory
    k: np.ndarray
    J: np.ndarray
    I: np.ndarray
    gain_x: np.ndarray
    gain_h: np.ndarray
    affine: np.ndarray
    hamiltonian: SimpleNamespace


def hamiltonian_blocks(c, n, Nn):
    """Blocks of the Hamiltonian forward-backward system at one time (D4 > 0)."""
    D4i = linalg.inv(c.D4, "D4")
    l2 = c.C1.shape[0]
    Z = np.zeros
    A1t = np.block([[c.A1, -c.D1 @ D4i @ c.D3.T], [Z((Nn, n)), c.B3]])
    B1t = np.block([[-c.D1 @ D4i @ c.D1.T, c.B1.T], [c.B1, c.B4]])
    A3t = np.block([[c.A4, c.A3.T], [c.A3, -c.D3 @ D4i @ c.D3.T]])
    C1t, A2t, B2t, C2t = [], [], [], []
    for j in range(l2):
        C1t.append(np.block([[-c.D1 @ D4i @ c.D2[j].T, c.C1[j].T], [c.B2[j], Z((Nn, Nn))]]))
        A2t.append(np.block([[c.A2[j], -c.D2[j] @ D4i @ c.D3.T], [Z((Nn, n)), c.C3[j]]]))
        B2t.append(np.block([[-c.D2[j] @ D4i @ c.D1.T, c.B2[j].T], [c.C1[j], Z((Nn, Nn))]]))
        C2t.append(np.block([[-c.D2[j] @ D4i @ c.D2[j].T, c.C2[j].T], [c.C2[j], c.C4[j]]]))
    E1t = np.concatenate([c.E1, Z(Nn)])
    E2t = [np.concatenate([c.E2[j], Z(Nn)]) for j in range(l2)]
    E3t = np.concatenate([Z(n), c.E3])
    return SimpleNamespace(A1=A1t, B1=B1t, A3=A3t, C1=C1t, A2=A2t, B2=B2t, C2=C2t,
                           E1=E1t, E2=E2t, E3=E3t, D4i=D4i)


def _iqc_inv(Q, C2t, t):
    M = np.eye(Q.shape[0]) - Q @ C2t
    c = np.linalg.cond(M)
    if not np.isfinite(c) or c > linalg.COND_CAP:
        raise SingularIminusQC(f"I - Q C2 singular near t={t:.6g} (cond={c:.3e})")
    return np.linalg.inv(M)


def solve_definite_decoupling(es, p):
    """Decoupling Ytilde = Q Xtilde + phi of the Hamiltonian system (D4 > 0).

    ``es`` is accepted for interface symmetry with the penalized route; only
    the problem data are used.
    """
    n, Nn = p.n, p.Nn
    for k in range(p.grid.steps + 1):
        if not linalg.is_pd(p.D4[k]):
            raise PreconditionViolated("definite decoupling needs D4 positive definite")

    def q_rhs(t, Q):
        h = hamiltonian_blocks(p.at(t), n, Nn)
        out = Q @ h.A1 + h.A1.T @ Q + Q @ h.B1 @ Q + h.A3
        for j in range(len(h.C2)):
            G = h.B2[j] @ Q + h.A2[j]
            out += G.T @ _iqc_inv(Q, h.C2[j], t) @ Q @ G
        return -linalg.sym(out)

    Ft = np.block([[p.G, p.F.T], [p.F, np.zeros((Nn, Nn))]])
    Q = integrate_matrix_ode(q_rhs, Ft, "backward", p.grid, symmetric=True, name="Q")
    Qfn = Q.as_fn()

    def phi_rhs(t, phi):
        h = hamiltonian_blocks(p.at(t), n, Nn)
        Qt = Qfn(t)
        lin = Qt @ h.B1 + h.A1.T
        src = Qt @ h.E1 + h.E3
        for j in range(len(h.C2)):
            Mj = (Qt @ h.C1[j] + h.A2[j].T) @ _iqc_inv(Qt, h.C2[j], t)
            lin = lin + Mj @ Qt @ h.B2[j]
            src = src + Mj @ Qt @ h.E2[j]
        return -(lin @ phi + src)

    phi = integrate_matrix_ode(phi_rhs, np.concatenate([np.zeros(n), p.xi]), "backward",
                               p.grid, name="phi")
    nodes = p.grid.steps + 1
    l2 = p.l2
    K = n + Nn
    kk = np.empty((nodes, l2, K, K))
    JJ = np.empty((nodes, l2, K, K))
    II = np.empty((nodes, l2, K, K))
    gx = np.empty((nodes, p.m, n))
    gh = np.empty((nodes, p.m, Nn))
    aff = np.empty((nodes, p.m))
    times = p.grid.times
    for k in range(nodes):
        c = p.node(k)
        h = hamiltonian_blocks(c, n, Nn)
        Qk = Q[k]
        Q1, Q2, Q3 = Qk[:n, :n], Qk[:n, n:], Qk[n:, :n]
        ph1, ph2 = phi[k][:n], phi[k][n:]
        ax = -c.D1.T @ Q1
        ahh = -c.D3.T - c.D1.T @ Q2
        aa = -c.D1.T @ ph1
        for j in range(l2):
            Ij = _iqc_inv(Qk, h.C2[j], times[k])
            kk[k, j] = Ij @ Qk @ (h.B2[j] @ Qk + h.A2[j])
            JJ[k, j] = Ij @ Qk @ h.B2[j]
            II[k, j] = Ij
            k1, k2 = kk[k, j][:n, :n], kk[k, j][:n, n:]
            J1, J2 = JJ[k, j][:n, :n], JJ[k, j][:n, n:]
            I1, I2 = Ij[:n, :n], Ij[:n, n:]
            D2 = c.D2[j]
            ax = ax - D2.T @ k1
            ahh = ahh - D2.T @ k2
            aa = aa - D2.T @ (J1 @ ph1 + J2 @ ph2) - D2.T @ (I1 @ Q1 + I2 @ Q3) @ c.E2[j]
        gx[k] = h.D4i @ ax
        gh[k] = h.D4i @ ahh
        aff[k] = h.D4i @ aa
    return DefiniteDecoupling(Q=Q, phi=phi, k=kk, J=JJ, I=II, gain_x=gx, gain_h=gh,
                              affine=aff, hamiltonian=None)


def stack_from_definite(dec, p):
    """Express the definite decoupling in the (P1, P2, P3, phi1, phi2) form."""
    n = p.n
    Q = dec.Q.values
    P1 = Q[:, :n, :n]
    P2 = Q[:, :n, n:]
    P3 = -Q[:, n:, n:]
    phi1 = dec.phi.values[:, :n]
    phi2 = dec.phi.values[:, n:]
    Lm, Sm, Nm = _derived(p, P1, P2, P3, phi1, phi2)
    nodes = p.grid.steps + 1
    return LeaderRiccatiStack(
        route="definite", problem=p, P1=_traj(p, P1, "P1", True), P2=_traj(p, P2, "P2"),
        P3=_traj(p, P3, "P3", True), phi1=_traj(p, phi1, "phi1"),
        phi2=_traj(p, phi2, "phi2"), Lmats=Lm, Smats=Sm, Nmats=Nm,
        V1=np.zeros((nodes, p.l2, p.n)), V2=np.zeros((nodes, p.l2, p.Nn)))


# ---------------------------------------------------------------------------
# leader feedback

@dataclass(eq=False)
class LeaderGain:
    Gx: np.ndarray      # (nodes, m, n)   acts on the leader's state filter
    Gphi: np.ndarray    # (nodes, m, Nn)  acts on the stacked adjoint filters
    affine: np.ndarray  # (nodes, m)


def leader_gain(stack):
    """Feedback u = Gx X + Gphi Y + affine with Y the stacked backward state.

    P3 vanishes at the terminal time, so the gains are evaluated on all
    nodes but the last and extended linearly to the final node.
    """
    p = stack.problem
    nodes = p.grid.steps + 1
    L6, L7, S3 = stack.Lmats["L6"], stack.Lmats["L7"], stack.Smats["S3"]
    Gx = np.empty((nodes, p.m, p.n))
    Gp = np.empty((nodes, p.m, p.Nn))
    af = np.empty((nodes, p.m))
    times = p.grid.times
    for k in range(nodes - 1):
        P3 = stack.P3[k]
        c = np.linalg.cond(P3)
        if not np.isfinite(c) or c > linalg.COND_CAP:
            raise P3Singular(f"P3 singular at t={times[k]:.6g} (cond={c:.3e})")
        W = np.linalg.solve(P3.T, L7[k].T).T  # L7 P3^{-1}
        Gx[k] = L6[k] + W @ stack.P2[k].T
        Gp[k] = -W
        af[k] = W @ stack.phi2[k] + S3[k]
    if nodes >= 3:
        for arr in (Gx, Gp, af):
            arr[-1] = 2.0 * arr[-2] - arr[-3]
    else:
        for arr in (Gx, Gp, af):
            arr[-1] = arr[-2]
    return LeaderGain(Gx, Gp, af)


def leader_gain_four_term(spec, followers, stack):
    """Leader feedback written with the game data (independent of the L matrices).

    u = -(2R2)^{-1}[B2'P1 + B2'(Pf + P2)P3^{-1}P2'] X
        + (2R2)^{-1}B2'(Pf + P2)P3^{-1} Y - (2R2)^{-1}B2'(Pf + P2)P3^{-1} phi2
        - (2R2)^{-1}B2' phi1,
    where Pf = [P^{11} ... P^{1N}] stacks the followers' Riccati solutions.
    """
    nodes = spec.grid.steps + 1
    n, m = spec.dims.n, spec.dims.m
    Nn = spec.dims.N * n
    Gx = np.empty((nodes, m, n))
    Gp = np.empty((nodes, m, Nn))
    af = np.empty((nodes, m))
    for k in range(nodes - 1):
        B2 = spec.B2.node(k)
        R2i = np.linalg.inv(2.0 * spec.leader.R.node(k))
        Pf = np.concatenate([f.P1i[k] for f in followers], axis=1)
        P3i = np.linalg.inv(stack.P3[k])
        T = B2.T @ (Pf + stack.P2[k]) @ P3i
        Gx[k] = -R2i @ (B2.T @ stack.P1[k] + T @ stack.P2[k].T)
        Gp[k] = R2i @ T
        af[k] = -R2i @ (T @ stack.phi2[k]) - R2i @ (B2.T @ stack.phi1[k])
    for arr in (Gx, Gp, af):
        arr[-1] = 2.0 * arr[-2] - arr[-3]
    return LeaderGain(Gx, Gp, af)


def gain_disagreement(a, b):
    """Max-node difference of two stacks' leader feedback.

    The h-form (L6, L7, S3) is always compared; the (X, Y) form only when
    both P3 trajectories are invertible.
    """
    err = max(np.abs(a.Lmats["L6"] - b.Lmats["L6"]).max(),
              np.abs(a.Lmats["L7"] - b.Lmats["L7"]).max(),
              np.abs(a.Smats["S3"] - b.Smats["S3"]).max())
    try:
        ga, gb = leader_gain(a), leader_gain(b)
    except P3Singular:
        return float(err)
    return float(max(err, np.abs(ga.Gx - gb.Gx).max(), np.abs(ga.Gphi - gb.Gphi).max(),
                     np.abs(ga.affine - gb.affine).max()))


def gains_from_definite(dec, p):
    """Definite-route feedback expressed on (X, Y) like ``leader_gain``."""
    stack = stack_from_definite(dec, p)
    return leader_gain(stack)


# ---------------------------------------------------------------------------
# costs

def closed_loop_matrices(p, stack, k):
    """Affine closed-loop drift of s = (X, h) and output maps at node k.

    Valid when the only diffusion is additive (``only_additive_noise``).
    """
    c = p.node(k)
    P1, P2, P3 = stack.P1[k], stack.P2[k], stack.P3[k]
    phi1, phi2 = stack.phi1[k], stack.phi2[k]
    L6, L7, S3 = stack.Lmats["L6"][k], stack.Lmats["L7"][k], stack.Smats["S3"][k]
    M = np.block([[c.A1 + c.B1.T @ P2.T + c.D1 @ L6, -c.B1.T @ P3 + c.D1 @ L7],
                  [c.B1 @ P1 + c.B4 @ P2.T, c.B3 + c.B1 @ P2 - c.B4 @ P3]])
    b = np.concatenate([c.B1.T @ phi2 + c.D1 @ S3 + c.E1, c.B1 @ phi1 + c.B4 @ phi2])
    Ymap = (np.concatenate([P2.T, -P3], axis=1), phi2)
    umap = (np.concatenate([L6, L7], axis=1), S3)
    return M, b, Ymap, umap


def reduced_cost_by_moments(p, stack):
    """1/2 E[cost] of the closed loop u = L6 X + L7 h + S3 from mean/covariance ODEs.

    An independent route to the value of the coupled problem; it works for
    every solution route (including the saddle case D4 < 0).
    """
    if not p.only_additive_noise():
        raise PreconditionViolated("moment route needs purely additive noise (E2 only)")
    n, Nn = p.n, p.Nn
    nodes = p.grid.steps + 1
    dt = p.grid.dt
    mats = [closed_loop_matrices(p, stack, k) for k in range(nodes)]
    Enoise = [np.concatenate([p.E2[k].T, np.zeros((Nn, p.l2))], axis=0)
              for k in range(nodes)]

    def interp(k, w, idx):
        a = mats[k][idx] if idx < 2 else None
        b = mats[k + 1][idx] if idx < 2 else None
        return (1 - w) * a + w * b

    def rhs_at(k, w, mu, S):
        M = (1 - w) * mats[k][0] + w * mats[k + 1][0]
        b = (1 - w) * mats[k][1] + w * mats[k + 1][1]
        E = (1 - w) * Enoise[k] + w * Enoise[k + 1]
        return M @ mu + b, M @ S + S @ M.T + E @ E.T

    H = p.H
    P2, P3, phi2 = stack.P2[0], stack.P3[0], stack.phi2[0]
    h0 = np.linalg.solve(np.eye(Nn) + H @ P3, H @ (P2.T @ p.x0 + phi2))
    mu = np.concatenate([p.x0, h0])
    S = np.zeros((n + Nn, n + Nn))
    running = np.empty(nodes)

    def density(k, mu, S):
        c = p.node(k)
        _, _, (Ym, Yc), (Um, Uc) = mats[k]
        Xm = np.eye(n + Nn)[:n]
        out = np.trace(Xm.T @ c.A4 @ Xm @ S) + mu[:n] @ c.A4 @ mu[:n]
        Ymu = Ym @ mu + Yc
        out += np.trace(Ym.T @ c.B4 @ Ym @ S) + Ymu @ c.B4 @ Ymu
        umu = Um @ mu + Uc
        out += np.trace(Um.T @ c.D4 @ Um @ S) + umu @ c.D4 @ umu
        return out

    Y0 = P2.T @ p.x0 - P3 @ h0 + phi2
    for k in range(nodes):
        running[k] = density(k, mu, S)
        if k == nodes - 1:
            break
        k1 = rhs_at(k, 0.0, mu, S)
        k2 = rhs_at(k, 0.5, mu + 0.5 * dt * k1[0], S + 0.5 * dt * k1[1])
        k3 = rhs_at(k, 0.5, mu + 0.5 * dt * k2[0], S + 0.5 * dt * k2[1])
        k4 = rhs_at(k, 1.0, mu + dt * k3[0], S + dt * k3[1])
        mu = mu + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        S = S + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if not np.all(np.isfinite(S)):
            raise NonFinite("closed-loop moments diverged")
    XT = mu[:n]
    term = np.trace(p.G @ S[:n, :n]) + XT @ p.G @ XT + Y0 @ H @ Y0
    return 0.5 * float(trapezoid(running, p.grid) + term)


def initial_term(stack):
    """(x0 + P1^{-1}phi1)'P1(x0 + P1^{-1}phi1) at t = 0, or None if P1 is singular."""
    p = stack.problem
    P1 = stack.P1[0]
    phi1 = stack.phi1[0]
    if np.linalg.cond(P1) > linalg.COND_CAP:
        return None
    v = p.x0 + np.linalg.solve(P1, phi1)
    return float(v @ P1 @ v)


def residual_leader_cost(spec, covsys):
    """Cost of the leader's estimation error, independent of the leader's control.

    tr(p(0) SigmaTilde(0)) + int tr(p * source) dt, where p solves
    p' + p Ahat + Ahat'p + Q2 = 0, p(T) = G2 with Ahat the error drift and
    ``source`` the forcing of the error covariance equation.
    """
    grid = spec.grid
    Ahat = covsys.error_drift
    src = covsys.sigma_tilde_source

    def rhs(t, P):
        k, w = grid.locate(t)
        Ah = (1 - w) * Ahat[k] + w * Ahat[min(k + 1, grid.steps)]
        return -(P @ Ah + Ah.T @ P + spec.leader.Q(t))

    pt = integrate_matrix_ode(rhs, spec.leader.G, "backward", grid, symmetric=True,
                              name="p")
    dens = np.array([np.trace(pt[k] @ src[k]) for k in range(grid.steps + 1)])
    value = float(np.trace(pt[0] @ covsys.SigmaTilde[0]) + trapezoid(dens, grid))
    check = float(np.trace(spec.leader.G @ covsys.SigmaTilde[-1]) + trapezoid(
        [np.trace(spec.leader.Q.node(k) @ covsys.SigmaTilde[k])
         for k in range(grid.steps + 1)], grid))
    return value, check, pt


def leader_cost_closed_form(stack, spec, covsys, details=False):
    """Optimal leader cost: reduced-problem value plus the estimation-error part."""
    p = stack.problem
    if p.grid != spec.grid or covsys.SigmaTilde.grid != spec.grid:
        raise GridMismatch("stack, spec and covariance system use different grids")
    if stack.route == "regularized":
        reduced = 0.5 * stack.value
    else:
        reduced = reduced_cost_by_moments(p, stack)
    resid, resid_check, _ = residual_leader_cost(spec, covsys)
    total = reduced + resid
    if not details:
        return total
    init = initial_term(stack)
    return {
        "total": total, "reduced": reduced, "residual": resid,
        "residual_crosscheck": resid_check,
        "initial_term": init,
        "integral_term": None if init is None else 2.0 * reduced - init,
    }
