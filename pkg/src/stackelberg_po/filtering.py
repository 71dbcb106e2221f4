"""Second moments of the leader's estimation errors and per-path filter updates.

Error coordinates (all n-vectors):

    e     = X - Xcheck          leader's state error
    d     = Xhat - Xcheck       gap between the two filters
    psi_i = phi_i - phicheck_i  leader's error on follower i's adjoint

The control of the leader cancels in these coordinates, so the moments are
deterministic.  The forward block (E ee', E de', E dd', E psi_i e',
E d psi_i') and the backward block (E psi_i psi_i', zero at T) are solved by
damped alternation.
"""

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import FixedPointDiverged, GridMismatch, NonFinite
from .odesolve import MatrixTrajectory, integrate_matrix_ode, observation_gain

THETA = 0.5
TOL = 1e-8
MAX_SWEEPS = 200
STALL_SWEEPS = 5


@dataclass(eq=False)
class CovarianceSystem:
    SigmaTilde: MatrixTrajectory
    SigmaCheck: list
    CrossHatCheckTilde: MatrixTrajectory
    CrossHatCheckSq: MatrixTrajectory
    CrossHatCheckPhi: list
    PhiErrSq: list
    gammaCheck: list
    lambda2: MatrixTrajectory
    error_drift: np.ndarray          # Ahat = A - Gamma f2 at the nodes
    sigma_tilde_source: np.ndarray   # d/dt SigmaTilde - Ahat S - S Ahat'
    sweeps: int = 0
    residual: float = 0.0

    @property
    def grid(self):
        return self.SigmaTilde.grid

    def to_csv(self, directory):
        import os
        self.SigmaTilde.to_csv(os.path.join(directory, "sigma_tilde.csv"))
        self.CrossHatCheckTilde.to_csv(os.path.join(directory, "cross_hat_check_tilde.csv"))
        self.CrossHatCheckSq.to_csv(os.path.join(directory, "cross_hat_check_sq.csv"))
        for i, S in enumerate(self.SigmaCheck):
            S.to_csv(os.path.join(directory, f"sigma_check_{i + 1}.csv"))


class _Coefficients:
    """Time functions shared by every moment equation."""

    def __init__(self, spec, followers):
        self.spec = spec
        self.N = spec.dims.N
        self.Sigma = followers[0].Sigma.as_fn()
        self.K = [f.gain_state.as_fn() for f in followers]

    def at(self, t, SigmaTilde):
        s = self.spec
        A, f2, K2, C2 = s.A(t), s.f2(t), s.K2(t), s.C2(t)
        KK2 = K2 @ K2.T
        lam2 = SigmaTilde @ f2.T + C2 @ K2.T
        Gamma = np.linalg.solve(KK2, lam2.T).T
        Lam = observation_gain(s, self.Sigma(t), t)
        Bs = [b(t) for b in s.B1]
        Ks = [-k(t) for k in self.K]
        BK = sum(B @ K for B, K in zip(Bs, Ks))
        BRB = [B @ np.linalg.solve(c.R(t), B.T) for B, c in zip(Bs, s.followers)]
        F = [A - B @ K for B, K in zip(Bs, Ks)]
        return dict(A=A, f1=s.f1(t), f2=f2, K1=s.K1(t), K2=K2, KK2=KK2, C1=s.C1(t), C2=C2,
                    Gamma=Gamma, Ahat=A - Gamma @ f2, Lam=Lam, BK=BK, Acl=A - BK, BRB=BRB,
                    F=F, lam2=lam2)


def _forward_rhs(coef, Phi_fns):
    N = coef.N

    def rhs(t, Y):
        St, Ehx, Ehh = Y[0], Y[1], Y[2]
        Sc = Y[3:3 + N]
        Ehp = Y[3 + N:3 + 2 * N]
        c = coef.at(t, St)
        Ahat, BK, BRB, F = c["Ahat"], c["BK"], c["BRB"], c["F"]
        Lf1 = c["Lam"] @ c["f1"]
        Ad = c["Acl"] - Lf1
        mix = Lf1 - c["Gamma"] @ c["f2"]
        GK2 = c["Gamma"] @ c["K2"]
        noise_e2 = c["C2"] - GK2
        LK1 = c["Lam"] @ c["K1"]
        gchk = [np.linalg.solve(c["KK2"], (Sc[i] @ c["f2"].T).T).T for i in range(N)]
        Phi = [fn(t) for fn in Phi_fns]
        out = np.empty_like(Y)

        dS = (Ahat @ St + St @ Ahat.T - BK @ Ehx - Ehx.T @ BK.T
              + c["C1"] @ c["C1"].T + noise_e2 @ noise_e2.T)
        for k in range(N):
            dS -= BRB[k] @ Sc[k] + Sc[k].T @ BRB[k]
        out[0] = dS

        dX = (Ad @ Ehx + mix @ St + Ehx @ Ahat.T - Ehh @ BK.T
              + LK1 @ c["C1"].T - GK2 @ noise_e2.T)
        for k in range(N):
            dX -= BRB[k] @ Sc[k] + Ehp[k] @ BRB[k]
        out[1] = dX

        dH = (Ad @ Ehh + Ehh @ Ad.T + mix @ Ehx.T + Ehx @ mix.T
              + LK1 @ LK1.T + GK2 @ GK2.T)
        for k in range(N):
            dH -= BRB[k] @ Ehp[k].T + Ehp[k] @ BRB[k]
        out[2] = dH

        for i in range(N):
            # the gamma-check f2 SigmaTilde terms of drift and noise cancel
            out[3 + i] = (-F[i].T @ Sc[i] + Sc[i] @ Ahat.T - Ehp[i].T @ BK.T
                          - Phi[i] @ BRB[i])
            out[3 + N + i] = (Ad @ Ehp[i] - BRB[i] @ Phi[i] + mix @ Sc[i].T
                              - Ehp[i] @ F[i] - Ehx @ c["f2"].T @ gchk[i].T
                              + GK2 @ c["K2"].T @ gchk[i].T)
        return out

    return rhs


def _phi_err_rhs(coef, SigmaTilde_fn, SigmaCheck_fn, i):
    def rhs(t, Phi):
        c = coef.at(t, SigmaTilde_fn(t))
        Sc = SigmaCheck_fn(t)
        Fi = c["F"][i]
        src = Sc @ c["f2"].T @ np.linalg.solve(c["KK2"], c["f2"] @ Sc.T)
        return -(Fi.T @ Phi + Phi @ Fi + src)
    return rhs


def solve_covariance_system(spec, followers, gains=None, theta=THETA, tol=TOL,
                            max_sweeps=MAX_SWEEPS):
    """Damped alternation between the forward moments and the backward one.

    ``gains`` is accepted for interface symmetry: no term depends on the
    leader's control.
    """
    grid = spec.grid
    if any(f.grid != grid for f in followers):
        raise GridMismatch("follower solutions and spec use different grids")
    n, N = spec.dims.n, spec.dims.N
    nodes = grid.steps + 1
    coef = _Coefficients(spec, followers)
    Phi = np.zeros((N, nodes, n, n))
    fwd = None
    history = []
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        Phi_fns = [MatrixTrajectory(grid, Phi[i]).as_fn() for i in range(N)]
        traj = integrate_matrix_ode(_forward_rhs(coef, Phi_fns), np.zeros((3 + 2 * N, n, n)),
                                    "forward", grid, name="covariance system")
        new_fwd = traj.values
        St_fn = MatrixTrajectory(grid, new_fwd[:, 0]).as_fn()
        new_Phi = np.empty_like(Phi)
        for i in range(N):
            Sc_fn = MatrixTrajectory(grid, new_fwd[:, 3 + i]).as_fn()
            new_Phi[i] = integrate_matrix_ode(_phi_err_rhs(coef, St_fn, Sc_fn, i),
                                              np.zeros((n, n)), "backward", grid,
                                              symmetric=True, name=f"PhiErrSq{i + 1}").values
        change = (np.abs(new_Phi - Phi).max() if N else 0.0)
        if fwd is not None:
            change = max(change, np.abs(new_fwd - fwd).max())
        Phi = (1.0 - theta) * Phi + theta * new_Phi if sweeps > 1 else new_Phi
        fwd = new_fwd
        history.append(change)
        if not np.isfinite(change):
            raise NonFinite("covariance fixed point produced non-finite values")
        if sweeps > 1 and change < tol:
            break
        if len(history) > STALL_SWEEPS and all(
                history[-k] >= history[-k - 1] for k in range(1, STALL_SWEEPS + 1)):
            raise FixedPointDiverged(f"covariance sweeps not contracting: {history[-6:]}")
    else:
        raise FixedPointDiverged(f"no convergence in {max_sweeps} sweeps "
                                 f"(last change {history[-1]:.3e})")
    return _assemble(spec, coef, fwd, Phi, sweeps, history[-1])


def _assemble(spec, coef, fwd, Phi, sweeps, residual):
    grid = spec.grid
    N = spec.dims.N
    nodes = grid.steps + 1
    times = grid.times
    St = fwd[:, 0]
    rhs = _forward_rhs(coef, [MatrixTrajectory(grid, Phi[i]).as_fn() for i in range(N)])
    Ahat = np.empty_like(St)
    src = np.empty_like(St)
    lam2 = np.empty((nodes,) + spec.C2.shape)
    gchk = [np.empty((nodes, spec.dims.n, spec.dims.l2)) for _ in range(N)]
    for k, t in enumerate(times):
        c = coef.at(t, St[k])
        Ahat[k] = c["Ahat"]
        lam2[k] = c["lam2"]
        src[k] = rhs(t, fwd[k])[0] - Ahat[k] @ St[k] - St[k] @ Ahat[k].T
        for i in range(N):
            gchk[i][k] = np.linalg.solve(c["KK2"], (fwd[k, 3 + i] @ c["f2"].T).T).T
    sym = MatrixTrajectory
    return CovarianceSystem(
        SigmaTilde=sym(grid, linalg.sym(St), symmetric=True, name="SigmaTilde"),
        SigmaCheck=[sym(grid, fwd[:, 3 + i], name=f"SigmaCheck{i + 1}") for i in range(N)],
        CrossHatCheckTilde=sym(grid, fwd[:, 1], name="CrossHatCheckTilde"),
        CrossHatCheckSq=sym(grid, linalg.sym(fwd[:, 2]), symmetric=True,
                            name="CrossHatCheckSq"),
        CrossHatCheckPhi=[sym(grid, fwd[:, 3 + N + i], name=f"CrossHatCheckPhi{i + 1}")
                          for i in range(N)],
        PhiErrSq=[sym(grid, Phi[i], symmetric=True, name=f"PhiErrSq{i + 1}")
                  for i in range(N)],
        gammaCheck=[sym(grid, g, name=f"gammaCheck{i + 1}") for i, g in enumerate(gchk)],
        lambda2=sym(grid, lam2, name="lambda2"),
        error_drift=Ahat, sigma_tilde_source=src, sweeps=sweeps, residual=residual)


# ---------------------------------------------------------------------------
# per-path filters

@dataclass
class FilterState:
    """Batched filter state; leading axis indexes paths."""
    xhat: np.ndarray
    xcheck: np.ndarray
    dV: np.ndarray = None
    dU: np.ndarray = None

    @classmethod
    def start(cls, x0, paths):
        x0 = np.asarray(x0, dtype=float)
        return cls(np.tile(x0, (paths, 1)), np.tile(x0, (paths, 1)))


@dataclass(frozen=True)
class FilterGains:
    """Filter gains at one node: state gains times inverse observation covariances."""
    hat: np.ndarray     # (Sigma f1' + C1 K1')(K1 K1')^{-1}
    check: np.ndarray   # (SigmaTilde f2' + C2 K2')(K2 K2')^{-1}

    @classmethod
    def at_node(cls, spec, k, Sigma_k, SigmaTilde_k):
        K1, K2 = spec.K1.node(k), spec.K2.node(k)
        lam1 = Sigma_k @ spec.f1.node(k).T + spec.C1.node(k) @ K1.T
        lam2 = SigmaTilde_k @ spec.f2.node(k).T + spec.C2.node(k) @ K2.T
        return cls(np.linalg.solve(K1 @ K1.T, lam1.T).T, np.linalg.solve(K2 @ K2.T, lam2.T).T)


def filter_step(state, dY1, dY2, spec, gains, dt, k, drive_hat, drive_check):
    """One Euler-Maruyama step of both filters.

    ``dY1``/``dY2`` are raw observation increments (paths, l1)/(paths, l2).
    ``drive_hat``/``drive_check`` are the known control and offset drifts of
    each filter, (paths, n).  Returns the new state with the innovations.
    """
    A = spec.A.node(k)
    dV = dY1 - (state.xhat @ spec.f1.node(k).T + spec.g1.node(k)) * dt
    dU = dY2 - (state.xcheck @ spec.f2.node(k).T + spec.g2.node(k)) * dt
    xhat = state.xhat + (state.xhat @ A.T + drive_hat) * dt + dV @ gains.hat.T
    xcheck = state.xcheck + (state.xcheck @ A.T + drive_check) * dt + dU @ gains.check.T
    if not (np.all(np.isfinite(xhat)) and np.all(np.isfinite(xcheck))):
        raise NonFinite("filter state became non-finite", t=float(spec.grid.times[k]))
    return FilterState(xhat, xcheck, dV, dU)
