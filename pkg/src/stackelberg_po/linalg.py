"""Guarded dense linear algebra shared by the solvers."""

import numpy as np

from .errors import IllConditioned

COND_CAP = 1e12


def sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def check_cond(M, name="matrix", cap=COND_CAP):
    c = np.linalg.cond(M)
    if not np.isfinite(c) or c > cap:
        raise IllConditioned(f"{name} ill-conditioned (cond={c:.3e})")
    return c


def inv(M, name="matrix", cap=COND_CAP):
    check_cond(M, name, cap)
    return np.linalg.inv(M)


def solve(M, B, name="matrix", cap=COND_CAP):
    check_cond(M, name, cap)
    return np.linalg.solve(M, B)


def is_psd(M, tol=1e-10):
    M = sym(M)
    return np.linalg.eigvalsh(M).min() >= -tol * (1.0 + np.linalg.norm(M))


def is_pd(M):
    try:
        np.linalg.cholesky(sym(M))
    except np.linalg.LinAlgError:
        return False
    return True


def blockdiag(*blocks):
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out
