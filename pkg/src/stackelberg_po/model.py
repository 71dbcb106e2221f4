"""Problem data for the partially observed leader/follower LQ game.

A game is described by a ``GameSpec``: dimensions, a uniform time grid, the
state and observation coefficients, and one quadratic cost per player.
Coefficients are stored as node samples on the grid (``CoefficientFn``) and
interpolated linearly in between.  Configs are JSON files; see README.md for
the schema.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg
from .errors import SpecParseError, SpecValidationError

DEFINITENESS = ("definite", "indefinite")


@dataclass(frozen=True)
class Dims:
    n: int
    m: int
    N: int
    l1: int
    l2: int

    def __post_init__(self):
        for name in ("n", "m", "N", "l1", "l2"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
                raise ValueError(f"Dims.{name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"horizon must be positive, got {self.T}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self):
        return self.T / self.steps

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.steps + 1)

    def locate(self, t):
        """Return (k, w) with t = (1-w)*t_k + w*t_{k+1}, k clamped to the grid."""
        s = t / self.dt
        k = int(np.floor(s))
        k = min(max(k, 0), self.steps - 1)
        return k, s - k


class CoefficientFn:
    """Matrix (or vector) valued function of time sampled on a grid."""

    def __init__(self, samples, grid):
        samples = np.asarray(samples, dtype=float)
        if samples.shape[0] != grid.steps + 1:
            raise ValueError(
                f"expected {grid.steps + 1} samples, got {samples.shape[0]}")
        self.samples = samples
        self.grid = grid
        self.samples.setflags(write=False)

    @classmethod
    def constant(cls, value, grid):
        value = np.asarray(value, dtype=float)
        return cls(np.broadcast_to(value, (grid.steps + 1,) + value.shape).copy(), grid)

    @property
    def shape(self):
        return self.samples.shape[1:]

    @property
    def is_constant(self):
        return bool(np.all(self.samples == self.samples[0]))

    def node(self, k):
        return self.samples[k]

    def __call__(self, t):
        k, w = self.grid.locate(t)
        if w == 0.0:
            return self.samples[k]
        return (1.0 - w) * self.samples[k] + w * self.samples[k + 1]

    def regrid(self, grid):
        old = self.grid.times
        new = grid.times
        flat = self.samples.reshape(len(old), -1)
        out = np.empty((len(new), flat.shape[1]))
        for c in range(flat.shape[1]):
            out[:, c] = np.interp(new, old, flat[:, c])
        return CoefficientFn(out.reshape((len(new),) + self.shape), grid)

    def __eq__(self, other):
        return (isinstance(other, CoefficientFn) and self.grid == other.grid
                and np.array_equal(self.samples, other.samples))

    __hash__ = None

    def __repr__(self):
        return f"CoefficientFn(shape={self.shape}, nodes={self.samples.shape[0]})"


@dataclass(frozen=True, eq=False)
class PlayerCost:
    """Running weights (Q, S, R, q, r) and terminal weights (G, g)."""
    Q: CoefficientFn
    S: CoefficientFn
    R: CoefficientFn
    q: CoefficientFn
    r: CoefficientFn
    G: np.ndarray
    g: np.ndarray


@dataclass(frozen=True, eq=False)
class GameSpec:
    dims: Dims
    grid: TimeGrid
    x0: np.ndarray
    A: CoefficientFn
    B1: tuple
    B2: CoefficientFn
    alpha: CoefficientFn
    C1: CoefficientFn
    C2: CoefficientFn
    f1: CoefficientFn
    g1: CoefficientFn
    K1: CoefficientFn
    f2: CoefficientFn
    g2: CoefficientFn
    K2: CoefficientFn
    followers: tuple
    leader: PlayerCost
    leader_definiteness: str = "definite"
    meta: dict = field(default_factory=dict)

    def regrid(self, steps):
        """Resample every coefficient onto a grid with a different step count."""
        grid = TimeGrid(self.grid.T, steps)

        def rc(c):
            return c.regrid(grid)

        def rcost(pc):
            return replace(pc, Q=rc(pc.Q), S=rc(pc.S), R=rc(pc.R), q=rc(pc.q), r=rc(pc.r))

        return replace(
            self, grid=grid, A=rc(self.A), B1=tuple(rc(b) for b in self.B1),
            B2=rc(self.B2), alpha=rc(self.alpha), C1=rc(self.C1), C2=rc(self.C2),
            f1=rc(self.f1), g1=rc(self.g1), K1=rc(self.K1), f2=rc(self.f2),
            g2=rc(self.g2), K2=rc(self.K2),
            followers=tuple(rcost(c) for c in self.followers), leader=rcost(self.leader))


# ---------------------------------------------------------------------------
# construction helpers

def _coef(value, shape, grid, name):
    if isinstance(value, CoefficientFn):
        return value
    if value is None:
        return CoefficientFn.constant(np.zeros(shape), grid)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0 and int(np.prod(shape)) == 1:
        arr = arr.reshape(shape)
    if arr.shape == tuple(shape):
        return CoefficientFn.constant(arr, grid)
    if arr.shape[1:] == tuple(shape) or (arr.ndim == 1 and int(np.prod(shape)) == 1):
        arr = arr.reshape((arr.shape[0],) + tuple(shape))
        if arr.shape[0] != grid.steps + 1:
            raise SpecParseError(
                f"{name}: time-varying entry needs {grid.steps + 1} nodes, got {arr.shape[0]}")
        return CoefficientFn(arr, grid)
    # keep the raw shape so validate() can report the mismatch
    if arr.ndim == len(shape):
        return CoefficientFn.constant(arr, grid)
    raise SpecParseError(f"{name}: cannot interpret array of shape {arr.shape} as {shape}")


def _static(value, shape, name):
    if value is None:
        return np.zeros(shape)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0 and int(np.prod(shape)) == 1:
        arr = arr.reshape(shape)
    if arr.ndim != len(shape):
        raise SpecParseError(f"{name}: expected {len(shape)}-d array, got shape {arr.shape}")
    return arr


def make_cost(dims, grid, Q=None, S=None, R=None, q=None, r=None, G=None, g=None, tag=""):
    n, m = dims.n, dims.m
    return PlayerCost(
        Q=_coef(Q, (n, n), grid, "Q" + tag), S=_coef(S, (m, n), grid, "S" + tag),
        R=_coef(R, (m, m), grid, "R" + tag), q=_coef(q, (n,), grid, "q" + tag),
        r=_coef(r, (m,), grid, "r" + tag), G=_static(G, (n, n), "G" + tag),
        g=_static(g, (n,), "g" + tag))


def make_spec(dims, grid, x0=None, A=None, B1=None, B2=None, alpha=None, C1=None,
              C2=None, f1=None, g1=None, K1=None, f2=None, g2=None, K2=None,
              followers=None, leader=None, leader_definiteness="definite"):
    """Assemble a GameSpec from plain arrays; omitted terms default to zero.

    ``followers`` is a list of dicts of cost arrays, ``leader`` one dict.
    Observation gains K1, K2 default to the identity.
    """
    n, m, N, l1, l2 = dims.n, dims.m, dims.N, dims.l1, dims.l2
    if B1 is None:
        B1 = [None] * N
    if K1 is None:
        K1 = np.eye(l1)
    if K2 is None:
        K2 = np.eye(l2)
    followers = followers if followers is not None else [{"R": np.eye(m)} for _ in range(N)]
    leader = leader if leader is not None else {"R": np.eye(m)}
    return GameSpec(
        dims=dims, grid=grid,
        x0=_static(x0, (n,), "x0"),
        A=_coef(A, (n, n), grid, "A"),
        B1=tuple(_coef(b, (n, m), grid, f"B1{i + 1}") for i, b in enumerate(B1)),
        B2=_coef(B2, (n, m), grid, "B2"),
        alpha=_coef(alpha, (n,), grid, "alpha"),
        C1=_coef(C1, (n, l1), grid, "C1"), C2=_coef(C2, (n, l2), grid, "C2"),
        f1=_coef(f1, (l1, n), grid, "f1"), g1=_coef(g1, (l1,), grid, "g1"),
        K1=_coef(K1, (l1, l1), grid, "K1"),
        f2=_coef(f2, (l2, n), grid, "f2"), g2=_coef(g2, (l2,), grid, "g2"),
        K2=_coef(K2, (l2, l2), grid, "K2"),
        followers=tuple(make_cost(dims, grid, tag=f"1{i + 1}", **c)
                        for i, c in enumerate(followers)),
        leader=make_cost(dims, grid, tag="2", **leader),
        leader_definiteness=leader_definiteness)


# ---------------------------------------------------------------------------
# validation

def _sym_ok(M):
    return np.linalg.norm(M - M.T) <= 1e-9 * (1.0 + np.linalg.norm(M))


def _first_bad(cf, pred):
    for k in range(cf.samples.shape[0]):
        if not pred(cf.samples[k]):
            return k
    return None


def validate(spec):
    """List every violated invariant; an empty list means the game is usable."""
    d = spec.dims
    n, m, N, l1, l2 = d.n, d.m, d.N, d.l1, d.l2
    out = []
    times = spec.grid.times

    def at(k):
        return f"t={times[k]:.6g} (node {k})"

    expected = {
        "A": (spec.A, (n, n)), "B2": (spec.B2, (n, m)), "alpha": (spec.alpha, (n,)),
        "C1": (spec.C1, (n, l1)), "C2": (spec.C2, (n, l2)),
        "f1": (spec.f1, (l1, n)), "g1": (spec.g1, (l1,)), "K1": (spec.K1, (l1, l1)),
        "f2": (spec.f2, (l2, n)), "g2": (spec.g2, (l2,)), "K2": (spec.K2, (l2, l2)),
    }
    if len(spec.B1) != N:
        out.append(f"B1 has {len(spec.B1)} entries, expected N={N}")
    for i, b in enumerate(spec.B1):
        expected[f"B1{i + 1}"] = (b, (n, m))
    if len(spec.followers) != N:
        out.append(f"follower_costs has {len(spec.followers)} entries, expected N={N}")
    costs = [(f"1{i + 1}", c) for i, c in enumerate(spec.followers)] + [("2", spec.leader)]
    for tag, c in costs:
        expected.update({
            "Q" + tag: (c.Q, (n, n)), "S" + tag: (c.S, (m, n)), "R" + tag: (c.R, (m, m)),
            "q" + tag: (c.q, (n,)), "r" + tag: (c.r, (m,))})
    if spec.x0.shape != (n,):
        out.append(f"x0 has shape {spec.x0.shape}, expected {(n,)}")
    elif not np.all(np.isfinite(spec.x0)):
        out.append("x0 not finite")
    shape_ok = True
    for name, (cf, shp) in expected.items():
        if cf.shape != tuple(shp):
            out.append(f"{name} has shape {cf.shape}, expected {tuple(shp)}")
            shape_ok = False
        elif cf.grid != spec.grid:
            out.append(f"{name} sampled on a different grid")
            shape_ok = False
        else:
            k = _first_bad(cf, lambda M: np.all(np.isfinite(M)))
            if k is not None:
                out.append(f"{name} not finite at {at(k)}")
    for tag, c in costs:
        for name, M, shp in (("G" + tag, c.G, (n, n)), ("g" + tag, c.g, (n,))):
            if M.shape != shp:
                out.append(f"{name} has shape {M.shape}, expected {shp}")
                shape_ok = False
            elif not np.all(np.isfinite(M)):
                out.append(f"{name} not finite")
    if spec.leader_definiteness not in DEFINITENESS:
        out.append(f"leader_definiteness must be one of {DEFINITENESS}, "
                   f"got {spec.leader_definiteness!r}")
    if not shape_ok:
        return out

    def nonsingular(M):
        c = np.linalg.cond(M)
        return np.isfinite(c) and c <= linalg.COND_CAP

    for name in ("K1", "K2"):
        k = _first_bad(getattr(spec, name), nonsingular)
        if k is not None:
            out.append(f"{name} singular at {at(k)}")

    def check_sym(name, cf, kind):
        k = _first_bad(cf, _sym_ok)
        if k is not None:
            out.append(f"{name} not symmetric at {at(k)}")
            return
        pred = {"psd": linalg.is_psd, "pd": linalg.is_pd,
                "nd": lambda M: linalg.is_pd(-M)}[kind]
        k = _first_bad(cf, pred)
        if k is not None:
            label = {"psd": "positive semidefinite", "pd": "positive definite",
                     "nd": "negative definite"}[kind]
            out.append(f"{name} not {label} at {at(k)}")

    def check_static(name, M):
        if not _sym_ok(M):
            out.append(f"{name} not symmetric")
        elif not linalg.is_psd(M):
            out.append(f"{name} not positive semidefinite")

    for tag, c in costs[:-1]:
        check_sym("Q" + tag, c.Q, "psd")
        check_sym("R" + tag, c.R, "pd")
        check_static("G" + tag, c.G)
    lc = spec.leader
    check_sym("Q2", lc.Q, "psd")
    check_static("G2", lc.G)
    if spec.leader_definiteness == "indefinite":
        check_sym("R2", lc.R, "nd")
    elif spec.leader_definiteness == "definite":
        check_sym("R2", lc.R, "pd")
    return out


# ---------------------------------------------------------------------------
# JSON I/O

def _plain(cf):
    if isinstance(cf, CoefficientFn):
        return cf.samples[0].tolist() if cf.is_constant else cf.samples.tolist()
    return np.asarray(cf).tolist()


def _cost_dict(c):
    return {"Q": _plain(c.Q), "S": _plain(c.S), "R": _plain(c.R), "q": _plain(c.q),
            "r": _plain(c.r), "G": _plain(c.G), "g": _plain(c.g)}


def spec_to_dict(spec):
    d = spec.dims
    return {
        "dims": {"n": d.n, "m": d.m, "N": d.N, "l1": d.l1, "l2": d.l2},
        "grid": {"T": spec.grid.T, "steps": spec.grid.steps},
        "x0": _plain(spec.x0),
        "dynamics": {"A": _plain(spec.A), "B1": [_plain(b) for b in spec.B1],
                     "B2": _plain(spec.B2), "alpha": _plain(spec.alpha),
                     "C1": _plain(spec.C1), "C2": _plain(spec.C2)},
        "observations": {k: _plain(getattr(spec, k))
                         for k in ("f1", "g1", "K1", "f2", "g2", "K2")},
        "follower_costs": [_cost_dict(c) for c in spec.followers],
        "leader_cost": _cost_dict(spec.leader),
        "leader_definiteness": spec.leader_definiteness,
    }


_COST_KEYS = {"Q", "S", "R", "q", "r", "G", "g"}


def spec_from_dict(raw):
    """Build a GameSpec from the JSON document structure (no validation)."""
    try:
        dims = Dims(**{k: int(raw["dims"][k]) for k in ("n", "m", "N", "l1", "l2")})
        grid = TimeGrid(float(raw["grid"]["T"]), int(raw["grid"]["steps"]))
        dyn = raw.get("dynamics", {})
        obs = raw.get("observations", {})
        fc = raw.get("follower_costs", [])
        lc = raw.get("leader_cost", {})
        for c in list(fc) + [lc]:
            extra = set(c) - _COST_KEYS
            if extra:
                raise SpecParseError(f"unknown cost keys {sorted(extra)}")
        unknown = set(dyn) - {"A", "B1", "B2", "alpha", "C1", "C2"}
        unknown |= set(obs) - {"f1", "g1", "K1", "f2", "g2", "K2"}
        if unknown:
            raise SpecParseError(f"unknown keys {sorted(unknown)}")
        B1 = dyn.get("B1")
        if B1 is not None and len(B1) != dims.N:
            raise SpecParseError(f"dynamics.B1 must list N={dims.N} matrices")
        if len(fc) != dims.N:
            raise SpecParseError(f"follower_costs must list N={dims.N} objects")
        return make_spec(
            dims, grid, x0=raw.get("x0"), A=dyn.get("A"), B1=B1, B2=dyn.get("B2"),
            alpha=dyn.get("alpha"), C1=dyn.get("C1"), C2=dyn.get("C2"),
            f1=obs.get("f1"), g1=obs.get("g1"), K1=obs.get("K1"),
            f2=obs.get("f2"), g2=obs.get("g2"), K2=obs.get("K2"),
            followers=[{k: c.get(k) for k in _COST_KEYS} for c in fc],
            leader={k: lc.get(k) for k in _COST_KEYS},
            leader_definiteness=raw.get("leader_definiteness", "definite"))
    except SpecParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecParseError(f"malformed config: {exc!r}") from exc


def load_spec(path, steps=None):
    """Read and validate a JSON config.  ``steps`` overrides the grid resolution."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SpecParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise SpecParseError(f"{path}: top level must be an object")
    spec = spec_from_dict(raw)
    if steps is not None and steps != spec.grid.steps:
        spec = spec.regrid(steps)
    problems = validate(spec)
    if problems:
        raise SpecValidationError(problems)
    return spec


def save_spec(spec, path):
    with open(path, "w") as fh:
        json.dump(spec_to_dict(spec), fh, indent=1)


def specs_equal(a, b):
    """Structural equality of two specs (exact array comparison)."""
    return spec_to_dict(a) == spec_to_dict(b)
