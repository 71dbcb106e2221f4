"""Command-line entry point: ``stackelberg {solve,simulate,formation,check}``.

stdout carries JSON only; diagnostics go to stderr.  Exit codes:
0 success, 1 failed check, 2 invalid config, 3 solver failure, 4 missing
solution artifacts.
"""

import argparse
import json
import logging
import os
import pickle
import sys

import numpy as np

from .errors import SolverError, SpecError
from .model import load_spec, specs_equal

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER, EXIT_MISSING = 0, 1, 2, 3, 4
SOLUTION_FILE = "solution.pkl"

log = logging.getLogger("stackelberg_po")


class MissingArtifacts(Exception):
    pass


def _setup_logging():
    level = os.environ.get("STACKELBERG_LOG", "WARNING").upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("stackelberg_po")
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level, logging.WARNING))


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not serializable: {type(x).__name__}")


def _dump(obj, path=None):
    text = json.dumps(obj, sort_keys=True, indent=2, default=_json_default)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def _load_config(args):
    spec = load_spec(args.config)
    if args.dt_override:
        steps = max(1, round(spec.grid.T / args.dt_override))
        spec = load_spec(args.config, steps=steps)
    return spec


def _solution_summary(sol):
    st = sol.stack
    out = {"route": st.route, "leader_stack": st.summary(),
           "covariance_sweeps": sol.covsys.sweeps,
           "costs": {"leader": sol.costs["leader"]},
           "leader_control_deterministic": sol.u2_path is not None}
    for k, v in sol.costs.items():
        if k != "leader":
            out["costs"][k] = v if v is not None else "n/a"
    return out


def _write_trajectories(sol, out):
    st = sol.stack
    for name in ("P1", "P2", "P3", "phi1", "phi2"):
        getattr(st, name).to_csv(os.path.join(out, f"{name}.csv"))
    sol.covsys.to_csv(out)
    for i, f in enumerate(sol.followers):
        f.P1i.to_csv(os.path.join(out, f"follower_{i + 1}_riccati.csv"))
        f.gain_state.to_csv(os.path.join(out, f"follower_{i + 1}_gain_state.csv"))
        f.gain_affine.to_csv(os.path.join(out, f"follower_{i + 1}_gain_affine.csv"))
    if sol.gain is not None:
        from .odesolve import MatrixTrajectory
        g = sol.spec.grid
        for name in ("Gx", "Gphi", "affine"):
            MatrixTrajectory(g, getattr(sol.gain, name), name=name).to_csv(
                os.path.join(out, f"leader_gain_{name}.csv"))


def cmd_solve(args):
    from .pipeline import solve_game
    spec = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    sol = solve_game(spec, threads=args.threads)
    with open(os.path.join(args.out, SOLUTION_FILE), "wb") as fh:
        pickle.dump(sol, fh)
    _write_trajectories(sol, args.out)
    summary = _solution_summary(sol)
    print(_dump(summary, os.path.join(args.out, "summary.json")))
    return EXIT_OK


def _load_solution(out):
    path = os.path.join(out or "", SOLUTION_FILE)
    if not out or not os.path.exists(path):
        raise MissingArtifacts(f"no solution found at {path}; run 'stackelberg solve' first")
    with open(path, "rb") as fh:
        return pickle.load(fh)


def cmd_simulate(args):
    from .simulate import SimConfig, run_closed_loop
    spec = _load_config(args)
    sol = _load_solution(args.out)
    if not specs_equal(spec, sol.spec):
        raise SpecError("config does not match the stored solution; re-run solve")
    cfg = SimConfig(paths=args.paths, seed=args.seed, threads=args.threads)
    res = run_closed_loop(sol.spec, sol.followers, sol.stack, sol.covsys, cfg)
    summary = res.summary()
    summary["seed"] = args.seed
    summary["closed_form"] = {"leader": sol.costs["leader"]["total"]}
    for k, v in sol.costs.items():
        if k != "leader":
            summary["closed_form"][k] = v if v is not None else "n/a"
    print(_dump(summary, os.path.join(args.out, "sim_result.json")))
    return EXIT_OK


def cmd_formation(args):
    from .formation import load_formation, run_formation_demo
    from .simulate import SimConfig
    fs = load_formation(args.config)
    if args.dt_override:
        from dataclasses import replace
        fs = replace(fs, steps=max(1, round(fs.horizon / args.dt_override)))
    cfg = SimConfig(paths=args.paths, seed=args.seed, threads=args.threads)
    out = run_formation_demo(fs, cfg, baseline=True)
    os.makedirs(args.out, exist_ok=True)
    times = out["spec"].grid.times
    with open(os.path.join(args.out, "formation_error.csv"), "w") as fh:
        fh.write("t,error\n")
        for t, e in zip(times, out["formation_error"]):
            fh.write(f"{t!r},{float(e)!r}\n")
    res, base = out["result"], out["baseline"]
    diff = res.costs["leader"] - base.costs["leader"]
    fe = out["formation_error"]
    summary = {"route": out["solution"].stack.route,
               "simulation": res.summary(),
               "baseline_zero_leader": base.summary(),
               "leader_cost_minus_baseline": {
                   "mean": float(diff.mean()),
                   "se": float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else "n/a"},
               "closed_form_leader_cost": out["solution"].costs["leader"]["total"],
               "formation_error": {"initial": float(fe[0]), "terminal": float(fe[-1]),
                                   "ratio": float(fe[-1] / fe[0]) if fe[0] > 0 else None}}
    print(_dump(summary, os.path.join(args.out, "formation_summary.json")))
    return EXIT_OK


def run_checks(sol, agreement_tol=1e-5):
    """Fast invariant suite; returns a list of rows (name, value, tol, passed)."""
    from . import linalg
    from .leader_fbsde import (gain_disagreement, gain_relation_residual, p2_transpose_residual,
                               solve_definite_decoupling, stack_from_definite)
    rows = []

    def add(name, value, tol, passed=None):
        value = float(value)
        rows.append({"name": name, "value": value, "tol": tol,
                     "pass": bool(value <= tol) if passed is None else bool(passed)})

    st = sol.stack
    cs = sol.covsys
    for name, tr in (("P1", st.P1), ("P3", st.P3), ("SigmaTilde", cs.SigmaTilde)):
        v = tr.values
        add(f"symmetry {name}", np.abs(v - np.swapaxes(v, -1, -2)).max(), 1e-9)
    for name, tr in (("SigmaTilde", cs.SigmaTilde), ("CrossHatCheckSq", cs.CrossHatCheckSq)):
        worst = min(np.linalg.eigvalsh(linalg.sym(m)).min() for m in tr.values)
        add(f"psd {name}", max(0.0, -worst), 1e-9)
    for i, f in enumerate(sol.followers):
        worst = min(np.linalg.eigvalsh(m).min() for m in f.P1i.values)
        add(f"psd follower {i + 1} Riccati", max(0.0, -worst), 1e-9)
    if st.route == "regularized":
        add("recovery identities", max(e["recovery_residual"] for e in st.report), 1e-10)
        add("gain relation residual", gain_relation_residual(st), 1e-6)
        last = st.report[-1].get("rel_change", 0.0)
        add("regularization convergence", last, 1e-6)
    else:
        add("P2 transpose residual", p2_transpose_residual(st), 1e-3)
    p = st.problem
    if all(linalg.is_pd(p.D4[k]) for k in range(p.grid.steps + 1)) and not np.any(p.F) \
            and not np.any(p.H):
        other = stack_from_definite(solve_definite_decoupling(None, p), p)
        add("definite/indefinite gain agreement", gain_disagreement(st, other), agreement_tol)
    return rows


def cmd_check(args):
    spec = _load_config(args)
    if args.out and os.path.exists(os.path.join(args.out, SOLUTION_FILE)):
        sol = _load_solution(args.out)
        if not specs_equal(spec, sol.spec):
            raise SpecError("config does not match the stored solution")
    else:
        from .pipeline import solve_game
        sol = solve_game(spec, threads=args.threads)
    rows = run_checks(sol)
    ok = all(r["pass"] for r in rows)
    print(_dump({"checks": rows, "passed": ok}))
    for r in rows:
        log.info("%-40s %s", r["name"], "pass" if r["pass"] else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK


def build_parser():
    ap = argparse.ArgumentParser(prog="stackelberg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=out_required)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--dt-override", type=float, default=None)

    def sim_flags(p):
        p.add_argument("--paths", type=int, default=10_000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--deterministic", action="store_true",
                       help="fixed reduction order (always used; kept for scripts)")

    p = sub.add_parser("solve", help="solve the equilibrium and write artifacts")
    common(p)
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("simulate", help="Monte Carlo run of a solved equilibrium")
    common(p)
    sim_flags(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("formation", help="formation-control demo from a graph config")
    common(p)
    sim_flags(p)
    p.set_defaults(func=cmd_formation)
    p = sub.add_parser("check", help="fast invariant checks")
    common(p, out_required=False)
    p.set_defaults(func=cmd_check)
    return ap


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "paths", 1) < 1 or args.threads < 1:
        print("error: --paths and --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        violations = getattr(exc, "violations", None) or []
        if len(violations) > 1:
            for v in violations:
                print(f"  - {v}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        t = getattr(exc, "t", None)
        where = f" (t={t:.6g})" if t is not None and "t=" not in str(exc) else ""
        print(f"error: solver failure: {type(exc).__name__}: {exc}{where}", file=sys.stderr)
        return EXIT_SOLVER
    except MissingArtifacts as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
