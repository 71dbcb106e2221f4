"""A leader with a negative-definite control weight.

When the leader's control weight R2 is negative definite its cost is not
convex in the control.  This script shows the two regimes:

* small |R2|: the backward P-system escapes in finite time (no equilibrium
  on the whole horizon); the solver reports where;
* large |R2|: the P-system exists, the equilibrium control is a stationary
  point of the leader's cost, and nearby controls lower that cost:
  J2(u + eps v) <= J2(u), so the equilibrium control is a local maximizer.
Noise is switched off so a single path gives exact costs.
"""

import numpy as np

from stackelberg_po.errors import NonFinite
from stackelberg_po.model import Dims, TimeGrid, make_spec
from stackelberg_po.pipeline import solve_game
from stackelberg_po.simulate import SimConfig, perturbation_experiment


def game(R2, T=2.0):
    return make_spec(Dims(1, 1, 1, 1, 1), TimeGrid(T, 400), x0=[1.0], A=0.2, B1=[1.0],
                     B2=[[0.6]], followers=[dict(Q=1.0, R=1.0, G=1.0)],
                     leader=dict(Q=2.0, R=R2, G=1.0), leader_definiteness="indefinite")


for R2 in (-0.05, -0.5, -5.0):
    print(f"\nR2 = {R2}")
    try:
        sol = solve_game(game(R2))
    except NonFinite as exc:
        print(f"  no equilibrium on [0, T]: {exc}")
        continue
    print(f"  route {sol.stack.route}, closed-form J2 = {sol.costs['leader']['total']:.5f}")
    v = np.ones((401, 1))
    r = perturbation_experiment(sol.spec, sol, v, [0.1, 0.3], SimConfig(paths=1), layer="leader")
    for row in r["rows"]:
        print(f"  eps = {row['eps']:.1f}: J2(u+eps v) - J2(u) = {row['diff']:+.5f}, "
              f"J2(u-eps v) - J2(u) = {row['diff_neg']:+.5f}")
    print(f"  quadratic coefficient {r['quadratic_coef']:+.5f} (negative: local maximum)")
