"""Solve the scalar benchmark game and check the closed-form costs by sampling.

One follower and a leader with positive weights.  The leader's filter sees
no noise here, so its equilibrium control is a fixed path and the follower's
best response to it is available in closed form.
"""

import os

from stackelberg_po.model import load_spec
from stackelberg_po.pipeline import solve_game
from stackelberg_po.simulate import SimConfig, run_closed_loop

here = os.path.dirname(os.path.abspath(__file__))
spec = load_spec(os.path.join(here, "configs", "scalar.json"), steps=1000)
sol = solve_game(spec)

st = sol.stack
print(f"leader stack route: {st.route}")
for e in st.report[-3:]:
    print(f"  i = {e['i']:5d}  value {e['value']:.6f}  extrapolated change {e['rel_change']:.2e}")

lead = sol.costs["leader"]
print(f"\nleader cost  {lead['total']:.5f} = reduced {lead['reduced']:.5f}"
      f" + filtering residual {lead['residual']:.5f}")
print(f"follower cost {sol.costs['follower_1']:.5f}")

res = run_closed_loop(spec, sol.followers, st, sol.covsys, SimConfig(paths=10_000, seed=0))
for player, exact in (("leader", lead["total"]), ("follower_1", sol.costs["follower_1"])):
    mean, se = res.estimate(player)
    print(f"{player:>10}: Monte Carlo {mean:.5f} +/- {se:.5f}  ({(mean - exact) / se:+.2f} SE)")
