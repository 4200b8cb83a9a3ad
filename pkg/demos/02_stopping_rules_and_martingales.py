"""
Exercise rules and the decomposition of the value process
=========================================================

The exercise set extracted from the VI surface is used as a stopping rule on
fresh paths. Then the discounted value process l_t u(t, X_t) is checked to be
a supermartingale that is flat while the option is held, and its martingale
part is compared with sigma * du/dx.
"""

# %%
import os

import numpy as np

from snellvi import (RegionRule, SpaceTimeGrid, StoppingRule, build_model, discount_factors,
                     evaluate_stopping_rule, extract_regions, martingale_integrand_check, put_payoff,
                     simulate_paths, solve_backward, supermartingale_check)
from snellvi.snell import FunctionRule

QUICK = bool(os.environ.get("SNELLVI_DEMO_QUICK"))
model = build_model({"family": "black_scholes_1d", "params": {"sigma": 0.2, "r": 0.05}, "T": 1.0})
payoff = put_payoff(100.0)
grid = SpaceTimeGrid(np.linspace(0, 1, 501), [np.linspace(0, 250, 400)])
surface = solve_backward(model, payoff, grid)
regions = extract_regions(surface)
print("VI price:", surface.price([100.0]))

# %% Paths on every tenth grid time, so surface values along paths need no time interpolation
batch = simulate_paths(model, np.linspace(0, 1, 51), 20_000 if QUICK else 100_000, [100.0], seed=2)
disc = discount_factors(batch, model)

rules = [RegionRule(regions.exercise), StoppingRule.immediate(), StoppingRule.never()]
rules += [FunctionRule(lambda t, x, fx, c=c: x[:, 0] <= c, f"stop below {c}") for c in (75, 85, 95)]
for rule in rules:
    est = evaluate_stopping_rule(batch, disc, payoff, rule)
    print(f"{rule.name:>14}: {est.value:.4f} +- {est.std_error:.4f}")

# %% Supermartingale test over quarters of the horizon
sm = supermartingale_check(batch, disc, surface, payoff)
for p in sm.pairs:
    print(f"[{p.s:.2f}, {p.t:.2f}] drift z {p.max_drift_z:+.2f}  held-region drift "
          f"{p.continuation_mean:+.4f} +- {p.continuation_se:.4f}")
print("supermartingale:", sm.passed)

# %% Martingale integrand: one fresh grid-sized step from each path, Richardson-combined
dt = float(grid.time_nodes[1])
mi = martingale_integrand_check(batch, disc, surface, model, payoff, substep=dt)
for b in mi.bins:
    print(f"t={b.t:.2f} S in [{b.lower:.1f}, {b.upper:.1f}]: slope {b.slope[0]:.3f} vs "
          f"sigma S du/dS {b.target[0]:.3f} (z {b.z[0]:+.2f})")
print("integrand matches:", mi.passed)
