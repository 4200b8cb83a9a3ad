"""
American put three ways
=======================

The same American put priced by the variational-inequality solver, by dynamic
programming on a Gauss-Hermite chain, and by regression Monte Carlo, with a
binomial tree as the reference.
"""

# %%
import os
import warnings

import numpy as np

from snellvi import SpaceTimeGrid, build_model, chain_dp, complementarity_residual, discount_factors
from snellvi import extract_regions, lsm_price, put_payoff, simulate_paths, solve_backward
from snellvi.oracles import crr_price
from snellvi.snell import BoxExitWarning, RankDeficiencyWarning

QUICK = bool(os.environ.get("SNELLVI_DEMO_QUICK"))
model = build_model({"family": "black_scholes_1d", "params": {"sigma": 0.2, "r": 0.05}, "T": 1.0})
payoff = put_payoff(100.0)

# %% Binomial reference (a 50,000-step tree gives 6.090356)
print("CRR, 5000 steps:", crr_price(100.0, 100.0, 0.05, 0.2, 1.0, 5000))

# %% Variational inequality: Crank-Nicolson + projected SOR on a 400-node axis
grid = SpaceTimeGrid(np.linspace(0, 1, 101 if QUICK else 501), [np.linspace(0, 250, 400)])
surface = solve_backward(model, payoff, grid)
print("VI price:", surface.price([100.0]))
res = complementarity_residual(surface, model)
print("complementarity residual p99 / max:", res.p99_abs, res.max_abs)

# %% The early-exercise boundary is read off the exercise set
regions = extract_regions(surface)
for t in (0.0, 0.5, 0.9):
    k = grid.time_index(t)
    print(f"t={t:.1f}: exercise below S = {regions.upper_boundary[k]:.2f}")

# %% Snell envelope of the one-step Euler chain (no PDE involved)
# quadrature nodes from the top of the box leave it; they take the payoff (zero there)
warnings.simplefilter("ignore", BoxExitWarning)
chain = chain_dp(model, payoff, SpaceTimeGrid(np.linspace(0, 1, 201), [np.linspace(0, 250, 400)]))
print("chain DP price:", chain.price([100.0]))

# %% Longstaff-Schwartz on 50 exercise dates, fitted on half the paths and priced on the rest
# on in-the-money put paths the payoff column is K - S, collinear with the monomials, so it is dropped
warnings.simplefilter("ignore", RankDeficiencyWarning)
batch = simulate_paths(model, np.linspace(0, 1, 51), 20_000 if QUICK else 200_000, [100.0], seed=1)
est, rule = lsm_price(batch, discount_factors(batch, model), payoff)
print(f"LSM price: {est.value:.4f} +- {est.std_error:.4f} (in-sample {est.in_sample_value:.4f})")
