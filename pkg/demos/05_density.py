"""
Where does the diffusion put mass?
==================================

Kernel estimates of the law of X_t on a grid, compared with closed forms, and
the positivity set they imply. For the Kolmogorov diffusion the law starts
concentrated on a thin sheared ellipse, so the fraction of the box it covers
grows with t.
"""

# %%
import os

import numpy as np

from snellvi import SpaceTimeGrid, build_model, estimate_density, positivity_set, simulate_paths
from snellvi.oracles import kolmogorov_density, lognormal_density, lognormal_mode

QUICK = bool(os.environ.get("SNELLVI_DEMO_QUICK"))
n = 20_000 if QUICK else 100_000

# %% Geometric Brownian motion against the lognormal density
gbm = build_model({"family": "black_scholes_1d", "params": {"sigma": 0.2, "r": 0.05}, "T": 1.0})
b = simulate_paths(gbm, np.linspace(0, 1, 251), n, [100.0], seed=21)
grid = SpaceTimeGrid(b.time_nodes, [np.linspace(40, 250, 421)])
dens = estimate_density(b, grid, [250])
mode = lognormal_mode(100.0, 0.05, 0.2, 1.0)
print("density at the mode:", np.interp(mode, grid.space_axes[0], dens.values[0]),
      "exact", float(lognormal_density(mode, 100.0, 0.05, 0.2, 1.0)))
bulk = SpaceTimeGrid(b.time_nodes, [np.linspace(65, 155, 181)])
print(positivity_set(estimate_density(b, bulk, [125, 250])).claim(), "on [65, 155]")

# %% Kolmogorov diffusion: coverage of a fixed box by slice time
kol = build_model({"family": "kolmogorov_2d", "params": {"sigma": 1.0}, "T": 1.0})
k = simulate_paths(kol, np.linspace(0, 1, 51), n // 5, [0.0, 0.0], seed=11)
axes = [np.linspace(-2.5, 2.5, 81), np.linspace(-4, 4, 81)]
kgrid = SpaceTimeGrid(k.time_nodes, axes)
kd = estimate_density(k, kgrid, [5, 10, 25, 50])
mask = positivity_set(kd)
for t, c in zip(kd.slice_times, mask.coverage):
    print(f"t={t:.2f}: positivity set covers {c:.3f} of the box")
X, V = np.meshgrid(*axes, indexing="ij")
exact = kolmogorov_density(np.stack([X, V], -1), np.zeros(2), 1.0, 1.0)
print("sup error at t = 1 relative to the peak:", np.abs(kd.values[-1] - exact).max() / exact.max())
