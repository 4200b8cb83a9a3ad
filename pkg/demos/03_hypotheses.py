"""
Checking the standing hypotheses
================================

Equivalence of the PDE and stopping views is only claimed for diffusions
whose law is nondegenerate. Two numerical proxies: the time integral of
det(gamma_t), gamma the inverse Malliavin covariance, and the rank of the Lie
algebra spanned by the vector fields (parabolic Hormander condition).
"""

# %%
import math

import numpy as np

from snellvi import DiffusionModel, build_model, first_variation, hormander_rank, nondegeneracy_statistic
from snellvi import simulate_paths
from snellvi.oracles import kolmogorov_nondegeneracy

# %% Brownian motion: C_t = t, so the statistic on [0.1, 1] is ln 10
bm = build_model({"family": "brownian", "params": {"sigma": 1.0}, "T": 1.0})
b = simulate_paths(bm, np.linspace(0, 1, 1001), 8, [0.0], 1)
rep = nondegeneracy_statistic(b, first_variation(b, bm), bm, eps=0.1)
print("Brownian:", rep.statistics[0].value, "exact", math.log(10))

# %% Kolmogorov diffusion: noise only on the velocity, still nondegenerate
kol = build_model({"family": "kolmogorov_2d", "params": {"sigma": 1.0}, "T": 1.0})
b = simulate_paths(kol, np.linspace(0, 1, 2001), 4, [0.0, 0.0], 1)
rep = nondegeneracy_statistic(b, first_variation(b, kol), kol, eps=0.1)
print("Kolmogorov:", rep.statistics[0].value, "exact", kolmogorov_nondegeneracy(1.0, 0.1, 1.0))
h = hormander_rank(kol, 0.0, [0.3, -0.2], 3)
print("bracket rank by depth", h.rank_by_depth, "spanning words", h.spanning)

# %% A degenerate case: one constant field in the plane never spans it
flat = DiffusionModel(2, 1, lambda t, x: np.zeros_like(x),
                      lambda t, x: np.broadcast_to(np.array([[1.0], [0.0]]), x.shape[:-1] + (2, 1)),
                      lambda t, x: np.zeros(x.shape[:-1]), T=1.0)
h = hormander_rank(flat, 0.0, [0.0, 0.0], 5)
print("constant field ranks", h.rank_by_depth, "hypoelliptic:", h.hypoelliptic)

# %% Zero volatility: the covariance vanishes and the statistic is infinite
zero = build_model({"family": "black_scholes_1d", "params": {"sigma": 0.0, "r": 0.05}, "T": 1.0})
b = simulate_paths(zero, np.linspace(0, 1, 51), 4, [90.0], 1)
est = nondegeneracy_statistic(b, first_variation(b, zero), zero).statistics[0]
print("sigma = 0:", est.value, "divergent:", est.divergent)
