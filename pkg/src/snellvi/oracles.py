"""Independent closed-form and lattice reference values used to cross-check the solvers."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import norm


def crr_price(s0: float, strike: float, rate: float, sigma: float, T: float, steps: int,
              put: bool = True, american: bool = True, dividend: float = 0.0) -> float:
    """Cox-Ross-Rubinstein binomial tree price of a vanilla option."""
    dt = T / steps
    up = math.exp(sigma * math.sqrt(dt))
    p = (math.exp((rate - dividend) * dt) - 1.0 / up) / (up - 1.0 / up)
    disc = math.exp(-rate * dt)
    sign = -1.0 if put else 1.0
    # log-price on the lattice: level i, node j has s0 * up^(i - 2j)
    log_up = math.log(up)
    j = np.arange(steps + 1)
    values = np.maximum(sign * (s0 * np.exp((steps - 2 * j) * log_up) - strike), 0.0)
    for i in range(steps - 1, -1, -1):
        values = disc * (p * values[:-1] + (1.0 - p) * values[1:])
        if american:
            s = s0 * np.exp((i - 2 * np.arange(i + 1)) * log_up)
            np.maximum(values, sign * (s - strike), out=values)
    return float(values[0])


def bs_price(s: np.ndarray | float, strike: float, rate: float, sigma: float, tau: np.ndarray | float,
             put: bool = False, dividend: float = 0.0) -> np.ndarray:
    """Black-Scholes European price for time-to-maturity ``tau`` (payoff at ``tau = 0``)."""
    s = np.asarray(s, dtype=float)
    tau = np.asarray(tau, dtype=float)
    sign = -1.0 if put else 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        vol = sigma * np.sqrt(tau)
        d1 = (np.log(s / strike) + (rate - dividend + 0.5 * sigma ** 2) * tau) / vol
        d2 = d1 - vol
        price = sign * (s * np.exp(-dividend * tau) * norm.cdf(sign * d1)
                        - strike * np.exp(-rate * tau) * norm.cdf(sign * d2))
    return np.where(tau > 0, price, np.maximum(sign * (s - strike), 0.0))


def bs_delta(s: np.ndarray | float, strike: float, rate: float, sigma: float, tau: np.ndarray | float,
             put: bool = False, dividend: float = 0.0) -> np.ndarray:
    """Black-Scholes European delta ``dV/ds``."""
    s = np.asarray(s, dtype=float)
    tau = np.asarray(tau, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        vol = sigma * np.sqrt(tau)
        d1 = (np.log(s / strike) + (rate - dividend + 0.5 * sigma ** 2) * tau) / vol
        call = np.exp(-dividend * tau) * norm.cdf(d1)
    delta = call - np.exp(-dividend * tau) if put else call
    itm = (s < strike) if put else (s > strike)
    return np.where(tau > 0, delta, np.where(itm, -1.0 if put else 1.0, 0.0))


def lognormal_density(x: np.ndarray, s0: float, mu: float, sigma: float, t: float) -> np.ndarray:
    """Density of ``s0 exp((mu - sigma^2/2) t + sigma W_t)``."""
    x = np.asarray(x, dtype=float)
    m = math.log(s0) + (mu - 0.5 * sigma ** 2) * t
    v = sigma * math.sqrt(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.exp(-0.5 * ((np.log(x) - m) / v) ** 2) / (x * v * math.sqrt(2 * math.pi))
    return np.where(x > 0, out, 0.0)


def lognormal_mode(s0: float, mu: float, sigma: float, t: float) -> float:
    return math.exp(math.log(s0) + (mu - 0.5 * sigma ** 2) * t - sigma ** 2 * t)


def kolmogorov_covariance(sigma: float, t: float) -> np.ndarray:
    """Covariance of ``(X1, X2)`` for ``dX1 = X2 dt``, ``dX2 = sigma dW`` at time ``t``."""
    s2 = sigma ** 2
    return s2 * np.array([[t ** 3 / 3.0, t ** 2 / 2.0], [t ** 2 / 2.0, t]])


def kolmogorov_density(x: np.ndarray, x0: np.ndarray, sigma: float, t: float) -> np.ndarray:
    """Gaussian density of the Kolmogorov diffusion at time ``t`` from ``x0``."""
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    mean = np.array([x0[0] + x0[1] * t, x0[1]])
    cov = kolmogorov_covariance(sigma, t)
    inv = np.linalg.inv(cov)
    diff = x - mean
    q = np.einsum("...i,ij,...j->...", diff, inv, diff)
    return np.exp(-0.5 * q) / (2 * math.pi * math.sqrt(np.linalg.det(cov)))


def kolmogorov_nondegeneracy(sigma: float, eps: float, T: float, p: float = 1.0) -> float:
    """``int_eps^T det(C_v)^{-p} dv`` with ``C_v = sigma^2 [[v^3/3, v^2/2], [v^2/2, v]]``."""
    # det C_v = sigma^4 v^4 / 12
    c = sigma ** 4 / 12.0
    k = 4.0 * p
    if abs(k - 1.0) < 1e-14:
        return math.log(T / eps) / c ** p
    return (T ** (1 - k) - eps ** (1 - k)) / ((1 - k) * c ** p)
