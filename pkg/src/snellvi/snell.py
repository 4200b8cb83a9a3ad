"""Optimal stopping without the PDE: Markov-chain dynamic programming, regression
Monte Carlo, evaluation of explicit stopping rules and martingale diagnostics
of ``l_t u(t, X_t)``.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .errors import GridError, MismatchError
from .model import DiffusionModel, PayoffSpec, SpaceTimeGrid, grid_interpolant
from .sde import DiscountPath, PathBatch, integrate_increments, path_rng
from .vi import RegionMask, ValueSurface, payoff_scale

logger = logging.getLogger(__name__)

# stream id for the fresh one-step increments of the integrand check
_SUBSTEP_STREAM = 5


class RankDeficiencyWarning(RuntimeWarning):
    """A regression design matrix was rank deficient; a lower degree was used."""


class BoxExitWarning(RuntimeWarning):
    """Quadrature nodes of the chain left the computational box."""


@dataclass(frozen=True)
class PriceEstimate:
    value: float
    std_error: float
    n_paths: int
    method: str
    seed: int | None = None
    in_sample_value: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


# ---------------------------------------------------------------------------
# Chain dynamic programming
# ---------------------------------------------------------------------------


def gauss_hermite(order: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite rule for the standard normal on R^n: nodes ``(Q, n)``, weights ``(Q,)``."""
    z, w = hermegauss(order)
    w = w / math.sqrt(2.0 * math.pi)
    nodes = np.array(list(itertools.product(z, repeat=n)))
    weights = np.array([np.prod(c) for c in itertools.product(w, repeat=n)])
    return nodes, weights


def chain_dp(model: DiffusionModel, payoff: PayoffSpec, grid: SpaceTimeGrid,
             quadrature_order: int = 9) -> ValueSurface:
    """Snell envelope of the one-step Euler chain on the grid nodes.

    ``u_M = f`` and ``u_k(x) = max(f(x), exp(-r dt) E[u_{k+1}(x + b dt + sigma sqrt(dt) Z)])``
    with the expectation taken by tensor Gauss-Hermite quadrature and
    ``u_{k+1}`` evaluated by cubic interpolation. Quadrature nodes outside the
    box take ``f`` (``dirichlet_payoff``) or the clamped value (``neumann_zero``).
    """
    if model.d > 2:
        raise GridError("chain_dp supports d <= 2")
    if grid.d != model.d:
        raise GridError("grid dimension does not match the model")
    z, w = gauss_hermite(quadrature_order, model.n)
    nodes = grid.nodes()
    f = payoff(nodes)
    interior = grid.interior_mask().ravel()
    dirichlet = grid.boundary_policy == "dirichlet_payoff"
    values = np.empty((grid.M + 1, grid.n_nodes))
    values[-1] = f
    outside_total = 0
    for k in range(grid.M - 1, -1, -1):
        t = grid.time_nodes[k]
        dt = grid.time_nodes[k + 1] - t
        interp = grid_interpolant(grid.space_axes, values[k + 1])
        step = model.b(t, nodes) * dt
        sig = model.sigma(t, nodes) * math.sqrt(dt)
        target = nodes[:, None, :] + step[:, None, :] + np.einsum("pij,qj->pqi", sig, z)
        nxt = interp(target)
        if dirichlet:
            out = ~grid.contains(target)
            if out.any():
                outside_total += int(out[interior].sum())
                nxt = np.where(out, payoff(target), nxt)
        cont = np.exp(-model.r(t, nodes) * dt) * (nxt @ w)
        level = np.maximum(f, cont)
        if dirichlet:
            level[~interior] = f[~interior]
        values[k] = level
    msgs = []
    if outside_total:
        msgs.append(f"{outside_total} interior quadrature nodes fell outside the box")
        warnings.warn(msgs[-1], BoxExitWarning, stacklevel=2)
    meta = {"method": "chain_dp", "quadrature_order": quadrature_order, "warnings": msgs}
    return ValueSurface(grid, values.reshape((grid.M + 1,) + grid.shape), payoff, None, meta)


# ---------------------------------------------------------------------------
# Regression basis
# ---------------------------------------------------------------------------


def _exponents(d: int, degree: int) -> list[tuple[int, ...]]:
    out = list(itertools.product(range(degree + 1), repeat=d))
    return sorted(out, key=lambda e: (max(e), sum(e), tuple(-v for v in e)))


@dataclass(frozen=True)
class Basis:
    """Monomials of degree ``<= degree`` in each coordinate of ``x / x_scale``, optionally plus the payoff."""

    d: int
    degree: int
    x_scale: np.ndarray
    payoff_scale: float
    include_payoff: bool = True

    def design(self, x: np.ndarray, fx: np.ndarray) -> np.ndarray:
        y = x / self.x_scale
        cols = [np.prod(y ** np.array(e), axis=-1) for e in _exponents(self.d, self.degree)]
        if self.include_payoff:
            cols.append(fx / self.payoff_scale)
        return np.stack(cols, axis=-1)

    def lower(self) -> "Basis | None":
        # the payoff column is often collinear with the monomials (K - x on in-the-money put paths),
        # so drop it before giving up polynomial degree
        if self.include_payoff:
            return Basis(self.d, self.degree, self.x_scale, self.payoff_scale, False)
        if self.degree == 0:
            return None
        return Basis(self.d, self.degree - 1, self.x_scale, self.payoff_scale, False)


def fit_regression(basis: Basis, x: np.ndarray, fx: np.ndarray, y: np.ndarray,
                   warn: list[str] | None = None) -> tuple[Basis, np.ndarray] | None:
    """Least squares of ``y`` on the basis, simplifying it until the design has full rank."""
    current = basis
    while current is not None:
        A = current.design(x, fx)
        if A.shape[0] >= A.shape[1]:
            coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
            if rank == A.shape[1]:
                return current, coef
        if warn is not None:
            warn.append(f"rank-deficient regression (degree {current.degree}, payoff column "
                        f"{current.include_payoff}); simplifying basis")
        current = current.lower()
    return None


# ---------------------------------------------------------------------------
# Stopping rules
# ---------------------------------------------------------------------------


class StoppingRule:
    """Adapted rule: ``decide(k, t, x)`` sees only the time node and the current state."""

    name = "rule"

    def decide(self, k: int, t: float, x: np.ndarray, fx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def immediate() -> "StoppingRule":
        return FunctionRule(lambda t, x, fx: np.ones(x.shape[0], dtype=bool), "immediate")

    @staticmethod
    def never() -> "StoppingRule":
        return FunctionRule(lambda t, x, fx: np.zeros(x.shape[0], dtype=bool), "never")


@dataclass
class FunctionRule(StoppingRule):
    """Stop when ``fn(t, x, f(x))`` is True."""

    fn: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    name: str = "function"

    def decide(self, k, t, x, fx):
        return np.asarray(self.fn(t, x, fx), dtype=bool)


@dataclass
class RegionRule(StoppingRule):
    """Stop on first entry into an exercise :class:`RegionMask` (nearest node in time and space)."""

    region: RegionMask
    name: str = "region"

    def decide(self, k, t, x, fx):
        grid = self.region.grid
        j = int(np.argmin(np.abs(grid.time_nodes - t)))
        return self.region.lookup(j, x)


@dataclass
class RegressionRule(StoppingRule):
    """Stop when the payoff is positive and at least the regressed continuation value.

    ``coefficients[k]`` is ``None`` where no regression was fitted (no stopping).
    ``continuation0`` is the (common) continuation value at ``t_0``.
    """

    coefficients: list
    continuation0: float
    name: str = "lsm"

    def decide(self, k, t, x, fx):
        if k == 0:
            return (fx > 0) & (fx >= self.continuation0)
        entry = self.coefficients[k]
        if entry is None:
            return np.zeros(x.shape[0], dtype=bool)
        basis, coef = entry
        return (fx > 0) & (fx >= basis.design(x, fx) @ coef)


def _stop_times(batch: PathBatch, payoff: PayoffSpec, rule: StoppingRule) -> tuple[np.ndarray, np.ndarray]:
    N, M = batch.n_paths, batch.M
    tau = np.full(N, M)
    alive = np.ones(N, dtype=bool)
    fvals = np.empty((N, M + 1))
    for k in range(M + 1):
        x = batch.states[:, k, :]
        fvals[:, k] = payoff(x)
        if k == M or not alive.any():
            continue
        idx = np.flatnonzero(alive)
        stop = rule.decide(k, float(batch.time_nodes[k]), x[idx], fvals[idx, k])
        hit = idx[stop]
        tau[hit] = k
        alive[hit] = False
    return tau, fvals


def evaluate_stopping_rule(batch: PathBatch, discount: DiscountPath, payoff: PayoffSpec,
                           rule: StoppingRule) -> PriceEstimate:
    """Mean of ``l_tau f(X_tau)`` with ``tau`` the first node where the rule fires (``T`` if never)."""
    tau, fvals = _stop_times(batch, payoff, rule)
    rows = np.arange(batch.n_paths)
    cash = discount.factors[rows, tau] * fvals[rows, tau]
    se = float(cash.std(ddof=1) / math.sqrt(cash.size)) if cash.size > 1 else 0.0
    return PriceEstimate(float(cash.mean()), se, batch.n_paths, "rule_eval", batch.seed)


# ---------------------------------------------------------------------------
# Longstaff-Schwartz
# ---------------------------------------------------------------------------


def lsm_price(batch: PathBatch, discount: DiscountPath, payoff: PayoffSpec, degree: int = 3,
              include_payoff: bool = True, exercise: str = "american",
              split: bool = True) -> tuple[PriceEstimate, RegressionRule]:
    """Regression Monte Carlo price of the Bermudan problem on the batch nodes.

    The rule is fitted on the first half of the paths (in-the-money paths only,
    ties stop) and evaluated on the second half, which gives a low-biased
    estimate; the in-sample value is reported alongside. ``exercise="european"``
    only allows stopping at ``T``. Returns the estimate and the fitted rule.
    """
    N, M = batch.n_paths, batch.M
    l = discount.factors
    if exercise == "european":
        rule = RegressionRule([None] * (M + 1), math.inf, "european")
        est = evaluate_stopping_rule(batch, discount, payoff, StoppingRule.never())
        return PriceEstimate(est.value, est.std_error, N, "lsm", batch.seed, est.value), rule
    if exercise != "american":
        raise ValueError("exercise must be 'american' or 'european'")
    n_fit = N // 2 if (split and N >= 2) else N
    fit = slice(0, n_fit)
    X = batch.states[fit]
    fvals = np.stack([payoff(X[:, k, :]) for k in range(M + 1)], axis=1)
    x_scale = np.where(np.abs(batch.x0) > 0, np.abs(batch.x0), np.maximum(X.std(axis=(0, 1)), 1.0))
    basis0 = Basis(batch.d, degree, x_scale, payoff_scale(fvals), include_payoff)
    tau = np.full(n_fit, M)
    rows = np.arange(n_fit)
    coefs: list = [None] * (M + 1)
    notes: list[str] = []
    for k in range(M - 1, 0, -1):
        itm = fvals[:, k] > 0
        if itm.sum() == 0:
            continue
        y = l[fit][rows, tau] * fvals[rows, tau] / l[fit][:, k]
        fitted = fit_regression(basis0, X[itm, k, :], fvals[itm, k], y[itm], notes)
        if fitted is None:
            continue
        basis, coef = fitted
        coefs[k] = (basis, coef)
        cont = basis.design(X[itm, k, :], fvals[itm, k]) @ coef
        stop_idx = np.flatnonzero(itm)[fvals[itm, k] >= cont]
        tau[stop_idx] = k
    cash_fit = l[fit][rows, tau] * fvals[rows, tau]
    c0 = float(cash_fit.mean())
    f0 = float(payoff(batch.x0[None, :])[0])
    in_sample = max(f0, c0) if f0 > 0 else c0
    if notes:
        warnings.warn(notes[0] + f" ({len(notes)} occurrences)", RankDeficiencyWarning, stacklevel=2)
    rule = RegressionRule(coefs, c0)
    if n_fit == N:
        se = float(cash_fit.std(ddof=1) / math.sqrt(n_fit)) if n_fit > 1 else 0.0
        value = in_sample
    else:
        held = batch.subset(slice(n_fit, N))
        est = evaluate_stopping_rule(held, DiscountPath(l[n_fit:]), payoff, rule)
        value, se = est.value, est.std_error
    return PriceEstimate(value, se, N, "lsm", batch.seed, in_sample), rule


# ---------------------------------------------------------------------------
# Martingale diagnostics of l_t u(t, X_t)
# ---------------------------------------------------------------------------


class ValueFunction(Protocol):
    def value(self, t: float, x: np.ndarray) -> np.ndarray: ...

    def gradient(self, t: float, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class AnalyticValue:
    """Closed-form value function (e.g. a European price) with its gradient."""

    value_fn: Callable[[float, np.ndarray], np.ndarray]
    gradient_fn: Callable[[float, np.ndarray], np.ndarray] | None = None

    def value(self, t, x):
        return np.asarray(self.value_fn(t, np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, t, x):
        if self.gradient_fn is None:
            raise NotImplementedError("no gradient registered")
        return np.asarray(self.gradient_fn(t, np.asarray(x, dtype=float)), dtype=float)


def _surface_along(batch: PathBatch, surface: ValueFunction) -> np.ndarray:
    if isinstance(surface, ValueSurface):
        grid_t = surface.grid.time_nodes
        for t in batch.time_nodes:
            if np.min(np.abs(grid_t - t)) > 1e-9 * max(1.0, grid_t[-1]):
                raise MismatchError(f"batch time {t} is not a node of the surface grid")
    out = np.empty(batch.states.shape[:2])
    for k, t in enumerate(batch.time_nodes):
        out[:, k] = surface.value(float(t), batch.states[:, k, :])
    return out


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def _within(mean: float, se: float, k: float, atol: float, upper_only: bool) -> bool:
    if not np.isfinite(mean):
        return True
    if upper_only:
        return mean <= k * se + atol
    return abs(mean) <= k * se + atol


def _ols_with_se(A: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """OLS coefficients and heteroskedasticity-robust (HC0) covariance."""
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    bread = np.linalg.pinv(A.T @ A)
    meat = (A * resid[:, None] ** 2).T @ A
    return coef, bread @ meat @ bread


@dataclass
class PairResult:
    s: float
    t: float
    mean: float
    se: float
    max_conditional_z: float
    max_drift_z: float
    continuation_mean: float
    continuation_se: float
    n_continuation: int
    exercise_mean: float
    exercise_se: float
    n_exercise: int
    supermartingale_ok: bool
    martingale_ok: bool
    continuation_flat_ok: bool
    exercise_negative: bool


@dataclass
class SupermartingaleReport:
    pairs: list[PairResult]
    k_se: float
    passed: bool
    martingale_everywhere: bool

    def to_dict(self) -> dict:
        return {"k_se": self.k_se, "passed": self.passed, "martingale_everywhere": self.martingale_everywhere,
                "pairs": [asdict(p) for p in self.pairs]}


def _default_pairs(M: int) -> list[tuple[int, int]]:
    q = max(1, M // 4)
    marks = sorted(set([0, q, 2 * q, 3 * q, M]))
    return [(a, b) for a, b in zip(marks[:-1], marks[1:]) if b > a]


def supermartingale_check(batch: PathBatch, discount: DiscountPath, surface: ValueFunction,
                          payoff: PayoffSpec | None = None, pairs: Sequence[tuple[int, int]] | None = None,
                          k_se: float = 3.0, tol_region: float = 1e-5, n_bins: int = 5,
                          min_bin: int = 200) -> SupermartingaleReport:
    """Test that ``Y_t = l_t u(t, X_t)`` is a supermartingale, flat off the exercise set.

    For each node pair ``(s, t)``:

    * the unconditional mean of ``Y_t - Y_s`` and its piecewise-constant
      regression on ``X_s`` (means over ``n_bins`` quantile bins of the first
      coordinate) must be ``<= k_se`` standard errors;
    * on paths with ``X_s`` in the continuation set the process stopped at
      the first later node in the exercise set must have zero drift
      (``|mean| <= k_se`` SE), the discrete analogue of ``int 1_{D^c} dB = 0``;
    * on paths with ``X_s`` in the exercise set the one-step drift is
      reported and flagged when significantly negative.

    Without a payoff every node counts as continuation.
    """
    Y = discount.factors * _surface_along(batch, surface)
    N, M = batch.n_paths, batch.M
    ex = np.zeros((N, M + 1), dtype=bool)
    if payoff is not None:
        fvals = np.stack([payoff(batch.states[:, k, :]) for k in range(M + 1)], axis=1)
        u = Y / discount.factors
        scale = payoff_scale(fvals)
        ex = (np.abs(u - fvals) <= tol_region * scale) & (fvals > tol_region * scale)
    atol = 1e-12 * max(1.0, float(np.max(np.abs(Y))))
    results = []
    for s, t in (pairs or _default_pairs(M)):
        inc = Y[:, t] - Y[:, s]
        mean, se = _mean_se(inc)
        xs = batch.states[:, s, :]
        max_z = 0.0
        max_signed = mean / se if se > 0 else 0.0
        cond_ok = True
        if N >= 2 * n_bins * min_bin and xs[:, 0].std() > 0:
            # piecewise-constant regression on X_s: each bin mean is an unbiased estimate of the
            # bin average of E[Y_t - Y_s | X_s], which is <= 0 for a supermartingale
            edges = np.quantile(xs[:, 0], np.linspace(0, 1, n_bins + 1))
            which = np.clip(np.searchsorted(edges, xs[:, 0], side="right") - 1, 0, n_bins - 1)
            for b in range(n_bins):
                bm, bs = _mean_se(inc[which == b])
                cond_ok &= _within(bm, bs, k_se, atol, upper_only=True)
                if bs > 0:
                    max_z = max(max_z, abs(bm) / bs)
                    max_signed = max(max_signed, bm / bs)
        in_cont = ~ex[:, s]
        stopped = np.full(N, t)
        later = ex[:, s + 1:t + 1]
        if later.size:
            first = np.argmax(later, axis=1)
            hit = later.any(axis=1)
            stopped = np.where(hit, s + 1 + first, t)
        inc_stop = Y[np.arange(N), stopped] - Y[:, s]
        c_mean, c_se = _mean_se(inc_stop[in_cont])
        e_mean, e_se = _mean_se((Y[:, s + 1] - Y[:, s])[ex[:, s]])
        results.append(PairResult(
            float(batch.time_nodes[s]), float(batch.time_nodes[t]), mean, se, max_z, max_signed,
            c_mean, c_se, int(in_cont.sum()), e_mean, e_se, int(ex[:, s].sum()),
            supermartingale_ok=bool(_within(mean, se, k_se, atol, True) and cond_ok),
            martingale_ok=bool(_within(mean, se, k_se, atol, False) and max_z <= k_se),
            continuation_flat_ok=bool(_within(c_mean, c_se, k_se, atol, False)),
            exercise_negative=bool(np.isfinite(e_mean) and e_mean < -k_se * e_se - atol),
        ))
    passed = all(p.supermartingale_ok and p.continuation_flat_ok for p in results)
    return SupermartingaleReport(results, k_se, passed, all(p.martingale_ok for p in results))


@dataclass
class IntegrandBin:
    t: float
    lower: float
    upper: float
    n: int
    slope: list[float]
    target: list[float]
    z: list[float]
    ok: bool


@dataclass
class IntegrandReport:
    bins: list[IntegrandBin]
    skipped: list[dict]
    k_se: float
    passed: bool

    def to_dict(self) -> dict:
        return {"k_se": self.k_se, "passed": self.passed, "skipped": self.skipped,
                "bins": [asdict(b) for b in self.bins]}


def _ols_influence(A: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """OLS coefficients and per-row influence ``(A^T A)^{-1} A_i e_i`` (HC0 covariance is ``Psi^T Psi``)."""
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return coef, (A * resid[:, None]) @ np.linalg.pinv(A.T @ A)


def martingale_integrand_check(batch: PathBatch, discount: DiscountPath, surface: ValueFunction,
                               model: DiffusionModel, payoff: PayoffSpec | None = None,
                               steps: Sequence[int] | None = None, n_bins: int = 5,
                               min_bin: int = 200, k_se: float = 3.0,
                               tol_region: float = 1e-5, substep: float | None = None,
                               seed: int | None = None, richardson: bool = True) -> IntegrandReport:
    """Compare the martingale integrand of ``Y = l u(t, X)`` with ``h = l sigma^T grad u``.

    At each selected step ``k`` the continuation-region paths are split into
    quantile bins of ``X_k[0]``. In a bin, ``Y_{k+1} - Y_k - h . dW_k`` is
    regressed on ``(1, dW_k)`` (the intercept absorbs the drift) and the bin
    passes when the slopes are within ``k_se`` standard errors (HC0) of zero.
    ``slope`` reports the regression of ``Y_{k+1} - Y_k`` itself and ``target``
    the ``dW``-weighted mean of ``h``.

    The slope carries an ``O(dt)`` bias from the curvature and time variation
    of ``u`` while its standard error only shrinks like ``sqrt(dt)``. With
    ``substep`` set, each ``X_k`` is instead advanced by Euler steps of that
    length with fresh increments (seeded by ``seed``, default the batch seed);
    ``t_k + substep`` (and ``t_k + 2 substep`` with ``richardson``) must be
    surface nodes. ``richardson`` combines the one- and two-substep slopes as
    ``2 b(delta) - b(2 delta)``, which cancels the first-order bias.
    """
    M = batch.M
    steps = list(steps) if steps is not None else sorted(set([max(1, M // 4), M // 2, (3 * M) // 4]))
    bins: list[IntegrandBin] = []
    skipped: list[dict] = []
    l = discount.factors
    for k in steps:
        t0 = float(batch.time_nodes[k])
        X = batch.states[:, k, :]
        grad = surface.gradient(t0, X)
        h = l[:, k, None] * np.einsum("pin,pi->pn", model.sigma(t0, X), grad)
        y0 = l[:, k] * surface.value(t0, X)
        legs = []  # (weight, response, increment)
        if substep is None:
            y1 = l[:, k + 1] * surface.value(float(batch.time_nodes[k + 1]), batch.states[:, k + 1, :])
            legs.append((1.0, y1 - y0, batch.increments[:, k, :]))
        else:
            dt = float(substep)
            rng = path_rng(batch.seed if seed is None else seed, batch.path_offset + k, _SUBSTEP_STREAM)
            n_sub = 2 if richardson else 1
            dW = rng.standard_normal((n_sub, batch.n_paths, batch.n)) * math.sqrt(dt)
            tn = t0 + dt * np.arange(n_sub + 1)
            path = integrate_increments(model, tn, X, np.swapaxes(dW, 0, 1))
            disc = l[:, k].copy()
            ys = []
            for j in range(1, n_sub + 1):
                disc = disc * np.exp(-0.5 * (model.r(tn[j - 1], path[:, j - 1]) + model.r(tn[j], path[:, j])) * dt)
                ys.append(disc * surface.value(float(tn[j]), path[:, j]) - y0)
            if richardson:
                legs.append((2.0, ys[0], dW[0]))
                legs.append((-1.0, ys[1], dW[0] + dW[1]))
            else:
                legs.append((1.0, ys[0], dW[0]))
        keep = np.ones(batch.n_paths, dtype=bool)
        if payoff is not None:
            fx = payoff(X)
            scale = payoff_scale(fx)
            keep = ~((np.abs(y0 / l[:, k] - fx) <= tol_region * scale) & (fx > tol_region * scale))
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            skipped.append({"t": t0, "reason": "no continuation paths"})
            continue
        edges = np.quantile(X[idx, 0], np.linspace(0, 1, n_bins + 1))
        which = np.clip(np.searchsorted(edges, X[idx, 0], side="right") - 1, 0, n_bins - 1)
        for b in range(n_bins):
            sel = idx[which == b]
            if sel.size < min_bin:
                skipped.append({"t": t0, "bin": b, "n": int(sel.size), "reason": "insufficient paths"})
                continue
            slope = np.zeros(batch.n)
            gap = np.zeros(batch.n)
            psi = np.zeros((sel.size, batch.n))
            target = np.zeros(batch.n)
            for wgt, y, w in legs:
                A = np.column_stack([np.ones(sel.size), w[sel]])
                coef, _ = _ols_influence(A, y[sel])
                slope += wgt * coef[1:]
                rc, infl = _ols_influence(A, y[sel] - (h[sel] * w[sel]).sum(axis=1))
                gap += wgt * rc[1:]
                psi += wgt * infl[:, 1:]
                w2 = w[sel] ** 2
                target += wgt * (h[sel] * w2).sum(axis=0) / np.maximum(w2.sum(axis=0), 1e-300)
            se = np.sqrt(np.maximum(np.einsum("pi,pi->i", psi, psi), 0.0))
            atol = 1e-10 * max(1.0, float(np.max(np.abs(target))))
            ok = bool(np.all(np.abs(gap) <= k_se * se + atol))
            z = np.where(se > 0, np.abs(gap) / np.where(se > 0, se, 1.0), 0.0)
            bins.append(IntegrandBin(t0, float(edges[b]), float(edges[b + 1]), int(sel.size),
                                     slope.tolist(), target.tolist(), z.tolist(), ok))
    passed = bool(bins) and all(b.ok for b in bins)
    return IntegrandReport(bins, skipped, k_se, passed)
