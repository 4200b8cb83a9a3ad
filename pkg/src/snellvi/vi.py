"""Backward theta-scheme for the obstacle problem, solved level by level as an LCP.

At every time level the discrete problem is: find ``u`` with

    B u >= g,   u >= f,   (B u - g) * (u - f) = 0   (componentwise)

where ``B = I - theta*dt*L`` and ``g = (I + (1-theta)*dt*L) u_next`` on interior
rows. It is solved by projected SOR with a multicolour (red-black in 1-D)
ordering, so a colour class is updated in one vectorised step.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, GridError, MismatchError
from .model import (DiffusionModel, GeneratorStencil, PayoffSpec, SpaceTimeGrid, build_stencil,
                    grid_interpolant)

logger = logging.getLogger(__name__)


class CFLWarning(RuntimeWarning):
    """The implicit operator is not diagonally dominant at the chosen time step."""


@dataclass(frozen=True)
class SolverParams:
    theta: float = 0.5
    rannacher_steps: int = 2
    omega: float = 1.2
    tol: float = 1e-8
    max_iters: int = 10_000
    tol_obstacle: float = 1e-6
    american: bool = True

    @classmethod
    def from_dict(cls, data: dict | None) -> "SolverParams":
        from .errors import ConfigError

        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**data)


def payoff_scale(values: np.ndarray) -> float:
    """Normalisation used for tolerances: ``max |f|`` over the grid, or 1 if ``f = 0``."""
    m = float(np.max(np.abs(values))) if np.size(values) else 0.0
    return m if m > 0 else 1.0


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """Value function on a grid: ``values[k]`` is ``u(t_k, .)`` in grid shape."""

    grid: SpaceTimeGrid
    values: np.ndarray
    payoff: PayoffSpec | None = None
    residuals: np.ndarray | None = None
    solver_meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def _interp(self, k: int, what: str) -> Callable[[np.ndarray], np.ndarray]:
        key = (k, what)
        if key not in self._cache:
            axes = self.grid.space_axes
            if what == "value":
                self._cache[key] = grid_interpolant(axes, self.values[k])
            else:
                comp = int(what[4:])
                grads = np.gradient(self.values[k], *axes, edge_order=2)
                g = grads if self.grid.d > 1 else [grads]
                self._cache[key] = grid_interpolant(axes, g[comp])
        return self._cache[key]

    def _outside(self, x: np.ndarray) -> np.ndarray:
        return ~self.grid.contains(x)

    def value(self, t: float, x: np.ndarray) -> np.ndarray:
        """Interpolated ``u(t, x)`` at a grid time; outside the box the boundary policy applies."""
        k = self._time_index(t)
        x = np.asarray(x, dtype=float)
        out = self._interp(k, "value")(x)
        if self.grid.boundary_policy == "dirichlet_payoff" and self.payoff is not None:
            outside = self._outside(x)
            if np.any(outside):
                out = np.where(outside, self.payoff(x), out)
        return out

    def gradient(self, t: float, x: np.ndarray) -> np.ndarray:
        """Stencil gradient of ``u(t, .)`` interpolated to ``x``; shape ``(..., d)``."""
        k = self._time_index(t)
        x = np.asarray(x, dtype=float)
        return np.stack([self._interp(k, f"grad{j}")(x) for j in range(self.grid.d)], axis=-1)

    def price(self, x0, t: float = 0.0) -> float:
        return float(self.value(t, np.asarray(x0, dtype=float)[None, :])[0])

    def _time_index(self, t: float) -> int:
        try:
            return self.grid.time_index(t)
        except GridError:
            raise MismatchError(f"time {t} is not a node of the surface grid") from None


@dataclass(frozen=True, eq=False)
class LcpStep:
    """One time level: ``B`` (sparse), right-hand side ``g`` and obstacle ``f``."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    obstacle: np.ndarray

    def dominance_margin(self) -> np.ndarray:
        """``|B_ii| - sum_{j != i} |B_ij|`` per row (>= 0 means diagonally dominant)."""
        B = self.matrix
        diag = np.abs(B.diagonal())
        total = np.asarray(abs(B).sum(axis=1)).ravel()
        return 2 * diag - total


def node_colors(grid: SpaceTimeGrid, cross_terms: bool) -> list[np.ndarray]:
    """Flat index sets of the PSOR colour classes.

    Red-black (index-sum parity) without mixed derivatives; with them the
    ``2**d`` parity vectors, so no two nodes of one class share a 9-point stencil.
    """
    idx = np.indices(grid.shape).reshape(grid.d, -1)
    if cross_terms and grid.d > 1:
        code = sum((idx[k] % 2) << k for k in range(grid.d))
        n_col = 2 ** grid.d
    else:
        code = idx.sum(axis=0) % 2
        n_col = 2
    return [np.flatnonzero(code == c) for c in range(n_col)]


def psor(step: LcpStep, u0: np.ndarray, colors: list[np.ndarray], omega: float, tol: float,
         max_iters: int) -> tuple[np.ndarray, int, float]:
    """Projected SOR; returns ``(u, iterations, last max update)``.

    Converged when the largest update of a sweep is ``<= tol``.
    """
    B = step.matrix
    f = step.obstacle
    g = step.rhs
    diag = B.diagonal()
    blocks = [(c, B[c], diag[c], g[c], f[c]) for c in colors]
    u = np.maximum(np.asarray(u0, dtype=float).copy(), f)
    change = math.inf
    for it in range(1, max_iters + 1):
        change = 0.0
        for c, Bc, dc, gc, fc in blocks:
            old = u[c]
            new = np.maximum(old + omega * (gc - Bc @ u) / dc, fc)
            u[c] = new
            change = max(change, float(np.max(np.abs(new - old))))
        if change <= tol:
            return u, it, change
    return u, max_iters, change


def _neighbor_inward(grid: SpaceTimeGrid) -> np.ndarray:
    """For every node, the flat index of the node one step towards the interior."""
    idx = np.indices(grid.shape)
    for k, size in enumerate(grid.shape):
        idx[k] = np.clip(idx[k], 1, size - 2)
    return np.ravel_multi_index(tuple(idx.reshape(grid.d, -1)), grid.shape)


def _sub_steps(grid: SpaceTimeGrid, params: SolverParams):
    """Backward sub-steps ``(k, t_from, t_to, theta)``; the Rannacher start uses implicit half-steps."""
    M = grid.M
    n_replace = min(M, params.rannacher_steps // 2) if params.theta != 1.0 else 0
    steps = []
    for k in range(M - 1, -1, -1):
        t0, t1 = grid.time_nodes[k], grid.time_nodes[k + 1]
        if M - 1 - k < n_replace:
            mid = 0.5 * (t0 + t1)
            steps.append((k, t1, mid, 1.0, False))
            steps.append((k, mid, t0, 1.0, True))
        else:
            steps.append((k, t1, t0, params.theta, True))
    return steps


def solve_backward(model: DiffusionModel, payoff: PayoffSpec, grid: SpaceTimeGrid,
                   params: SolverParams | None = None) -> ValueSurface:
    """Solve ``max(du/dt + A u - r u, f - u) = 0``, ``u(T) = f`` backwards in time.

    Crank-Nicolson (``theta = 1/2``) with a Rannacher start: the last interval
    is covered by ``rannacher_steps`` implicit Euler half-steps. Each level is
    an LCP solved by PSOR warm-started from the later level. With
    ``american=False`` the obstacle is dropped and the linear system solved
    directly (European control).

    The implicit matrix is diagonally dominant, hence PSOR convergent, when
    ``dt <= 1 / (theta * max_i(L_ii + sum_{j != i} |L_ij|))``; that bound is
    infinite whenever the central first-derivative terms satisfy the cell
    Peclet condition. Violations emit :class:`CFLWarning`.
    """
    params = params or SolverParams()
    if grid.d != model.d:
        raise GridError("grid dimension does not match the model")
    if grid.d > 3:
        raise GridError("the grid solver supports d <= 3")
    nodes = grid.nodes()
    f = payoff(nodes).astype(float).ravel()
    if not np.all(np.isfinite(f)):
        raise GridError("payoff is not finite on the grid")
    scale = payoff_scale(f)
    interior = grid.interior_mask().ravel()
    boundary = np.flatnonzero(~interior)
    neumann = grid.boundary_policy == "neumann_zero"
    nb = _neighbor_inward(grid)[boundary]
    N = grid.n_nodes
    eye = sp.identity(N, format="csr")
    if neumann:
        coupling = sp.csr_matrix((-np.ones(boundary.size), (boundary, nb)), shape=(N, N))

    stencils: dict[float, GeneratorStencil] = {}

    def stencil(t: float) -> GeneratorStencil:
        key = 0.0 if model.time_homogeneous else float(t)
        if key not in stencils:
            if len(stencils) > 4:
                stencils.clear()
            stencils[key] = build_stencil(model, grid, key)
        return stencils[key]

    colors = None
    values = np.empty((grid.M + 1, N))
    residuals = np.zeros((grid.M + 1, N))
    values[-1] = f
    iterations = np.zeros(grid.M, dtype=int)
    warnings_seen: list[str] = []
    dt_bound = math.inf
    u = f.copy()
    tol = params.tol * scale
    for k, t_from, t_to, theta, closes_level in _sub_steps(grid, params):
        dt = t_from - t_to
        L_to = stencil(t_to).matrix
        rhs = u.copy()
        if theta < 1.0:
            rhs = rhs + (1.0 - theta) * dt * (stencil(t_from).matrix @ u)
        B = (eye - (theta * dt) * L_to).tocsr()
        if neumann:
            B = (B + coupling).tocsr()
            rhs[boundary] = 0.0
        else:
            rhs[boundary] = f[boundary]
        step = LcpStep(B, rhs, f if params.american else np.full(N, -np.inf))
        excess = L_to.diagonal() + (np.asarray(abs(L_to).sum(axis=1)).ravel() - np.abs(L_to.diagonal()))
        worst = float(excess[interior].max()) if interior.any() else 0.0
        if worst > 0:
            dt_bound = min(dt_bound, 1.0 / (theta * worst))
        if dt > dt_bound and not warnings_seen:
            msg = f"implicit operator not diagonally dominant: dt={dt:.3g} > bound {dt_bound:.3g}"
            warnings_seen.append(msg)
            warnings.warn(msg, CFLWarning, stacklevel=2)
        if params.american:
            if colors is None:
                colors = node_colors(grid, stencil(t_to).has_cross_terms)
            u_new, its, change = psor(step, u, colors, params.omega, tol, params.max_iters)
            if change > tol:
                raise ConvergenceError(
                    f"PSOR did not converge at level {k} (max update {change:.3e} after {its} sweeps)",
                    level=k, residual=change)
            iterations[k] += its
        else:
            u_new = spla.spsolve(B.tocsc(), rhs)
        u = u_new
        if closes_level:
            values[k] = u
            slack = B @ u - rhs
            residuals[k] = np.minimum(slack, u - f) if params.american else slack
    meta: dict[str, Any] = {
        "method": "psor" if params.american else "direct",
        "theta": params.theta,
        "rannacher_steps": params.rannacher_steps,
        "omega": params.omega,
        "tol": params.tol,
        "scale": scale,
        "iterations": iterations.tolist(),
        "max_lcp_residual": float(np.max(np.abs(residuals))),
        "dt_bound": dt_bound,
        "warnings": warnings_seen,
    }
    return ValueSurface(grid, values.reshape((grid.M + 1,) + grid.shape), payoff,
                        residuals.reshape((grid.M + 1,) + grid.shape), meta)


@dataclass(frozen=True)
class ResidualStats:
    max_abs: float
    p99_abs: float
    scale: float
    per_node: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "p99_abs": self.p99_abs, "scale": self.scale}


def complementarity_residual(surface: ValueSurface, model: DiffusionModel,
                             payoff: PayoffSpec | None = None, scale: float | None = None,
                             percentile: float = 99.0) -> ResidualStats:
    """Consistency residual ``rho = min(-(du/dt + A u - r u)_h, u - f)`` per interior node.

    The time derivative is the centred difference across ``t_k`` and the space
    operator the generator stencil at ``t_k``; these are not the solver's
    own equations, so ``rho`` measures how well the discrete solution satisfies
    the continuous complementarity system and shrinks under refinement.
    Returned statistics are normalised by ``scale`` (default ``max |f|``).
    """
    payoff = payoff or surface.payoff
    grid = surface.grid
    nodes = grid.nodes()
    f = payoff(nodes).ravel()
    scale = scale or payoff_scale(f)
    interior = grid.interior_mask().ravel()
    U = surface.values.reshape(grid.M + 1, -1)
    tn = grid.time_nodes
    rho = np.full(U.shape, np.nan)
    for k in range(1, grid.M):
        L = build_stencil(model, grid, tn[k]).matrix
        dudt = (U[k + 1] - U[k - 1]) / (tn[k + 1] - tn[k - 1])
        pde = -(dudt + L @ U[k])
        rho[k] = np.where(interior, np.minimum(pde, U[k] - f), np.nan)
    vals = np.abs(rho[np.isfinite(rho)]) / scale
    if vals.size == 0:
        return ResidualStats(0.0, 0.0, scale, rho.reshape(surface.values.shape))
    return ResidualStats(float(vals.max()), float(np.percentile(vals, percentile)), scale,
                         rho.reshape(surface.values.shape))


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Boolean mask over ``(time node, space nodes)``; ``kind`` is exercise or continuation."""

    mask: np.ndarray
    kind: str
    grid: SpaceTimeGrid

    def lookup(self, k: int, x: np.ndarray) -> np.ndarray:
        """Mask value at the nearest space node of ``x`` for time index ``k``; False outside the box."""
        x = np.asarray(x, dtype=float)
        idx = self.grid.nearest_indices(x)
        out = self.mask[k][idx]
        return out & self.grid.contains(x)


@dataclass(frozen=True, eq=False)
class RegionPair:
    exercise: RegionMask
    continuation: RegionMask
    tol: float
    upper_boundary: np.ndarray | None = None
    lower_boundary: np.ndarray | None = None

    def summary(self) -> dict:
        interior = self.exercise.grid.interior_mask()
        inner = self.exercise.mask[1:-1][:, interior] if self.exercise.mask.shape[0] > 2 else np.zeros(0)
        out = {"tol": self.tol, "exercise_fraction_open_interval": float(inner.mean()) if inner.size else 0.0}
        if self.upper_boundary is not None:
            out["free_boundary_t0_upper"] = _nan_to_none(self.upper_boundary[0])
            out["free_boundary_t0_lower"] = _nan_to_none(self.lower_boundary[0])
        return out


def _nan_to_none(v: float):
    return None if not np.isfinite(v) else float(v)


def extract_regions(surface: ValueSurface, payoff: PayoffSpec | None = None,
                    tol_region: float | None = None, in_the_money: bool = True) -> RegionPair:
    """Exercise set ``{|u - f| <= tol_region * scale}`` and its complement on interior nodes.

    ``tol_region`` defaults to ten times the solver's obstacle tolerance. Before
    maturity, ``in_the_money`` additionally requires ``f > tol_region * scale``:
    far out of the money both ``u`` and ``f`` vanish to within the tolerance,
    yet stopping there is not optimal. At ``t = T`` every interior node is
    exercised. In 1-D the per-level supremum/infimum of exercised nodes is
    returned as well (``upper_boundary`` is the early-exercise boundary of a put).
    """
    payoff = payoff or surface.payoff
    grid = surface.grid
    f = payoff(grid.nodes()).reshape(grid.shape)
    if tol_region is None:
        tol_region = 10.0 * SolverParams().tol_obstacle
    scale = payoff_scale(f)
    interior = grid.interior_mask()
    ex = (np.abs(surface.values - f) <= tol_region * scale) & interior
    if in_the_money:
        ex[:-1] &= f > tol_region * scale
    cont = interior & ~ex
    upper = lower = None
    if grid.d == 1:
        x = grid.space_axes[0]
        upper = np.array([x[row].max() if row.any() else np.nan for row in ex])
        lower = np.array([x[row].min() if row.any() else np.nan for row in ex])
    return RegionPair(RegionMask(ex, "exercise", grid), RegionMask(cont, "continuation", grid),
                      tol_region, upper, lower)
