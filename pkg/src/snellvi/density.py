"""Kernel estimates of the transition density from simulated paths and the positivity set it implies."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import SpaceTimeGrid
from .sde import PathBatch


class SparseSampleWarning(RuntimeWarning):
    """Too few paths for the requested grid resolution."""


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Kernel density estimates ``p(0, t_k; z, y)`` on the nodes of ``grid``.

    ``values`` has shape ``(n_slices, *grid.shape)``; ``mass`` is the box
    integral of each slice (trapezoidal), ``degenerate`` marks slices whose
    sample has zero spread (reported as a point mass at the nearest node).
    """

    grid: SpaceTimeGrid
    slice_times: np.ndarray
    values: np.ndarray
    bandwidths: np.ndarray
    mass: np.ndarray
    degenerate: np.ndarray
    n_paths: int

    def slice_max(self) -> np.ndarray:
        return self.values.reshape(self.values.shape[0], -1).max(axis=1)


@dataclass(frozen=True, eq=False)
class PositivityMask:
    """Boolean mask ``p > threshold`` per slice, restricted to the grid interior."""

    density: DensityGrid
    mask: np.ndarray
    threshold: float
    relative: bool
    coverage: np.ndarray

    @property
    def whole_box(self) -> bool:
        return bool(np.all(self.coverage >= 1.0))

    def claim(self) -> str:
        if self.whole_box:
            return "verified on the whole box"
        return "verified on the positivity-set estimate only"

    def summary(self) -> dict:
        return {"threshold": self.threshold, "relative": self.relative,
                "slice_times": self.density.slice_times.tolist(),
                "coverage": self.coverage.tolist(), "whole_box": self.whole_box, "claim": self.claim()}


def silverman_bandwidths(sample: np.ndarray) -> np.ndarray:
    """Per-axis ``1.06 sd n^{-1/(d+4)}`` (Scott-type rate in ``d`` dimensions, Silverman for ``d=1``)."""
    n, d = sample.shape
    sd = sample.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    return 1.06 * sd * n ** (-1.0 / (d + 4))


def _axis_weights(x: np.ndarray) -> np.ndarray:
    w = np.zeros_like(x)
    h = np.diff(x)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def estimate_density(batch: PathBatch, grid: SpaceTimeGrid, slices: list[int] | None = None,
                     bandwidth: float | np.ndarray | None = None, chunk: int = 4096) -> DensityGrid:
    """Product-Gaussian KDE of ``X_{t_k}`` on the grid nodes for each batch node index in ``slices``.

    Bandwidths follow the per-axis normal-reference rule unless ``bandwidth``
    is given (scalar or one per axis). The kernel is separable, so a slice
    costs ``O(n_paths * sum(axis sizes))`` kernel evaluations plus one tensor
    contraction.
    """
    if grid.d != batch.d:
        raise ValueError("grid and batch dimensions differ")
    slices = list(range(1, batch.M + 1)) if slices is None else list(slices)
    N = batch.n_paths
    n_nodes = grid.n_nodes
    if N < 10 * grid.d or N < 0.1 * min(n_nodes, 10_000):
        warnings.warn(f"{N} paths for {n_nodes} grid nodes", SparseSampleWarning, stacklevel=2)
    weights = [_axis_weights(ax) for ax in grid.space_axes]
    out = np.empty((len(slices),) + grid.shape)
    bws = np.empty((len(slices), grid.d))
    degenerate = np.zeros(len(slices), dtype=bool)
    mass = np.empty(len(slices))
    for j, k in enumerate(slices):
        X = batch.states[:, k, :]
        h = silverman_bandwidths(X) if bandwidth is None else np.broadcast_to(
            np.asarray(bandwidth, dtype=float), (grid.d,)).copy()
        bws[j] = h
        if np.any(h <= 0):
            degenerate[j] = True
            dens = np.zeros(grid.shape)
            # point mass on the node nearest to the (common) sample location
            idx = grid.nearest_indices(X.mean(axis=0)[None, :])[0]
            cell = np.prod([weights[a][idx[a]] for a in range(grid.d)])
            dens[tuple(idx)] = 1.0 / cell if cell > 0 else np.inf
            out[j] = dens
            mass[j] = 1.0
            continue
        acc = np.zeros(grid.shape)
        for s in range(0, N, chunk):
            Xc = X[s:s + chunk]
            factors = [np.exp(-0.5 * ((Xc[:, a, None] - grid.space_axes[a][None, :]) / h[a]) ** 2)
                       / (h[a] * math.sqrt(2 * math.pi)) for a in range(grid.d)]
            if grid.d == 1:
                acc += factors[0].sum(axis=0)
            elif grid.d == 2:
                acc += factors[0].T @ factors[1]
            else:
                letters = "abcdefgh"[:grid.d]
                spec = ",".join("p" + c for c in letters) + "->" + letters
                acc += np.einsum(spec, *factors)
        dens = acc / N
        out[j] = dens
        m = dens
        for a in range(grid.d - 1, -1, -1):
            m = m @ weights[a]
        mass[j] = float(m)
    return DensityGrid(grid, batch.time_nodes[slices], out, bws, mass, degenerate, N)


def positivity_set(density: DensityGrid, threshold: float = 1e-4, relative: bool = True) -> PositivityMask:
    """Nodes where the estimate exceeds ``threshold`` (times the slice maximum when ``relative``).

    ``coverage`` is the fraction of interior nodes inside the mask per slice.
    """
    vals = density.values
    if relative:
        level = threshold * density.slice_max()
    else:
        level = np.full(vals.shape[0], float(threshold))
    level = level.reshape((-1,) + (1,) * density.grid.d)
    interior = density.grid.interior_mask()
    with np.errstate(invalid="ignore"):
        mask = (vals > level) & interior[None]
    coverage = mask.reshape(mask.shape[0], -1).sum(axis=1) / max(int(interior.sum()), 1)
    return PositivityMask(density, mask, float(threshold), relative, coverage)
