"""Euler-Maruyama path simulation, first-variation flows and discount factors.

Every path draws its Brownian increments from its own counter-based stream
(Philox keyed by ``(seed, path index)``), so any partition of the path index
range, simulated in any order or concurrently, reproduces the same batch.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import MismatchError, NonFiniteStateError
from .model import DiffusionModel

_MASK64 = (1 << 64) - 1


def path_rng(seed: int, path: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one path; ``stream`` separates unrelated uses."""
    key = np.array([(int(seed) + (int(stream) << 40)) & _MASK64, int(path) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def max_threads() -> int:
    """Thread cap from ``SNELLVI_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("SNELLVI_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Simulated trajectories with the Brownian increments that produced them.

    ``states`` has shape ``(n_paths, M+1, d)`` and ``increments`` ``(n_paths, M, n)``.
    ``path_offset`` is the global index of the first path (non-zero for chunks).
    """

    time_nodes: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    seed: int
    x0: np.ndarray
    scheme: str = "euler_maruyama"
    path_offset: int = 0

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def M(self) -> int:
        return self.time_nodes.size - 1

    @property
    def d(self) -> int:
        return self.states.shape[2]

    @property
    def n(self) -> int:
        return self.increments.shape[2]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.time_nodes)

    def subset(self, rows: slice | np.ndarray) -> "PathBatch":
        offset = self.path_offset + (rows.start or 0) if isinstance(rows, slice) else self.path_offset
        return PathBatch(self.time_nodes, self.states[rows], self.increments[rows], self.seed,
                         self.x0, self.scheme, offset)


@dataclass(frozen=True, eq=False)
class FirstVariationFlow:
    """Jacobians ``J_t = dX_t / dx`` along each path, shape ``(n_paths, M+1, d, d)``."""

    jacobians: np.ndarray


@dataclass(frozen=True, eq=False)
class DiscountPath:
    """Pathwise discount factors ``l_t = exp(-int_0^t r(s, X_s) ds)``, shape ``(n_paths, M+1)``."""

    factors: np.ndarray


def _gaussian_increments(seed: int, paths: range, time_nodes: np.ndarray, n: int,
                         antithetic: bool) -> np.ndarray:
    M = time_nodes.size - 1
    sq = np.sqrt(np.diff(time_nodes))[:, None]
    out = np.empty((len(paths), M, n))
    for row, p in enumerate(paths):
        if antithetic:
            z = path_rng(seed, p // 2).standard_normal((M, n))
            out[row] = (z if p % 2 == 0 else -z) * sq
        else:
            out[row] = path_rng(seed, p).standard_normal((M, n)) * sq
    return out


def integrate_increments(model: DiffusionModel, time_nodes: np.ndarray, x0: np.ndarray,
                         increments: np.ndarray, *, path_offset: int = 0,
                         check_finite: bool = True) -> np.ndarray:
    """Run the Euler scheme driven by given increments.

    ``increments`` has shape ``(..., M, n)``; returns states ``(..., M+1, d)``.
    """
    time_nodes = np.asarray(time_nodes, dtype=float)
    incr = np.asarray(increments, dtype=float)
    lead = incr.shape[:-2]
    M = time_nodes.size - 1
    if incr.shape[-2:] != (M, model.n):
        raise MismatchError("increments do not match the time nodes / noise dimension")
    dt = np.diff(time_nodes)
    states = np.empty(lead + (M + 1, model.d))
    x = np.broadcast_to(np.asarray(x0, dtype=float), lead + (model.d,)).copy()
    states[..., 0, :] = x
    for k in range(M):
        t = time_nodes[k]
        dw = incr[..., k, :]
        x = x + model.b(t, x) * dt[k] + np.einsum("...ij,...j->...i", model.sigma(t, x), dw)
        if check_finite and not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.all(np.isfinite(x.reshape(-1, model.d)), axis=-1))[0, 0]
            raise NonFiniteStateError(
                f"non-finite state at step {k + 1}, path {path_offset + int(bad)}", k + 1, path_offset + int(bad))
        states[..., k + 1, :] = x
    return states


def simulate_paths(model: DiffusionModel, time_nodes: Sequence[float], n_paths: int,
                   x0: Sequence[float], seed: int, *, path_offset: int = 0,
                   antithetic: bool = False, n_workers: int | None = None) -> PathBatch:
    """Euler-Maruyama batch for paths ``path_offset .. path_offset + n_paths - 1``.

    With ``antithetic=True`` paths ``2j`` and ``2j+1`` share a stream with
    opposite signs. ``n_workers`` (default ``SNELLVI_THREADS``) splits the index
    range across threads; the result does not depend on the split.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    time_nodes = np.asarray(time_nodes, dtype=float)
    if time_nodes.ndim != 1 or time_nodes.size < 2 or np.any(np.diff(time_nodes) <= 0):
        raise ValueError("time nodes must be strictly increasing with >= 2 entries")
    x0 = np.asarray(x0, dtype=float).reshape(model.d)
    workers = min(n_workers or max_threads(), n_paths)
    bounds = np.linspace(0, n_paths, workers + 1).astype(int)

    def run(i):
        rows = range(path_offset + bounds[i], path_offset + bounds[i + 1])
        incr = _gaussian_increments(seed, rows, time_nodes, model.n, antithetic)
        return incr, integrate_increments(model, time_nodes, x0, incr, path_offset=rows.start)

    if workers == 1:
        parts = [run(0)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(workers)))
    incr = np.concatenate([p[0] for p in parts])
    states = np.concatenate([p[1] for p in parts])
    return PathBatch(time_nodes, states, incr, int(seed), x0, "euler_maruyama", path_offset)


def iter_path_chunks(model: DiffusionModel, time_nodes: Sequence[float], n_paths: int,
                     x0: Sequence[float], seed: int, chunk_size: int = 2000,
                     antithetic: bool = False) -> Iterator[PathBatch]:
    """Yield consecutive chunks of the batch ``simulate_paths`` would return."""
    for start in range(0, n_paths, chunk_size):
        yield simulate_paths(model, time_nodes, min(chunk_size, n_paths - start), x0, seed,
                             path_offset=start, antithetic=antithetic, n_workers=1)


def rate_along(batch: PathBatch, model: DiffusionModel) -> np.ndarray:
    """``r(t_k, X_k)`` for every path and node, shape ``(n_paths, M+1)``."""
    out = np.empty(batch.states.shape[:2])
    for k, t in enumerate(batch.time_nodes):
        out[:, k] = model.r(t, batch.states[:, k, :])
    return out


def discount_factors(batch: PathBatch, model: DiffusionModel) -> DiscountPath:
    """Trapezoidal discount factors along each path."""
    r = rate_along(batch, model)
    if not np.all(np.isfinite(r)):
        raise NonFiniteStateError("rate is not finite along the batch", -1, -1)
    seg = 0.5 * (r[:, 1:] + r[:, :-1]) * batch.dt
    exponent = np.concatenate([np.zeros((batch.n_paths, 1)), np.cumsum(seg, axis=1)], axis=1)
    return DiscountPath(np.exp(-exponent))


def _fd_step(x: np.ndarray) -> np.ndarray:
    return np.maximum(1e-5, 1e-7 * np.abs(x))


def drift_jacobian(model: DiffusionModel, t: float, x: np.ndarray) -> np.ndarray:
    """``d b / d x`` (``(..., d, d)``): analytic if registered, else central differences."""
    if model.drift_jacobian is not None:
        return np.broadcast_to(np.asarray(model.drift_jacobian(t, x), float), x.shape[:-1] + (model.d, model.d))
    h = _fd_step(x)
    out = np.empty(x.shape[:-1] + (model.d, model.d))
    for l in range(model.d):
        e = np.zeros(model.d)
        e[l] = 1.0
        hl = h[..., l:l + 1]
        out[..., :, l] = (model.b(t, x + hl * e) - model.b(t, x - hl * e)) / (2 * hl)
    return out


def diffusion_jacobian(model: DiffusionModel, t: float, x: np.ndarray) -> np.ndarray:
    """``d sigma_ik / d x_l`` (``(..., d, n, d)``)."""
    shape = x.shape[:-1] + (model.d, model.n, model.d)
    if model.diffusion_jacobian is not None:
        return np.broadcast_to(np.asarray(model.diffusion_jacobian(t, x), float), shape)
    h = _fd_step(x)
    out = np.empty(shape)
    for l in range(model.d):
        e = np.zeros(model.d)
        e[l] = 1.0
        hl = h[..., l:l + 1, None]
        out[..., l] = (model.sigma(t, x + h[..., l:l + 1] * e) - model.sigma(t, x - h[..., l:l + 1] * e)) / (2 * hl)
    return out


def first_variation(batch: PathBatch, model: DiffusionModel) -> FirstVariationFlow:
    """Euler scheme for ``dJ = db J dt + sum_k dsigma_k J dW^k`` with ``J_0 = I``."""
    N, M, d = batch.n_paths, batch.M, batch.d
    J = np.empty((N, M + 1, d, d))
    cur = np.broadcast_to(np.eye(d), (N, d, d)).copy()
    J[:, 0] = cur
    dt = batch.dt
    for k in range(M):
        t = batch.time_nodes[k]
        x = batch.states[:, k, :]
        db = drift_jacobian(model, t, x)
        ds = diffusion_jacobian(model, t, x)
        lin = db * dt[k] + np.einsum("pikl,pk->pil", ds, batch.increments[:, k, :])
        cur = cur + lin @ cur
        if not np.all(np.isfinite(cur)):
            raise NonFiniteStateError(f"non-finite Jacobian at step {k + 1}", k + 1, -1)
        J[:, k + 1] = cur
    return FirstVariationFlow(J)
