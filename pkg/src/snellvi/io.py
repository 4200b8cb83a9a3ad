"""File formats: columnar binary path batches, CSV exports of batches, surfaces and density slices.

Batch binary layout (little endian)::

    bytes 0-7     magic b"SNVIBAT1"
    6 x int64     n_paths, M, d, n, seed, path_offset
    float64[M+1]  time nodes
    float64[d]    x0
    float64[n_paths, M+1, d]  states, row-major
    float64[n_paths, M, n]    Brownian increments, row-major
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .density import DensityGrid
from .errors import SnellVIError
from .sde import PathBatch
from .vi import ValueSurface

MAGIC = b"SNVIBAT1"
_LE = np.dtype("<f8")


def write_batch(batch: PathBatch, path: str | Path) -> Path:
    path = Path(path)
    header = np.array([batch.n_paths, batch.M, batch.d, batch.n, batch.seed, batch.path_offset], dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.tobytes())
        for arr in (batch.time_nodes, batch.x0, batch.states, batch.increments):
            fh.write(np.ascontiguousarray(arr, dtype=_LE).tobytes())
    return path


def read_batch(path: str | Path) -> PathBatch:
    raw = Path(path).read_bytes()
    if len(raw) < 56 or raw[:8] != MAGIC:
        raise SnellVIError(f"{path}: not a batch file")
    N, M, d, n, seed, offset = np.frombuffer(raw, dtype="<i8", count=6, offset=8).tolist()
    pos = 8 + 6 * 8
    if min(N, M, d, n) < 0 or len(raw) != pos + 8 * ((M + 1) + d + N * (M + 1) * d + N * M * n):
        raise SnellVIError(f"{path}: size does not match header")
    out = []
    for size, shape in (((M + 1), (M + 1,)), (d, (d,)), (N * (M + 1) * d, (N, M + 1, d)), (N * M * n, (N, M, n))):
        out.append(np.frombuffer(raw, dtype=_LE, count=size, offset=pos).reshape(shape).astype(float))
        pos += 8 * size
    return PathBatch(out[0], out[2], out[3], int(seed), out[1], "euler_maruyama", int(offset))


def batch_to_csv(batch: PathBatch, path: str | Path, max_paths: int = 10_000) -> Path:
    """One row per (path, node): path index, node, time, states, increment leaving the node."""
    if batch.n_paths > max_paths:
        raise SnellVIError(f"CSV export is limited to {max_paths} paths")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "k", "t"] + [f"x{i}" for i in range(batch.d)] + [f"dw{j}" for j in range(batch.n)])
        for p in range(batch.n_paths):
            for k in range(batch.M + 1):
                dw = batch.increments[p, k] if k < batch.M else np.full(batch.n, np.nan)
                w.writerow([batch.path_offset + p, k, repr(float(batch.time_nodes[k]))]
                           + [repr(float(v)) for v in batch.states[p, k]] + [repr(float(v)) for v in dw])
    return path


def surface_to_csv(surface: ValueSurface, path: str | Path, time_indices=None) -> Path:
    path = Path(path)
    grid = surface.grid
    nodes = grid.nodes()
    ks = range(grid.M + 1) if time_indices is None else time_indices
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t"] + [f"x{i}" for i in range(grid.d)] + ["u"])
        for k in ks:
            vals = surface.values[k].ravel()
            t = repr(float(grid.time_nodes[k]))
            for x, u in zip(nodes, vals):
                w.writerow([k, t] + [repr(float(v)) for v in x] + [repr(float(u))])
    return path


def save_surface(surface: ValueSurface, path: str | Path) -> Path:
    """Binary surface dump (``.npz``): time nodes, axes, values and residuals."""
    path = Path(path)
    arrays = {"time_nodes": surface.grid.time_nodes, "values": surface.values}
    for i, ax in enumerate(surface.grid.space_axes):
        arrays[f"axis{i}"] = ax
    if surface.residuals is not None:
        arrays["residuals"] = surface.residuals
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def density_to_csv(density: DensityGrid, path: str | Path) -> Path:
    path = Path(path)
    nodes = density.grid.nodes()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "t"] + [f"y{i}" for i in range(density.grid.d)] + ["density"])
        for j, t in enumerate(density.slice_times):
            for y, p in zip(nodes, density.values[j].ravel()):
                w.writerow([j, repr(float(t))] + [repr(float(v)) for v in y] + [repr(float(p))])
    return path
