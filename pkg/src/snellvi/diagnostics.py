"""Numerical audits of the standing hypotheses and Wiener-space surrogates.

* Malliavin covariance of the Euler scheme from the first-variation flow and
  the nondegeneracy statistic ``E int_eps^T (det gamma_v)^p dv``.
* Lie-bracket rank of the vector fields (parabolic Hormander ladder).
* Ornstein-Uhlenbeck semigroup on functionals of the Brownian increments.
* Occupation-density (Tanaka) check of the Ito formula for ``(x - K)^+``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GridError, MismatchError, ModelError
from .model import DiffusionModel, SpaceTimeGrid, diffusion_matrix
from .sde import FirstVariationFlow, PathBatch, integrate_increments, path_rng

# stream ids separating the resampling noise from the path noise of the same seed
_OU_STREAM = 7


# ---------------------------------------------------------------------------
# Malliavin covariance
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MalliavinCovariance:
    """Per-path, per-node covariance ``C`` and inverse ``gamma`` (NaN where flagged).

    ``flagged[p, k]`` marks nodes before ``eps_min`` or where ``C`` is singular
    to tolerance; ``gamma`` is never fabricated there.
    """

    time_nodes: np.ndarray
    C: np.ndarray
    gamma: np.ndarray
    det_gamma: np.ndarray
    condition: np.ndarray
    flagged: np.ndarray
    eps_min: float


def malliavin_covariance(batch: PathBatch, flow: FirstVariationFlow, model: DiffusionModel,
                         eps_min: float | None = None, rcond: float = 1e-12) -> MalliavinCovariance:
    """``C_t = J_t (int_0^t J_s^{-1} a(s, X_s) J_s^{-T} ds) J_t^T`` by the trapezoidal rule.

    ``gamma_t = C_t^{-1}`` is formed only at nodes ``t >= eps_min`` (default
    ``1e-3 T``) where the smallest singular value exceeds ``rcond`` times the
    largest.
    """
    J = flow.jacobians
    if J.shape[:2] != batch.states.shape[:2]:
        raise MismatchError("flow and batch do not share paths / nodes")
    N, K1, d = J.shape[0], J.shape[1], J.shape[2]
    T = float(batch.time_nodes[-1])
    eps_min = 1e-3 * T if eps_min is None else float(eps_min)
    Jinv = np.linalg.inv(J)
    A = np.empty((N, K1, d, d))
    for k, t in enumerate(batch.time_nodes):
        A[:, k] = diffusion_matrix(model, float(t), batch.states[:, k, :])
    integrand = Jinv @ A @ np.swapaxes(Jinv, -1, -2)
    dt = batch.dt[None, :, None, None]
    steps = 0.5 * (integrand[:, 1:] + integrand[:, :-1]) * dt
    inner = np.concatenate([np.zeros((N, 1, d, d)), np.cumsum(steps, axis=1)], axis=1)
    C = J @ inner @ np.swapaxes(J, -1, -2)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    sv = np.linalg.svd(C, compute_uv=False)
    smax, smin = sv[..., 0], sv[..., -1]
    singular = ~(smax > 0) | (smin <= rcond * smax)
    early = batch.time_nodes < eps_min - 1e-12 * max(1.0, T)
    flagged = singular | early[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        condition = np.where(smax > 0, smax / smin, np.inf)
    gamma = np.full_like(C, np.nan)
    ok = ~flagged
    if ok.any():
        gamma[ok] = np.linalg.inv(C[ok])
    det_gamma = np.full((N, K1), np.nan)
    if ok.any():
        det_gamma[ok] = 1.0 / np.linalg.det(C[ok])
    return MalliavinCovariance(batch.time_nodes, C, gamma, det_gamma, condition, flagged, eps_min)


@dataclass
class NondegeneracyEstimate:
    p: float
    value: float
    std_error: float
    running_means: list[float]
    divergent: bool
    n_flagged_paths: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MalliavinReport:
    eps: float
    node_times: list[float]
    det_gamma_mean: list[float]
    det_gamma_min: list[float]
    det_gamma_quantiles: dict[str, list[float]]
    condition_max: list[float]
    flagged_nodes: list[int]
    statistics: list[NondegeneracyEstimate]
    nondegenerate: bool

    def to_dict(self) -> dict:
        out = asdict(self)
        out["statistics"] = [s.to_dict() for s in self.statistics]
        return out


def _nan_stat(fn, arr):
    # all-NaN columns (flagged nodes) are expected; they stay NaN in the report
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fn(arr)


def nondegeneracy_statistic(batch: PathBatch, flow: FirstVariationFlow, model: DiffusionModel,
                            p_list: Sequence[float] = (1.0,), eps: float = 0.1,
                            checkpoints: Sequence[int] | None = None,
                            cov: MalliavinCovariance | None = None,
                            max_report_nodes: int = 11) -> MalliavinReport:
    """Monte Carlo estimate of ``E int_eps^T (det gamma_v)^p dv`` for each ``p``.

    The time integral is trapezoidal over the nodes in ``[eps, T]``. A path with
    a flagged node in that range contributes ``+inf`` (the sentinel for a
    degenerate law). ``divergent`` is set when the running mean over the
    ``checkpoints`` (path counts) is infinite, or increases at every checkpoint
    and ends more than twice its first value.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    T = float(batch.time_nodes[-1])
    if eps >= T:
        raise ValueError("eps must be < T")
    cov = cov or malliavin_covariance(batch, flow, model, eps_min=min(eps, 1e-3 * T))
    tn = batch.time_nodes
    sel = np.flatnonzero(tn >= eps - 1e-9 * max(1.0, T))
    N = batch.n_paths
    if checkpoints is None:
        checkpoints = sorted(set(max(1, N // 2 ** j) for j in range(3, -1, -1)))
    det_sel = cov.det_gamma[:, sel]
    bad = cov.flagged[:, sel].any(axis=1)
    stats = []
    w = np.zeros(sel.size)
    if sel.size > 1:
        h = np.diff(tn[sel])
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
    for p in p_list:
        with np.errstate(invalid="ignore", over="ignore"):
            vals = np.where(bad, np.inf, np.nan_to_num(det_sel, nan=0.0) ** p @ w)
        if np.isinf(vals).any():
            mean, se = math.inf, math.inf
        else:
            mean = float(vals.mean())
            se = float(vals.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0
        running = [float(vals[:c].mean()) if not np.isinf(vals[:c]).any() else math.inf for c in checkpoints]
        grows = len(running) > 1 and all(b > a for a, b in zip(running[:-1], running[1:])) \
            and running[-1] > 2 * running[0]
        stats.append(NondegeneracyEstimate(float(p), mean, se, running,
                                           bool(np.isinf(running).any() or grows), int(bad.sum())))
    report_idx = np.unique(np.linspace(0, tn.size - 1, min(max_report_nodes, tn.size)).astype(int))
    dg = cov.det_gamma[:, report_idx]
    qs = {f"q{int(q * 100):02d}": _nan_stat(lambda a: np.nanquantile(a, q, axis=0), dg).tolist()
          for q in (0.05, 0.5, 0.95)}
    return MalliavinReport(
        eps=float(eps),
        node_times=tn[report_idx].tolist(),
        det_gamma_mean=_nan_stat(lambda a: np.nanmean(a, axis=0), dg).tolist(),
        det_gamma_min=_nan_stat(lambda a: np.nanmin(a, axis=0), dg).tolist(),
        det_gamma_quantiles=qs,
        condition_max=np.max(cov.condition[:, report_idx], axis=0).tolist(),
        flagged_nodes=np.flatnonzero(cov.flagged.any(axis=0) & (tn >= cov.eps_min)).tolist(),
        statistics=stats,
        nondegenerate=bool(all(np.isfinite(s.value) and not s.divergent for s in stats)),
    )


# ---------------------------------------------------------------------------
# Lie-bracket rank
# ---------------------------------------------------------------------------

Field = Callable[[np.ndarray], np.ndarray]


def _jvp(F: Field, X: np.ndarray, V: np.ndarray, rel_step: float) -> np.ndarray:
    """``DF(X) V`` by central differences, Richardson-extrapolated once."""
    scale = np.maximum(1.0, np.abs(X).max(axis=-1, keepdims=True))
    vnorm = np.linalg.norm(V, axis=-1, keepdims=True)
    h = rel_step * scale / np.where(vnorm > 0, vnorm, 1.0)
    pts = np.stack([X + h * V, X - h * V, X + 0.5 * h * V, X - 0.5 * h * V])
    vals = F(pts.reshape(-1, X.shape[-1])).reshape(pts.shape)
    d_h = (vals[0] - vals[1]) / (2 * h)
    d_h2 = (vals[2] - vals[3]) / h
    return (4.0 * d_h2 - d_h) / 3.0


def _bracket(U: Field, V: Field, rel_step: float) -> Field:
    """``[U, V] = DV U - DU V``."""

    def field_(X):
        return _jvp(V, X, U(X), rel_step) - _jvp(U, X, V(X), rel_step)

    return field_


def vector_fields(model: DiffusionModel, t: float, rel_step: float = 1e-4) -> list[Field]:
    """``[V_0, V_1, .., V_n]`` with ``V_k = sigma[:, k]`` and Stratonovich drift ``V_0 = b - 1/2 sum DV_k V_k``."""

    def column(k):
        return lambda X: model.sigma(t, X)[..., :, k]

    cols = [column(k) for k in range(model.n)]

    def v0(X):
        out = model.b(t, X).copy()
        for V in cols:
            out -= 0.5 * _jvp(V, X, V(X), rel_step)
        return out

    return [v0] + cols


@dataclass
class BracketRankReport:
    x: list[float]
    t: float
    max_depth: int
    rank_by_depth: list[int]
    rank: int
    depth_used: int
    spanning: list[list[int]]
    hypoelliptic: bool

    def to_dict(self) -> dict:
        return asdict(self)


def hormander_rank(model: DiffusionModel, t: float, x: Sequence[float], max_depth: int,
                   rel_step: float = 1e-4, threshold: float = 1e-6) -> BracketRankReport:
    """Rank of the span of diffusion fields and their brackets up to ``max_depth``.

    Depth 1 holds ``V_1 .. V_n``; depth ``k + 1`` brackets every depth-``k``
    field with each of ``V_0 .. V_n`` (``V_0`` enters from depth 2 on).
    Words are written as index lists, e.g. ``[0, 1]`` for ``[V_0, V_1]``.
    Rank is the number of singular values above ``threshold`` times the largest.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    x = np.asarray(x, dtype=float).reshape(1, model.d)
    fields = vector_fields(model, t, rel_step)
    level = [((k,), fields[k]) for k in range(1, model.n + 1)]
    vectors: list[np.ndarray] = []
    words: list[tuple[int, ...]] = []
    ranks = []
    for depth in range(1, max_depth + 1):
        if depth > 1:
            level = [((i,) + w, _bracket(fields[i], F, rel_step))
                     for w, F in level for i in range(model.n + 1)]
        for w, F in level:
            v = np.asarray(F(x), dtype=float).reshape(model.d)
            if not np.all(np.isfinite(v)):
                raise ModelError(f"non-finite bracket {list(w)} at x={x.ravel().tolist()}")
            vectors.append(v)
            words.append(w)
        ranks.append(_rank(np.array(vectors), threshold))
        if ranks[-1] == model.d and depth < max_depth:
            ranks.extend([model.d] * (max_depth - depth))
            break
    rank = ranks[-1]
    spanning = _greedy_span(np.array(vectors), words, threshold)
    depth_used = ranks.index(rank) + 1
    return BracketRankReport(x.ravel().tolist(), float(t), max_depth, ranks, rank, depth_used,
                             [list(w) for w in spanning], rank == model.d)


def _rank(vectors: np.ndarray, threshold: float) -> int:
    sv = np.linalg.svd(vectors, compute_uv=False)
    if sv.size == 0 or not sv[0] > 0:
        return 0
    return int(np.sum(sv > threshold * sv[0]))


def _greedy_span(vectors: np.ndarray, words: list, threshold: float) -> list:
    norms = np.linalg.norm(vectors, axis=1)
    top = norms.max() if norms.size else 0.0
    chosen: list[int] = []
    for i in range(len(words)):
        if not norms[i] > threshold * top:
            continue
        trial = vectors[chosen + [i]] / np.maximum(norms[chosen + [i]], 1e-300)[:, None]
        if _rank(trial, threshold) == len(chosen) + 1:
            chosen.append(i)
    return [words[i] for i in chosen]


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck semigroup
# ---------------------------------------------------------------------------

Functional = Callable[[np.ndarray], np.ndarray]


def ou_regularize(functional: Functional, batch: PathBatch, kappa: float | Sequence[float],
                  n_resample: int = 10_000, seed: int = 0, antithetic: bool = False,
                  chunk: int = 2048) -> np.ndarray:
    """``P_kappa F(omega) = E[F(e^{-kappa} omega + sqrt(1 - e^{-2 kappa}) omega')]`` per path.

    ``functional`` maps increment arrays ``(..., M, n)`` to ``(...)``. The fresh
    increments ``omega'`` come from a per-path stream, so the output is
    deterministic. ``kappa = 0`` returns ``F(omega)`` unchanged. A sequence
    ``kappa = (k1, k2, ..)`` composes the semigroups ``P_k1 P_k2 ..`` with one
    independent inner draw per outer draw (unbiased for the composition).
    """
    kappas = [float(kappa)] if np.isscalar(kappa) else [float(k) for k in kappa]
    if any(k < 0 for k in kappas):
        raise ValueError("kappa must be >= 0")
    incr = batch.increments
    if all(k == 0 for k in kappas):
        return np.asarray(functional(incr), dtype=float)
    sq = np.sqrt(batch.dt)
    M, n = batch.M, batch.n
    out = np.empty(batch.n_paths)
    for p in range(batch.n_paths):
        gp = batch.path_offset + p
        # one stream per (path, stage); P_k1 acts on omega first, then P_k2 on the result
        rngs = [path_rng(seed, gp * 64 + j, _OU_STREAM) for j in range(len(kappas))]
        acc = 0.0
        for start in range(0, n_resample, chunk):
            m = min(chunk, n_resample - start)
            omega = np.broadcast_to(incr[p], (m, M, n)).copy()
            for rng, k in zip(rngs, kappas):
                if k == 0:
                    continue
                z = rng.standard_normal((m, M, n))
                if antithetic:
                    half = m // 2
                    z[half:2 * half] = -z[:half]
                omega = math.exp(-k) * omega + math.sqrt(-math.expm1(-2 * k)) * z * sq[:, None]
            vals = np.asarray(functional(omega), dtype=float)
            if not np.all(np.isfinite(vals)):
                raise ModelError(f"functional returned non-finite values on path {gp}")
            acc += float(vals.sum())
        out[p] = acc / n_resample
    return out


def linear_functional(m: np.ndarray) -> Functional:
    """``F(omega) = sum_k m_k . omega_k`` for a deterministic ``(M, n)`` weight array."""
    m = np.asarray(m, dtype=float)
    return lambda incr: np.einsum("...kn,kn->...", incr, m)


@dataclass
class OUMartingaleReport:
    kappa: float
    c: float
    regression: list[dict]
    regression_ok: bool
    bracket_lhs: float
    bracket_rhs: float
    bracket_ok: bool
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _hc0(A: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    bread = np.linalg.pinv(A.T @ A)
    return coef, np.sqrt(np.maximum(np.diag(bread @ ((A * resid[:, None] ** 2).T @ A) @ bread), 0.0))


def ou_martingale_check(batch: PathBatch, model: DiffusionModel,
                        integrand: Callable[[float, np.ndarray], np.ndarray], kappa: float,
                        c: float = 1.05, n_resample: int = 8, seed: int = 0,
                        pairs: Sequence[tuple[int, int]] | None = None, k_se: float = 3.0,
                        chunk_paths: int = 2000) -> OUMartingaleReport:
    """Check the martingale property and bracket contraction of ``P_kappa Z``.

    ``Z_t = sum_{t_k < t} m(t_k, X_k) . dW_k``; the integrand is a callable of
    the current state, so ``Z`` is adapted by construction. ``P_kappa Z`` is
    realized by re-running the Euler scheme on the resampled increments and
    averaging ``n_resample`` draws per path. The check passes when

    * regressing ``P_kappa Z_t - P_kappa Z_s`` on ``(1, X_s)`` gives
      coefficients within ``k_se`` standard errors of zero for every pair;
    * ``mean <Z^kappa>_T^{1/2} <= c mean <Z>_T^{1/2}`` where
      ``<Z^kappa>_T = e^{-2 kappa} sum |P_kappa m_k|^2 dt_k`` (the square of the
      resampled mean is replaced by its unbiased pairwise estimate).
    """
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    N, M, n = batch.n_paths, batch.M, batch.n
    dt = batch.dt
    sq = np.sqrt(dt)

    def m_along(states, incr_shape):
        out = np.empty(incr_shape)
        for k in range(M):
            out[..., k, :] = np.broadcast_to(integrand(float(batch.time_nodes[k]), states[..., k, :]),
                                             incr_shape[:-2] + (n,))
        return out

    PZ = np.empty((N, M + 1))
    bracket_k = np.empty(N)
    bracket_0 = np.empty(N)
    for start in range(0, N, chunk_paths):
        rows = slice(start, min(N, start + chunk_paths))
        inc = batch.increments[rows]
        X = batch.states[rows]
        m0 = m_along(X, inc.shape)
        bracket_0[rows] = np.sqrt(np.einsum("pkn,pkn,k->p", m0, m0, dt))
        if kappa == 0:
            PZ[rows] = np.concatenate([np.zeros((inc.shape[0], 1)),
                                       np.cumsum(np.einsum("pkn,pkn->pk", m0, inc), axis=1)], axis=1)
            bracket_k[rows] = bracket_0[rows]
            continue
        R = n_resample
        z = np.stack([path_rng(seed, batch.path_offset + p, _OU_STREAM).standard_normal((R, M, n))
                      for p in range(rows.start, rows.stop)]) * sq[None, None, :, None]
        omega = math.exp(-kappa) * inc[:, None] + math.sqrt(-math.expm1(-2 * kappa)) * z
        Xr = integrate_increments(model, batch.time_nodes, batch.x0, omega)
        mr = m_along(Xr, omega.shape)
        Zr = np.concatenate([np.zeros(omega.shape[:2] + (1,)),
                             np.cumsum(np.einsum("prkn,prkn->prk", mr, omega), axis=2)], axis=2)
        PZ[rows] = Zr.mean(axis=1)
        # unbiased |E m|^2 from R draws: (|sum|^2 - sum |m|^2) / (R (R - 1))
        s = mr.sum(axis=1)
        sq_sum = np.einsum("prkn,prkn->pk", mr, mr)
        if R > 1:
            pm2 = np.maximum((np.einsum("pkn,pkn->pk", s, s) - sq_sum) / (R * (R - 1)), 0.0)
        else:
            pm2 = sq_sum
        bracket_k[rows] = math.exp(-kappa) * np.sqrt(pm2 @ dt)
    reg = []
    ok = True
    for s_idx, t_idx in (pairs or [(0, M // 2), (M // 2, M), (M // 4, (3 * M) // 4)]):
        y = PZ[:, t_idx] - PZ[:, s_idx]
        Xs = batch.states[:, s_idx, :]
        spread = Xs.std(axis=0)
        if np.all(spread > 0):
            A = np.column_stack([np.ones(N), (Xs - Xs.mean(axis=0)) / spread])
        else:
            A = np.ones((N, 1))
        coef, se = _hc0(A, y)
        atol = 1e-12 * max(1.0, float(np.abs(y).max()))
        pair_ok = bool(np.all(np.abs(coef) <= k_se * se + atol))
        ok &= pair_ok
        reg.append({"s": float(batch.time_nodes[s_idx]), "t": float(batch.time_nodes[t_idx]),
                    "coef": coef.tolist(), "se": se.tolist(), "ok": pair_ok})
    lhs, rhs = float(bracket_k.mean()), float(bracket_0.mean())
    b_ok = lhs <= c * rhs + 1e-12 * max(1.0, rhs)
    return OUMartingaleReport(float(kappa), float(c), reg, bool(ok), lhs, rhs, bool(b_ok), bool(ok and b_ok))


# ---------------------------------------------------------------------------
# Tanaka / local time
# ---------------------------------------------------------------------------


@dataclass
class TanakaReport:
    level: float
    bandwidth: float
    n_paths: int
    lhs_mean: float
    lhs_se: float
    rhs_mean: float
    rhs_se: float
    relative_error: float

    def to_dict(self) -> dict:
        return asdict(self)


def silverman_bandwidth(sample: np.ndarray, n_obs: int) -> float:
    sd = float(np.std(sample, ddof=1)) if sample.size > 1 else 0.0
    return 1.06 * sd * n_obs ** (-0.2)


def tanaka_check(source: PathBatch | Iterable[PathBatch], level: float, model: DiffusionModel,
                 bandwidth: float | None = None, n_paths: int | None = None,
                 grid: SpaceTimeGrid | None = None, pilot_paths: int = 1000) -> TanakaReport:
    """Compare both sides of the Ito-Tanaka formula for ``(x - K)^+`` in one dimension.

    ``LHS = (X_T - K)^+ - (X_0 - K)^+ - sum 1{X_k > K} dX_k`` pathwise, and
    ``RHS = 1/2 sum a(t_k, X_k) phi_h(X_k - K) dt_k``, a Gaussian-kernel
    estimate of half the local time at ``K``. The default bandwidth is
    Silverman's rule on the occupation sample of the first ``pilot_paths``
    paths with ``n_obs`` the total number of (path, step) observations; for a
    chunk iterable pass ``n_paths`` (or ``bandwidth``).
    """
    K = float(level)
    if grid is not None and not (grid.lower[0] <= K <= grid.upper[0]):
        raise GridError(f"level {K} is outside the spatial box")
    chunks = iter([source]) if isinstance(source, PathBatch) else iter(source)
    buffered: list[PathBatch] = []
    have = 0
    if bandwidth is None:
        for b in chunks:
            buffered.append(b)
            have += b.n_paths
            if have >= pilot_paths:
                break
        if not buffered:
            raise ValueError("no paths supplied")
        if isinstance(source, PathBatch):
            n_paths = source.n_paths
        if n_paths is None:
            raise ValueError("n_paths is required to set the bandwidth for a chunk iterable")
        pilot = np.concatenate([b.states[:, :-1, 0] for b in buffered])[:pilot_paths]
        bandwidth = silverman_bandwidth(pilot.ravel(), n_paths * buffered[0].M)
    h = float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be > 0")
    lhs_parts, rhs_parts = [], []
    for b in itertools.chain(buffered, chunks):
        if b.d != 1:
            raise ValueError("tanaka_check needs d = 1")
        X = b.states[:, :, 0]
        dX = np.diff(X, axis=1)
        lhs = np.maximum(X[:, -1] - K, 0.0) - np.maximum(X[:, 0] - K, 0.0) \
            - np.sum(np.where(X[:, :-1] > K, dX, 0.0), axis=1)
        a = np.empty_like(X[:, :-1])
        for k in range(b.M):
            a[:, k] = diffusion_matrix(model, float(b.time_nodes[k]), b.states[:, k, :])[..., 0, 0]
        kern = np.exp(-0.5 * ((X[:, :-1] - K) / h) ** 2) / (h * math.sqrt(2 * math.pi))
        lhs_parts.append(lhs)
        rhs_parts.append(0.5 * (a * kern) @ b.dt)
    lhs = np.concatenate(lhs_parts)
    rhs = np.concatenate(rhs_parts)
    N = lhs.size
    lm, rm = float(lhs.mean()), float(rhs.mean())
    lse = float(lhs.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0
    rse = float(rhs.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0
    denom = max(abs(lm), 1e-12)
    rel = abs(rm - lm) / denom if max(abs(lm), abs(rm)) > 1e-12 else 0.0
    return TanakaReport(K, h, N, lm, lse, rm, rse, float(rel))
