"""Diffusion models, payoffs, space-time grids and the discrete generator.

Coefficient callables follow one vectorisation convention throughout the
package: ``x`` carries the state on its last axis, any leading axes are batch
axes, and ``t`` is a Python float.

* ``drift(t, x)``      -> ``(..., d)``
* ``diffusion(t, x)``  -> ``(..., d, n)``
* ``rate(t, x)``       -> ``(...)``

Optional analytic derivatives use ``drift_jacobian(t, x) -> (..., d, d)`` with
entry ``[i, l] = d b_i / d x_l`` and ``diffusion_jacobian(t, x) -> (..., d, n, d)``
with entry ``[i, k, l] = d sigma_ik / d x_l``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RectBivariateSpline, RegularGridInterpolator, make_interp_spline

from .errors import ConfigError, GridError, ModelError

Coefficient = Callable[[float, np.ndarray], np.ndarray]

BOUNDARY_POLICIES = ("dirichlet_payoff", "neumann_zero")


# ---------------------------------------------------------------------------
# Diffusion model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """Itô diffusion ``dX = b(t,X) dt + sigma(t,X) dW`` with killing rate ``r``.

    Instances are immutable; the coefficient callables must be pure.
    """

    d: int
    n: int
    drift: Coefficient
    diffusion: Coefficient
    rate: Coefficient
    T: float
    time_homogeneous: bool = True
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)
    drift_jacobian: Callable[[float, np.ndarray], np.ndarray] | None = None
    diffusion_jacobian: Callable[[float, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"state dimension d must be an integer >= 1, got {self.d!r}")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigError(f"noise dimension n must be an integer >= 1, got {self.n!r}")
        if not (math.isfinite(self.T) and self.T > 0):
            raise ConfigError(f"horizon T must be finite and > 0, got {self.T!r}")

    # Broadcasting wrappers. Homogeneous models are always evaluated at t=0 so
    # that results are bitwise independent of t.
    def _t(self, t: float) -> float:
        return 0.0 if self.time_homogeneous else float(t)

    def b(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.drift(self._t(t), x), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (self.d,))

    def sigma(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.diffusion(self._t(t), x), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (self.d, self.n))

    def r(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.rate(self._t(t), x), dtype=float)
        return np.broadcast_to(out, x.shape[:-1])

    def a(self, t: float, x: np.ndarray) -> np.ndarray:
        """Second-order coefficient ``sigma sigma^T`` (no finiteness check)."""
        s = self.sigma(t, x)
        return np.einsum("...ik,...jk->...ij", s, s)

    def check(self, points: np.ndarray, times: Sequence[float] = (0.0,), atol: float = 1e-10) -> None:
        """Evaluate the model invariants at ``points`` and raise :class:`ModelError` on violation."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ref = None
        for t in times:
            b, s, r = self.b(t, pts), self.sigma(t, pts), self.r(t, pts)
            for label, arr in (("drift", b), ("diffusion", s), ("rate", r)):
                if not np.all(np.isfinite(arr)):
                    raise ModelError(f"{label} is not finite at t={t}")
            if np.any(r < -atol):
                raise ModelError("rate must be nonnegative")
            a = diffusion_matrix(self, t, pts)
            eig = np.linalg.eigvalsh(a)
            scale = np.maximum(1.0, np.abs(a).max(axis=(-2, -1)))
            if np.any(eig.min(axis=-1) < -atol * scale):
                raise ModelError(f"diffusion matrix not PSD at t={t}")
            if self.time_homogeneous:
                cur = (b.copy(), s.copy(), r.copy())
                if ref is not None and not all(np.array_equal(u, v) for u, v in zip(ref, cur)):
                    raise ModelError("time_homogeneous model depends on t")
                ref = cur


def diffusion_matrix(model: DiffusionModel, t: float, x: np.ndarray) -> np.ndarray:
    """Return ``a(t, x) = sigma sigma^T`` with shape ``(..., d, d)``."""
    a = model.a(t, x)
    if not np.all(np.isfinite(a)):
        raise ModelError(f"diffusion matrix has non-finite entries at t={t}")
    return a


# families whose (d, n) is fixed; others default to d = n = 1 unless given
_FIXED_DIMS = {"black_scholes_1d": (1, 1), "kolmogorov_2d": (2, 1)}


@dataclass(frozen=True)
class ModelConfig:
    """Serializable description of a built-in model family."""

    family: str
    params: Mapping[str, Any]
    T: float
    d: int = 1
    n: int = 1

    _KEYS = ("family", "params", "T", "d", "n")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("model config must be a JSON object")
        unknown = set(data) - set(cls._KEYS)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        for key in ("family", "T"):
            if key not in data:
                raise ConfigError(f"missing-parameter: model.{key}")
        data = dict(data)
        family = str(data["family"])
        if family in _FIXED_DIMS:
            data.setdefault("d", _FIXED_DIMS[family][0])
            data.setdefault("n", _FIXED_DIMS[family][1])
        elif "d" in data:
            data.setdefault("n", data["d"])
        return cls(
            family=str(data["family"]),
            params=dict(data.get("params", {})),
            T=_number(data["T"], "T"),
            d=int(data.get("d", 1)),
            n=int(data.get("n", 1)),
        )

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params), "T": self.T, "d": self.d, "n": self.n}


def load_model_config(path: str | Path) -> ModelConfig:
    with open(path) as fh:
        return ModelConfig.from_dict(json.load(fh))


def _number(value: Any, name: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"parameter {name} must be a number, got {value!r}") from None
    if not math.isfinite(out):
        raise ConfigError(f"parameter {name} is NaN or infinite")
    return out


def _require(params: Mapping[str, Any], name: str) -> Any:
    if name not in params or params[name] is None:
        raise ConfigError(f"missing-parameter: {name}")
    return params[name]


def _vector(value: Any, size: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise ConfigError(f"parameter {name} must have length {size}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"parameter {name} contains NaN or infinite values")
    return arr


def _check_dims(cfg: ModelConfig, d: int, n: int) -> None:
    if cfg.d <= 0 or cfg.n <= 0:
        raise ConfigError("d and n must be >= 1")
    if (cfg.d, cfg.n) != (d, n):
        raise ConfigError(f"family {cfg.family} requires d={d}, n={n}; got d={cfg.d}, n={cfg.n}")


def _const_rate(r: float) -> Coefficient:
    return lambda t, x: np.full(np.shape(x)[:-1], r)


def _black_scholes_1d(cfg: ModelConfig) -> DiffusionModel:
    _check_dims(cfg, 1, 1)
    p = cfg.params
    vol = _number(_require(p, "sigma"), "sigma")
    r = _number(_require(p, "r"), "r")
    q = _number(p.get("q", 0.0), "q")
    mu = r - q
    return DiffusionModel(
        d=1, n=1, T=cfg.T, time_homogeneous=True, name="black_scholes_1d",
        params={"sigma": vol, "r": r, "q": q},
        drift=lambda t, x: mu * x,
        diffusion=lambda t, x: (vol * x)[..., None],
        rate=_const_rate(r),
        drift_jacobian=lambda t, x: np.full(np.shape(x)[:-1] + (1, 1), mu),
        diffusion_jacobian=lambda t, x: np.full(np.shape(x)[:-1] + (1, 1, 1), vol),
    )


def _gbm_basket(cfg: ModelConfig) -> DiffusionModel:
    d = cfg.d
    _check_dims(cfg, d, d)
    p = cfg.params
    vols = _vector(_require(p, "sigma"), d, "sigma")
    r = _number(_require(p, "r"), "r")
    q = _vector(p.get("q", 0.0), d, "q")
    rho = p.get("rho", 0.0)
    corr = np.asarray(rho, dtype=float)
    if corr.ndim == 0:
        corr = np.full((d, d), float(corr))
        np.fill_diagonal(corr, 1.0)
    if corr.shape != (d, d) or not np.all(np.isfinite(corr)):
        raise ConfigError("parameter rho must be a scalar or a finite d x d matrix")
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise ConfigError("correlation matrix rho is not positive definite") from None
    loading = vols[:, None] * chol  # row i: vol_i * L_i.
    mu = r - q

    def diffusion(t, x):
        return x[..., :, None] * loading

    def diffusion_jac(t, x):
        out = np.zeros(np.shape(x)[:-1] + (d, d, d))
        for i in range(d):
            out[..., i, :, i] = loading[i]
        return out

    return DiffusionModel(
        d=d, n=d, T=cfg.T, time_homogeneous=True, name="gbm_basket",
        params={"sigma": vols.tolist(), "r": r, "q": q.tolist(), "rho": corr.tolist()},
        drift=lambda t, x: mu * x,
        diffusion=diffusion,
        rate=_const_rate(r),
        drift_jacobian=lambda t, x: np.broadcast_to(np.diag(mu), np.shape(x)[:-1] + (d, d)),
        diffusion_jacobian=diffusion_jac,
    )


def _kolmogorov_2d(cfg: ModelConfig) -> DiffusionModel:
    _check_dims(cfg, 2, 1)
    p = cfg.params
    vol = _number(p.get("sigma", 1.0), "sigma")
    r = _number(p.get("r", 0.0), "r")
    coupling = np.array([[0.0, 1.0], [0.0, 0.0]])

    def drift(t, x):
        out = np.zeros(np.shape(x))
        out[..., 0] = x[..., 1]
        return out

    return DiffusionModel(
        d=2, n=1, T=cfg.T, time_homogeneous=True, name="kolmogorov_2d",
        params={"sigma": vol, "r": r},
        drift=drift,
        diffusion=lambda t, x: np.broadcast_to(np.array([[0.0], [vol]]), np.shape(x)[:-1] + (2, 1)),
        rate=_const_rate(r),
        drift_jacobian=lambda t, x: np.broadcast_to(coupling, np.shape(x)[:-1] + (2, 2)),
        diffusion_jacobian=lambda t, x: np.zeros(np.shape(x)[:-1] + (2, 1, 2)),
    )


def _brownian(cfg: ModelConfig) -> DiffusionModel:
    d = cfg.d
    _check_dims(cfg, d, d)
    p = cfg.params
    vols = _vector(p.get("sigma", 1.0), d, "sigma")
    mu = _vector(p.get("mu", 0.0), d, "mu")
    r = _number(p.get("r", 0.0), "r")
    s = np.diag(vols)
    return DiffusionModel(
        d=d, n=d, T=cfg.T, time_homogeneous=True, name="brownian",
        params={"sigma": vols.tolist(), "mu": mu.tolist(), "r": r},
        drift=lambda t, x: np.broadcast_to(mu, np.shape(x)),
        diffusion=lambda t, x: np.broadcast_to(s, np.shape(x)[:-1] + (d, d)),
        rate=_const_rate(r),
        drift_jacobian=lambda t, x: np.zeros(np.shape(x)[:-1] + (d, d)),
        diffusion_jacobian=lambda t, x: np.zeros(np.shape(x)[:-1] + (d, d, d)),
    )


def _custom_tabulated(cfg: ModelConfig) -> DiffusionModel:
    d, n = cfg.d, cfg.n
    if d <= 0 or n <= 0:
        raise ConfigError("d and n must be >= 1")
    p = cfg.params
    axes = [np.asarray(a, dtype=float) for a in _require(p, "axes")]
    if len(axes) != d:
        raise ConfigError(f"custom_tabulated needs {d} axes, got {len(axes)}")
    for ax in axes:
        if ax.ndim != 1 or ax.size < 2 or np.any(np.diff(ax) <= 0):
            raise ConfigError("tabulated axes must be strictly increasing with >= 2 nodes")
    shape = tuple(ax.size for ax in axes)
    drift_tab = np.asarray(_require(p, "drift"), dtype=float).reshape(shape + (d,))
    diff_tab = np.asarray(_require(p, "diffusion"), dtype=float).reshape(shape + (d, n))
    rate_val = np.asarray(_require(p, "rate"), dtype=float)
    rate_tab = np.broadcast_to(rate_val, shape).copy()
    for label, tab in (("drift", drift_tab), ("diffusion", diff_tab), ("rate", rate_tab)):
        if not np.all(np.isfinite(tab)):
            raise ConfigError(f"tabulated {label} contains NaN or infinite values")
    lo = np.array([ax[0] for ax in axes])
    hi = np.array([ax[-1] for ax in axes])

    def lookup(tab):
        interp = RegularGridInterpolator(axes, tab, method="linear")

        def evaluate(t, x):
            x = np.asarray(x, dtype=float)
            flat = np.clip(x.reshape(-1, d), lo, hi)
            return interp(flat).reshape(x.shape[:-1] + tab.shape[d:])

        return evaluate

    return DiffusionModel(
        d=d, n=n, T=cfg.T, time_homogeneous=True, name="custom_tabulated",
        params={"axes": [ax.tolist() for ax in axes]},
        drift=lookup(drift_tab), diffusion=lookup(diff_tab), rate=lookup(rate_tab),
    )


MODEL_FAMILIES: dict[str, Callable[[ModelConfig], DiffusionModel]] = {
    "black_scholes_1d": _black_scholes_1d,
    "gbm_basket": _gbm_basket,
    "kolmogorov_2d": _kolmogorov_2d,
    "brownian": _brownian,
    "custom_tabulated": _custom_tabulated,
}


def build_model(config: ModelConfig | Mapping[str, Any]) -> DiffusionModel:
    """Instantiate a built-in model family.

    ``config`` is a :class:`ModelConfig` or its dict form
    ``{"family", "params", "T", "d", "n"}``. Families with fixed dimensions
    (``black_scholes_1d``, ``kolmogorov_2d``) fill in ``d``/``n`` when omitted.
    """
    if not isinstance(config, ModelConfig):
        config = ModelConfig.from_dict(config)
    family = config.family.replace("-", "_")
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"unknown model family {config.family!r}; known: {sorted(MODEL_FAMILIES)}")
    for key, value in config.params.items():
        if isinstance(value, float) and math.isnan(value):
            raise ConfigError(f"parameter {key} is NaN")
    return MODEL_FAMILIES[family](config)


# ---------------------------------------------------------------------------
# Payoffs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PayoffSpec:
    """Obstacle ``f`` evaluated on the last axis of its argument."""

    f: Callable[[np.ndarray], np.ndarray]
    lower_bound: float | None = None
    upper_bound: float | None = None
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.f(x), dtype=float), x.shape[:-1])

    def shifted(self, c: float) -> "PayoffSpec":
        lb = None if self.lower_bound is None else self.lower_bound + c
        ub = None if self.upper_bound is None else self.upper_bound + c
        base = self.f
        return PayoffSpec(lambda x: base(x) + c, lb, ub, f"{self.name}+{c:g}", dict(self.params, shift=c))

    def check_bounds(self, grid: "SpaceTimeGrid", atol: float = 1e-12) -> bool:
        vals = self(grid.nodes())
        ok = np.all(np.isfinite(vals))
        if self.lower_bound is not None:
            ok &= bool(np.all(vals >= self.lower_bound - atol))
        if self.upper_bound is not None:
            ok &= bool(np.all(vals <= self.upper_bound + atol))
        return bool(ok)


def _basket(x: np.ndarray, weights: np.ndarray | None) -> np.ndarray:
    if weights is None:
        return x[..., 0]
    return x @ weights


def put_payoff(strike: float, weights: Sequence[float] | None = None) -> PayoffSpec:
    w = None if weights is None else np.asarray(weights, dtype=float)
    k = float(strike)
    name = "put" if w is None else "basket_put"
    return PayoffSpec(lambda x: np.maximum(k - _basket(x, w), 0.0), 0.0, None, name,
                      {"strike": k, "weights": None if w is None else w.tolist()})


def call_payoff(strike: float, weights: Sequence[float] | None = None) -> PayoffSpec:
    w = None if weights is None else np.asarray(weights, dtype=float)
    k = float(strike)
    name = "call" if w is None else "basket_call"
    return PayoffSpec(lambda x: np.maximum(_basket(x, w) - k, 0.0), 0.0, None, name,
                      {"strike": k, "weights": None if w is None else w.tolist()})


def zero_payoff() -> PayoffSpec:
    return PayoffSpec(lambda x: np.zeros(np.shape(x)[:-1]), 0.0, 0.0, "zero", {})


def linear_payoff(coefficients: Sequence[float], offset: float = 0.0) -> PayoffSpec:
    c = np.asarray(coefficients, dtype=float)
    return PayoffSpec(lambda x: x @ c + offset, None, None, "linear",
                      {"coefficients": c.tolist(), "offset": offset})


_PAYOFF_KEYS = {"type", "strike", "weights", "coefficients", "offset", "shift"}


def build_payoff(config: Mapping[str, Any]) -> PayoffSpec:
    """Payoff from its JSON form, e.g. ``{"type": "put", "strike": 100}``."""
    unknown = set(config) - _PAYOFF_KEYS
    if unknown:
        raise ConfigError(f"unknown payoff keys: {sorted(unknown)}")
    kind = str(_require(config, "type"))
    weights = config.get("weights")
    if kind in ("put", "basket_put"):
        out = put_payoff(_number(_require(config, "strike"), "strike"), weights)
    elif kind in ("call", "basket_call"):
        out = call_payoff(_number(_require(config, "strike"), "strike"), weights)
    elif kind == "zero":
        out = zero_payoff()
    elif kind == "linear":
        out = linear_payoff(_require(config, "coefficients"), _number(config.get("offset", 0.0), "offset"))
    else:
        raise ConfigError(f"unknown payoff type {kind!r}")
    if config.get("shift"):
        out = out.shifted(_number(config["shift"], "shift"))
    return out


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


def _frozen(a: Any) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SpaceTimeGrid:
    """Tensor grid on ``[0, T] x box``; nodes are flattened in C order."""

    time_nodes: np.ndarray
    space_axes: tuple[np.ndarray, ...]
    boundary_policy: str = "dirichlet_payoff"

    def __post_init__(self):
        tn = _frozen(self.time_nodes)
        axes = tuple(_frozen(ax) for ax in self.space_axes)
        object.__setattr__(self, "time_nodes", tn)
        object.__setattr__(self, "space_axes", axes)
        if tn.ndim != 1 or tn.size < 2 or np.any(np.diff(tn) <= 0):
            raise GridError("time nodes must be a strictly increasing vector with >= 2 entries")
        if abs(tn[0]) > 1e-14:
            raise GridError("time nodes must start at 0")
        if not axes:
            raise GridError("at least one space axis is required")
        for ax in axes:
            if ax.ndim != 1 or ax.size < 2 or np.any(np.diff(ax) <= 0):
                raise GridError("space axes must be strictly increasing with >= 2 nodes")
        if self.boundary_policy not in BOUNDARY_POLICIES:
            raise GridError(f"boundary_policy must be one of {BOUNDARY_POLICIES}")

    @property
    def d(self) -> int:
        return len(self.space_axes)

    @property
    def M(self) -> int:
        return self.time_nodes.size - 1

    @property
    def T(self) -> float:
        return float(self.time_nodes[-1])

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.size for ax in self.space_axes)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def lower(self) -> np.ndarray:
        return np.array([ax[0] for ax in self.space_axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([ax[-1] for ax in self.space_axes])

    def nodes(self) -> np.ndarray:
        """All space nodes as an ``(n_nodes, d)`` array."""
        mesh = np.meshgrid(*self.space_axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interior_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        for k in range(self.d):
            idx = [slice(None)] * self.d
            idx[k] = 0
            mask[tuple(idx)] = False
            idx[k] = -1
            mask[tuple(idx)] = False
        return mask

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def time_index(self, t: float, atol: float = 1e-9) -> int:
        k = int(np.argmin(np.abs(self.time_nodes - t)))
        if abs(self.time_nodes[k] - t) > atol * max(1.0, self.T):
            raise GridError(f"time {t} is not a grid node")
        return k

    def nearest_indices(self, x: np.ndarray) -> tuple[np.ndarray, ...]:
        """Per-axis index of the nearest node for each point of ``x`` (``(..., d)``)."""
        x = np.asarray(x, dtype=float)
        out = []
        for k, ax in enumerate(self.space_axes):
            v = x[..., k]
            j = np.clip(np.searchsorted(ax, v), 1, ax.size - 1)
            left = ax[j - 1]
            right = ax[j]
            out.append(np.where(np.abs(v - left) <= np.abs(right - v), j - 1, j))
        return tuple(out)


def stretched_axis(lo: float, hi: float, n_nodes: int, center: float | None = None,
                   intensity: float = 0.0) -> np.ndarray:
    """Nodes on ``[lo, hi]``; ``intensity > 0`` clusters them around ``center`` (sinh map)."""
    if n_nodes < 2 or not hi > lo:
        raise GridError("need hi > lo and at least two nodes")
    u = np.linspace(0.0, 1.0, n_nodes)
    if intensity <= 0 or center is None:
        return lo + (hi - lo) * u
    c = float(np.clip(center, lo, hi))
    width = intensity * (hi - lo)
    a0 = np.arcsinh((lo - c) / width)
    a1 = np.arcsinh((hi - c) / width)
    x = c + width * np.sinh(a0 + (a1 - a0) * u)
    x[0], x[-1] = lo, hi
    return x


def make_grid(
    model: DiffusionModel,
    x0: Sequence[float],
    n_time: int,
    n_space: int | Sequence[int],
    *,
    bounds: Sequence[Sequence[float]] | None = None,
    padding_sd: float = 5.0,
    pilot_paths: int = 2000,
    pilot_steps: int = 50,
    seed: int = 0,
    boundary_policy: str = "dirichlet_payoff",
    centers: Sequence[float | None] | None = None,
    intensity: float = 0.0,
) -> SpaceTimeGrid:
    """Uniform time grid and a truncated box around ``x0``.

    Without explicit ``bounds`` the box is the terminal mean +/- ``padding_sd``
    standard deviations, both estimated from a pilot Euler simulation. Axes
    with zero pilot spread get a half-width of ``max(1, |x0|/2)``.
    """
    x0 = np.asarray(x0, dtype=float).reshape(model.d)
    sizes = [int(n_space)] * model.d if np.isscalar(n_space) else [int(s) for s in n_space]
    if len(sizes) != model.d:
        raise GridError("n_space must give one size per state dimension")
    if bounds is None:
        from .sde import simulate_paths

        pilot = simulate_paths(model, np.linspace(0.0, model.T, pilot_steps + 1), pilot_paths, x0, seed)
        term = pilot.states[:, -1, :]
        mean, sd = term.mean(axis=0), term.std(axis=0)
        half = np.where(sd > 0, padding_sd * sd, np.maximum(1.0, 0.5 * np.abs(x0)))
        lo = np.minimum(mean - half, x0 - 0.5 * half)
        hi = np.maximum(mean + half, x0 + 0.5 * half)
    else:
        bounds = np.asarray(bounds, dtype=float).reshape(model.d, 2)
        lo, hi = bounds[:, 0], bounds[:, 1]
    ctr = [None] * model.d if centers is None else list(centers)
    axes = tuple(stretched_axis(lo[k], hi[k], sizes[k], ctr[k], intensity) for k in range(model.d))
    grid = SpaceTimeGrid(np.linspace(0.0, model.T, int(n_time) + 1), axes, boundary_policy)
    if not grid.contains(x0):
        raise GridError("box does not contain the initial state")
    return grid


# ---------------------------------------------------------------------------
# Generator stencil
# ---------------------------------------------------------------------------


def _axis_operators(x: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Three-point first/second derivative matrices; boundary rows are zero."""
    n = x.size
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    s = hm + hp
    lo1, c1, up1 = -hp / (hm * s), (hp - hm) / (hm * hp), hm / (hp * s)
    lo2, c2, up2 = 2.0 / (hm * s), -2.0 / (hm * hp), 2.0 / (hp * s)

    def tri(lo, c, up):
        main = np.concatenate([[0.0], c, [0.0]])
        lower = np.concatenate([lo, [0.0]])
        upper = np.concatenate([[0.0], up])
        return sp.diags([lower, main, upper], [-1, 0, 1], shape=(n, n), format="csr")

    return tri(lo1, c1, up1), tri(lo2, c2, up2)


def _embed(op: sp.spmatrix, axis: int, shape: tuple[int, ...]) -> sp.csr_matrix:
    out = None
    for k, size in enumerate(shape):
        factor = op if k == axis else sp.identity(size, format="csr")
        out = factor if out is None else sp.kron(out, factor, format="csr")
    return out.tocsr()


@dataclass(frozen=True, eq=False)
class GeneratorStencil:
    """Sparse matrix of ``1/2 a_ij d_ij + b_i d_i - r`` on all grid nodes.

    Rows belonging to boundary nodes are identically zero.
    """

    matrix: sp.csr_matrix
    interior: np.ndarray
    t: float
    has_cross_terms: bool
    a: np.ndarray
    b: np.ndarray
    r: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(values, dtype=float).ravel()


def build_stencil(model: DiffusionModel, grid: SpaceTimeGrid, t: float) -> GeneratorStencil:
    if grid.d != model.d:
        raise GridError(f"grid has {grid.d} axes but model has d={model.d}")
    if any(size < 3 for size in grid.shape):
        raise GridError("every axis needs at least 3 nodes for a three-point stencil")
    nodes = grid.nodes()
    a = diffusion_matrix(model, t, nodes)
    b = model.b(t, nodes)
    r = model.r(t, nodes)
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(r))):
        raise ModelError(f"drift or rate not finite on the grid at t={t}")
    ops = [_axis_operators(ax) for ax in grid.space_axes]
    first = [_embed(d1, k, grid.shape) for k, (d1, _) in enumerate(ops)]
    L = sp.diags(-r) @ sp.identity(grid.n_nodes, format="csr")
    cross = False
    for k, (_, d2) in enumerate(ops):
        L = L + sp.diags(0.5 * a[:, k, k]) @ _embed(d2, k, grid.shape)
        L = L + sp.diags(b[:, k]) @ first[k]
        for j in range(k):
            if np.any(a[:, j, k] != 0.0):
                cross = True
                L = L + sp.diags(a[:, j, k]) @ (first[j] @ first[k])
    interior = grid.interior_mask().ravel()
    L = (sp.diags(interior.astype(float)) @ L).tocsr()
    L.eliminate_zeros()
    return GeneratorStencil(L, interior, float(t), cross, a, b, r)


def apply_generator(model: DiffusionModel, values: np.ndarray | Callable[[np.ndarray], np.ndarray],
                    grid: SpaceTimeGrid, t: float) -> np.ndarray:
    """``(A_t u - r u)`` at interior nodes; boundary entries are NaN.

    ``values`` is an array of grid shape (or flat), or a callable evaluated at
    the grid nodes.
    """
    stencil = build_stencil(model, grid, t)
    if callable(values):
        vals = np.asarray(values(grid.nodes()), dtype=float)
    else:
        vals = np.asarray(values, dtype=float)
    if vals.size != grid.n_nodes:
        raise GridError("values do not match the grid")
    out = stencil.apply(vals)
    out[~stencil.interior] = np.nan
    return out.reshape(grid.shape)


# ---------------------------------------------------------------------------
# Interpolation of grid functions
# ---------------------------------------------------------------------------


def grid_interpolant(axes: Sequence[np.ndarray], values: np.ndarray,
                     cubic: bool = True) -> Callable[[np.ndarray], np.ndarray]:
    """Interpolant of ``values`` (grid shape); points outside the box are clamped."""
    axes = [np.asarray(ax, dtype=float) for ax in axes]
    d = len(axes)
    vals = np.asarray(values, dtype=float).reshape(tuple(ax.size for ax in axes))
    lo = np.array([ax[0] for ax in axes])
    hi = np.array([ax[-1] for ax in axes])
    use_cubic = cubic and all(ax.size >= 4 for ax in axes)
    if d == 1 and use_cubic:
        spline = make_interp_spline(axes[0], vals, k=3)
        fn = lambda p: spline(p[:, 0])
    elif d == 2 and use_cubic:
        spline = RectBivariateSpline(axes[0], axes[1], vals, kx=3, ky=3, s=0)
        fn = lambda p: spline.ev(p[:, 0], p[:, 1])
    else:
        rgi = RegularGridInterpolator(axes, vals, method="linear")
        fn = rgi

    def evaluate(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = np.clip(x.reshape(-1, d), lo, hi)
        return np.asarray(fn(flat), dtype=float).reshape(x.shape[:-1])

    return evaluate
