import math

import numpy as np
import pytest

from snellvi.diagnostics import (hormander_rank, linear_functional, malliavin_covariance, nondegeneracy_statistic,
                                 ou_martingale_check, ou_regularize, silverman_bandwidth, tanaka_check)
from snellvi.errors import GridError
from snellvi.model import DiffusionModel, SpaceTimeGrid, build_model
from snellvi.oracles import kolmogorov_covariance, kolmogorov_nondegeneracy
from snellvi.sde import first_variation, iter_path_chunks, simulate_paths

BM = build_model({"family": "brownian", "params": {"sigma": 1.0}, "T": 1.0})
KOL = build_model({"family": "kolmogorov_2d", "params": {"sigma": 1.0}, "T": 1.0})


def constant_fields():
    # commuting constant diffusion field and zero drift in R^2
    return DiffusionModel(2, 1, lambda t, x: np.zeros_like(x),
                          lambda t, x: np.broadcast_to(np.array([[1.0], [0.0]]), x.shape[:-1] + (2, 1)),
                          lambda t, x: np.zeros(x.shape[:-1]), T=1.0)


# --- Malliavin covariance ---------------------------------------------------------------------------


def test_brownian_covariance_is_time():
    b = simulate_paths(BM, np.linspace(0, 1, 101), 3, [0.0], 0)
    cov = malliavin_covariance(b, first_variation(b, BM), BM)
    np.testing.assert_allclose(cov.C[0, :, 0, 0], b.time_nodes, atol=1e-12)


def test_kolmogorov_covariance_matches_closed_form():
    b = simulate_paths(KOL, np.linspace(0, 1, 2001), 2, [0.0, 0.0], 0)
    cov = malliavin_covariance(b, first_variation(b, KOL), KOL)
    np.testing.assert_allclose(cov.C[0, -1], kolmogorov_covariance(1.0, 1.0), rtol=2e-3)


def test_brownian_statistic_is_log_ten():
    b = simulate_paths(BM, np.linspace(0, 1, 1001), 4, [0.0], 1)
    rep = nondegeneracy_statistic(b, first_variation(b, BM), BM, eps=0.1)
    assert rep.statistics[0].value == pytest.approx(math.log(10.0), rel=1e-3)
    assert rep.nondegenerate


def test_kolmogorov_statistic_coarse_grid():
    b = simulate_paths(KOL, np.linspace(0, 1, 2001), 2, [0.0, 0.0], 1)
    rep = nondegeneracy_statistic(b, first_variation(b, KOL), KOL, eps=0.1)
    exact = kolmogorov_nondegeneracy(1.0, 0.1, 1.0)
    assert exact == pytest.approx(3996.0, rel=1e-3)
    assert rep.statistics[0].value == pytest.approx(exact, rel=0.03)


def test_degenerate_model_flags_divergence():
    flat = build_model({"family": "brownian", "params": {"sigma": 0.0}, "T": 1.0})
    b = simulate_paths(flat, np.linspace(0, 1, 11), 4, [0.0], 0)
    rep = nondegeneracy_statistic(b, first_variation(b, flat), flat, eps=0.1)
    est = rep.statistics[0]
    assert math.isinf(est.value) and est.divergent
    assert not rep.nondegenerate
    assert rep.to_dict()["statistics"][0]["divergent"]


def test_eps_validation():
    b = simulate_paths(BM, np.linspace(0, 1, 11), 2, [0.0], 0)
    for eps in (0.0, 1.0):
        with pytest.raises(ValueError):
            nondegeneracy_statistic(b, first_variation(b, BM), BM, eps=eps)


# --- bracket rank ------------------------------------------------------------------------------------


def test_kolmogorov_bracket_ladder():
    rep = hormander_rank(KOL, 0.0, [0.3, -0.2], 3)
    assert rep.rank_by_depth[:2] == [1, 2]
    assert rep.hypoelliptic and rep.depth_used == 2
    assert [1] in rep.spanning and [0, 1] in rep.spanning


def test_constant_fields_stay_rank_one():
    rep = hormander_rank(constant_fields(), 0.0, [0.1, 0.2], 5)
    assert rep.rank_by_depth == [1] * 5
    assert not rep.hypoelliptic


def test_elliptic_gbm_basket_full_rank_at_depth_one():
    m = build_model({"family": "gbm_basket", "d": 2, "T": 1.0, "params": {"sigma": [0.2, 0.3], "r": 0.0}})
    assert hormander_rank(m, 0.0, [1.0, 2.0], 1).rank_by_depth == [2]


# --- Ornstein-Uhlenbeck semigroup -------------------------------------------------------------------


def small_bm_batch(n_paths=40, seed=3):
    return simulate_paths(BM, np.linspace(0, 1, 21), n_paths, [0.0], seed)


def test_ou_kappa_zero_is_identity():
    b = small_bm_batch()
    F = linear_functional(np.ones((20, 1)))
    np.testing.assert_array_equal(ou_regularize(F, b, 0.0, 10), F(b.increments))
    with pytest.raises(ValueError):
        ou_regularize(F, b, -1.0)


def test_ou_linear_scaling():
    b = small_bm_batch()
    F = linear_functional(np.linspace(1, 2, 20)[:, None])
    P = ou_regularize(F, b, 0.5, 4000, seed=1)
    F0 = F(b.increments)
    err = np.sqrt(np.mean((P - math.exp(-0.5) * F0) ** 2)) / F0.std()
    assert err < 0.02


def test_ou_quadratic_functional_closed_form():
    b = small_bm_batch()
    Q = lambda w: w[..., 0, 0] ** 2
    P = ou_regularize(Q, b, 0.4, 4000, seed=2)
    exact = math.exp(-0.8) * b.increments[:, 0, 0] ** 2 + (1 - math.exp(-0.8)) * b.dt[0]
    assert np.sqrt(np.mean((P - exact) ** 2)) / Q(b.increments).std() < 0.03


def test_ou_deterministic_and_chunk_invariant():
    b = small_bm_batch(6)
    G = lambda w: np.maximum(w.sum(axis=(-1, -2)), 0.0)
    a = ou_regularize(G, b, [0.2, 0.1], 500, seed=4, chunk=64)
    c = ou_regularize(G, b, [0.2, 0.1], 500, seed=4, chunk=500)
    np.testing.assert_allclose(a, c, rtol=1e-12)


def test_ou_martingale_check_on_asset():
    m = build_model({"family": "black_scholes_1d", "params": {"sigma": 0.2, "r": 0.0}, "T": 1.0})
    b = simulate_paths(m, np.linspace(0, 1, 11), 5000, [100.0], 5)
    rep = ou_martingale_check(b, m, lambda t, x: x, 0.5)
    assert rep.passed
    assert rep.bracket_lhs <= rep.c * rep.bracket_rhs


# --- Tanaka ------------------------------------------------------------------------------------------


def test_silverman_bandwidth_scaling():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(1000)
    h = silverman_bandwidth(x, 1000)
    assert h == pytest.approx(1.06 * x.std(ddof=1) * 1000 ** -0.2, rel=1e-6)


def test_tanaka_brownian_small():
    tn = np.linspace(0, 1, 201)
    rep = tanaka_check(iter_path_chunks(BM, tn, 20_000, [0.0], 2, chunk_size=5000), 0.0, BM, n_paths=20_000)
    assert abs(rep.lhs_mean - 1 / math.sqrt(2 * math.pi)) < 4 * rep.lhs_se
    assert rep.relative_error < 0.05


def test_tanaka_level_outside_grid():
    b = simulate_paths(BM, np.linspace(0, 1, 11), 100, [0.0], 0)
    grid = SpaceTimeGrid(b.time_nodes, [np.linspace(-1, 1, 11)])
    with pytest.raises(GridError):
        tanaka_check(b, 5.0, BM, grid=grid)
