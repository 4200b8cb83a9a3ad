import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snellvi.errors import ConfigError, ConvergenceError, GridError, MismatchError
from snellvi.model import SpaceTimeGrid, build_model, build_payoff, put_payoff
from snellvi.oracles import bs_price
from snellvi.vi import (LcpStep, SolverParams, complementarity_residual, extract_regions, node_colors, psor,
                        solve_backward)

import scipy.sparse as sp


def bs(sigma=0.2, r=0.05):
    return build_model({"family": "black_scholes_1d", "params": {"sigma": sigma, "r": r}, "T": 1.0})


def put_grid(n_time=100, n_space=201):
    return SpaceTimeGrid(np.linspace(0, 1, n_time + 1), [np.linspace(0, 300, n_space)])


# --- PSOR ------------------------------------------------------------------------------------------


def test_psor_matches_direct_solve_without_obstacle():
    rng = np.random.default_rng(0)
    n = 30
    B = sp.diags([-np.ones(n - 1), 4 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")
    g = rng.normal(size=n)
    grid = SpaceTimeGrid([0, 1], [np.arange(n, dtype=float)])
    u, its, change = psor(LcpStep(B, g, np.full(n, -np.inf)), np.zeros(n), node_colors(grid, False), 1.2, 1e-13,
                          1000)
    np.testing.assert_allclose(u, np.linalg.solve(B.toarray(), g), atol=1e-11)


def test_psor_solves_lcp():
    n = 40
    B = sp.diags([-np.ones(n - 1), 3 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")
    g = np.linspace(-1, 1, n)
    f = np.cos(np.linspace(0, 3, n))
    grid = SpaceTimeGrid([0, 1], [np.arange(n, dtype=float)])
    u, _, _ = psor(LcpStep(B, g, f), f, node_colors(grid, False), 1.3, 1e-13, 5000)
    slack = B @ u - g
    assert np.all(u >= f - 1e-12)
    assert np.all(slack >= -1e-10)
    assert np.max(np.abs(slack * (u - f))) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 40), st.floats(0.05, 2.0), st.integers(0, 10_000))
def test_psor_lcp_property(n, off, seed):
    # tridiagonal M-matrix with random obstacle and right-hand side
    rng = np.random.default_rng(seed)
    B = sp.diags([-off * np.ones(n - 1), (2 * off + 1) * np.ones(n), -off * np.ones(n - 1)], [-1, 0, 1],
                 format="csr")
    g, f = rng.normal(size=n), rng.normal(size=n)
    grid = SpaceTimeGrid([0, 1], [np.arange(n, dtype=float)])
    u, _, _ = psor(LcpStep(B, g, f), f, node_colors(grid, False), 1.2, 1e-13, 20_000)
    slack = B @ u - g
    assert np.all(u >= f) and np.all(slack >= -1e-9)
    assert np.max(np.abs(np.minimum(slack, u - f))) < 1e-9


def test_colour_classes_partition_nodes():
    g = SpaceTimeGrid([0, 1], [np.linspace(0, 1, 5), np.linspace(0, 1, 4)])
    for cross, n_col in ((False, 2), (True, 4)):
        cols = node_colors(g, cross)
        assert len(cols) == n_col
        assert np.array_equal(np.sort(np.concatenate(cols)), np.arange(20))


def test_non_convergence_raises():
    with pytest.raises(ConvergenceError) as err:
        solve_backward(bs(), put_payoff(100.0), put_grid(10, 101), SolverParams(max_iters=1, tol=1e-14))
    assert err.value.level >= 0


def test_unknown_solver_key():
    with pytest.raises(ConfigError):
        SolverParams.from_dict({"omega": 1.1, "relax": 2})


# --- solver ----------------------------------------------------------------------------------------


def test_european_mode_matches_black_scholes():
    s = solve_backward(bs(), put_payoff(100.0), put_grid(200, 401), SolverParams(american=False))
    x = np.array([80.0, 100.0, 120.0])
    got = s.value(0.0, x[:, None])
    np.testing.assert_allclose(got, bs_price(x, 100.0, 0.05, 0.2, 1.0, put=True), atol=5e-3)


def test_american_put_dominates_payoff_and_european():
    g = put_grid()
    am = solve_backward(bs(), put_payoff(100.0), g)
    eu = solve_backward(bs(), put_payoff(100.0), g, SolverParams(american=False))
    f = put_payoff(100.0)(g.nodes())
    assert np.all(am.values >= f - 1e-12)
    # PSOR stops at tol * max|f| = 1e-6
    assert np.all(am.values >= eu.values - 1e-6)
    assert am.price([100.0]) > eu.price([100.0]) + 0.3


def test_price_monotone_in_strike():
    g = put_grid(60, 151)
    prices = [solve_backward(bs(), put_payoff(k), g).price([100.0]) for k in (90.0, 100.0, 110.0)]
    assert prices[0] < prices[1] < prices[2]


def test_zero_payoff_gives_zero_surface():
    s = solve_backward(bs(), build_payoff({"type": "zero"}), put_grid(20, 51))
    assert np.all(s.values == 0.0)
    reg = extract_regions(s)
    assert not reg.exercise.mask[:-1].any()


def test_2d_basket_cross_terms():
    m = build_model({"family": "gbm_basket", "d": 2, "T": 0.5,
                     "params": {"sigma": [0.25, 0.25], "r": 0.04, "rho": 0.6}})
    axis = np.linspace(20.0, 250.0, 41)
    g = SpaceTimeGrid(np.linspace(0, 0.5, 41), [axis, axis])
    pay = build_payoff({"type": "put", "strike": 100.0, "weights": [0.5, 0.5]})
    am = solve_backward(m, pay, g)
    eu = solve_backward(m, pay, g, SolverParams(american=False))
    assert am.price([100.0, 100.0]) >= eu.price([100.0, 100.0])
    assert am.solver_meta["method"] == "psor"
    # symmetric basket: value symmetric under swapping coordinates
    np.testing.assert_allclose(am.values[0], am.values[0].T, atol=1e-8)


def test_neumann_boundary_policy():
    g = SpaceTimeGrid(np.linspace(0, 1, 51), [np.linspace(0, 300, 151)], boundary_policy="neumann_zero")
    s = solve_backward(bs(), put_payoff(100.0), g)
    assert s.price([100.0]) == pytest.approx(6.09, abs=0.05)


def test_surface_interpolation_and_time_mismatch():
    s = solve_backward(bs(), put_payoff(100.0), put_grid(50, 151))
    assert s.value(0.0, np.array([[500.0]]))[0] == 0.0
    with pytest.raises(MismatchError):
        s.value(0.0123, np.array([[100.0]]))
    grad = s.gradient(0.0, np.array([[100.0]]))
    assert -1.0 < grad[0, 0] < 0.0


def test_dimension_mismatch():
    g = SpaceTimeGrid([0, 1], [np.linspace(0, 1, 5)] * 2)
    with pytest.raises(GridError):
        solve_backward(bs(), put_payoff(1.0), g)


# --- residual and regions -------------------------------------------------------------------------


def test_residual_shrinks_under_refinement():
    coarse = solve_backward(bs(), put_payoff(100.0), put_grid(50, 101), SolverParams(tol=1e-10))
    fine = solve_backward(bs(), put_payoff(100.0), put_grid(100, 201), SolverParams(tol=1e-10))
    rc = complementarity_residual(coarse, bs())
    rf = complementarity_residual(fine, bs())
    assert rf.p99_abs * 2 <= rc.p99_abs


def test_put_free_boundary():
    s = solve_backward(bs(), put_payoff(100.0), put_grid(200, 601))
    reg = extract_regions(s)
    b0 = reg.summary()["free_boundary_t0_upper"]
    # critical price at t = 0 by bisection on a 4000-step CRR tree: 80.998
    assert abs(b0 - 80.998) <= 0.5
    assert np.all(np.diff(reg.upper_boundary[:-1]) >= -1.0)


def test_call_has_no_interior_exercise():
    s = solve_backward(bs(), build_payoff({"type": "call", "strike": 100.0}), put_grid(100, 301))
    reg = extract_regions(s)
    assert not reg.exercise.mask[1:-1].any()
