import numpy as np
import pytest

from snellvi.errors import MismatchError, NonFiniteStateError
from snellvi.model import DiffusionModel, build_model
from snellvi.sde import (discount_factors, first_variation, integrate_increments, iter_path_chunks, path_rng,
                         simulate_paths)


def bs(sigma=0.2, r=0.05):
    return build_model({"family": "black_scholes_1d", "params": {"sigma": sigma, "r": r}, "T": 1.0})


TIMES = np.linspace(0.0, 1.0, 21)


def test_batch_shapes_and_start():
    b = simulate_paths(bs(), TIMES, 7, [100.0], seed=3)
    assert b.states.shape == (7, 21, 1)
    assert b.increments.shape == (7, 20, 1)
    assert np.all(b.states[:, 0, 0] == 100.0)


def test_seed_determinism_and_sensitivity():
    a = simulate_paths(bs(), TIMES, 50, [100.0], seed=1)
    b = simulate_paths(bs(), TIMES, 50, [100.0], seed=1)
    c = simulate_paths(bs(), TIMES, 50, [100.0], seed=2)
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_worker_split_is_bitwise_invariant():
    a = simulate_paths(bs(), TIMES, 101, [100.0], seed=9, n_workers=1)
    b = simulate_paths(bs(), TIMES, 101, [100.0], seed=9, n_workers=4)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.increments, b.increments)


def test_chunks_concatenate_to_full_batch():
    full = simulate_paths(bs(), TIMES, 45, [100.0], seed=4)
    parts = list(iter_path_chunks(bs(), TIMES, 45, [100.0], seed=4, chunk_size=20))
    assert [p.path_offset for p in parts] == [0, 20, 40]
    assert np.array_equal(np.concatenate([p.states for p in parts]), full.states)
    sub = full.subset(slice(20, 40))
    assert sub.path_offset == 20 and np.array_equal(sub.states, parts[1].states)


def test_antithetic_pairs_mirror():
    b = simulate_paths(bs(), TIMES, 6, [100.0], seed=0, antithetic=True)
    np.testing.assert_array_equal(b.increments[0], -b.increments[1])


def test_increment_variance():
    b = simulate_paths(bs(), TIMES, 20_000, [100.0], seed=5)
    var = b.increments[:, :, 0].var(axis=0)
    np.testing.assert_allclose(var, 0.05, rtol=0.05)


def test_replaying_increments_reproduces_states():
    b = simulate_paths(bs(), TIMES, 10, [100.0], seed=6)
    again = integrate_increments(bs(), TIMES, b.x0, b.increments)
    assert np.array_equal(again, b.states)
    with pytest.raises(MismatchError):
        integrate_increments(bs(), TIMES, b.x0, b.increments[:, 1:])


def test_euler_mean_matches_closed_form():
    # Euler for GBM has E X_k = x0 (1 + r dt)^k exactly
    b = simulate_paths(bs(0.2, 0.05), TIMES, 40_000, [100.0], seed=7)
    mean = b.states[:, -1, 0].mean()
    se = b.states[:, -1, 0].std() / np.sqrt(b.n_paths)
    assert abs(mean - 100.0 * 1.0025 ** 20) < 4 * se


def test_non_finite_state_reports_step_and_path():
    m = DiffusionModel(1, 1, lambda t, x: x * 1e200, lambda t, x: np.zeros(x.shape + (1,)),
                       lambda t, x: np.zeros(x.shape[:-1]), T=1.0)
    with pytest.raises(NonFiniteStateError) as err:
        simulate_paths(m, TIMES, 3, [1e200], seed=0, path_offset=10)
    assert err.value.step == 1 and err.value.path == 10


def test_discount_constant_rate():
    b = simulate_paths(bs(0.2, 0.05), TIMES, 4, [100.0], seed=0)
    np.testing.assert_allclose(discount_factors(b, bs()).factors, np.exp(-0.05 * TIMES)[None, :].repeat(4, 0))


def test_first_variation_gbm_is_state_ratio():
    b = simulate_paths(bs(), TIMES, 20, [100.0], seed=8)
    J = first_variation(b, bs()).jacobians[:, :, 0, 0]
    np.testing.assert_allclose(J, b.states[:, :, 0] / 100.0, rtol=1e-6)


def test_first_variation_kolmogorov():
    m = build_model({"family": "kolmogorov_2d", "params": {"sigma": 1.0}, "T": 1.0})
    b = simulate_paths(m, TIMES, 3, [0.0, 0.0], seed=0)
    J = first_variation(b, m).jacobians
    expected = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(J[:, 0], expected[None].repeat(3, 0))
    # dX^1 = X^2 dt, so dJ_12 = J_22 dt and J_12(t_k) = t_k for the Euler flow
    np.testing.assert_allclose(J[0, :, 0, 1], TIMES, atol=1e-9)
    np.testing.assert_allclose(J[0, :, 1, 0], 0.0)


def test_path_rng_streams_differ():
    a = path_rng(1, 0, 0).standard_normal(4)
    b = path_rng(1, 0, 5).standard_normal(4)
    assert not np.allclose(a, b)
