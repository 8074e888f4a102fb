"""Joint personalized/global loop with per-epoch weight refreshes."""

import numpy as np
import pytest

from permfl.objectives import LossModel, Shard, estimate_constants
from permfl.shuffling import run_shuffling
from permfl.single_loop import (default_global_batch, run_single_loop,
                                theorem_gamma_single_loop)


def test_default_global_batch():
    x = np.ones((50, 2))
    y = np.ones(50)
    small = Shard(x[:10], y[:10], np.array([9]))
    big = Shard(x, y, np.arange(40, 50))
    assert default_global_batch([small, big]) == 9
    assert default_global_batch([big, big]) == 32


def test_theorem_gamma_single_loop():
    val = theorem_gamma_single_loop(0.1, 10, 4, 5)
    expected = np.log(10 * 4 * 125) / (0.1 * 5)
    assert val == pytest.approx(expected)


def test_frozen_weights_reproduce_shuffling(ridge_fed, ridge_model):
    shards = ridge_fed.shards
    n = len(shards)
    constants = estimate_constants(ridge_model, shards)
    uniform = np.full((n, n), 1.0 / n)
    direct = run_shuffling(shards, ridge_model, uniform, epochs=4, local_steps=3,
                           seed=21, constants=constants)
    frozen = run_single_loop(shards, ridge_model, epochs=4, local_steps=3,
                             seed=21, constants=constants, alpha_updates=False)
    assert np.array_equal(frozen.v_hat, direct.v_hat)
    np.testing.assert_allclose(frozen.alphas, uniform)


def test_single_loop_state_and_budget(ridge_fed, ridge_model):
    shards = ridge_fed.shards
    n = len(shards)
    constants = estimate_constants(ridge_model, shards)
    res = run_single_loop(shards, ridge_model, epochs=5, local_steps=3, seed=2,
                          constants=constants, eval_every=2, keep_alpha_trace=True)
    assert res.rounds == 5 * (n + 1)
    assert res.messages == 5 * (2 * n * n + 2 * n)
    assert res.v_hat.shape == (n, ridge_fed.dim)
    assert len(res.alpha_trace) == 5
    for snap in res.alpha_trace:
        np.testing.assert_allclose(snap.sum(axis=1), 1.0, atol=1e-9)
        assert snap.min() >= -1e-12
    assert np.all(np.isfinite(res.w))
    # diagnostics cover the eval epochs plus the final epoch
    assert [d.epoch for d in res.diagnostics] == [2, 4, 5]
    assert [st.epoch for st in res.history] == [2, 4, 5]
    assert all(d.alpha_drift >= 0.0 for d in res.diagnostics)


def test_single_loop_deterministic(ridge_fed, ridge_model):
    shards = ridge_fed.shards
    constants = estimate_constants(ridge_model, shards)
    a = run_single_loop(shards, ridge_model, epochs=3, local_steps=2, seed=6,
                        constants=constants)
    b = run_single_loop(shards, ridge_model, epochs=3, local_steps=2, seed=6,
                        constants=constants)
    assert np.array_equal(a.v_hat, b.v_hat)
    assert np.array_equal(a.alphas, b.alphas)
    c = run_single_loop(shards, ridge_model, epochs=3, local_steps=2, seed=7,
                        constants=constants)
    assert not np.array_equal(a.v_hat, c.v_hat)


def test_single_loop_weights_track_structure(ridge_fed, ridge_model):
    # after refreshes the weights should no longer be uniform and should
    # remain rows of the simplex
    shards = ridge_fed.shards
    n = len(shards)
    constants = estimate_constants(ridge_model, shards)
    res = run_single_loop(shards, ridge_model, epochs=6, local_steps=3, seed=3,
                          constants=constants, lam=0.5)
    assert not np.allclose(res.alphas, 1.0 / n)
    np.testing.assert_allclose(res.alphas.sum(axis=1), 1.0, atol=1e-9)
    drift = res.diagnostics[-1].alpha_drift
    assert np.isfinite(drift)


def test_single_loop_validation(ridge_fed, ridge_model):
    with pytest.raises(ValueError):
        run_single_loop(ridge_fed.shards, ridge_model, epochs=0, local_steps=1)
    with pytest.raises(ValueError):
        run_single_loop(ridge_fed.shards, ridge_model, epochs=1, local_steps=1,
                        sample_mode="bogus")
