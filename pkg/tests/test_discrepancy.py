"""Mixing-weight solvers, dissimilarity, and the global training stage."""

import numpy as np
import pytest

from permfl.discrepancy import (AlphaSolverConfig, estimate_all_alphas, kappa_g,
                                local_sgd_global, mean_dissimilarity,
                                mixing_objective, pairwise_dissimilarity,
                                solve_alpha_gd, solve_alpha_kkt, theorem_gamma)
from permfl.objectives import LossModel, estimate_constants, grad


def objective(alpha, z, counts, lam):
    return float(alpha @ z + lam * np.sum(alpha ** 2 / counts))


def test_kkt_solved_by_hand():
    # two clients, equal counts: alpha = ((1,0)) once z gap exceeds 2*lam
    z = np.array([0.0, 3.0])
    counts = np.array([1, 1])
    np.testing.assert_allclose(solve_alpha_kkt(z, counts, 1.0), [1.0, 0.0])
    # smaller gap splits the mass: nu solves (nu - 0)/2 + (nu - 1)/2 = 1
    z2 = np.array([0.0, 1.0])
    np.testing.assert_allclose(solve_alpha_kkt(z2, counts, 1.0), [0.75, 0.25])
    # count asymmetry shifts mass toward the bigger shard
    z3 = np.array([0.0, 0.0])
    a3 = solve_alpha_kkt(z3, np.array([1, 3]), 1.0)
    np.testing.assert_allclose(a3, [0.25, 0.75])


def test_kkt_first_order_conditions():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        z = np.abs(rng.standard_normal(n))
        counts = rng.integers(1, 50, n)
        lam = float(rng.choice([0.1, 1.0, 10.0]))
        a = solve_alpha_kkt(z, counts, lam)
        assert a.min() >= -1e-12 and abs(a.sum() - 1.0) < 1e-9
        # KKT: gradient equal on the support, no smaller off it
        g = z + 2.0 * lam * a / counts
        on = a > 1e-10
        nu = g[on]
        assert nu.max() - nu.min() < 1e-8
        if (~on).any():
            assert g[~on].min() >= nu.max() - 1e-8


def test_gd_matches_kkt():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(2, 10))
        z = np.abs(rng.standard_normal(n))
        counts = rng.integers(1, 20, n)
        t = int(40 * kappa_g(counts)) + 1
        cfg = AlphaSolverConfig(lam=1.0, t_alpha=t)
        a_gd = solve_alpha_gd(z, counts, cfg)
        a_kkt = solve_alpha_kkt(z, counts, 1.0)
        np.testing.assert_allclose(a_gd, a_kkt, atol=1e-8)


def test_gd_trace_decreases():
    z = np.array([0.1, 0.5, 0.2, 0.9])
    counts = np.array([5, 2, 7, 1])
    trace = []
    solve_alpha_gd(z, counts, AlphaSolverConfig(lam=0.5, t_alpha=50), trace=trace)
    assert len(trace) == 51
    diffs = np.diff(np.asarray(trace))
    assert np.all(diffs <= 1e-12)


def test_gd_warm_start():
    z = np.array([0.3, 0.3, 0.4])
    counts = np.array([3, 3, 3])
    target = solve_alpha_kkt(z, counts, 1.0)
    warm = solve_alpha_gd(z, counts, AlphaSolverConfig(lam=1.0, t_alpha=200),
                          start=np.array([0.2, 0.2, 0.6]))
    np.testing.assert_allclose(warm, target, atol=1e-9)


def test_mixing_objective_and_kappa():
    a = np.array([0.5, 0.5])
    z = np.array([1.0, 2.0])
    counts = np.array([2, 4])
    expected = 1.5 + 0.1 * (0.25 / 2 + 0.25 / 4)
    assert abs(mixing_objective(a, z, counts, 0.1) - expected) < 1e-12
    assert kappa_g(np.array([2, 10])) == 5.0
    with pytest.raises(ValueError):
        AlphaSolverConfig(lam=0.0)
    with pytest.raises(ValueError):
        AlphaSolverConfig(t_alpha=0)


def test_pairwise_dissimilarity(logistic_fed, logistic_model):
    shards = logistic_fed.shards
    w = np.linspace(-0.5, 0.5, logistic_fed.dim)
    z = pairwise_dissimilarity(shards, logistic_model, w)
    n = len(shards)
    assert z.shape == (n, n)
    np.testing.assert_allclose(z, z.T, atol=0)
    np.testing.assert_allclose(np.diag(z), 0.0, atol=0)
    grads = [grad(logistic_model, w, sh) for sh in shards]
    for i in range(n):
        for j in range(n):
            expected = float(np.sum((grads[i] - grads[j]) ** 2))
            assert abs(z[i, j] - expected) < 1e-12
    zbar = mean_dissimilarity(z)
    np.testing.assert_allclose(zbar, z.sum(axis=1) / n)


def test_estimate_all_alphas_rowwise(logistic_fed, logistic_model):
    shards = logistic_fed.shards
    w = np.zeros(logistic_fed.dim)
    cfg = AlphaSolverConfig(lam=1.0, t_alpha=300)
    alphas = estimate_all_alphas(shards, logistic_model, w, cfg)
    z = pairwise_dissimilarity(shards, logistic_model, w)
    counts = np.array([sh.n_train for sh in shards])
    for i in range(len(shards)):
        row = solve_alpha_gd(z[i], counts, cfg)
        np.testing.assert_allclose(alphas[i], row, atol=0)


def test_theorem_gamma():
    assert theorem_gamma(0.1, 10, 5) == pytest.approx(np.log(50) / (0.1 * 50))
    assert theorem_gamma(0.1, 10, 5, c=2.0) == pytest.approx(2 * np.log(50) / (0.1 * 50))


def test_local_sgd_global(logistic_fed, logistic_model):
    shards = logistic_fed.shards
    constants = estimate_constants(logistic_model, shards)
    res = local_sgd_global(shards, logistic_model, rounds=6, local_steps=3,
                           seed=7, constants=constants, eval_every=2)
    assert res.rounds == 6
    assert res.messages == 6 * 2 * len(shards)
    assert np.all(np.isfinite(res.w))
    assert np.linalg.norm(res.w) <= 1000.0 + 1e-9
    assert [h.round for h in res.history] == [2, 4, 6]
    rerun = local_sgd_global(shards, logistic_model, rounds=6, local_steps=3,
                             seed=7, constants=constants, eval_every=2)
    assert np.array_equal(res.w, rerun.w)
    other = local_sgd_global(shards, logistic_model, rounds=6, local_steps=3,
                             seed=8, constants=constants)
    assert not np.array_equal(res.w, other.w)


def test_local_sgd_reduces_loss(ridge_fed, ridge_model):
    from permfl.objectives import loss

    shards = ridge_fed.shards
    constants = estimate_constants(ridge_model, shards)
    at_zero = np.mean([loss(ridge_model, np.zeros(ridge_fed.dim), sh)
                       for sh in shards])
    exact = local_sgd_global(shards, ridge_model, rounds=25, local_steps=5,
                             seed=1, constants=constants, batch_size=None)
    assert np.mean([loss(ridge_model, exact.w, sh) for sh in shards]) < 0.5 * at_zero
    noisy = local_sgd_global(shards, ridge_model, rounds=25, local_steps=5,
                             seed=1, constants=constants)
    assert np.mean([loss(ridge_model, noisy.w, sh) for sh in shards]) < 0.5 * at_zero


def test_local_sgd_weights(logistic_fed, logistic_model):
    shards = logistic_fed.shards
    constants = estimate_constants(logistic_model, shards)
    uniform = local_sgd_global(shards, logistic_model, rounds=3, local_steps=2,
                               seed=2, constants=constants)
    explicit = local_sgd_global(shards, logistic_model, rounds=3, local_steps=2,
                                seed=2, constants=constants,
                                weights=np.full(len(shards), 1 / len(shards)))
    assert np.array_equal(uniform.w, explicit.w)
