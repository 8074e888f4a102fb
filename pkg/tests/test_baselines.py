"""WERM and localized-FedAvg baselines."""

import numpy as np
import pytest

from permfl.baselines import run_localized_fedavg, run_werm
from permfl.objectives import estimate_constants, eval_accuracy, loss


def test_werm_basic(ridge_fed, ridge_model):
    shards = ridge_fed.shards
    constants = estimate_constants(ridge_model, shards)
    res = run_werm(shards, ridge_model, rounds=10, local_steps=3, seed=1,
                   constants=constants, eval_every=5)
    assert res.name == "werm"
    assert res.rounds == 10
    assert res.messages == 10 * 2 * len(shards)
    assert res.global_model.shape == (ridge_fed.dim,)
    assert res.personalized is None
    assert res.eval_accuracy.shape == (len(shards),)
    # reported metrics match direct evaluation of the global model
    for i, sh in enumerate(shards):
        assert res.eval_accuracy[i] == eval_accuracy(ridge_model, res.global_model, sh)
        assert res.train_loss[i] == pytest.approx(loss(ridge_model, res.global_model, sh))
    assert [h.round for h in res.history] == [5, 10]


def test_werm_weight_modes(ridge_fed, ridge_model):
    shards = ridge_fed.shards
    constants = estimate_constants(ridge_model, shards)
    by_data = run_werm(shards, ridge_model, rounds=4, local_steps=2, seed=2,
                       constants=constants, weights="data")
    uniform = run_werm(shards, ridge_model, rounds=4, local_steps=2, seed=2,
                       constants=constants, weights="uniform")
    # equal shard sizes here, so the two weightings coincide
    assert np.array_equal(by_data.global_model, uniform.global_model)
    explicit = run_werm(shards, ridge_model, rounds=4, local_steps=2, seed=2,
                        constants=constants,
                        weights=np.full(len(shards), 1 / len(shards)))
    assert np.array_equal(uniform.global_model, explicit.global_model)
    with pytest.raises(ValueError):
        run_werm(shards, ridge_model, rounds=1, local_steps=1, weights="nope")


def test_localized_fedavg(ridge_model):
    # heterogeneous clients: fine-tuning must beat the shared global model
    from permfl.datagen import gen_cluster_rows, partition_csv

    rows, labels = gen_cluster_rows(400, 4, 10, spread=2.0, noise=0.3, seed=11)
    labels = (labels - labels.mean()) / labels.std()
    fed = partition_csv(rows, labels, 4, "by-label", classes_per_client=1, seed=11)
    shards = fed.shards
    n = len(shards)
    constants = estimate_constants(ridge_model, shards)
    res = run_localized_fedavg(shards, ridge_model, rounds=8, local_steps=3,
                               fine_tune_steps=40, seed=4, constants=constants,
                               batch_size=8)
    assert res.name == "localized-fedavg"
    assert res.personalized.shape == (n, fed.dim)
    assert not np.allclose(res.personalized[0], res.personalized[1])
    base = run_werm(shards, ridge_model, rounds=8, local_steps=3, seed=4,
                    constants=constants, weights="uniform", batch_size=8)
    base_losses = [loss(ridge_model, base.global_model, sh) for sh in shards]
    assert res.train_loss.mean() < 0.5 * np.mean(base_losses)


def test_localized_zero_fine_tune_is_werm(ridge_fed, ridge_model):
    shards = ridge_fed.shards
    constants = estimate_constants(ridge_model, shards)
    frozen = run_localized_fedavg(shards, ridge_model, rounds=5, local_steps=2,
                                  fine_tune_steps=0, seed=9, constants=constants)
    base = run_werm(shards, ridge_model, rounds=5, local_steps=2, seed=9,
                    constants=constants, weights="uniform")
    np.testing.assert_array_equal(frozen.global_model, base.global_model)
    for row in frozen.personalized:
        assert np.array_equal(row, base.global_model)
    assert np.array_equal(frozen.eval_accuracy, base.eval_accuracy)
