import numpy as np
import pytest

from permfl import LossModel, estimate_constants
from permfl.datagen import SyntheticSpec, gen_cluster_rows, gen_synthetic, partition_csv


@pytest.fixture
def ridge_fed():
    """Small deterministic ridge federation: 5 clients, 2 clusters, d=10."""
    rows, labels = gen_cluster_rows(400, 2, 10, spread=2.0, noise=0.3, seed=11)
    return partition_csv(rows, labels, 5, "homogeneous", seed=11)


@pytest.fixture
def ridge_model():
    return LossModel("ridge", 1e-2)


@pytest.fixture
def logistic_fed():
    spec = SyntheticSpec(n_clients=6, dim=8, samples_per_client=60, seed=3)
    return gen_synthetic(spec)


@pytest.fixture
def logistic_model():
    return LossModel("logistic", 1e-2)


def make_shard_rng(rng, n, d, kind):
    """Random shard with a positional eval split, labels matched to the loss."""
    from permfl.objectives import Shard

    x = rng.standard_normal((n, d))
    if kind == "logistic":
        y = np.where(rng.standard_normal(n) >= 0, 1.0, -1.0)
    else:
        y = rng.standard_normal(n)
    n_eval = max(1, n // 5)
    return Shard(x, y, np.arange(n - n_eval, n))
