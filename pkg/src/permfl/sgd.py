"""Vectorized multi-model SGD stepping shared by every training loop.

Models are stacked as rows of V; model i steps on the shard named by
shard_ids[i] with its own effective step size. Sample draws come from a
single keyed generator per call, one row of uniforms per model, so results
are independent of scheduling and worker-thread count.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .objectives import LossModel, Shard, _sigmoid, grad


def draw_uniforms(rng: np.random.Generator, n_models: int, steps: int,
                  batch_size: int, shared: bool) -> np.ndarray:
    """(n_models, steps, batch_size) uniforms; one shared block when requested."""
    if shared:
        u = rng.random((1, steps, batch_size))
        return np.broadcast_to(u, (n_models, steps, batch_size))
    return rng.random((n_models, steps, batch_size))


def multi_sgd_steps(model: LossModel, V: np.ndarray, shard_ids: np.ndarray,
                    shards: Sequence[Shard], step_sizes: np.ndarray, steps: int,
                    rng: np.random.Generator | None = None, batch_size: int | None = 1,
                    shared_draws: bool = False) -> np.ndarray:
    """Advance each row of V by `steps` stochastic gradient updates.

    batch_size=None uses the exact full-batch gradient at every step and
    consumes no randomness. step_sizes already fold in any per-model scaling.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    V = np.array(V, dtype=np.float64)
    n_models = V.shape[0]
    shard_ids = np.asarray(shard_ids, dtype=np.int64)
    step_sizes = np.asarray(step_sizes, dtype=np.float64)
    if steps == 0:
        return V

    if batch_size is None:
        for _ in range(steps):
            G = np.stack([grad(model, V[i], shards[s]) for i, s in enumerate(shard_ids)])
            V = V - step_sizes[:, None] * G
        return V

    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1 or None, got {batch_size}")
    if rng is None:
        raise ValueError("stochastic stepping needs a generator")

    counts = np.array([shards[s].n_train for s in shard_ids], dtype=np.int64)
    u = draw_uniforms(rng, n_models, steps, batch_size, shared_draws)
    idx = np.minimum((u * counts[:, None, None]).astype(np.int64), counts[:, None, None] - 1)

    d = V.shape[1]
    Xg = np.empty((n_models, steps, batch_size, d))
    yg = np.empty((n_models, steps, batch_size))
    for i, s in enumerate(shard_ids):
        tf = shards[s].train_features
        tl = shards[s].train_labels
        Xg[i] = tf[idx[i]]
        yg[i] = tl[idx[i]]

    reg = model.reg
    logistic = model.kind == "logistic"
    for t in range(steps):
        Xt = Xg[:, t]            # (n_models, batch, d)
        yt = yg[:, t]            # (n_models, batch)
        m = np.einsum("nbd,nd->nb", Xt, V)
        if logistic:
            coef = -yt * _sigmoid(-yt * m)
        else:
            coef = m - yt
        G = np.einsum("nb,nbd->nd", coef, Xt) / batch_size + reg * V
        V = V - step_sizes[:, None] * G
    return V
