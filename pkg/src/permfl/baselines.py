"""Global-model baselines: weighted ERM and locally fine-tuned averaging."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .discrepancy import (LocalSGDResult, RoundEval, evaluate_clients,
                          local_sgd_global)
from .numerics import project_domain_rows
from .objectives import LossModel, Shard, eval_accuracy, eval_loss, loss
from .parallel import pmap
from .prng import stream
from .sgd import multi_sgd_steps


@dataclass
class BaselineResult:
    name: str
    train_loss: np.ndarray
    eval_loss: np.ndarray
    eval_accuracy: np.ndarray
    rounds: int
    messages: int
    gamma: float
    global_model: np.ndarray | None = None
    personalized: np.ndarray | None = None
    history: list[RoundEval] = field(default_factory=list)


def _weight_vector(shards: Sequence[Shard], weights) -> np.ndarray | None:
    if weights is None or (isinstance(weights, str) and weights == "data"):
        counts = np.array([sh.n_train for sh in shards], dtype=np.float64)
        return counts / counts.sum()
    if isinstance(weights, str):
        if weights == "uniform":
            return None  # local_sgd_global defaults to the plain mean
        raise ValueError(f"unknown weighting {weights!r}")
    return np.asarray(weights, dtype=np.float64)


def run_werm(shards: Sequence[Shard], model: LossModel, *, rounds: int,
             local_steps: int, weights="data", gamma: float | None = None,
             c_gamma: float = 1.0, seed: int = 0, diameter: float = 2000.0,
             batch_size: int | None = 1, sample_mode: str = "per-client",
             constants: tuple[float, float] | None = None,
             eval_every: int = 0) -> BaselineResult:
    """One global model trained on the weighted sum of all client losses.

    Weighting defaults to sample counts n_i / n; pass "uniform" or an explicit
    probability vector to override. The single model is evaluated on every
    client's splits.
    """
    res = local_sgd_global(shards, model, rounds=rounds, local_steps=local_steps,
                           gamma=gamma, c_gamma=c_gamma,
                           weights=_weight_vector(shards, weights), seed=seed,
                           diameter=diameter, batch_size=batch_size,
                           sample_mode=sample_mode, constants=constants,
                           eval_every=eval_every)
    tl, el, ea = evaluate_clients(model, res.w, shards)
    return BaselineResult("werm", tl, el, ea, res.rounds, res.messages, res.gamma,
                          global_model=res.w, history=res.history)


def run_localized_fedavg(shards: Sequence[Shard], model: LossModel, *, rounds: int,
                         local_steps: int, fine_tune_steps: int = 50,
                         gamma: float | None = None, c_gamma: float = 1.0,
                         seed: int = 0, diameter: float = 2000.0,
                         batch_size: int | None = 1, sample_mode: str = "per-client",
                         constants: tuple[float, float] | None = None,
                         eval_every: int = 0) -> BaselineResult:
    """Uniform federated averaging followed by local fine-tuning on each shard.

    Fine-tuning reuses the global step size and costs no communication. With
    fine_tune_steps=0 the result matches run_werm under uniform weighting.
    """
    if fine_tune_steps < 0:
        raise ValueError(f"fine_tune_steps must be >= 0, got {fine_tune_steps}")
    res = local_sgd_global(shards, model, rounds=rounds, local_steps=local_steps,
                           gamma=gamma, c_gamma=c_gamma, weights=None, seed=seed,
                           diameter=diameter, batch_size=batch_size,
                           sample_mode=sample_mode, constants=constants,
                           eval_every=eval_every)
    N = len(shards)
    V = np.tile(res.w, (N, 1))
    if fine_tune_steps > 0:
        V = multi_sgd_steps(model, V, np.arange(N), shards,
                            np.full(N, res.gamma), fine_tune_steps,
                            rng=stream(seed, "finetune"), batch_size=batch_size,
                            shared_draws=(sample_mode == "shared"))
        if not np.all(np.isfinite(V)):
            raise FloatingPointError("fine-tuning diverged: non-finite iterate")
        V = project_domain_rows(V, diameter)
    vals = pmap(lambda i: (loss(model, V[i], shards[i]),
                           eval_loss(model, V[i], shards[i]),
                           eval_accuracy(model, V[i], shards[i])), range(N))
    arr = np.array(vals, dtype=np.float64)
    return BaselineResult("localized-fedavg", arr[:, 0], arr[:, 1], arr[:, 2],
                          res.rounds, res.messages, res.gamma, global_model=res.w,
                          personalized=V, history=res.history)
