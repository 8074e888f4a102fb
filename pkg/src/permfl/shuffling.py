"""Personalized training by model shuffling.

Each epoch the server draws one permutation sigma; during round j, model i
visits the shard sigma((i + j) mod N), so within a round the assignment is a
bijection and over an epoch every model visits every shard exactly once. A
visit runs K SGD steps scaled by alpha_i(shard) * N, epochs end with a domain
projection, and the run ends with one projected full-gradient step on the
weighted objective

    phi(alpha_i, v) = (1/N) * sum_j alpha_i(j) * f_j(v).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import project_domain_rows
from .objectives import (LossModel, Shard, _sigmoid, estimate_constants,
                         eval_accuracy, eval_loss, loss)
from .parallel import pmap
from .prng import stream
from .sgd import multi_sgd_steps

logger = logging.getLogger(__name__)


def round_assignments(perm: np.ndarray, j: int) -> np.ndarray:
    """Shard visited by each model in round j: perm[(i + j) mod N] for model i."""
    perm = np.asarray(perm, dtype=np.int64)
    N = perm.size
    return perm[(np.arange(N) + j) % N]


def epoch_permutation(seed: int, epoch: int, n_clients: int) -> np.ndarray:
    """The seeded Fisher-Yates permutation shared by all models in one epoch."""
    return stream(seed, "shuffle-perm", epoch).permutation(n_clients)


def _check_alphas(alphas: np.ndarray, n_clients: int) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != (n_clients, n_clients):
        raise ValueError(f"alphas must be ({n_clients}, {n_clients}), got {alphas.shape}")
    if np.any(alphas < -1e-9) or np.any(np.abs(alphas.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("each alpha row must be a probability vector")
    return alphas


def phi(model: LossModel, alpha: np.ndarray, v: np.ndarray,
        shards: Sequence[Shard]) -> float:
    """Weighted average objective (1/N) sum_j alpha_j f_j(v)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (len(shards),):
        raise ValueError(f"alpha must have one entry per shard, got {alpha.shape}")
    vals = np.array([loss(model, v, sh) for sh in shards])
    return float(alpha @ vals / len(shards))


def grad_phi(model: LossModel, alpha: np.ndarray, v: np.ndarray,
             shards: Sequence[Shard]) -> np.ndarray:
    """Gradient of phi at v."""
    return grad_phi_all(model, np.asarray(alpha)[None, :], np.asarray(v)[None, :], shards)[0]


def grad_phi_all(model: LossModel, alphas: np.ndarray, V: np.ndarray,
                 shards: Sequence[Shard]) -> np.ndarray:
    """Row i: gradient of phi(alphas[i], .) at V[i]. Vectorized over shards."""
    V = np.asarray(V, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    N = len(shards)
    out = np.zeros_like(V)
    for j, sh in enumerate(shards):
        X = sh.train_features
        y = sh.train_labels
        m = V @ X.T
        if model.kind == "logistic":
            coef = -y * _sigmoid(-y * m)
        else:
            coef = m - y
        out += alphas[:, j:j + 1] * (coef @ X / X.shape[0])
    return (out + model.reg * V) / N


def sgd_update(model: LossModel, v: np.ndarray, eta: float, shard: Shard,
               local_steps: int, alpha_entry: float, n_clients: int,
               rng: np.random.Generator | None, batch_size: int | None = 1) -> np.ndarray:
    """One shard visit: local_steps SGD updates scaled by alpha_entry * n_clients.

    No projection happens here; epochs project at their boundary.
    """
    V = np.asarray(v, dtype=np.float64)[None, :]
    step = np.array([eta * alpha_entry * n_clients])
    out = multi_sgd_steps(model, V, np.array([0]), [shard], step, local_steps,
                          rng=rng, batch_size=batch_size)
    return out[0]


def theorem_eta(mu: float, n_clients: int, local_steps: int, epochs: int,
                c: float = 1.0) -> float:
    """Shuffling step size schedule c * 4 log(sqrt(N*K) * R) / (mu * N * K * R)."""
    if mu <= 0:
        raise ValueError("automatic eta needs mu > 0; pass eta explicitly")
    nkr = n_clients * local_steps * epochs
    arg = max(math.sqrt(n_clients * local_steps) * epochs, 2.0)
    return c * 4.0 * math.log(arg) / (mu * nkr)


def stability_cap(L: float, n_clients: int, max_alpha: float) -> float:
    # Largest per-visit multiplier is eta * N * max(alpha); keep it at or
    # below 1/L so a single visit cannot blow up the iterate.
    return 1.0 / (L * n_clients * max(max_alpha, 1.0 / n_clients))


@dataclass
class EpochStats:
    """Per-client metrics recorded at the end of an epoch."""

    epoch: int
    rounds: int
    messages: int
    train_loss: np.ndarray
    eval_loss: np.ndarray
    eval_accuracy: np.ndarray
    suboptimality: np.ndarray | None = None


@dataclass
class ShufflingResult:
    v_hat: np.ndarray
    v_last: np.ndarray
    eta: float
    rounds: int
    messages: int
    history: list[EpochStats] = field(default_factory=list)
    clamped_rounds: int = 0


def weighted_ridge_minimizer(model: LossModel, alpha: np.ndarray,
                             shards: Sequence[Shard]) -> np.ndarray:
    """Closed-form minimizer of phi(alpha, .) for the ridge loss."""
    if model.kind != "ridge":
        raise ValueError("closed form applies to the ridge loss only")
    alpha = np.asarray(alpha, dtype=np.float64)
    d = shards[0].dim
    A = np.zeros((d, d))
    b = np.zeros(d)
    for a_j, sh in zip(alpha, shards):
        X = sh.train_features
        y = sh.train_labels
        n = X.shape[0]
        A += a_j * (X.T @ X / n + model.reg * np.eye(d))
        b += a_j * (X.T @ y / n)
    return np.linalg.solve(A, b)


def reference_minimizer(model: LossModel, alpha: np.ndarray, shards: Sequence[Shard],
                        diameter: float = 2000.0, tol: float = 1e-10,
                        max_iter: int = 200_000) -> np.ndarray:
    """High-accuracy projected gradient reference solve of min_v phi(alpha, v)."""
    L, _ = estimate_constants(model, shards)
    step = len(shards) / L  # phi carries a 1/N factor, so its smoothness is L/N
    v = np.zeros(shards[0].dim)
    alphas = np.asarray(alpha)[None, :]
    for _ in range(max_iter):
        g = grad_phi_all(model, alphas, v[None, :], shards)[0]
        nxt = project_domain_rows((v - step * g)[None, :], diameter)[0]
        move = float(np.linalg.norm(nxt - v))
        v = nxt
        if move <= tol * (1.0 + float(np.linalg.norm(v))):
            return v
    raise RuntimeError(f"reference solve did not reach tol {tol} in {max_iter} iterations")


def epoch_suboptimality(model: LossModel, alphas: np.ndarray, V: np.ndarray,
                        shards: Sequence[Shard], v_star: np.ndarray | None = None,
                        diameter: float = 2000.0) -> np.ndarray:
    """Per-client optimality gap phi(alpha_i, v_i) - phi(alpha_i, v_i*).

    Ridge reference points come from the normal equations; the logistic loss
    falls back to a high-accuracy projected gradient solve.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if v_star is None:
        v_star = reference_minimizers(model, alphas, shards, diameter)
    gaps = np.empty(len(shards))
    for i in range(len(shards)):
        gaps[i] = phi(model, alphas[i], V[i], shards) - phi(model, alphas[i], v_star[i], shards)
    return gaps


def reference_minimizers(model: LossModel, alphas: np.ndarray,
                         shards: Sequence[Shard], diameter: float = 2000.0) -> np.ndarray:
    """Stack of per-client minimizers of phi(alpha_i, .)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if model.kind == "ridge":
        rows = pmap(lambda i: weighted_ridge_minimizer(model, alphas[i], shards),
                    range(alphas.shape[0]))
    else:
        rows = pmap(lambda i: reference_minimizer(model, alphas[i], shards, diameter),
                    range(alphas.shape[0]))
    return np.stack(rows)


def run_shuffling(shards: Sequence[Shard], model: LossModel, alphas: np.ndarray, *,
                  epochs: int, local_steps: int, eta: float | None = None,
                  c_eta: float = 1.0, seed: int = 0, diameter: float = 2000.0,
                  batch_size: int | None = 1, sample_mode: str = "per-client",
                  constants: tuple[float, float] | None = None, eval_every: int = 0,
                  compute_suboptimality: bool = False,
                  v0: np.ndarray | None = None) -> ShufflingResult:
    """Train one personalized model per client with fixed mixing weights.

    eval_every > 0 records per-client metrics every that many epochs and
    always for the final epoch, whose row is computed on the returned v_hat.
    """
    N = len(shards)
    if N == 0:
        raise ValueError("need at least one shard")
    if epochs < 1 or local_steps < 1:
        raise ValueError("epochs and local_steps must be >= 1")
    if sample_mode not in ("per-client", "shared"):
        raise ValueError(f"unknown sample_mode {sample_mode!r}")
    alphas = _check_alphas(alphas, N)
    L, mu = constants if constants is not None else estimate_constants(model, shards)
    if eta is None:
        eta = min(theorem_eta(mu, N, local_steps, epochs, c_eta),
                  stability_cap(L, N, float(alphas.max())))
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")

    d = shards[0].dim
    V = np.zeros((N, d)) if v0 is None else np.array(v0, dtype=np.float64)
    if V.shape != (N, d):
        raise ValueError(f"v0 must be ({N}, {d})")
    v_star = None
    if compute_suboptimality:
        v_star = reference_minimizers(model, alphas, shards, diameter)

    ids = np.arange(N)
    clamp_radius = 10.0 * diameter
    clamped_rounds = 0
    messages = 0
    history: list[EpochStats] = []
    shared = sample_mode == "shared"

    for r in range(epochs):
        perm = epoch_permutation(seed, r, N)
        for j in range(N):
            sids = perm[(ids + j) % N]
            scales = eta * alphas[ids, sids] * N
            V = multi_sgd_steps(model, V, sids, shards, scales, local_steps,
                                rng=stream(seed, "shuffle-samples", r, j),
                                batch_size=batch_size, shared_draws=shared)
            if not np.all(np.isfinite(V)):
                raise FloatingPointError("shuffling diverged: non-finite iterate")
            norms = np.linalg.norm(V, axis=1)
            if np.any(norms > clamp_radius):
                over = norms > clamp_radius
                V[over] *= (clamp_radius / norms[over])[:, None]
                clamped_rounds += 1
                if clamped_rounds == 1:
                    logger.warning("shuffling iterate left 10x the domain; clamped")
            messages += 2 * N
        V = project_domain_rows(V, diameter)
        final = r == epochs - 1
        if eval_every > 0 and not final and (r + 1) % eval_every == 0:
            history.append(_epoch_stats(model, alphas, V, shards, r + 1, (r + 1) * N,
                                        messages, v_star))

    v_hat = project_domain_rows(V - grad_phi_all(model, alphas, V, shards) / L, diameter)
    history.append(_epoch_stats(model, alphas, v_hat, shards, epochs, epochs * N,
                                messages, v_star))
    return ShufflingResult(v_hat, V, eta, epochs * N, messages, history, clamped_rounds)


def _epoch_stats(model, alphas, V, shards, epoch, rounds, messages, v_star):
    rows = pmap(lambda i: (loss(model, V[i], shards[i]),
                           eval_loss(model, V[i], shards[i]),
                           eval_accuracy(model, V[i], shards[i])), range(len(shards)))
    arr = np.array(rows, dtype=np.float64)
    sub = None
    if v_star is not None:
        sub = epoch_suboptimality(model, alphas, V, shards, v_star=v_star)
    return EpochStats(epoch, rounds, messages, arr[:, 0], arr[:, 1], arr[:, 2], sub)
