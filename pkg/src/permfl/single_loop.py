"""Single-loop personalized training.

One loop interleaves three moves per epoch: shuffled personalized updates
using the current mixing weights, a projected stochastic gradient step on the
global average objective, and a warm-started refresh of every client's mixing
weights at the new global iterate. Weights start uniform, so early epochs
behave like plain shuffling before the dissimilarity structure is learned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .discrepancy import (AlphaSolverConfig, pairwise_dissimilarity, solve_alpha_gd)
from .numerics import project_domain, project_domain_rows
from .objectives import LossModel, Shard, estimate_constants, loss, stoch_grad
from .parallel import pmap
from .prng import stream
from .sgd import multi_sgd_steps
from .shuffling import (EpochStats, _epoch_stats, epoch_permutation, grad_phi_all,
                        stability_cap, theorem_eta)

DEFAULT_GLOBAL_BATCH_CAP = 32


def default_global_batch(shards: Sequence[Shard]) -> int:
    """Per-client batch for the global step: the smallest shard, capped at 32."""
    return min(min(sh.n_train for sh in shards), DEFAULT_GLOBAL_BATCH_CAP)


def theorem_gamma_single_loop(mu: float, n_clients: int, local_steps: int,
                              epochs: int, c: float = 1.0) -> float:
    """Global step size schedule c * log(N*K*R^3) / (mu * R)."""
    if mu <= 0:
        raise ValueError("automatic gamma needs mu > 0; pass gamma explicitly")
    arg = max(n_clients * local_steps * epochs ** 3, 2)
    return c * math.log(arg) / (mu * epochs)


def global_step(model: LossModel, w: np.ndarray, shards: Sequence[Shard],
                gamma: float, batch_m: int, rng: np.random.Generator,
                diameter: float = 2000.0) -> np.ndarray:
    """Projected SGD step on the uniform average of the client losses."""
    if batch_m < 1:
        raise ValueError(f"batch_m must be >= 1, got {batch_m}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    N = len(shards)
    u = rng.random((N, batch_m))
    counts = np.array([sh.n_train for sh in shards])
    idx = np.minimum((u * counts[:, None]).astype(np.int64), counts[:, None] - 1)
    grads = pmap(lambda i: stoch_grad(model, w, shards[i], idx[i]), range(N))
    g = np.sum(grads, axis=0) / N
    return project_domain(w - gamma * g, diameter)


def alpha_refresh(shards: Sequence[Shard], model: LossModel, w: np.ndarray,
                  cfg: AlphaSolverConfig, warm_start: np.ndarray) -> np.ndarray:
    """Re-estimate all mixing weights at w, warm-starting from the previous rows."""
    z = pairwise_dissimilarity(shards, model, w)
    counts = np.array([sh.n_train for sh in shards], dtype=np.float64)
    rows = pmap(lambda i: solve_alpha_gd(z[i], counts, cfg, start=warm_start[i]),
                range(len(shards)))
    return np.stack(rows)


@dataclass
class SingleLoopEpoch:
    """Epoch-level diagnostics: global progress and mixing-weight movement."""

    epoch: int
    global_loss: float
    w_delta: float
    alpha_drift: float


@dataclass
class SingleLoopResult:
    v_hat: np.ndarray
    alphas: np.ndarray
    w: np.ndarray
    eta: float
    gamma: float
    rounds: int
    messages: int
    history: list[EpochStats] = field(default_factory=list)
    diagnostics: list[SingleLoopEpoch] = field(default_factory=list)
    alpha_trace: list[np.ndarray] = field(default_factory=list)
    clamped_rounds: int = 0


def run_single_loop(shards: Sequence[Shard], model: LossModel, *,
                    epochs: int, local_steps: int, lam: float = 1.0,
                    t_alpha: int = 200, eta: float | None = None,
                    gamma: float | None = None, c_eta: float = 1.0,
                    c_gamma: float = 1.0, batch_m: int | None = None,
                    seed: int = 0, diameter: float = 2000.0,
                    batch_size: int | None = 1, sample_mode: str = "per-client",
                    constants: tuple[float, float] | None = None,
                    eval_every: int = 0, alpha_updates: bool = True,
                    keep_alpha_trace: bool = False) -> SingleLoopResult:
    """Joint personalized and global training with per-epoch weight refreshes.

    The personalized phase draws the same permutation and sample streams as
    run_shuffling under the same seed, so freezing the weights (alpha_updates
    False) reproduces that trajectory exactly.
    """
    N = len(shards)
    if N == 0:
        raise ValueError("need at least one shard")
    if epochs < 1 or local_steps < 1:
        raise ValueError("epochs and local_steps must be >= 1")
    if sample_mode not in ("per-client", "shared"):
        raise ValueError(f"unknown sample_mode {sample_mode!r}")
    d = shards[0].dim
    L, mu = constants if constants is not None else estimate_constants(model, shards)
    eta_base = eta if eta is not None else theorem_eta(mu, N, local_steps, epochs, c_eta)
    if gamma is None:
        gamma = min(theorem_gamma_single_loop(mu, N, local_steps, epochs, c_gamma), 1.0 / L)
    m_batch = batch_m if batch_m is not None else default_global_batch(shards)
    cfg = AlphaSolverConfig(lam=lam, t_alpha=t_alpha)

    alphas = np.full((N, N), 1.0 / N)
    w = np.zeros(d)
    V = np.zeros((N, d))
    ids = np.arange(N)
    clamp_radius = 10.0 * diameter
    clamped_rounds = 0
    messages = 0
    shared = sample_mode == "shared"
    history: list[EpochStats] = []
    diagnostics: list[SingleLoopEpoch] = []
    trace: list[np.ndarray] = []

    for r in range(epochs):
        # Personalized phase under the pre-refresh weights.
        eta_r = eta_base if eta is not None else min(
            eta_base, stability_cap(L, N, float(alphas.max())))
        perm = epoch_permutation(seed, r, N)
        for j in range(N):
            sids = perm[(ids + j) % N]
            scales = eta_r * alphas[ids, sids] * N
            V = multi_sgd_steps(model, V, sids, shards, scales, local_steps,
                                rng=stream(seed, "shuffle-samples", r, j),
                                batch_size=batch_size, shared_draws=shared)
            if not np.all(np.isfinite(V)):
                raise FloatingPointError("single loop diverged: non-finite iterate")
            norms = np.linalg.norm(V, axis=1)
            if np.any(norms > clamp_radius):
                over = norms > clamp_radius
                V[over] *= (clamp_radius / norms[over])[:, None]
                clamped_rounds += 1
            messages += 2 * N
        V = project_domain_rows(V, diameter)

        # Global step, then the mixing-weight refresh at the new iterate.
        w_new = global_step(model, w, shards, gamma, m_batch,
                            stream(seed, "global-batch", r), diameter)
        messages += 2 * N
        if alpha_updates:
            new_alphas = alpha_refresh(shards, model, w_new, cfg, alphas)
        else:
            new_alphas = alphas
        _check_state(new_alphas, V, w_new, diameter)
        drift = float(np.max(np.linalg.norm(new_alphas - alphas, axis=1)))
        w_delta = float(np.linalg.norm(w_new - w))
        w, alphas = w_new, new_alphas
        if keep_alpha_trace:
            trace.append(alphas.copy())

        final = r == epochs - 1
        record = eval_every > 0 and (final or (r + 1) % eval_every == 0)
        if record or final:
            f_global = float(np.mean(pmap(lambda sh: loss(model, w, sh), shards)))
            diagnostics.append(SingleLoopEpoch(r + 1, f_global, w_delta, drift))
        if record and not final:
            history.append(_epoch_stats(model, alphas, V, shards, r + 1,
                                        (r + 1) * (N + 1), messages, None))

    eta_last = eta_base if eta is not None else min(
        eta_base, stability_cap(L, N, float(alphas.max())))
    v_hat = project_domain_rows(V - grad_phi_all(model, alphas, V, shards) / L, diameter)
    history.append(_epoch_stats(model, alphas, v_hat, shards, epochs,
                                epochs * (N + 1), messages, None))
    return SingleLoopResult(v_hat, alphas, w, eta_last, gamma, epochs * (N + 1),
                            messages, history, diagnostics, trace, clamped_rounds)


def _check_state(alphas: np.ndarray, V: np.ndarray, w: np.ndarray, diameter: float):
    radius = diameter / 2.0 + 1e-9
    if np.any(np.abs(alphas.sum(axis=1) - 1.0) > 1e-9) or np.any(alphas < -1e-12):
        raise RuntimeError("single loop state invariant violated: weights left the simplex")
    if np.linalg.norm(w) > radius or np.any(np.linalg.norm(V, axis=1) > radius):
        raise RuntimeError("single loop state invariant violated: iterate left the domain")
