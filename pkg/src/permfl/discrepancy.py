"""Collaborative pretraining and mixing-weight estimation.

local_sgd_global trains one global model by parallel local SGD with periodic
(weighted) averaging. At the returned point, each pair of clients gets the
squared gradient distance z[i, j] = ||grad f_i - grad f_j||^2, and client i's
mixing weights solve

    min_{alpha in simplex}  sum_j alpha_j z[i, j] + lam * sum_j alpha_j^2 / n_j,

a diagonal QP with a closed-form KKT solution that the projected-gradient
solver is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import project_domain, project_simplex
from .objectives import LossModel, Shard, estimate_constants, eval_accuracy, eval_loss, grad, loss
from .parallel import pmap
from .prng import stream
from .sgd import multi_sgd_steps

DEFAULT_LAMBDA = 1.0
DEFAULT_T_ALPHA = 200


@dataclass(frozen=True)
class AlphaSolverConfig:
    """Mixing-weight solver settings: ridge weight, iteration count, step size."""

    lam: float = DEFAULT_LAMBDA
    t_alpha: int = DEFAULT_T_ALPHA
    step: float | None = None  # None: 1/L_g with L_g = 2*lam/min(counts)

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam <= 0.0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.t_alpha < 1:
            raise ValueError(f"t_alpha must be >= 1, got {self.t_alpha}")
        if self.step is not None and self.step <= 0.0:
            raise ValueError(f"step must be positive, got {self.step}")


def kappa_g(counts: np.ndarray) -> float:
    """Condition number of the mixing-weight QP under 1/L_g projected GD.

    The per-coordinate curvatures are 2*lam/n_j, so the ratio max/min count
    governs the geometric convergence rate (the ridge weight cancels).
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or counts.min() <= 0:
        raise ValueError("counts must be positive")
    return float(counts.max() / counts.min())


def mixing_objective(alpha: np.ndarray, z_row: np.ndarray, counts: np.ndarray,
                     lam: float) -> float:
    """Value of the per-client mixing-weight objective."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return float(z_row @ alpha + lam * np.sum(alpha ** 2 / counts))


def solve_alpha_kkt(z_row: np.ndarray, counts: np.ndarray, lam: float) -> np.ndarray:
    """Exact minimizer via the KKT conditions.

    alpha_j = max(0, (nu - z_j) * n_j / (2*lam)) with nu the unique multiplier
    making the weights sum to one; found by scanning prefixes of the sorted z.
    """
    z_row = np.asarray(z_row, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if z_row.ndim != 1 or z_row.size == 0 or z_row.shape != counts.shape:
        raise ValueError("z_row and counts must be matching nonempty vectors")
    if not np.all(np.isfinite(z_row)) or np.any(z_row < 0):
        raise ValueError("z_row entries must be finite and >= 0")
    if np.any(counts <= 0):
        raise ValueError("counts must be positive")
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam}")

    order = np.argsort(z_row, kind="stable")
    z = z_row[order]
    n = counts[order]
    cum_n = np.cumsum(n)
    cum_nz = np.cumsum(n * z)
    nus = (2.0 * lam + cum_nz) / cum_n
    N = z.size
    above = nus > z
    closes = np.empty(N, dtype=bool)
    closes[:-1] = nus[:-1] <= z[1:]
    closes[-1] = True
    k = int(np.nonzero(above & closes)[0][0])
    alpha_sorted = np.maximum(0.0, (nus[k] - z) * n / (2.0 * lam))
    alpha = np.empty_like(alpha_sorted)
    alpha[order] = alpha_sorted
    return alpha


def solve_alpha_gd(z_row: np.ndarray, counts: np.ndarray,
                   cfg: AlphaSolverConfig = AlphaSolverConfig(),
                   start: np.ndarray | None = None,
                   trace: list | None = None) -> np.ndarray:
    """Projected gradient descent on the mixing-weight objective.

    Starts from uniform weights unless a warm start is given. When a list is
    passed as trace, the objective value after every iterate is appended.
    """
    z_row = np.asarray(z_row, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if z_row.ndim != 1 or z_row.size == 0 or z_row.shape != counts.shape:
        raise ValueError("z_row and counts must be matching nonempty vectors")
    if not np.all(np.isfinite(z_row)) or np.any(z_row < 0):
        raise ValueError("z_row entries must be finite and >= 0")
    if np.any(counts <= 0):
        raise ValueError("counts must be positive")
    N = z_row.size
    step = cfg.step if cfg.step is not None else counts.min() / (2.0 * cfg.lam)
    alpha = np.full(N, 1.0 / N) if start is None else project_simplex(start)
    if trace is not None:
        trace.append(mixing_objective(alpha, z_row, counts, cfg.lam))
    curv = 2.0 * cfg.lam / counts
    for _ in range(cfg.t_alpha):
        g = z_row + curv * alpha
        new = project_simplex(alpha - step * g)
        if trace is not None:
            trace.append(mixing_objective(new, z_row, counts, cfg.lam))
        elif np.array_equal(new, alpha):
            # Exact fixed point of the update map: every further iterate is
            # bitwise identical, so stopping returns the same vector as
            # running out the full budget.
            return new
        alpha = new
    return alpha


@dataclass
class RoundEval:
    """Per-client metrics of the current global model at one round."""

    round: int
    messages: int
    train_loss: np.ndarray
    eval_loss: np.ndarray
    eval_accuracy: np.ndarray


@dataclass
class LocalSGDResult:
    w: np.ndarray
    rounds: int
    messages: int
    gamma: float
    history: list[RoundEval]


def evaluate_clients(model: LossModel, w: np.ndarray, shards: Sequence[Shard]):
    """(train_loss, eval_loss, eval_accuracy) arrays of one model across clients."""
    rows = pmap(lambda sh: (loss(model, w, sh), eval_loss(model, w, sh),
                            eval_accuracy(model, w, sh)), shards)
    out = np.array(rows, dtype=np.float64)
    return out[:, 0], out[:, 1], out[:, 2]


def theorem_gamma(mu: float, rounds: int, local_steps: int, c: float = 1.0) -> float:
    """Global step size schedule c * log(R*K) / (mu * R * K)."""
    if mu <= 0:
        raise ValueError("automatic gamma needs mu > 0; pass gamma explicitly")
    rk = max(rounds * local_steps, 2)
    return c * math.log(rk) / (mu * rk)


def local_sgd_global(shards: Sequence[Shard], model: LossModel, *,
                     rounds: int, local_steps: int, gamma: float | None = None,
                     c_gamma: float = 1.0, weights: np.ndarray | None = None,
                     seed: int = 0, diameter: float = 2000.0,
                     batch_size: int | None = 1, sample_mode: str = "per-client",
                     constants: tuple[float, float] | None = None,
                     eval_every: int = 0, w0: np.ndarray | None = None) -> LocalSGDResult:
    """Local SGD with periodic weighted averaging.

    Every round each client runs local_steps updates from the shared iterate
    on its own shard; the server then projects the weighted average back onto
    the domain ball. Sampling is with replacement, one batch per step, from a
    stream keyed by (seed, round), one row per client.
    """
    N = len(shards)
    if N == 0:
        raise ValueError("need at least one shard")
    if rounds < 1 or local_steps < 1:
        raise ValueError("rounds and local_steps must be >= 1")
    if sample_mode not in ("per-client", "shared"):
        raise ValueError(f"unknown sample_mode {sample_mode!r}")
    d = shards[0].dim
    if weights is None:
        p = np.full(N, 1.0 / N)
    else:
        p = np.asarray(weights, dtype=np.float64)
        if p.shape != (N,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("weights must be a nonnegative length-N vector summing to 1")
    if gamma is None:
        L, mu = constants if constants is not None else estimate_constants(model, shards)
        gamma = min(theorem_gamma(mu, rounds, local_steps, c_gamma), 1.0 / L)
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")

    w = np.zeros(d) if w0 is None else project_domain(np.asarray(w0, dtype=np.float64), diameter)
    ids = np.arange(N)
    steps = np.full(N, gamma)
    history: list[RoundEval] = []
    messages = 0
    for r in range(rounds):
        V = np.tile(w, (N, 1))
        V = multi_sgd_steps(model, V, ids, shards, steps, local_steps,
                            rng=stream(seed, "global-sgd", r), batch_size=batch_size,
                            shared_draws=(sample_mode == "shared"))
        if not np.all(np.isfinite(V)):
            raise FloatingPointError("local SGD diverged: non-finite iterate")
        w = project_domain(p @ V, diameter)
        messages += 2 * N
        final = r == rounds - 1
        if final or (eval_every > 0 and (r + 1) % eval_every == 0):
            tl, el, ea = evaluate_clients(model, w, shards)
            history.append(RoundEval(r + 1, messages, tl, el, ea))
    return LocalSGDResult(w, rounds, messages, gamma, history)


def pairwise_dissimilarity(shards: Sequence[Shard], model: LossModel,
                           w: np.ndarray) -> np.ndarray:
    """Matrix of squared gradient distances between clients at w."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (shards[0].dim,):
        raise ValueError(f"w has dimension {w.shape}, shards have {shards[0].dim}")
    G = np.stack(pmap(lambda sh: grad(model, w, sh), shards))
    N = len(shards)
    z = np.zeros((N, N))
    for i in range(N):
        for j in range(i + 1, N):
            diff = G[i] - G[j]
            z[i, j] = z[j, i] = float(diff @ diff)
    return z


def mean_dissimilarity(z: np.ndarray) -> np.ndarray:
    """Per-client mean of its dissimilarity row (a heterogeneity diagnostic)."""
    return np.asarray(z, dtype=np.float64).mean(axis=1)


def estimate_all_alphas(shards: Sequence[Shard], model: LossModel, w: np.ndarray,
                        cfg: AlphaSolverConfig = AlphaSolverConfig(),
                        z: np.ndarray | None = None) -> np.ndarray:
    """Solve the mixing-weight problem for every client; row i belongs to client i."""
    if z is None:
        z = pairwise_dissimilarity(shards, model, w)
    counts = np.array([sh.n_train for sh in shards], dtype=np.float64)
    rows = pmap(lambda i: solve_alpha_gd(z[i], counts, cfg), range(len(shards)))
    return np.stack(rows)
