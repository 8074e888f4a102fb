"""Client shards and regularized empirical losses.

A shard holds one client's samples plus the indices held out for evaluation;
the remaining rows are the training split that every empirical loss, gradient,
and sample count in this package refers to. Two loss families are supported:

  ridge      f(w) = (1/n) sum 0.5 (x'w - y)^2 + (reg/2) ||w||^2
  logistic   f(w) = (1/n) sum log(1 + exp(-y x'w)) + (reg/2) ||w||^2,  y in {-1, +1}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

LOSS_KINDS = ("ridge", "logistic")

# Default l2 regularization. Keeps the logistic loss strongly convex; set
# reg=0 explicitly to reproduce the unregularized objective (auto step sizes
# then refuse to run because the curvature constant vanishes).
DEFAULT_REG = 1e-2


@dataclass(eq=False)
class Shard:
    """One client's data: feature matrix, labels, and held-out row indices."""

    features: np.ndarray
    labels: np.ndarray
    eval_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.eval_idx = np.asarray(self.eval_idx, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("Shard features must be a 2-D matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ValueError(
                f"Shard labels must align with feature rows: {self.labels.shape} vs {n} rows"
            )
        if self.eval_idx.size:
            if self.eval_idx.min() < 0 or self.eval_idx.max() >= n:
                raise ValueError("Shard eval_idx out of range")
            if np.unique(self.eval_idx).size != self.eval_idx.size:
                raise ValueError("Shard eval_idx has duplicates")
        if self.eval_idx.size >= n:
            raise ValueError("Shard needs at least one training row")

    @cached_property
    def train_idx(self) -> np.ndarray:
        mask = np.ones(self.features.shape[0], dtype=bool)
        mask[self.eval_idx] = False
        return np.nonzero(mask)[0]

    @cached_property
    def train_features(self) -> np.ndarray:
        return self.features[self.train_idx]

    @cached_property
    def train_labels(self) -> np.ndarray:
        return self.labels[self.train_idx]

    @cached_property
    def eval_features(self) -> np.ndarray:
        return self.features[self.eval_idx]

    @cached_property
    def eval_labels(self) -> np.ndarray:
        return self.labels[self.eval_idx]

    @property
    def n_train(self) -> int:
        return int(self.train_idx.size)

    @property
    def n_eval(self) -> int:
        return int(self.eval_idx.size)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class LossModel:
    """Loss family plus its l2 regularization weight."""

    kind: str = "logistic"
    reg: float = DEFAULT_REG

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"LossModel kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not np.isfinite(self.reg) or self.reg < 0.0:
            raise ValueError(f"LossModel reg must be finite and >= 0, got {self.reg}")


def _sigmoid(t: np.ndarray) -> np.ndarray:
    # Numerically stable piecewise logistic function.
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_logistic_labels(y: np.ndarray):
    if not np.all(np.abs(y) == 1.0):
        raise ValueError("logistic labels must be +1 or -1")


def _loss_from(model: LossModel, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    m = X @ w
    if model.kind == "ridge":
        data = 0.5 * np.mean((m - y) ** 2)
    else:
        _check_logistic_labels(y)
        data = float(np.mean(np.logaddexp(0.0, -y * m)))
    return float(data + 0.5 * model.reg * (w @ w))


def _grad_from(model: LossModel, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    m = X @ w
    if model.kind == "ridge":
        coef = m - y
    else:
        _check_logistic_labels(y)
        coef = -y * _sigmoid(-y * m)
    return X.T @ coef / X.shape[0] + model.reg * w


def loss(model: LossModel, w: np.ndarray, shard: Shard) -> float:
    """Regularized empirical loss on the shard's training split."""
    return _loss_from(model, np.asarray(w, dtype=np.float64), shard.train_features, shard.train_labels)


def grad(model: LossModel, w: np.ndarray, shard: Shard) -> np.ndarray:
    """Exact gradient of the training loss."""
    return _grad_from(model, np.asarray(w, dtype=np.float64), shard.train_features, shard.train_labels)


def stoch_grad(model: LossModel, w: np.ndarray, shard: Shard, batch: np.ndarray) -> np.ndarray:
    """Mini-batch gradient for the given multiset of training-row indices.

    Passing every training index in order reproduces grad() bit for bit.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 1 or batch.size == 0:
        raise ValueError("stoch_grad batch must be a nonempty 1-D index array")
    if batch.min() < 0 or batch.max() >= shard.n_train:
        raise ValueError(f"stoch_grad batch indices must lie in [0, {shard.n_train})")
    X = shard.train_features[batch]
    y = shard.train_labels[batch]
    return _grad_from(model, np.asarray(w, dtype=np.float64), X, y)


def eval_loss(model: LossModel, w: np.ndarray, shard: Shard) -> float:
    if shard.n_eval == 0:
        raise ValueError("shard has no evaluation split")
    return _loss_from(model, np.asarray(w, dtype=np.float64), shard.eval_features, shard.eval_labels)


def eval_accuracy(model: LossModel, w: np.ndarray, shard: Shard) -> float:
    """Sign-agreement accuracy on the evaluation split (zero scores count as +1)."""
    if shard.n_eval == 0:
        raise ValueError("shard has no evaluation split")
    scores = shard.eval_features @ np.asarray(w, dtype=np.float64)
    pred = scores >= 0.0
    truth = shard.eval_labels > 0.0
    return float(np.mean(pred == truth))


def grad_variance_diag(model: LossModel, w: np.ndarray, shard: Shard) -> float:
    """Empirical variance of single-sample gradients around the full gradient."""
    w = np.asarray(w, dtype=np.float64)
    X = shard.train_features
    y = shard.train_labels
    m = X @ w
    if model.kind == "ridge":
        coef = m - y
    else:
        _check_logistic_labels(y)
        coef = -y * _sigmoid(-y * m)
    G = coef[:, None] * X + model.reg * w
    mean_g = _grad_from(model, w, X, y)
    return float(np.mean(np.sum((G - mean_g) ** 2, axis=1)))


def _power_lambda_max(C: np.ndarray, tol: float = 1e-6, max_iter: int = 10_000) -> float:
    # Power iteration with a fixed, generically non-orthogonal start vector.
    d = C.shape[0]
    v = np.ones(d) + 1e-3 * np.arange(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = C @ v
        new = float(v @ w)
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(new - lam) <= tol * max(abs(new), 1e-12):
            return new
        lam = new
    return lam


def _gram_extremes(X: np.ndarray) -> tuple[float, float]:
    n = X.shape[0]
    C = X.T @ X / n
    lam_max = max(_power_lambda_max(C), 0.0)
    if lam_max == 0.0:
        return 0.0, 0.0
    B = lam_max * np.eye(C.shape[0]) - C
    lam_min = lam_max - _power_lambda_max(B)
    return lam_max, max(lam_min, 0.0)


def estimate_constants(model: LossModel, shards: Shard | Sequence[Shard]) -> tuple[float, float]:
    """Smoothness and strong-convexity constants (L, mu) over the given shards.

    Ridge:    L = lam_max(X'X/n) + reg, mu = lam_min(X'X/n) + reg.
    Logistic: L = lam_max(X'X/n)/4 + reg, mu = reg.
    For several shards the uniform constants max(L_i), min(mu_i) are returned.
    """
    if isinstance(shards, Shard):
        shards = [shards]
    Ls, mus = [], []
    for sh in shards:
        lam_max, lam_min = _gram_extremes(sh.train_features)
        if model.kind == "ridge":
            Ls.append(lam_max + model.reg)
            mus.append(lam_min + model.reg)
        else:
            Ls.append(lam_max / 4.0 + model.reg)
            mus.append(model.reg)
    return float(max(Ls)), float(min(mus))
