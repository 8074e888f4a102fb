"""Projections and finite-difference utilities used across the package.

All vectors are dense float64 numpy arrays. The feasible domain for model
iterates is an l2 ball centered at the origin, parameterized by its diameter.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "project_simplex",
    "project_ball",
    "project_domain",
    "project_domain_rows",
    "finite_diff_grad",
]


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex.

    Sort-and-threshold: after a descending sort, a coordinate stays active
    only while its value is strictly above the running threshold. Ties at
    the threshold are dropped.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("project_simplex expects a nonempty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("project_simplex: input has non-finite entries")
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, v.size + 1)
    active = u + (1.0 - css) / ks > 0.0
    rho = int(np.nonzero(active)[0][-1])
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def project_ball(v: np.ndarray, center: np.ndarray | None = None, *,
                 radius: float) -> np.ndarray:
    """Euclidean projection onto the ball of given radius. center=None means origin."""
    if not np.isfinite(radius) or radius <= 0.0:
        raise ValueError(f"project_ball: radius must be positive, got {radius}")
    v = np.asarray(v, dtype=np.float64)
    diff = v if center is None else v - center
    nrm = float(np.linalg.norm(diff))
    if nrm <= radius:
        return v
    scaled = diff * (radius / nrm)
    return scaled if center is None else center + scaled


def project_domain(v: np.ndarray, diameter: float) -> np.ndarray:
    """Project onto the model domain: origin-centered ball of the given diameter."""
    return project_ball(v, radius=diameter / 2.0)


def project_domain_rows(V: np.ndarray, diameter: float) -> np.ndarray:
    """Row-wise domain projection for a stack of model vectors."""
    if diameter <= 0.0:
        raise ValueError(f"project_domain_rows: diameter must be positive, got {diameter}")
    radius = diameter / 2.0
    nrm = np.linalg.norm(V, axis=1)
    scale = np.ones_like(nrm)
    over = nrm > radius
    scale[over] = radius / nrm[over]
    return V * scale[:, None]


def finite_diff_grad(f, w: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at w."""
    if h <= 0.0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        out[k] = (f(w + e) - f(w - e)) / (2.0 * h)
    return out
