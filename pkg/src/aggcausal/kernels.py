"""Gaussian kernels, bandwidth selection and random Fourier feature maps.

The Gaussian kernel here is parameterised as ``exp(-|x - y|^2 / lam^2)``, so
its spectral distribution is a zero-mean Gaussian with per-coordinate
variance ``2 / lam^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial.distance import pdist

__all__ = [
    "DegenerateVariableError",
    "RFFMap",
    "median_heuristic",
    "gaussian_kernel",
    "sample_rff",
    "rff_features",
    "aggregate_features",
    "aggregate_matrix",
    "group_kernel",
]

MEDIAN_MAX_POINTS = 2000


class DegenerateVariableError(ValueError):
    """Raised when a variable has no spread (all samples identical)."""


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[:, None]
    return x


def median_heuristic(samples, max_points: int = MEDIAN_MAX_POINTS, seed: int = 0) -> float:
    """Median pairwise Euclidean distance between samples.

    Falls back to the smallest non-zero distance when more than half of the
    pairs coincide. At most ``max_points`` samples are used; the subsample is
    drawn deterministically from ``seed``.
    """
    x = _as_2d(samples)
    x = x[np.all(np.isfinite(x), axis=1)]
    if len(x) > max_points:
        keep = np.random.default_rng(seed).choice(len(x), size=max_points, replace=False)
        x = x[np.sort(keep)]
    if len(x) < 2:
        raise DegenerateVariableError("median heuristic needs at least two samples")
    d = pdist(x)
    positive = d[d > 0]
    if positive.size == 0:
        raise DegenerateVariableError("all samples are identical")
    med = float(np.median(d))
    return med if med > 0 else float(positive.min())


def gaussian_kernel(x, y, lam: float) -> float:
    if lam <= 0:
        raise ValueError("bandwidth must be positive")
    d = np.atleast_1d(np.asarray(x, dtype=float)) - np.atleast_1d(np.asarray(y, dtype=float))
    return float(np.exp(-np.dot(d, d) / lam**2))


@dataclass(frozen=True)
class RFFMap:
    """A fixed draw of ``D`` frequency vectors for a Gaussian kernel."""

    frequencies: np.ndarray  # (D, input_dim)
    bandwidth: float

    @property
    def D(self) -> int:
        return self.frequencies.shape[0]

    @property
    def input_dim(self) -> int:
        return self.frequencies.shape[1]

    @property
    def n_features(self) -> int:
        return 2 * self.D

    def __call__(self, x) -> np.ndarray:
        return rff_features(x, self)


def sample_rff(lam: float, D: int, input_dim: int = 1, seed=None) -> RFFMap:
    if lam <= 0:
        raise ValueError("bandwidth must be positive")
    if D < 1:
        raise ValueError("D must be at least 1")
    rng = np.random.default_rng(seed)
    freqs = rng.normal(scale=np.sqrt(2.0) / lam, size=(D, input_dim))
    return RFFMap(freqs, float(lam))


def rff_features(x, rff: RFFMap) -> np.ndarray:
    """Random Fourier features ``(cos v1.x, sin v1.x, ..., cos vD.x, sin vD.x) / sqrt(D)``.

    A single point gives a vector of length ``2D``; an ``(n, input_dim)`` array
    (or a 1-D array of ``n`` scalars when ``input_dim == 1``) gives ``(n, 2D)``.
    """
    x = np.asarray(x, dtype=float)
    single = False
    if x.ndim == 0:
        x, single = x.reshape(1, 1), True
    elif x.ndim == 1:
        if rff.input_dim == 1:
            x = x[:, None]
        else:
            x, single = x[None, :], True
    if x.shape[1] != rff.input_dim:
        raise ValueError(f"expected input dimension {rff.input_dim}, got {x.shape[1]}")
    proj = x @ rff.frequencies.T
    out = np.empty((x.shape[0], 2 * rff.D))
    out[:, 0::2] = np.cos(proj)
    out[:, 1::2] = np.sin(proj)
    out /= np.sqrt(rff.D)
    return out[0] if single else out


def aggregate_features(points, weights, rff: RFFMap) -> np.ndarray:
    """Weighted sum of the features of a group of points."""
    w = np.asarray(weights, dtype=float).ravel()
    z = rff_features(points, rff)
    z = np.atleast_2d(z)
    if z.shape[0] == 0:
        raise ValueError("empty group")
    if z.shape[0] != w.size:
        raise ValueError("one weight per group member required")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("group weights must be finite and non-negative")
    return w @ z


def aggregate_matrix(weights, points, rff: RFFMap) -> np.ndarray:
    """Group embeddings for many groups at once.

    ``weights`` is an ``(n_groups, n_points)`` (sparse or dense) matrix whose
    row ``g`` holds the weight of each point in group ``g``.
    """
    z = rff_features(points, rff)
    z = np.atleast_2d(z)
    if sparse.issparse(weights):
        return np.asarray(weights @ z)
    return np.asarray(weights, dtype=float) @ z


def group_kernel(points_i, weights_i, points_j, weights_j, lam: float) -> float:
    """Exact linear kernel between two weighted group embeddings (the double sum)."""
    xi, xj = _as_2d(points_i), _as_2d(points_j)
    d2 = ((xi[:, None, :] - xj[None, :, :]) ** 2).sum(-1)
    k = np.exp(-d2 / lam**2)
    return float(np.asarray(weights_i, float) @ k @ np.asarray(weights_j, float))
