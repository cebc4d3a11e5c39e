"""Spatial/temporal graph Laplacians built from a data matrix.

Rows of ``D`` (pixels, each a length-q time series) are the nodes of the
spatial graph; columns (frames) are the nodes of the temporal graph. Edge
weights are Gaussian in the squared Euclidean distance, scaled by a tunable
``tau`` and by the mean pairwise distance ``kappa`` of the node vectors.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

KAPPA_FLOOR = 1e-12


@dataclass(frozen=True)
class GraphConfig:
    tau_s: float = 1.0
    tau_t: float = 1.0

    def __post_init__(self):
        for name in ("tau_s", "tau_t"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class LaplacianPair:
    A_s: np.ndarray
    A_t: np.ndarray
    kappa_s: float
    kappa_t: float


def mean_pairwise_distance(X):
    """Mean Euclidean distance over unordered pairs of the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("mean_pairwise_distance needs at least two vectors")
    return max(float(np.mean(pdist(X))), KAPPA_FLOOR)


def adjacency(X, tau, kappa):
    """Gaussian affinity ``exp(-||x_i - x_j||^2 / (tau * kappa^2))``; diagonal is 1."""
    if tau <= 0 or kappa <= 0:
        raise ValueError("tau and kappa must be positive")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    W = squareform(np.exp(-pdist(X, "sqeuclidean") / (tau * kappa * kappa)))
    np.fill_diagonal(W, 1.0)
    return W


def laplacian(W):
    """``T - W`` with ``T`` the diagonal of row sums (self-loops cancel)."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {W.shape}")
    if not np.array_equal(W, W.T):
        raise ValueError("adjacency matrix is not symmetric")
    if np.any(W < 0):
        raise ValueError("adjacency matrix has negative weights")
    A = -W
    A[np.diag_indices_from(A)] += W.sum(axis=1)
    return A


def _graph(X, tau):
    kappa = mean_pairwise_distance(X)
    return laplacian(adjacency(X, tau, kappa)), kappa


def build_priors(D, cfg=None):
    cfg = cfg or GraphConfig()
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] < 2 or D.shape[1] < 2:
        raise ValueError(f"build_priors needs a matrix with at least 2 rows and 2 columns, got {D.shape}")
    A_s, kappa_s = _graph(D, cfg.tau_s)
    A_t, kappa_t = _graph(D.T, cfg.tau_t)
    return LaplacianPair(A_s, A_t, kappa_s, kappa_t)


def trace_quad(L, pair):
    """``(Tr(L^T A_s L), Tr(L A_t L^T))``."""
    L = np.asarray(L, dtype=float)
    p, q = pair.A_s.shape[0], pair.A_t.shape[0]
    if L.shape != (p, q):
        raise ValueError(f"L has shape {L.shape}, Laplacians expect ({p}, {q})")
    spatial = float(np.sum(L * (pair.A_s @ L)))
    temporal = float(np.sum(L * (L @ pair.A_t)))
    return spatial, temporal
