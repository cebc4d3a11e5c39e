"""Singular value thresholding and (reweighted) soft thresholding, with VJPs."""

from dataclasses import dataclass

import numpy as np

from .linalg import svd_thin

GAP_EPS = 1e-6


@dataclass(frozen=True)
class SvtResult:
    value: np.ndarray
    factors: tuple  # (U, sigma, V), or None when alpha == 0
    threshold: float
    x: np.ndarray = None


def svt(X, alpha):
    """Prox of ``alpha * ||.||_*``: shrink every singular value by ``alpha``.

    Accepts a stack of matrices; ``alpha`` is a single scalar.
    """
    if alpha < 0:
        raise ValueError(f"svt threshold must be non-negative, got {alpha}")
    X = np.asarray(X, dtype=float)
    if alpha == 0:
        return SvtResult(X.copy(), None, 0.0, X)
    U, sigma, V = svd_thin(X)
    f = np.maximum(sigma - alpha, 0.0)
    value = (U * f[..., None, :]) @ np.swapaxes(V, -1, -2)
    return SvtResult(value, (U, sigma, V), float(alpha), X)


def _guard(x, eps):
    return np.where(np.abs(x) < eps, np.where(x < 0, -eps, eps), x)


def svt_vjp(result, Gbar, gap_eps=GAP_EPS):
    """Pull ``Gbar`` back through ``svt``.

    Returns ``(grad_X, grad_alpha)``; ``grad_alpha`` has one entry per stacked
    matrix (a 0-d array for a single matrix). Uses the first-order SVD
    perturbation formula; ``|s_i^2 - s_j^2|`` below ``gap_eps`` is clamped to
    ``+-gap_eps``.
    """
    Gbar = np.asarray(Gbar, dtype=float)
    alpha = result.threshold
    if result.factors is None:
        U, sigma, V = svd_thin(result.x)
    else:
        U, sigma, V = result.factors
    Vt = np.swapaxes(V, -1, -2)
    Ut = np.swapaxes(U, -1, -2)
    P = Ut @ Gbar @ V
    active = (sigma > alpha).astype(float)
    diagP = np.diagonal(P, axis1=-2, axis2=-1)
    grad_alpha = -np.sum(active * diagP, axis=-1)
    if result.factors is None:
        return Gbar.copy(), grad_alpha

    f = np.maximum(sigma - alpha, 0.0)
    si, sj = sigma[..., :, None], sigma[..., None, :]
    fi, fj = f[..., :, None], f[..., None, :]
    # (f_i - f_j) / (s_i - s_j) and (f_i + f_j) / (s_i + s_j)
    a = (fi - fj) * (si + sj) / _guard(si * si - sj * sj, gap_eps)
    b = (fi + fj) / np.maximum(si + sj, gap_eps)
    Pt = np.swapaxes(P, -1, -2)
    J = a * 0.5 * (P + Pt) + b * 0.5 * (P - Pt)
    r = sigma.shape[-1]
    diag_idx = np.arange(r)
    J[..., diag_idx, diag_idx] = active * diagP

    ratio = np.where(sigma > 1e-300, f / np.where(sigma > 1e-300, sigma, 1.0), 0.0)
    grad = U @ J @ Vt
    left = (Gbar @ V - U @ P) * ratio[..., None, :]
    grad += left @ Vt
    if U.shape[-2] < V.shape[-2]:
        right = (Ut @ Gbar - P @ Vt) * ratio[..., :, None]
        grad += U @ right
    return grad, grad_alpha


def soft_threshold(X, A):
    """Elementwise ``sign(x) * max(|x| - a, 0)``; ``A`` broadcasts against ``X``."""
    A = np.asarray(A, dtype=float)
    if np.any(A < 0):
        raise ValueError("soft_threshold: thresholds must be non-negative")
    X = np.asarray(X, dtype=float)
    return np.sign(X) * np.maximum(np.abs(X) - A, 0.0)


def soft_threshold_vjp(X, A, Gbar):
    """Returns ``(grad_X, grad_A)`` at full ``X`` shape; the kink gets subgradient 0."""
    X = np.asarray(X, dtype=float)
    Gbar = np.asarray(Gbar, dtype=float)
    live = np.abs(X) > A
    grad_X = np.where(live, Gbar, 0.0)
    grad_A = np.where(live, -np.sign(X) * Gbar, 0.0)
    return grad_X, grad_A
