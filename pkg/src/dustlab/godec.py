"""GoDec low-rank + sparse approximation, used only to build foreground masks.

The low-rank step is a bilateral random projection refined by a few power
iterations (no full SVD); the sparse step keeps the ``card_k`` largest
residual entries.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import sigmoid_gain


@dataclass(frozen=True)
class GoDecConfig:
    rank_g: int = 5
    card_k: int = None  # None -> 10% of the entries
    power_iters: int = 2
    max_iter: int = 20
    tol: float = 1e-7

    def __post_init__(self):
        if self.rank_g < 1:
            raise ValueError("rank_g must be at least 1")
        if self.card_k is not None and self.card_k < 0:
            raise ValueError("card_k must be non-negative")
        if self.power_iters < 0 or self.max_iter < 1:
            raise ValueError("power_iters must be >= 0 and max_iter >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def cardinality(self, p, q):
        k = int(round(0.1 * p * q)) if self.card_k is None else self.card_k
        if k > p * q:
            raise ValueError(f"card_k={k} exceeds the {p * q} entries of the matrix")
        return k


@dataclass(frozen=True)
class MaskPrior:
    fg_mask: np.ndarray
    W_hat: np.ndarray
    eps_mask: float = 0.0


def _range_basis(X, start, power_iters):
    Y = X @ start
    for _ in range(power_iters):
        Y = X @ (X.T @ Y)
    Q, _ = np.linalg.qr(Y)
    return Q


def _keep_largest(T, k):
    S = np.zeros_like(T)
    if k == 0:
        return S
    flat = np.abs(T).ravel()
    idx = np.argpartition(flat, flat.size - k)[flat.size - k:]
    S.ravel()[idx] = T.ravel()[idx]
    return S


def godec(D, cfg=None, seed=0):
    """Alternate a rank-``rank_g`` fit of ``D - S`` and a ``card_k``-sparse fit of ``D - L``.

    Returns ``(L, S, residual_trace)`` where the trace holds
    ``||D - L - S||_F^2 / ||D||_F^2`` after every iteration.
    """
    cfg = cfg or GoDecConfig()
    D = np.asarray(D, dtype=float)
    p, q = D.shape
    if cfg.rank_g >= min(p, q):
        raise ValueError(f"rank_g={cfg.rank_g} must be below min(p, q)={min(p, q)}")
    k = cfg.cardinality(p, q)
    rng = np.random.default_rng(seed)
    norm2 = float(np.sum(D * D))
    L = np.zeros_like(D)
    if norm2 == 0.0:
        return L, np.zeros_like(D), [0.0]
    # start with the sparse step from L = 0 so large outliers never enter the first subspace
    S = _keep_largest(D, k)
    trace = []

    Q = None
    prev = np.inf
    for _ in range(cfg.max_iter):
        X = D - S
        start = rng.standard_normal((q, cfg.rank_g)) if Q is None else X.T @ Q
        Q_new = _range_basis(X, start, cfg.power_iters)
        L_new = Q_new @ (Q_new.T @ X)
        if Q is not None:
            # fall back to the previous subspace if the refreshed one fits worse
            L_old = Q @ (Q.T @ X)
            if np.sum((X - L_old) ** 2) < np.sum((X - L_new) ** 2):
                Q_new, L_new = Q, L_old
        Q, L = Q_new, L_new
        S = _keep_largest(D - L, k)
        R = D - L - S
        res = float(np.sum(R * R)) / norm2
        trace.append(res)
        if abs(prev - res) < cfg.tol:
            break
        prev = res
    return L, S, trace


def foreground_mask(S_g, eps_mask=0.0):
    if eps_mask < 0:
        raise ValueError("eps_mask must be non-negative")
    fg = (np.abs(S_g) > eps_mask).astype(float)
    return MaskPrior(fg, 1.0 - fg, float(eps_mask))


def godec_mask(D, cfg=None, seed=0, eps_mask=0.0):
    _, S_g, _ = godec(D, cfg, seed)
    return foreground_mask(S_g, eps_mask)


def prior_weights(prior, rho):
    """Sigmoid-reweighted background mask; ``rho = 0`` gives a flat 0.5."""
    return sigmoid_gain(rho, prior.W_hat)
