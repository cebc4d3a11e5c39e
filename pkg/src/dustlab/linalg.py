"""Dense primitives: thin SVD, SPD solves, per-frame 2-D convolution, reshapes.

Matrices are plain ``numpy`` arrays. A "video" is an array of shape
``(..., q, m, n)`` (frames last-two-axes), and its matrix view has shape
``(..., m*n, q)`` with each column holding one frame flattened row-major.
Leading axes are batch axes throughout.
"""

import numpy as np
import scipy.linalg
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NotPositiveDefiniteError, NumericalError

KERNEL_SIZE = 5
SIGMOID_CLAMP = 40.0


def svd_thin(X):
    """Thin SVD ``X = U @ diag(sigma) @ V.T`` with r0 = min(p, q) components.

    Singular values come back in descending order. Each left singular vector
    is signed so that its largest-magnitude entry is positive, which makes
    the factors deterministic. Works on stacks of matrices.
    """
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise NumericalError("svd_thin: input contains non-finite values")
    try:
        U, sigma, Vt = np.linalg.svd(X, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"svd_thin: factorization did not converge ({exc})") from exc
    V = np.swapaxes(Vt, -1, -2)
    idx = np.argmax(np.abs(U), axis=-2)[..., None, :]
    signs = np.sign(np.take_along_axis(U, idx, axis=-2))
    signs[signs == 0] = 1.0
    return U * signs, sigma, V * signs


class SPDFactor:
    """Cholesky factor of a symmetric positive definite matrix."""

    def __init__(self, A):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {A.shape}")
        scale = max(np.abs(A).max(), 1e-300)
        if np.abs(A - A.T).max() > 1e-10 * scale:
            raise ValueError("matrix is not symmetric")
        try:
            self._cf = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"non-positive pivot in Cholesky factorization ({exc})") from exc
        self.n = A.shape[0]

    def solve(self, B):
        return scipy.linalg.cho_solve(self._cf, B, check_finite=False)


def solve_spd(A, B):
    """Solve ``A X = B`` for symmetric positive definite ``A``."""
    return SPDFactor(A).solve(np.asarray(B, dtype=float))


class ShiftedSolver:
    """Solves ``(scale * A + mu I) X = B`` and keeps the factor for the last ``mu``.

    The iterative solver calls this with the same shift many times once the
    penalty parameter saturates, so refactoring only happens when ``mu`` moves.
    """

    def __init__(self, A, scale):
        self.A = np.asarray(A, dtype=float)
        self.scale = float(scale)
        self._mu = None
        self._factor = None
        self.factorizations = 0

    def factor(self, mu):
        if self._mu != mu:
            M = self.scale * self.A + mu * np.eye(self.A.shape[0])
            self._factor = SPDFactor(M)
            self._mu = mu
            self.factorizations += 1
        return self._factor

    def solve(self, mu, B):
        if self.scale == 0.0:
            return np.asarray(B, dtype=float) / mu
        return self.factor(mu).solve(B)


def _check_kernel(K):
    K = np.asarray(K, dtype=float)
    if K.ndim < 2 or K.shape[-1] != K.shape[-2] or K.shape[-1] % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got shape {K.shape}")
    return K


def frame_windows(X, size=KERNEL_SIZE):
    """Zero-padded ``size x size`` neighbourhoods of every pixel: ``(..., m, n, size, size)``."""
    X = np.asarray(X, dtype=float)
    h = size // 2
    pad = [(0, 0)] * (X.ndim - 2) + [(h, h), (h, h)]
    return sliding_window_view(np.pad(X, pad), (size, size), axis=(-2, -1))


def conv_same(K, X):
    """Per-frame "same" 2-D cross-correlation of video ``X`` with kernel ``K``.

    Zero padding, stride 1; frames and leading axes never mix. ``K`` may also
    be a stack ``(k, s, s)``, in which case a new axis of size k is placed first.
    """
    K = _check_kernel(K)
    win = frame_windows(X, K.shape[-1])
    if K.ndim == 2:
        return np.tensordot(win, K, axes=([-2, -1], [0, 1]))
    out = np.tensordot(win, K, axes=([-2, -1], [-2, -1]))
    return np.moveaxis(out, -1, 0)


def conv_adjoint(K, Y):
    """Adjoint of :func:`conv_same`: correlation with the flipped kernel."""
    K = _check_kernel(K)
    if K.ndim != 2:
        raise ValueError("conv_adjoint takes a single kernel")
    return conv_same(K[::-1, ::-1], Y)


def conv_kernel_grad(X, G, size=KERNEL_SIZE):
    """Gradient of ``<conv_same(K, X), G>`` with respect to ``K`` (summed over all leading axes)."""
    win = frame_windows(X, size)
    G = np.asarray(G, dtype=float)
    axes = list(range(G.ndim))
    return np.tensordot(win, G, axes=(axes, axes))


def sigmoid_gain(rho, w):
    """Gained logistic ``1 / (1 + exp(-rho * w))``, elementwise; argument clamped to +-40."""
    z = np.clip(np.multiply(rho, w), -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


def sigmoid_gain_drho(rho, w):
    """Derivative of :func:`sigmoid_gain` in ``rho``; zero where the clamp is active."""
    w = np.asarray(w, dtype=float)
    z = rho * w
    phi = sigmoid_gain(rho, w)
    return np.where(np.abs(z) < SIGMOID_CLAMP, w * phi * (1.0 - phi), 0.0)


def reshape_matrix(X):
    """Video ``(..., q, m, n)`` -> matrix ``(..., m*n, q)``; column i is frame i row-major."""
    X = np.asarray(X)
    if X.ndim < 3:
        raise ValueError(f"video needs at least 3 axes (q, m, n), got shape {X.shape}")
    *lead, q, m, n = X.shape
    return np.swapaxes(X.reshape(*lead, q, m * n), -1, -2).copy()


def reshape_video(D, m, n):
    """Matrix ``(..., p, q)`` -> video ``(..., q, m, n)``; inverse of :func:`reshape_matrix`."""
    D = np.asarray(D)
    if D.ndim < 2:
        raise ValueError(f"matrix needs at least 2 axes, got shape {D.shape}")
    *lead, p, q = D.shape
    if p != m * n:
        raise ValueError(f"row count {p} does not match frame size {m}x{n}")
    return np.swapaxes(D, -1, -2).reshape(*lead, q, m, n).copy()
