"""Deep-unfolded spatiotemporal RPCA network (and its CORONA-style ablation).

Each layer maps ``(L, S, U1, U2)`` to the next iterate with learned 5x5
kernels standing in for the measurement operators::

    U1' = (2 g1 A_s + mu I)^-1 (mu L + Y2)
    U2' = (mu L + Y3) (2 g2 A_t + mu I)^-1
    L'  = svt_{1/mu}(C1*L + C2*S + C3*D + C4*U1 + C5*U2 + (Y1 + Y2 + Y3)/mu)
    S'  = soft_{(lam/mu) sigmoid(rho W_hat)}(C6*L + C7*S + C8*D + Y1/mu)

All right-hand sides use the layer-k inputs. Arrays are batched: matrices
are ``(B, p, q)`` and the learned ``Y`` matrices ``(p, q)`` are shared by
every sample. Convolutions run per frame on the ``(B, q, m, n)`` view.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import FormatError, NotPositiveDefiniteError
from .linalg import (
    KERNEL_SIZE,
    conv_same,
    frame_windows,
    reshape_matrix,
    reshape_video,
    sigmoid_gain,
    sigmoid_gain_drho,
)
from .prox import soft_threshold, svt, svt_vjp, soft_threshold_vjp

DUST = "dust"
CORONA = "corona"
VARIANTS = (DUST, CORONA)

PARAM_FIELDS = ("kernels", "log_mu", "log_lambda", "rho", "Y1", "Y2", "Y3")
FROZEN_KERNELS = {CORONA: (3, 4)}  # C4, C5
FROZEN_FIELDS = {CORONA: ("Y2", "Y3", "rho")}

CHECKPOINT_MAGIC = b"DUST1"


@dataclass(frozen=True)
class NetworkConfig:
    layers: int = 10
    gamma1: float = 0.1
    gamma2: float = 0.1
    variant: str = DUST
    frame_dims: tuple = (16, 16)
    frames: int = 10

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("network needs at least one layer")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma1 and gamma2 must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        object.__setattr__(self, "frame_dims", tuple(int(v) for v in self.frame_dims))

    @property
    def p(self):
        return self.frame_dims[0] * self.frame_dims[1]

    @property
    def effective_gammas(self):
        if self.variant == CORONA:
            return 0.0, 0.0
        return self.gamma1, self.gamma2


@dataclass
class LayerParams:
    """Learnables of one layer; ``kernels[i]`` is C_{i+1}.

    The same container doubles as the gradient of a layer.
    """

    kernels: np.ndarray
    log_mu: float
    log_lambda: float
    rho: float
    Y1: np.ndarray
    Y2: np.ndarray
    Y3: np.ndarray

    @property
    def mu(self):
        return float(np.exp(self.log_mu))

    @property
    def lam(self):
        return float(np.exp(self.log_lambda))

    @classmethod
    def zeros_like(cls, other):
        return cls(
            np.zeros_like(other.kernels), 0.0, 0.0, 0.0,
            np.zeros_like(other.Y1), np.zeros_like(other.Y2), np.zeros_like(other.Y3),
        )

    def copy(self):
        return LayerParams(
            self.kernels.copy(), float(self.log_mu), float(self.log_lambda), float(self.rho),
            self.Y1.copy(), self.Y2.copy(), self.Y3.copy(),
        )


def delta_kernel(size=KERNEL_SIZE):
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


# signs of the delta kernels that reproduce one ISTA step with H_i = I, c = 1
_INIT_PATTERN = (0.0, -1.0, 1.0, 1.0, 1.0, -1.0, 0.0, 1.0)


def init_params(cfg, seed=0, noise_std=0.01):
    """Algorithm-mirroring initialisation, perturbed by Gaussian kernel noise."""
    rng = np.random.default_rng(seed)
    p, q = cfg.p, cfg.frames
    delta = delta_kernel()
    layers = []
    for _ in range(cfg.layers):
        kernels = np.stack([s * delta for s in _INIT_PATTERN])
        kernels = kernels + noise_std * rng.standard_normal(kernels.shape)
        layers.append(
            LayerParams(kernels, 0.0, float(np.log(0.1)), 1.0,
                        np.zeros((p, q)), np.zeros((p, q)), np.zeros((p, q)))
        )
    return apply_variant(layers, cfg)


def apply_variant(params, cfg):
    """CORONA ablation: zero C4, C5, Y2, Y3 (they stay frozen during training)."""
    if cfg.variant == DUST:
        return params
    out = []
    for lp in params:
        lp = lp.copy()
        lp.kernels[list(FROZEN_KERNELS[CORONA])] = 0.0
        lp.Y2[:] = 0.0
        lp.Y3[:] = 0.0
        out.append(lp)
    return out


def mask_frozen(grads, cfg):
    """Zero the gradient of every parameter the variant keeps frozen (in place)."""
    if cfg.variant == DUST:
        return grads
    for g in grads:
        g.kernels[list(FROZEN_KERNELS[cfg.variant])] = 0.0
        for name in FROZEN_FIELDS[cfg.variant]:
            v = getattr(g, name)
            if isinstance(v, np.ndarray):
                v[:] = 0.0
            else:
                setattr(g, name, 0.0)
    return grads


class GraphSolvers:
    """Per-sample solves with ``2 g A + mu I`` for a batch of Laplacian pairs.

    Factorisations are cached per ``mu`` so the backward pass reuses the
    ones the forward pass made.
    """

    def __init__(self, pairs, gamma1, gamma2):
        self.pairs = list(pairs)
        self.gamma1 = float(gamma1)
        self.gamma2 = float(gamma2)
        self._cache = {}

    def _factors(self, which, mu):
        key = (which, mu)
        if key not in self._cache:
            gamma = self.gamma1 if which == "s" else self.gamma2
            facs = []
            for pair in self.pairs:
                A = pair.A_s if which == "s" else pair.A_t
                M = 2.0 * gamma * A
                M[np.diag_indices_from(M)] += mu
                try:
                    facs.append(scipy.linalg.cho_factor(M, lower=True, check_finite=False))
                except np.linalg.LinAlgError as exc:
                    raise NotPositiveDefiniteError(str(exc)) from exc
            self._cache[key] = facs
        return self._cache[key]

    def spatial(self, mu, B):
        """``(2 g1 A_s + mu I)^-1 B`` per sample; ``B`` is ``(batch, p, q)``."""
        if self.gamma1 == 0.0:
            return B / mu
        facs = self._factors("s", mu)
        return np.stack([scipy.linalg.cho_solve(f, b, check_finite=False) for f, b in zip(facs, B)])

    def temporal(self, mu, B):
        """``B (2 g2 A_t + mu I)^-1`` per sample."""
        if self.gamma2 == 0.0:
            return B / mu
        facs = self._factors("t", mu)
        return np.stack([scipy.linalg.cho_solve(f, b.T, check_finite=False).T for f, b in zip(facs, B)])

    def release(self):
        self._cache.clear()


@dataclass
class LayerCache:
    L: np.ndarray
    S: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    U1n: np.ndarray
    U2n: np.ndarray
    Z_S: np.ndarray
    phi: np.ndarray
    thresh: np.ndarray
    svt_res: object
    extras: dict = field(default_factory=dict)


def _conv_inputs(kernels, idx, X_video):
    """Apply kernels ``idx`` to one video input; returns a stack in matrix layout."""
    out = conv_same(kernels[list(idx)], X_video)
    return reshape_matrix(out)


def layer_forward(L, S, U1, U2, D, W_hat, solvers, params, cfg, keep=False):
    """One unfolded layer on a batch. Returns ``(L', S', U1', U2')`` (and a cache if ``keep``)."""
    m, n = cfg.frame_dims
    mu, lam = params.mu, params.lam
    if L.shape != D.shape or S.shape != D.shape:
        raise ValueError(f"state shapes {L.shape}/{S.shape} do not match D {D.shape}")
    if D.shape[-2:] != params.Y1.shape:
        raise ValueError(f"layer parameters are {params.Y1.shape}, data is {D.shape[-2:]}")

    U1n = solvers.spatial(mu, mu * L + params.Y2)
    U2n = solvers.temporal(mu, mu * L + params.Y3)

    K = params.kernels
    cL = _conv_inputs(K, (0, 5), reshape_video(L, m, n))
    cS = _conv_inputs(K, (1, 6), reshape_video(S, m, n))
    cD = _conv_inputs(K, (2, 7), reshape_video(D, m, n))
    Z_L = cL[0] + cS[0] + cD[0] + (params.Y1 + params.Y2 + params.Y3) / mu
    if cfg.variant == DUST:
        Z_L += _conv_inputs(K, (3,), reshape_video(U1, m, n))[0]
        Z_L += _conv_inputs(K, (4,), reshape_video(U2, m, n))[0]
        phi = sigmoid_gain(params.rho, W_hat)
    else:
        phi = np.ones_like(D)
    Z_S = cL[1] + cS[1] + cD[1] + params.Y1 / mu

    res = svt(Z_L, 1.0 / mu)
    thresh = (lam / mu) * phi
    S_new = soft_threshold(Z_S, thresh)
    out = (res.value, S_new, U1n, U2n)
    if not keep:
        return out
    return out, LayerCache(L, S, U1, U2, U1n, U2n, Z_S, phi, thresh, res)


def _kernel_grads(X, grads, m, n):
    """Kernel gradients for one input ``X`` paired with several output grads."""
    win = frame_windows(reshape_video(X, m, n))
    G = np.stack([reshape_video(g, m, n) for g in grads])
    axes = list(range(1, G.ndim))
    return np.tensordot(G, win, axes=(axes, list(range(win.ndim - 2))))


def _adjoint(kernels, idx, grads, m, n):
    """Sum of conv adjoints ``sum_j C_idx[j]^T * grads[j]`` in matrix layout."""
    total = None
    for i, g in zip(idx, grads):
        term = conv_same(kernels[i][::-1, ::-1], reshape_video(g, m, n))
        total = term if total is None else total + term
    return reshape_matrix(total)


def layer_backward(cache, D, W_hat, solvers, params, cfg, gL_out, gS_out, gU1_out, gU2_out):
    """Reverse pass of :func:`layer_forward`.

    Returns ``(grads: LayerParams, gL, gS, gU1, gU2)`` where the latter are
    gradients with respect to the layer's ``L, S, U1, U2`` inputs.
    """
    m, n = cfg.frame_dims
    mu, lam = params.mu, params.lam
    K = params.kernels
    g = LayerParams.zeros_like(params)
    g_logmu = 0.0

    # S branch
    gZ_S, gT = soft_threshold_vjp(cache.Z_S, cache.thresh, gS_out)
    g_ratio = float(np.sum(gT * cache.phi))  # d/d(lam/mu)
    g.log_lambda = g_ratio * lam / mu
    g_logmu -= g_ratio * lam / mu
    if cfg.variant == DUST:
        gphi = gT * (lam / mu)
        g.rho = float(np.sum(gphi * sigmoid_gain_drho(params.rho, W_hat)))
    sum_gZS = gZ_S.sum(axis=0)
    g.Y1 += sum_gZS / mu
    g_logmu -= float(np.sum(sum_gZS * params.Y1)) / mu

    # L branch
    gZ_L, g_alpha = svt_vjp(cache.svt_res, gL_out)
    g_logmu -= float(np.sum(g_alpha)) / mu
    sum_gZL = gZ_L.sum(axis=0)
    g.Y1 += sum_gZL / mu
    g.Y2 += sum_gZL / mu
    g.Y3 += sum_gZL / mu
    g_logmu -= float(np.sum(sum_gZL * (params.Y1 + params.Y2 + params.Y3))) / mu

    # kernel gradients, grouped by the input each kernel reads
    kg = np.zeros_like(K)
    kg[[0, 5]] = _kernel_grads(cache.L, (gZ_L, gZ_S), m, n)
    kg[[1, 6]] = _kernel_grads(cache.S, (gZ_L, gZ_S), m, n)
    kg[[2, 7]] = _kernel_grads(D, (gZ_L, gZ_S), m, n)
    gL = _adjoint(K, (0, 5), (gZ_L, gZ_S), m, n)
    gS = _adjoint(K, (1, 6), (gZ_L, gZ_S), m, n)
    if cfg.variant == DUST:
        kg[3] = _kernel_grads(cache.U1, (gZ_L,), m, n)[0]
        kg[4] = _kernel_grads(cache.U2, (gZ_L,), m, n)[0]
        gU1 = _adjoint(K, (3,), (gZ_L,), m, n)
        gU2 = _adjoint(K, (4,), (gZ_L,), m, n)
    else:
        gU1 = np.zeros_like(gL)
        gU2 = np.zeros_like(gL)
    g.kernels = kg

    # U1' = M1^-1 (mu L + Y2),  U2' = (mu L + Y3) M2^-1
    if gU1_out is not None:
        B1 = solvers.spatial(mu, gU1_out)
        gL += mu * B1
        g.Y2 += B1.sum(axis=0)
        g_logmu += mu * float(np.sum(B1 * (cache.L - cache.U1n)))
    if gU2_out is not None:
        B2 = solvers.temporal(mu, gU2_out)
        gL += mu * B2
        g.Y3 += B2.sum(axis=0)
        g_logmu += mu * float(np.sum(B2 * (cache.L - cache.U2n)))

    g.log_mu = g_logmu
    return g, gL, gS, gU1, gU2


def network_forward(D, W_hat, solvers, params, cfg, keep=False):
    """Run all layers from a zero state. Returns ``(L_hat, S_hat)`` (plus caches if ``keep``)."""
    D = np.asarray(D, dtype=float)
    squeeze = D.ndim == 2
    if squeeze:
        D = D[None]
        W_hat = np.asarray(W_hat, dtype=float)[None]
    if len(params) != cfg.layers:
        raise ValueError(f"expected {cfg.layers} layers of parameters, got {len(params)}")
    L = np.zeros_like(D)
    S = np.zeros_like(D)
    U1 = np.zeros_like(D)
    U2 = np.zeros_like(D)
    caches = []
    for lp in params:
        if keep:
            (L, S, U1, U2), c = layer_forward(L, S, U1, U2, D, W_hat, solvers, lp, cfg, keep=True)
            caches.append(c)
        else:
            L, S, U1, U2 = layer_forward(L, S, U1, U2, D, W_hat, solvers, lp, cfg)
    if squeeze:
        L, S = L[0], S[0]
    if keep:
        return L, S, caches
    return L, S


def network_backward(caches, D, W_hat, solvers, params, cfg, gL_hat, gS_hat):
    """Gradients of all layer parameters given gradients on the network outputs."""
    grads = [None] * len(params)
    gL, gS = gL_hat, gS_hat
    gU1 = gU2 = None
    for k in range(len(params) - 1, -1, -1):
        grads[k], gL, gS, gU1, gU2 = layer_backward(
            caches[k], D, W_hat, solvers, params[k], cfg, gL, gS, gU1, gU2
        )
    return mask_frozen(grads, cfg)


def solvers_for(pairs, cfg):
    g1, g2 = cfg.effective_gammas
    return GraphSolvers(pairs, g1, g2)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params):
    """Write ``DUST1`` + uint32 layer count + per-layer float64 LE payload."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for lp in params:
            fh.write(np.asarray(lp.kernels, dtype="<f8").tobytes())
            fh.write(np.asarray([lp.log_mu, lp.log_lambda, lp.rho], dtype="<f8").tobytes())
            for Y in (lp.Y1, lp.Y2, lp.Y3):
                fh.write(np.asarray(Y, dtype="<f8").tobytes())


def load_checkpoint(path, p, q):
    """Read a checkpoint whose ``Y`` matrices are ``p x q``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9:
        raise FormatError("checkpoint truncated in header", offset=len(blob))
    if blob[:5] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:5]!r}", offset=0)
    (count,) = struct.unpack_from("<I", blob, 5)
    per_layer = (8 * KERNEL_SIZE * KERNEL_SIZE + 3 + 3 * p * q) * 8
    expected = 9 + count * per_layer
    if len(blob) != expected:
        raise ValueError(
            f"checkpoint holds {len(blob)} bytes; {count} layers at p={p}, q={q} need {expected}"
        )
    layers = []
    off = 9
    nk = 8 * KERNEL_SIZE * KERNEL_SIZE
    for _ in range(count):
        kernels = np.frombuffer(blob, "<f8", nk, off).reshape(8, KERNEL_SIZE, KERNEL_SIZE).copy()
        off += nk * 8
        log_mu, log_lambda, rho = np.frombuffer(blob, "<f8", 3, off)
        off += 24
        Ys = []
        for _ in range(3):
            Ys.append(np.frombuffer(blob, "<f8", p * q, off).reshape(p, q).copy())
            off += p * q * 8
        layers.append(LayerParams(kernels, float(log_mu), float(log_lambda), float(rho), *Ys))
    return layers


def with_layers(cfg, k):
    return replace(cfg, layers=k)
