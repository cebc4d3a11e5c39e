"""Loss, reverse-mode gradients, Adam, and the training loop for the unfolded network."""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .graph import GraphConfig, build_priors
from .network import (
    PARAM_FIELDS,
    LayerParams,
    network_backward,
    network_forward,
    solvers_for,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 100
    epochs: int = 30
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class Batch:
    D: np.ndarray
    L: np.ndarray
    S: np.ndarray
    W_hat: np.ndarray
    pairs: list

    @classmethod
    def from_samples(cls, samples, graph_cfg=None, with_pairs=True):
        graph_cfg = graph_cfg or GraphConfig()
        D = np.stack([s.D for s in samples])
        pairs = [build_priors(d, graph_cfg) for d in D] if with_pairs else []
        return cls(
            D,
            np.stack([s.L_true for s in samples]),
            np.stack([s.S_true for s in samples]),
            np.stack([s.W_hat for s in samples]),
            pairs,
        )

    def __len__(self):
        return self.D.shape[0]


def mse_components(L_hat, S_hat, L_true, S_true, N=None):
    """``(total, f_L, f_S)`` with ``f(X) = (1/N) sum_i ||X_i - Xhat_i||_F^2`` and total their mean."""
    L_hat, S_hat = np.asarray(L_hat, dtype=float), np.asarray(S_hat, dtype=float)
    L_true, S_true = np.asarray(L_true, dtype=float), np.asarray(S_true, dtype=float)
    if L_hat.shape != L_true.shape or S_hat.shape != S_true.shape:
        raise ValueError("prediction and ground-truth shapes differ")
    if N is None:
        N = L_hat.shape[0] if L_hat.ndim == 3 else 1
    fL = float(np.sum((L_true - L_hat) ** 2)) / N
    fS = float(np.sum((S_true - S_hat) ** 2)) / N
    return 0.5 * (fL + fS), fL, fS


def mse_loss(L_hat, S_hat, L_true, S_true, N=None):
    return mse_components(L_hat, S_hat, L_true, S_true, N)[0]


def _check_grads(grads):
    for k, g in enumerate(grads):
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(g, name))):
                raise NumericalError(f"non-finite gradient in layer {k}, parameter {name}")


def forward_backward(batch, params, cfg):
    """Loss components and gradients on one batch: ``((total, fL, fS), grads)``."""
    solvers = solvers_for(batch.pairs, cfg)
    L_hat, S_hat, caches = network_forward(batch.D, batch.W_hat, solvers, params, cfg, keep=True)
    N = len(batch)
    comps = mse_components(L_hat, S_hat, batch.L, batch.S, N)
    grads = network_backward(
        caches, batch.D, batch.W_hat, solvers, params, cfg,
        (L_hat - batch.L) / N, (S_hat - batch.S) / N,
    )
    solvers.release()
    _check_grads(grads)
    return comps, grads


def backward(batch, params, cfg):
    """Loss and exact reverse-mode gradients: ``(loss, grads)``."""
    comps, grads = forward_backward(batch, params, cfg)
    return comps[0], grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def init(cls, params):
        return cls([LayerParams.zeros_like(p) for p in params],
                   [LayerParams.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, cfg):
    """Bias-corrected Adam on every scalar parameter. Returns new ``(params, state)``."""
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    t = state.step + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        np_, nm, nv = p.copy(), m.copy(), v.copy()
        for name in PARAM_FIELDS:
            gv = np.asarray(getattr(g, name), dtype=float)
            mv = b1 * np.asarray(getattr(m, name)) + (1.0 - b1) * gv
            vv = b2 * np.asarray(getattr(v, name)) + (1.0 - b2) * gv * gv
            upd = np.asarray(getattr(p, name)) - lr * (mv / bc1) / (np.sqrt(vv / bc2) + eps)
            if np.ndim(upd) == 0:
                mv, vv, upd = float(mv), float(vv), float(upd)
            setattr(nm, name, mv)
            setattr(nv, name, vv)
            setattr(np_, name, upd)
        new_params.append(np_)
        new_m.append(nm)
        new_v.append(nv)
    return new_params, AdamState(new_m, new_v, t)


def evaluate(samples, params, cfg, graph_cfg=None, batch_size=100):
    """Average ``(total, f_L, f_S)`` per sequence over ``samples``."""
    with_pairs = cfg.variant == "dust"
    tot = np.zeros(3)
    for start in range(0, len(samples), batch_size):
        batch = Batch.from_samples(samples[start:start + batch_size], graph_cfg, with_pairs)
        solvers = solvers_for(batch.pairs, cfg)
        L_hat, S_hat = network_forward(batch.D, batch.W_hat, solvers, params, cfg)
        tot += np.array(mse_components(L_hat, S_hat, batch.L, batch.S, 1))
    return tuple(float(x) for x in tot / len(samples))


def train(dataset, net_cfg, train_cfg, params=None, graph_cfg=None):
    """Train on ``dataset.train``, scoring ``dataset.test`` once per epoch.

    Returns ``(params, history)``; history rows are dicts with keys
    ``epoch, split, loss_total, loss_L, loss_S``. The train row is the mean of
    the batch losses seen during the epoch.
    """
    from .network import init_params

    if params is None:
        params = init_params(net_cfg, train_cfg.seed)
    with_pairs = net_cfg.variant == "dust"
    state = AdamState.init(params)
    history = []
    n = len(dataset.train)
    for epoch in range(1, train_cfg.epochs + 1):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        for bi, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            batch = Batch.from_samples([dataset.train[i] for i in idx], graph_cfg, with_pairs)
            comps, grads = forward_backward(batch, params, net_cfg)
            if not np.isfinite(comps[0]):
                raise NumericalError(f"training loss is non-finite at epoch {epoch}, batch {bi}")
            sums += np.array(comps) * len(batch)
            params, state = adam_step(params, grads, state, train_cfg)
        train_loss = sums / n
        history.append(_row(epoch, "train", train_loss))
        if dataset.test:
            test_loss = evaluate(dataset.test, params, net_cfg, graph_cfg, train_cfg.batch_size)
            history.append(_row(epoch, "test", test_loss))
        log.info("epoch %d: train %.6g%s", epoch, train_loss[0],
                 f", test {history[-1]['loss_total']:.6g}" if dataset.test else "")
    return params, history


def _row(epoch, split, comps):
    return {"epoch": epoch, "split": split, "loss_total": float(comps[0]),
            "loss_L": float(comps[1]), "loss_S": float(comps[2])}


HISTORY_COLUMNS = ("epoch", "split", "loss_total", "loss_L", "loss_S")
