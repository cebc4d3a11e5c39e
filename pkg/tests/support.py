"""Shared builders for the training and acceptance tests."""

import numpy as np

from dustlab.graph import build_priors
from dustlab.network import PARAM_FIELDS, NetworkConfig, init_params, network_forward, solvers_for
from dustlab.training import Batch, forward_backward, mse_components


def gradcheck_problem(seed=1, variant="dust", layers=3, batch=2):
    """A 6x6x5 instance with random parameters away from prox kinks."""
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(layers=layers, frame_dims=(6, 6), frames=5, variant=variant)
    params = init_params(cfg, seed=seed + 2, noise_std=0.2)
    for lp in params:
        lp.log_mu = float(np.log(rng.uniform(1, 3)))
        lp.log_lambda = float(np.log(rng.uniform(0.05, 0.2)))
        lp.rho = float(rng.uniform(0.5, 2))
        for Y in (lp.Y1, lp.Y2, lp.Y3):
            Y[:] = 0.1 * rng.standard_normal(Y.shape)
    D = rng.random((batch, 36, 5))
    L = rng.random((batch, 36, 5))
    W_hat = (rng.random((batch, 36, 5)) > 0.3).astype(float)
    data = Batch(D, L, D - L, W_hat, [build_priors(d) for d in D])
    return cfg, params, data


def batch_loss(data, params, cfg):
    L, S = network_forward(data.D, data.W_hat, solvers_for(data.pairs, cfg), params, cfg)
    return mse_components(L, S, data.L, data.S, len(data))[0]


def finite_difference_errors(cfg, params, data, h=1e-5, max_coords=None, seed=0):
    """Relative error per ``(layer, field)``: max |analytic - numeric| / max |numeric|."""
    rng = np.random.default_rng(seed)
    _, grads = forward_backward(data, params, cfg)
    errors = {}
    for k, g in enumerate(grads):
        for name in PARAM_FIELDS:
            analytic = np.asarray(getattr(g, name), dtype=float)
            coords = list(np.ndindex(analytic.shape)) if analytic.ndim else [()]
            if max_coords and len(coords) > max_coords:
                coords = [coords[i] for i in rng.choice(len(coords), max_coords, replace=False)]
            a, num = [], []
            for idx in coords:
                vals = []
                for step in (h, -h):
                    shifted = [p.copy() for p in params]
                    if analytic.ndim:
                        getattr(shifted[k], name)[idx] += step
                    else:
                        setattr(shifted[k], name, getattr(params[k], name) + step)
                    vals.append(batch_loss(data, shifted, cfg))
                num.append((vals[0] - vals[1]) / (2 * h))
                a.append(analytic[idx])
            a, num = np.array(a), np.array(num)
            scale = np.abs(num).max()
            errors[(k, name)] = 0.0 if scale == 0 and np.all(a == 0) else float(
                np.abs(a - num).max() / max(scale, 1e-300))
    return errors
