from dataclasses import replace

import numpy as np
import pytest

from dustlab.errors import DivergenceError
from dustlab.graph import build_priors, trace_quad
from dustlab.linalg import svd_thin
from dustlab.solver import (
    SolverConfig,
    SolverState,
    dual_update,
    objective,
    rpca_pcp,
    solve,
    update_L_ista,
    update_S_ista,
    update_U1,
    update_U2,
)


def planted(seed, p=64, q=20, r=3, frac=0.05, mag=5.0):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((p, r)) @ rng.standard_normal((r, q))
    S = np.zeros((p, q))
    mask = rng.random((p, q)) < frac
    S[mask] = rng.uniform(-mag, mag, mask.sum())
    return L, S


def random_state(rng, shape, mu=1.7):
    return SolverState(*(rng.standard_normal(shape) for _ in range(7)), mu)


@pytest.fixture
def small():
    rng = np.random.default_rng(0)
    D = rng.random((6, 5))
    return rng, D, build_priors(D)


def test_objective_examples(small):
    rng, D, pair = small
    Z = np.zeros_like(D)
    assert objective(Z, Z, 1.0, pair, 0.3, 0.2, 0.1) == 0.0
    L, S = rng.standard_normal((2, 6, 5))
    pcp = np.linalg.svd(L, compute_uv=False).sum() + 0.3 * np.abs(S).sum()
    assert objective(L, S, 1.0, pair, 0.3, 0.0, 0.0) == pytest.approx(pcp)
    W = rng.random((6, 5))
    sp, tp = trace_quad(L, pair)
    expect = svd_thin(L)[1].sum() + 0.3 * np.sum(np.abs(W * S)) + 0.2 * sp + 0.1 * tp
    assert objective(L, S, W, pair, 0.3, 0.2, 0.1) == pytest.approx(expect, rel=1e-12)


def test_update_U1(small):
    rng, D, pair = small
    L, Y2 = rng.standard_normal((2, 6, 5))
    np.testing.assert_allclose(update_U1(L, Y2, 2.0, 0.0, pair.A_s), L + Y2 / 2.0)
    Lc = np.tile(rng.standard_normal(5), (6, 1))
    np.testing.assert_allclose(update_U1(Lc, 0 * Y2, 2.0, 0.7, pair.A_s), Lc, atol=1e-12)
    U1 = update_U1(L, Y2, 2.0, 0.7, pair.A_s)
    assert np.linalg.norm((1.4 * pair.A_s + 2.0 * np.eye(6)) @ U1 - (2.0 * L + Y2)) <= 1e-8


def test_update_U2(small):
    rng, D, pair = small
    L, Y3 = rng.standard_normal((2, 6, 5))
    np.testing.assert_allclose(update_U2(L, Y3, 2.0, 0.0, pair.A_t), L + Y3 / 2.0)
    Lr = np.tile(rng.standard_normal((6, 1)), (1, 5))
    np.testing.assert_allclose(update_U2(Lr, 0 * Y3, 2.0, 0.7, pair.A_t), Lr, atol=1e-12)
    U2 = update_U2(L, Y3, 2.0, 0.7, pair.A_t)
    assert np.linalg.norm(U2 @ (1.4 * pair.A_t + 2.0 * np.eye(5)) - (2.0 * L + Y3)) <= 1e-8


def test_update_L_ista(small):
    rng, D, _ = small
    cfg = SolverConfig(c=1.0)
    zero = SolverState.zeros(D.shape, 1.0)
    assert np.all(update_L_ista(zero, np.zeros_like(D), cfg) == 0)

    s = random_state(rng, D.shape, mu=1e12)
    expect = D - s.S + s.U1 + s.U2 + (s.Y1 + s.Y2 + s.Y3) / s.mu
    np.testing.assert_allclose(update_L_ista(s, D, cfg), expect, atol=1e-9)

    s = random_state(rng, D.shape)
    cfg = SolverConfig(c=2.5)
    arg = (1 - 1 / 2.5) * s.L - (1 / 2.5) * (s.S - D - s.U1 - s.U2 - (s.Y1 + s.Y2 + s.Y3) / s.mu)
    U, sig, V = svd_thin(arg)
    expect = U @ np.diag(np.maximum(sig - 1 / (s.mu * 2.5), 0)) @ V.T
    np.testing.assert_allclose(update_L_ista(s, D, cfg), expect, atol=1e-12)


def test_update_S_ista(small):
    rng, D, _ = small
    cfg = SolverConfig(c=2.0)
    zero = SolverState.zeros(D.shape, 1.0)
    assert np.all(update_S_ista(zero, np.zeros_like(D), 1.0, cfg, 0.3) == 0)
    s = random_state(rng, D.shape)
    assert np.all(update_S_ista(s, D, 1.0, cfg, 1e9) == 0)
    W = rng.random(D.shape)
    arg = 0.5 * s.S - 0.5 * (s.L - D - s.Y1 / s.mu)
    thr = 0.3 / (s.mu * 2.0) * W
    expect = np.sign(arg) * np.maximum(np.abs(arg) - thr, 0)
    np.testing.assert_allclose(update_S_ista(s, D, W, cfg, 0.3), expect, atol=1e-12)


def test_dual_update(small):
    rng, D, _ = small
    cfg = SolverConfig(mu_growth=1.5, mu_max=10.0)
    s = SolverState.zeros(D.shape, 2.0)
    s.L = D.copy()
    s.U1 = D.copy()
    s.U2 = D.copy()
    s.Y1 = rng.standard_normal(D.shape)
    out = dual_update(s, D, cfg)
    np.testing.assert_array_equal(out.Y1, s.Y1)
    assert out.mu == 3.0
    s.mu = 10.0
    assert dual_update(s, D, cfg).mu == 10.0

    s = random_state(rng, D.shape, mu=1.5)
    out = dual_update(s, D, cfg)
    np.testing.assert_allclose(out.Y1, s.Y1 + 1.5 * (D - s.L - s.S))
    np.testing.assert_allclose(out.Y2, s.Y2 + 1.5 * (s.L - s.U1))
    np.testing.assert_allclose(out.Y3, s.Y3 + 1.5 * (s.L - s.U2))


def test_solve_zero_input():
    D = np.zeros((6, 4))
    L, S, rep = solve(D, build_priors(np.random.default_rng(0).random((6, 4))), 1.0)
    assert rep.iterations == 1 and np.all(L == 0) and np.all(S == 0)


def test_solve_planted_recovery_and_objective():
    L0, S0 = planted(0)
    D = L0 + S0
    cfg = SolverConfig(lam=1 / 8, gamma1=0.0, gamma2=0.0)
    L, S, rep = solve(D, build_priors(D), 1.0, cfg)
    assert rep.converged and rep.iterations <= 500
    assert np.linalg.norm(L - L0) <= 1e-2 * np.linalg.norm(L0)
    assert np.linalg.norm(S - S0) <= 1e-2 * np.linalg.norm(S0)
    assert max(rep.primal_residuals[-1]) <= 1e-6 * np.linalg.norm(D)
    # iterate 1 is far from feasible, so compare against the planted pair instead
    truth = objective(L0, S0, 1.0, build_priors(D), 1 / 8, 0.0, 0.0)
    assert rep.objective_trace[-1] <= truth * (1 + 1e-4)
    assert len(rep.objective_trace) == len(rep.primal_residuals) == rep.iterations


def test_merged_step_diverges_as_a_fixed_point_iteration():
    L0, S0 = planted(0)
    D = L0 + S0
    with pytest.raises(DivergenceError):
        solve(D, build_priors(D), 1.0, SolverConfig(gamma1=0.0, gamma2=0.0, l_step="merged"))


def test_reduction_to_pcp_first_iteration():
    L0, S0 = planted(1)
    D = L0 + S0
    cfg = SolverConfig(lam=1 / 8, gamma1=0.0, gamma2=0.0, l_step="merged", c=1.0,
                       use_aux=False, max_iter=1)
    L, S, _ = solve(D, build_priors(D), 1.0, cfg)
    traj = []
    rpca_pcp(D, 1 / 8, replace(cfg, max_iter=1), trajectory=traj)
    np.testing.assert_allclose(L, traj[0][0], atol=1e-12)
    np.testing.assert_allclose(S, traj[0][1], atol=1e-12)


def smooth_planted(seed, m=8, n=8, q=20, r=3, frac=0.05, noise=0.05):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:m, 0:n] / max(m, n)
    basis = [np.cos(np.pi * (a * yy + b * xx)) for a, b in ((0, 0), (1, 0), (0, 1), (1, 1))][:r]
    U = np.stack([b.ravel() for b in basis], axis=1)
    V = np.cumsum(rng.standard_normal((q, r)), axis=0) / np.sqrt(q)
    L = U @ V.T
    S = np.zeros_like(L)
    mask = rng.random(L.shape) < frac
    S[mask] = rng.uniform(-3, 3, mask.sum())
    return L, S, noise * rng.standard_normal(L.shape)


@pytest.mark.xfail(strict=True, reason="dense Gaussian graphs bias L toward its row/column means")
def test_graph_priors_help_on_smooth_backgrounds():
    wins = 0
    for seed in range(10):
        L0, S0, N = smooth_planted(seed)
        D = L0 + S0 + N
        pair = build_priors(D)
        base = SolverConfig(lam=1 / 8, gamma1=0.0, gamma2=0.0)
        err0 = np.linalg.norm(solve(D, pair, 1.0, base)[0] - L0)
        err1 = np.linalg.norm(solve(D, pair, 1.0, replace(base, gamma1=0.05, gamma2=0.05))[0] - L0)
        wins += err1 <= err0
    assert wins >= 8


def test_graph_penalty_shrinks_trace_terms():
    L0, S0, N = smooth_planted(0)
    D = L0 + S0 + N
    pair = build_priors(D)
    base = SolverConfig(lam=1 / 8, gamma1=0.0, gamma2=0.0)
    L_free = solve(D, pair, 1.0, base)[0]
    L_reg = solve(D, pair, 1.0, replace(base, gamma1=0.01, gamma2=0.01))[0]
    assert sum(trace_quad(L_reg, pair)) < sum(trace_quad(L_free, pair))


def test_pcp_examples():
    L, S, rep = rpca_pcp(np.zeros((5, 4)))
    assert np.all(L == 0) and np.all(S == 0)

    # flat singular vectors keep max|u_i v_j| below lambda, so S = 0 is optimal
    rng = np.random.default_rng(3)
    u = rng.choice([-1.0, 1.0], 30) / np.sqrt(30)
    v = rng.choice([-1.0, 1.0], 8) / np.sqrt(8)
    D = 7.0 * np.outer(u, v)
    L, S, _ = rpca_pcp(D, 1 / np.sqrt(30))
    assert np.linalg.norm(L - D) <= 1e-4 * np.linalg.norm(D)
    assert np.linalg.norm(S) <= 1e-4 * np.linalg.norm(D)


def planted_support(seed, p, q, r=2, frac=0.1, mag=8.0):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((p, r)) @ rng.standard_normal((r, q))
    S = np.zeros((p, q))
    mask = rng.random((p, q)) < frac
    S[mask] = rng.choice([-1.0, 1.0], mask.sum()) * rng.uniform(mag / 2, mag, mask.sum())
    return L, S


@pytest.mark.parametrize("seed", range(3))
def test_pcp_planted_support(seed):
    # 128x20 lies outside the exact-recovery regime of the convex program; 128x64 does not
    L0, S0 = planted_support(seed, 128, 64)
    L, S, rep = rpca_pcp(L0 + S0, 1 / np.sqrt(128))
    assert rep.converged
    support = np.abs(S) > 1e-3 * np.abs(S).max()
    np.testing.assert_array_equal(support, S0 != 0)
