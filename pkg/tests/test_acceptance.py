"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` (the summary lines are also
printed at the end of any pytest session) or ``python tests/test_acceptance.py``.
Criteria 6, 7 and 9 share a desk-scale training run that takes roughly eight
minutes per repetition on one CPU core.
"""

import json
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from dustlab import bench
from dustlab.cli import run
from dustlab.godec import GoDecConfig
from dustlab.graph import adjacency, build_priors, laplacian
from dustlab.linalg import sigmoid_gain
from dustlab.network import CORONA, NetworkConfig, init_params, layer_forward, solvers_for
from dustlab.prox import soft_threshold, svt
from dustlab.solver import (
    SolverConfig,
    SolverState,
    rpca_pcp,
    update_L_ista,
    update_S_ista,
)
from support import finite_difference_errors, gradcheck_problem

RESULTS = {}


def record(number, title, ok, detail):
    RESULTS[number] = (title, bool(ok), detail)
    assert ok, f"criterion {number} ({title}) failed: {detail}"


def summary_lines():
    return [f"criterion {k}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]"
            for k, (title, ok, detail) in sorted(RESULTS.items())]


# -- 1. gradient fidelity ----------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    cfg, params, data = gradcheck_problem(seed=1, variant="dust", layers=3, batch=2)
    errors = finite_difference_errors(cfg, params, data, h=1e-5)
    seconds = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4 and seconds < 120
    record(1, "gradient fidelity", ok,
           f"{len(errors)} groups, worst {worst} rel err {errors[worst]:.2e}, {seconds:.1f}s")


# -- 2. prox optimality --------------------------------------------------------------

def _nuclear(X):
    return np.linalg.svd(X, compute_uv=False).sum()


def test_criterion_2_prox_optimality():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    svt_bad = 0
    for _ in range(100):
        shape = tuple(rng.integers(2, 9, 2))
        X = rng.standard_normal(shape)
        a = rng.uniform(0.0, 2.0)
        Z = svt(X, a).value
        best = a * _nuclear(Z) + 0.5 * np.sum((Z - X) ** 2)
        for _ in range(20):
            d = rng.standard_normal(shape)
            Zp = Z + 1e-3 * d / np.linalg.norm(d)
            if a * _nuclear(Zp) + 0.5 * np.sum((Zp - X) ** 2) < best - 1e-12:
                svt_bad += 1
                break
    soft_bad = 0
    for _ in range(100):
        x = rng.uniform(-3, 3)
        a = rng.uniform(0, 1.5)
        grid = np.arange(-abs(x), abs(x) + 1e-5, 1e-5)
        z_star = grid[np.argmin(a * np.abs(grid) + 0.5 * (grid - x) ** 2)]
        if abs(soft_threshold(np.array([x]), a)[0] - z_star) > 1e-4:
            soft_bad += 1
    seconds = time.perf_counter() - t0
    ok = svt_bad == 0 and soft_bad == 0 and seconds < 60
    record(2, "prox optimality", ok,
           f"svt violations {svt_bad}/100, soft-threshold violations {soft_bad}/100, {seconds:.1f}s")


# -- 3. Laplacian suite --------------------------------------------------------------

def test_criterion_3_laplacian_suite():
    rng = np.random.default_rng(3)
    worst = {"sym": 0.0, "null": 0.0, "eig": 0.0, "quad": 0.0}
    for _ in range(50):
        p, q = rng.integers(3, 30), rng.integers(3, 12)
        D = rng.random((p, q))
        pair = build_priors(D)
        for A, X, kappa in ((pair.A_s, D, pair.kappa_s), (pair.A_t, D.T, pair.kappa_t)):
            n = A.shape[0]
            worst["sym"] = max(worst["sym"], float(np.abs(A - A.T).max()))
            worst["null"] = max(worst["null"], float(np.abs(A @ np.ones(n)).max()))
            worst["eig"] = min(worst["eig"], float(np.linalg.eigvalsh(A).min()))
            W = adjacency(X, 1.0, kappa)
            np.testing.assert_allclose(laplacian(W), A, rtol=0, atol=1e-14)
            x = rng.standard_normal(n)
            brute = 0.5 * np.sum(W * (x[:, None] - x[None, :]) ** 2)
            worst["quad"] = max(worst["quad"], abs(x @ A @ x - brute) / max(abs(brute), 1e-300))
    ok = worst["sym"] == 0 and worst["null"] <= 1e-12 and worst["eig"] >= -1e-10 and worst["quad"] <= 1e-10
    record(3, "Laplacian suite", ok,
           "max asym {sym:.1e}, max |A1| {null:.1e}, min eig {eig:.1e}, quad rel {quad:.1e}".format(**worst))


# -- 4. iterative recovery -----------------------------------------------------------

def planted_64x20(seed=0, r=3, frac=0.05, mag=5.0):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((64, r)) @ rng.standard_normal((r, 20))
    S = np.zeros((64, 20))
    mask = rng.random((64, 20)) < frac
    S[mask] = rng.uniform(-mag, mag, mask.sum())
    return L, S


def recovery_row(seed=0):
    L0, S0 = planted_64x20(seed)
    D = L0 + S0
    t0 = time.perf_counter()
    L, S, report = rpca_pcp(D, 1 / np.sqrt(64), SolverConfig(max_iter=500))
    return {
        "seed": seed,
        "rel_err_L": bench.relative_error(L, L0),
        "rel_err_S": bench.relative_error(S, S0),
        "residual_ratio": report.primal_residuals[-1][0] / np.linalg.norm(D),
        "iterations": report.iterations,
        "converged": report.converged,
        "seconds": time.perf_counter() - t0,
    }


RECOVERY_COLUMNS = ("seed", "rel_err_L", "rel_err_S", "residual_ratio", "iterations", "converged", "seconds")


def test_criterion_4_iterative_recovery(tmp_path):
    row = recovery_row(0)
    bench.write_csv(tmp_path / "recovery.csv", RECOVERY_COLUMNS, [row])
    ok = (row["rel_err_L"] <= 1e-2 and row["rel_err_S"] <= 1e-2 and row["residual_ratio"] <= 1e-6
          and row["iterations"] <= 500 and row["seconds"] < 60)
    record(4, "iterative recovery", ok,
           "rel err L {rel_err_L:.2e}, S {rel_err_S:.2e}, residual/||D|| {residual_ratio:.1e}, "
           "{iterations} iterations, {seconds:.2f}s".format(**row))


# -- 5. reduction consistency ---------------------------------------------------------

def test_criterion_5_reduction_consistency():
    rng = np.random.default_rng(5)
    D = rng.random((1, 36, 5))
    W_hat = (rng.random((1, 36, 5)) > 0.2).astype(float)
    pairs = [build_priors(D[0])]
    cfg = NetworkConfig(layers=1, frame_dims=(6, 6), frames=5)
    lp = init_params(cfg, noise_std=0.0)[0]
    L, S, U1, U2 = rng.standard_normal((4,) + D.shape)
    out = layer_forward(L, S, U1, U2, D, W_hat, solvers_for(pairs, cfg), lp, cfg)
    state = SolverState(L[0], S[0], U1[0], U2[0], *np.zeros((3, 36, 5)), mu=1.0)
    scfg = SolverConfig(c=1.0, l_step="merged")
    err = max(
        float(np.abs(out[0][0] - update_L_ista(state, D[0], scfg)).max()),
        float(np.abs(out[1][0] - update_S_ista(state, D[0], sigmoid_gain(lp.rho, W_hat[0]), scfg, lp.lam)).max()),
    )

    ccfg = replace(cfg, variant=CORONA)
    cp = init_params(ccfg, seed=5)[0]
    solvers = solvers_for(pairs, ccfg)
    base = layer_forward(L, S, U1, U2, D, W_hat, solvers, cp, ccfg)
    other = layer_forward(L, S, *rng.standard_normal((2,) + D.shape), D, rng.random(D.shape), solvers, cp, ccfg)
    independent = np.array_equal(base[0], other[0]) and np.array_equal(base[1], other[1])
    record(5, "reduction consistency", err <= 1e-10 and independent,
           f"layer vs ISTA step max diff {err:.1e}, CORONA independent of U1/U2/W: {independent}")


# -- 6, 7, 9. desk-scale training --------------------------------------------------------

DESK = ["--data.num_sequences", "1200", "--data.test_fraction", json.dumps(1 / 6),
        "--data.m", "16", "--data.n", "16", "--data.q", "10", "--data.rank", "5", "--data.seed", "0"]
TRAIN = ["--network.layers", "5", "--train.epochs", "10", "--train.batch_size", "100",
         "--train.learning_rate", "0.002", "--train.seed", "0"]


def desk_run(root):
    """Generate data, train both variants and evaluate them through the CLI."""
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    assert run(["gen-data", *DESK, "--io.output_dir", str(root / "data")]) == 0
    dataset = str(root / "data" / "dataset.bin")
    for variant in ("dust", "corona"):
        code = run(["train", *TRAIN, "--network.variant", variant, "--io.dataset", dataset,
                    "--io.output_dir", str(root / variant)])
        assert code == 0
    checkpoints = json.dumps({v: str(root / v / "model.bin") for v in ("dust", "corona")})
    assert run(["eval", "--io.dataset", dataset, "--io.checkpoints", checkpoints,
                "--io.output_dir", str(root / "eval")]) == 0
    return root, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return desk_run(tmp_path_factory.mktemp("desk_a"))


@pytest.fixture(scope="module")
def desk_repeat(tmp_path_factory):
    return desk_run(tmp_path_factory.mktemp("desk_b"))


def test_criterion_6_desk_ordering(desk):
    root, seconds = desk
    rows = {r["variant"]: float(r["mse"]) for r in bench.read_csv(root / "eval" / "metrics.csv")}
    margin = 1 - rows["dust"] / rows["corona"]
    ok = margin >= 0.2 and seconds <= 3600
    record(6, "desk-scale ordering", ok,
           f"test MSE dust {rows['dust']:.4g} vs corona {rows['corona']:.4g}, "
           f"relative margin {margin:+.1%} (need >= +20%), {seconds:.0f}s")


def test_criterion_7_loss_curve_shape(desk):
    root, _ = desk
    hist = [r for r in bench.read_csv(root / "dust" / "history.csv") if r["split"] == "train"]
    bad = []
    for key in ("loss_total", "loss_L", "loss_S"):
        ma = bench.moving_average([float(r[key]) for r in hist], 5)
        if not np.all(np.diff(ma) < 0):
            bad.append(key)
    record(7, "loss-curve shape", not bad,
           f"{len(hist)} epochs, non-decreasing moving averages: {bad or 'none'}")


# -- 8. GoDec efficiency ---------------------------------------------------------------

def test_criterion_8_godec_efficiency():
    cfg = bench.BenchConfig(samples=20, p=1024, q=20, rank=5, repeats=5, seed=0)
    rows = bench.bench_mask(bench.planted_inputs(cfg), GoDecConfig(rank_g=cfg.rank + 1),
                            repeats=cfg.repeats, seed=cfg.seed)
    med = rows[-1]
    ok = med["time_ratio"] <= 0.25 and med["agree_godec_truth"] >= 0.9
    record(8, "GoDec efficiency", ok,
           f"median time ratio {med['time_ratio']:.3f}, median agreement with planted support "
           f"{med['agree_godec_truth']:.3f}")


# -- 9. determinism ----------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path, desk, desk_repeat):
    same = []
    for name in ("a", "b"):
        bench.write_csv(tmp_path / f"recovery_{name}.csv", RECOVERY_COLUMNS, [recovery_row(0)])
    same.append(bench.strip_timing(tmp_path / "recovery_a.csv") == bench.strip_timing(tmp_path / "recovery_b.csv"))
    (a, _), (b, _) = desk, desk_repeat
    for rel in ("data/manifest.csv", "dust/history.csv", "corona/history.csv", "eval/metrics.csv"):
        same.append(bench.strip_timing(a / rel) == bench.strip_timing(b / rel))
    same.append((a / "data/dataset.bin").read_bytes() == (b / "data/dataset.bin").read_bytes())
    record(9, "determinism", all(same), f"{sum(same)}/{len(same)} artefacts identical")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
