"""Metrics, timing benchmarks and report artefacts (CSV tables, PGM frame dumps)."""

import csv
import time
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .godec import GoDecConfig, godec
from .graph import GraphConfig
from .linalg import reshape_video, sigmoid_gain
from .network import NetworkConfig, network_forward, solvers_for
from .solver import SolverConfig, rpca_pcp, solve
from .training import Batch, mse_components

TIMING_COLUMNS = ("seconds", "godec_seconds", "pcp_seconds", "time_ratio", "seconds_per_frame")


# -- tables --------------------------------------------------------------------

def write_csv(path, columns, rows):
    """RFC-4180 CSV with a header; floats written with ``repr`` so re-runs compare byte for byte."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c, "")) for c in columns])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return v


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def strip_timing(path):
    """CSV text with the timing columns removed, for reproducibility comparisons."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [i for i, c in enumerate(rows[0]) if c not in TIMING_COLUMNS]
    return [[r[i] for i in keep] for r in rows]


def moving_average(values, window=5):
    """Trailing mean over up to ``window`` points (shorter at the start)."""
    values = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# -- 16-bit PGM ------------------------------------------------------------------

def quantize(frame):
    return np.round(np.clip(frame, 0.0, 1.0) * 65535.0).astype(np.uint16)


def pgm_write(path, frame):
    """Binary P5 with maxval 65535; ``frame`` values are clipped to [0, 1]."""
    q = quantize(np.asarray(frame, dtype=float))
    rows, cols = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(q.astype(">u2").tobytes())


def pgm_read(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PGM header truncated", offset=pos)
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise FormatError(f"not a binary PGM: {fields[0]!r}", offset=0)
    cols, rows, maxval = (int(f) for f in fields[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    need = rows * cols * np.dtype(dtype).itemsize
    if len(blob) - pos < need:
        raise FormatError("PGM pixel data truncated", offset=len(blob))
    return np.frombuffer(blob, dtype, rows * cols, pos).reshape(rows, cols).astype(np.uint16)


def dump_frames(directory, name, M, m, n):
    """Write every frame of the ``p x q`` matrix ``M`` as ``name_tNN.pgm``; returns the paths."""
    video = reshape_video(M, m, n)
    paths = []
    for t, frame in enumerate(video):
        path = directory / f"{name}_t{t:02d}.pgm"
        pgm_write(path, frame)
        paths.append(path)
    return paths


# -- per-sample decomposition --------------------------------------------------

def relative_error(est, truth):
    den = float(np.linalg.norm(truth))
    num = float(np.linalg.norm(est - truth))
    return num / den if den > 0 else num


def decompose_sample(sample, solver_cfg=None, graph_cfg=None, rho=1.0):
    """Run the graph-regularised solver on one sample; returns ``(L, S, row)``."""
    pair = sample.pair(graph_cfg or GraphConfig())
    W = sigmoid_gain(rho, sample.W_hat) if rho else 1.0
    t0 = time.perf_counter()
    L, S, report = solve(sample.D, pair, W, solver_cfg or SolverConfig())
    seconds = time.perf_counter() - t0
    row = {
        "rel_err_L": relative_error(L, sample.L_true),
        "rel_err_S": relative_error(S, sample.S_true),
        "iterations": report.iterations,
        "converged": report.converged,
        "seconds": seconds,
    }
    return L, S, row


def mask_agreement(a, b):
    return float(np.mean(np.asarray(a, bool) == np.asarray(b, bool)))


# -- GoDec vs PCP timing ---------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    samples: int = 20
    p: int = 1024
    q: int = 20
    rank: int = 5
    support: float = 0.1
    magnitude: tuple = (5.0, 10.0)
    repeats: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1 or self.repeats < 1:
            raise ValueError("samples and repeats must be at least 1")
        if not 0 <= self.support <= 1:
            raise ValueError("support must lie in [0, 1]")
        if not 1 <= self.rank < min(self.p, self.q):
            raise ValueError("rank must lie in [1, min(p, q))")
        object.__setattr__(self, "magnitude", tuple(float(v) for v in self.magnitude))


def planted_pair(cfg, seed):
    """Rank-``cfg.rank`` Gaussian background plus an exact-count random-sign spike field."""
    rng = np.random.default_rng(seed)
    p, q = cfg.p, cfg.q
    L = rng.standard_normal((p, cfg.rank)) @ rng.standard_normal((cfg.rank, q))
    S = np.zeros((p, q))
    idx = rng.choice(p * q, int(round(cfg.support * p * q)), replace=False)
    lo, hi = cfg.magnitude
    S.flat[idx] = rng.choice([-1.0, 1.0], idx.size) * rng.uniform(lo, hi, idx.size)
    return L, S


def _timed(fn, repeats):
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, float(np.median(times))


def bench_mask(inputs, godec_cfg=None, solver_cfg=None, repeats=5, seed=0):
    """Time the GoDec mask against the PCP mask (support of its S) on each input.

    ``inputs`` yields ``(name, D, truth_mask_or_None)``. Returns rows plus a
    trailing summary row carrying the median time ratio.
    """
    solver_cfg = solver_cfg or SolverConfig()
    rows = []
    for k, (name, D, truth) in enumerate(inputs):
        gcfg = godec_cfg or GoDecConfig(rank_g=max(1, min(5, min(D.shape) - 1)))
        (_, Sg, _), tg = _timed(lambda: godec(D, gcfg, seed=seed + k), repeats)
        (_, Sp, _), tp = _timed(lambda: rpca_pcp(D, None, solver_cfg), repeats)
        mg, mp = Sg != 0, Sp != 0
        row = {
            "sample": name,
            "godec_seconds": tg,
            "pcp_seconds": tp,
            "time_ratio": tg / tp if tp > 0 else float("inf"),
            "agree_godec_pcp": mask_agreement(mg, mp),
        }
        if truth is not None:
            row["agree_godec_truth"] = mask_agreement(mg, truth)
            row["agree_pcp_truth"] = mask_agreement(mp, truth)
        rows.append(row)
    summary = {"sample": "median", "time_ratio": float(np.median([r["time_ratio"] for r in rows]))}
    for key in ("agree_godec_pcp", "agree_godec_truth", "agree_pcp_truth"):
        vals = [r[key] for r in rows if key in r]
        if vals:
            summary[key] = float(np.median(vals))
    rows.append(summary)
    return rows


BENCH_COLUMNS = ("sample", "godec_seconds", "pcp_seconds", "time_ratio",
                 "agree_godec_pcp", "agree_godec_truth", "agree_pcp_truth")


def planted_inputs(cfg):
    for i in range(cfg.samples):
        L, S = planted_pair(cfg, [cfg.seed, i])
        yield f"planted_{i:03d}", L + S, S != 0


# -- network evaluation --------------------------------------------------------

EVAL_COLUMNS = ("variant", "layers", "sequences", "mse", "mse_L", "mse_S", "seconds_per_frame")


def evaluate_variant(samples, params, cfg, graph_cfg=None, batch_size=100):
    """Average test loss per sequence and inference seconds per frame.

    Laplacian construction is part of inference for the graph variant, so it is
    inside the timed region.
    """
    tot = np.zeros(3)
    elapsed = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        t0 = time.perf_counter()
        batch = Batch.from_samples(chunk, graph_cfg, with_pairs=cfg.variant == "dust")
        L_hat, S_hat = network_forward(batch.D, batch.W_hat, solvers_for(batch.pairs, cfg), params, cfg)
        elapsed += time.perf_counter() - t0
        tot += np.array(mse_components(L_hat, S_hat, batch.L, batch.S, 1))
    n = len(samples)
    frames = n * cfg.frames
    mse = tot / n
    return {
        "variant": cfg.variant,
        "layers": cfg.layers,
        "sequences": n,
        "mse": float(mse[0]),
        "mse_L": float(mse[1]),
        "mse_S": float(mse[2]),
        "seconds_per_frame": elapsed / frames if frames else 0.0,
    }


def network_config_for(params, base, dataset, variant):
    """A network config matching a checkpoint's depth and a dataset's dims."""
    if params[0].Y1.shape != (dataset.m * dataset.n, dataset.q):
        raise ValueError(
            f"checkpoint expects {params[0].Y1.shape} matrices, dataset has "
            f"{(dataset.m * dataset.n, dataset.q)}"
        )
    return NetworkConfig(
        layers=len(params), gamma1=base.gamma1, gamma2=base.gamma2, variant=variant,
        frame_dims=(dataset.m, dataset.n), frames=dataset.q,
    )
