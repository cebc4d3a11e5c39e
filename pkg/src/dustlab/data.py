"""Synthetic low-rank + moving-sprite sequences, IDX ingestion, dataset caches."""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FormatError
from .godec import GoDecConfig, godec_mask
from .graph import GraphConfig, build_priors
from .linalg import reshape_matrix

IDX_MAGIC = 0x00000803
CACHE_MAGIC = b"DSTD1"
BLOBS = "blobs"
IDX = "idx"


@dataclass(frozen=True)
class SyntheticConfig:
    m: int = 16
    n: int = 16
    q: int = 10
    rank: int = 5
    num_sequences: int = 1200
    test_fraction: float = 0.1
    foreground: str = BLOBS
    idx_path: str = None
    sprite_count: tuple = (1, 3)
    sprite_size: tuple = (3, 5)
    sprite_speed: tuple = (-2, 2)
    intensity: tuple = (3.0, 6.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("sprite_count", "sprite_size", "sprite_speed", "intensity"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if min(self.m, self.n, self.q, self.rank) < 1:
            raise ValueError("dimensions and rank must be positive")
        if self.rank > min(self.m * self.n, self.q):
            raise ValueError(f"rank {self.rank} exceeds min(p, q)")
        if self.sprite_size[1] >= min(self.m, self.n):
            raise ValueError("sprites must be smaller than the frame")
        if self.foreground not in (BLOBS, IDX):
            raise ValueError(f"foreground must be {BLOBS!r} or {IDX!r}")
        if self.foreground == IDX and not self.idx_path:
            raise ValueError("idx foreground needs idx_path")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must lie in [0, 1)")

    @property
    def p(self):
        return self.m * self.n


@dataclass
class Sample:
    D: np.ndarray
    L_true: np.ndarray
    S_true: np.ndarray
    W_hat: np.ndarray

    def pair(self, graph_cfg=None):
        # built on demand: a 1024x1024 spatial Laplacian per stored sample would not fit in memory
        return build_priors(self.D, graph_cfg or GraphConfig())


@dataclass
class Dataset:
    train: list
    test: list
    m: int
    n: int
    q: int
    meta: dict = field(default_factory=dict)

    @property
    def p(self):
        return self.m * self.n


def gen_lowrank(m, n, q, r, seed=0):
    """``U @ V.T`` with standard normal ``U`` (p x r) and ``V`` (q x r)."""
    p = m * n
    if r > min(p, q) or r < 1:
        raise ValueError(f"rank {r} must lie in [1, min(p, q) = {min(p, q)}]")
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((p, r))
    V = rng.standard_normal((q, r))
    return U @ V.T


def blob(size, intensity=1.0):
    """Rounded bump filling a ``size x size`` box; corners are exactly zero."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    radius2 = (size / 2.0 + 0.5) ** 2
    return intensity * np.maximum(0.0, 1.0 - ((yy - c) ** 2 + (xx - c) ** 2) / radius2)


def trajectory(pos, vel, limits, q):
    """Integer top-left positions over ``q`` frames with elastic bounces off ``[0, limit]``."""
    pos = [int(v) for v in pos]
    vel = [int(v) for v in vel]
    out = [tuple(pos)]
    for _ in range(q - 1):
        for a in range(2):
            x = pos[a] + vel[a]
            while x < 0 or x > limits[a]:
                if x < 0:
                    x = -x
                else:
                    x = 2 * limits[a] - x
                vel[a] = -vel[a]
            pos[a] = x
        out.append(tuple(pos))
    return out


def render_sprites(m, n, q, sprites):
    """Video ``(q, m, n)`` from ``(pattern, pos, vel)`` triples; overlaps keep the max."""
    video = np.zeros((q, m, n))
    for pattern, pos, vel in sprites:
        h, w = pattern.shape
        for t, (y, x) in enumerate(trajectory(pos, vel, (m - h, n - w), q)):
            np.maximum(video[t, y:y + h, x:x + w], pattern, out=video[t, y:y + h, x:x + w])
    return video


def _patterns(cfg, rng, count, images):
    out = []
    for _ in range(count):
        size = int(rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1))
        amp = float(rng.uniform(*cfg.intensity))
        if images is None:
            out.append(blob(size, amp))
        else:
            img = images[int(rng.integers(len(images)))]
            zoomed = ndimage.zoom(img, (size / img.shape[0], size / img.shape[1]), order=1)
            out.append(amp * np.clip(zoomed[:size, :size], 0.0, 1.0))
    return out


def gen_sparse_motion(cfg, seed=None, images=None):
    """Sparse foreground matrix ``(p, q)`` of sprites moving on straight bouncing paths."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    count = int(rng.integers(cfg.sprite_count[0], cfg.sprite_count[1] + 1))
    sprites = []
    for pattern in _patterns(cfg, rng, count, images):
        h, w = pattern.shape
        pos = (int(rng.integers(0, cfg.m - h + 1)), int(rng.integers(0, cfg.n - w + 1)))
        vel = tuple(int(v) for v in rng.integers(cfg.sprite_speed[0], cfg.sprite_speed[1] + 1, size=2))
        sprites.append((pattern, pos, vel))
    return reshape_matrix(render_sprites(cfg.m, cfg.n, cfg.q, sprites))


def compose_and_normalize(L_raw, S_raw):
    """Map ``D = L + S`` affinely onto [0, 1]; the offset is folded into the background.

    Returns ``(D, L_true, S_true)`` with ``min(D) = 0``, ``max(D) = 1``.
    """
    L_raw = np.asarray(L_raw, dtype=float)
    S_raw = np.asarray(S_raw, dtype=float)
    if L_raw.shape != S_raw.shape:
        raise ValueError("L and S shapes differ")
    D_raw = L_raw + S_raw
    lo, hi = float(D_raw.min()), float(D_raw.max())
    if hi == lo:
        raise ValueError("cannot normalise a constant data matrix")
    D = (D_raw - lo) / (hi - lo)
    S_true = S_raw / (hi - lo)
    L_true = D - S_true
    return D, L_true, S_true


def idx_read(path):
    """Parse an IDX3 unsigned-byte image file into ``(count, rows, cols)`` floats in [0, 1]."""
    with open(path, "rb") as fh:
        blob_ = fh.read()
    return idx_parse(blob_)


def idx_parse(blob_):
    if len(blob_) < 4:
        raise FormatError("IDX file truncated inside magic number", offset=len(blob_))
    (magic,) = struct.unpack_from(">I", blob_, 0)
    if magic != IDX_MAGIC:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{IDX_MAGIC:08x}", offset=0)
    if len(blob_) < 16:
        raise FormatError("IDX file truncated inside dimension header", offset=len(blob_))
    count, rows, cols = struct.unpack_from(">III", blob_, 4)
    need = 16 + count * rows * cols
    if len(blob_) < need:
        raise FormatError(f"IDX pixel data truncated: need {need} bytes, have {len(blob_)}", offset=len(blob_))
    pix = np.frombuffer(blob_, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pix.reshape(count, rows, cols).astype(float) / 255.0


def make_sample(cfg, seed, godec_cfg=None, images=None):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_low, s_fg, s_godec = (int(v) for v in ss.generate_state(3))
    L_raw = gen_lowrank(cfg.m, cfg.n, cfg.q, cfg.rank, s_low)
    S_raw = gen_sparse_motion(cfg, s_fg, images)
    D, L_true, S_true = compose_and_normalize(L_raw, S_raw)
    if godec_cfg is None:
        # normalisation adds a constant, so the background has rank up to r + 1
        godec_cfg = GoDecConfig(rank_g=min(cfg.rank + 1, cfg.q - 1))
    prior = godec_mask(D, godec_cfg, s_godec)
    return Sample(D, L_true, S_true, prior.W_hat)


def build_dataset(cfg, godec_cfg=None):
    """Generate, precompute masks, and split into ``(train, test)`` by seeded shuffle."""
    images = idx_read(cfg.idx_path) if cfg.foreground == IDX else None
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_sequences)
    samples = [make_sample(cfg, s, godec_cfg, images) for s in seeds]
    order = np.random.default_rng(cfg.seed).permutation(cfg.num_sequences)
    n_test = int(round(cfg.num_sequences * cfg.test_fraction))
    test = [samples[i] for i in order[:n_test]]
    train = [samples[i] for i in order[n_test:]]
    return Dataset(train, test, cfg.m, cfg.n, cfg.q, {"seed": cfg.seed})


def save_dataset(path, ds):
    """``DSTD1`` + uint32 m, n, q, n_train, n_test + per-sample D/L/S/W_hat float64 LE."""
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<5I", ds.m, ds.n, ds.q, len(ds.train), len(ds.test)))
        for s in ds.train + ds.test:
            for X in (s.D, s.L_true, s.S_true, s.W_hat):
                fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        blob_ = fh.read()
    if blob_[:5] != CACHE_MAGIC:
        raise FormatError(f"bad dataset cache magic {blob_[:5]!r}", offset=0)
    if len(blob_) < 25:
        raise FormatError("dataset cache truncated in header", offset=len(blob_))
    m, n, q, n_train, n_test = struct.unpack_from("<5I", blob_, 5)
    p = m * n
    need = 25 + (n_train + n_test) * 4 * p * q * 8
    if len(blob_) != need:
        raise FormatError(f"dataset cache has {len(blob_)} bytes, header implies {need}", offset=len(blob_))
    arr = np.frombuffer(blob_, "<f8", offset=25).reshape(n_train + n_test, 4, p, q)
    samples = [Sample(*(a.copy() for a in rec)) for rec in arr]
    return Dataset(samples[:n_train], samples[n_train:], m, n, q)
