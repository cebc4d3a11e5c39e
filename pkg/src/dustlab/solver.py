"""Iterative L+S solvers: plain PCP by inexact ALM, and the graph-regularized ADMM.

The graph-regularized scheme splits ``L`` into two auxiliary copies ``U1`` and
``U2`` that carry the spatial and temporal Laplacian penalties, so each
sub-step has a closed form:

* ``U1 = (2 g1 A_s + mu I)^-1 (mu L + Y2)``
* ``U2 = (mu L + Y3) (2 g2 A_t + mu I)^-1``
* ``L``  by singular value thresholding,
* ``S``  by reweighted soft thresholding,

followed by dual ascent on the three equality constraints.

Two L-steps are available. ``"merged"`` is the ISTA step with all three
penalties folded into the single residual ``D - L - S + U1 + U2 + (Y1+Y2+Y3)/mu``;
it is the form the unfolded network mirrors, but as a fixed-point iteration
it is not contractive. ``"exact"`` minimises the sum of the three penalties
(curvature 3 in ``L``), which is the one that converges and is the default.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, NumericalError
from .graph import trace_quad
from .linalg import ShiftedSolver, svd_thin
from .prox import soft_threshold, svt

L_STEPS = ("exact", "merged")


@dataclass(frozen=True)
class SolverConfig:
    lam: float = None  # None -> 1/sqrt(max(p, q))
    gamma1: float = 0.1
    gamma2: float = 0.1
    mu0: float = None  # None -> 1.25 / ||D||_2
    mu_growth: float = 1.05
    mu_max: float = 1e7
    c: float = 1.0
    max_iter: int = 500
    tol_primal: float = 1e-6
    l_step: str = "exact"
    use_aux: bool = True

    def __post_init__(self):
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma1 and gamma2 must be non-negative")
        if self.mu0 is not None and not self.mu0 > 0:
            raise ValueError("mu0 must be positive")
        if self.mu_growth < 1:
            raise ValueError("mu_growth must be >= 1")
        if not self.c > 0:
            raise ValueError("Lipschitz constant c must be positive")
        if self.max_iter < 1 or not self.tol_primal > 0:
            raise ValueError("max_iter must be >= 1 and tol_primal > 0")
        if self.l_step not in L_STEPS:
            raise ValueError(f"l_step must be one of {L_STEPS}, got {self.l_step!r}")

    def resolve(self, D):
        """Fill in data-dependent defaults (lambda, mu0)."""
        p, q = D.shape
        lam = self.lam if self.lam is not None else 1.0 / np.sqrt(max(p, q))
        mu0 = self.mu0
        if mu0 is None:
            spec = float(np.linalg.norm(D, 2)) if D.size else 0.0
            mu0 = 1.25 / spec if spec > 0 else 1.0
        return replace(self, lam=lam, mu0=mu0)


@dataclass
class SolverState:
    L: np.ndarray
    S: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    Y1: np.ndarray
    Y2: np.ndarray
    Y3: np.ndarray
    mu: float

    @classmethod
    def zeros(cls, shape, mu):
        z = lambda: np.zeros(shape)  # noqa: E731
        return cls(z(), z(), z(), z(), z(), z(), z(), float(mu))


@dataclass
class SolveReport:
    iterations: int = 0
    objective_trace: list = field(default_factory=list)
    primal_residuals: list = field(default_factory=list)
    converged: bool = False


def objective(L, S, W, pair, lam, gamma1, gamma2):
    """``||L||_* + lam ||W o S||_1 + g1 Tr(L^T A_s L) + g2 Tr(L A_t L^T)``."""
    L = np.asarray(L, dtype=float)
    S = np.asarray(S, dtype=float)
    if L.shape != S.shape or np.shape(W) not in ((), L.shape):
        raise ValueError("L, S and W must share a shape")
    nuclear = float(np.sum(svd_thin(L)[1]))
    spatial, temporal = trace_quad(L, pair)
    return nuclear + lam * float(np.sum(np.abs(W * S))) + gamma1 * spatial + gamma2 * temporal


def update_U1(L, Y2, mu, gamma1, A_s, solver=None):
    if not mu > 0:
        raise ValueError("mu must be positive")
    solver = solver or ShiftedSolver(A_s, 2.0 * gamma1)
    return solver.solve(mu, mu * L + Y2)


def update_U2(L, Y3, mu, gamma2, A_t, solver=None):
    if not mu > 0:
        raise ValueError("mu must be positive")
    solver = solver or ShiftedSolver(A_t, 2.0 * gamma2)
    return solver.solve(mu, (mu * L + Y3).T).T


def _merged_argument(state, D, cfg):
    s = state
    inner = s.S - D - s.U1 - s.U2 - (s.Y1 + s.Y2 + s.Y3) / s.mu
    return (1.0 - 1.0 / cfg.c) * s.L - inner / cfg.c


def update_L_ista(state, D, cfg, with_report=False):
    """ISTA step on the merged-residual L-subproblem (H_i = I, Lipschitz constant ``c``)."""
    res = svt(_merged_argument(state, D, cfg), 1.0 / (state.mu * cfg.c))
    return res if with_report else res.value


def update_L_exact(state, D, cfg, with_report=False):
    """Exact minimiser of the L-subproblem with the penalties kept separate."""
    s = state
    Z = D - s.S + s.Y1 / s.mu
    n = 1
    if cfg.use_aux:
        Z = Z + s.U1 - s.Y2 / s.mu + s.U2 - s.Y3 / s.mu
        n = 3
    res = svt(Z / n, 1.0 / (n * s.mu))
    return res if with_report else res.value


def update_S_ista(state, D, W, cfg, lam):
    W = np.asarray(W, dtype=float)
    if np.any(W < 0):
        raise ValueError("weights must be non-negative")
    s = state
    arg = (1.0 - 1.0 / cfg.c) * s.S - (s.L - D - s.Y1 / s.mu) / cfg.c
    return soft_threshold(arg, (lam / (s.mu * cfg.c)) * W)


def dual_update(state, D, cfg):
    s = state
    return replace(
        s,
        Y1=s.Y1 + s.mu * (D - s.L - s.S),
        Y2=s.Y2 + s.mu * (s.L - s.U1),
        Y3=s.Y3 + s.mu * (s.L - s.U2),
        mu=min(cfg.mu_growth * s.mu, cfg.mu_max),
    )


def _check_finite(it, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite iterate at iteration {it}", iteration=it)


def solve(D, pair, W, cfg=None):
    """Graph-regularized L+S decomposition. Returns ``(L, S, SolveReport)``."""
    D = np.asarray(D, dtype=float)
    cfg = (cfg or SolverConfig()).resolve(D)
    p, q = D.shape
    if pair.A_s.shape != (p, p) or pair.A_t.shape != (q, q):
        raise ValueError("Laplacian pair does not match the shape of D")
    W = np.broadcast_to(np.asarray(W, dtype=float), D.shape)
    state = SolverState.zeros(D.shape, cfg.mu0)
    spatial = ShiftedSolver(pair.A_s, 2.0 * cfg.gamma1)
    temporal = ShiftedSolver(pair.A_t, 2.0 * cfg.gamma2)
    l_update = update_L_exact if cfg.l_step == "exact" else update_L_ista
    report = SolveReport()

    with np.errstate(over="ignore", invalid="ignore"):
        return _solve_loop(D, pair, W, cfg, state, spatial, temporal, l_update, report)


def _solve_loop(D, pair, W, cfg, state, spatial, temporal, l_update, report):
    dnorm = float(np.linalg.norm(D))
    for it in range(1, cfg.max_iter + 1):
        if cfg.use_aux:
            state.U1 = update_U1(state.L, state.Y2, state.mu, cfg.gamma1, pair.A_s, spatial)
            state.U2 = update_U2(state.L, state.Y3, state.mu, cfg.gamma2, pair.A_t, temporal)
        try:
            state.L = l_update(state, D, cfg)
        except NumericalError as exc:
            raise DivergenceError(f"L-step blew up at iteration {it}", iteration=it) from exc
        state.S = update_S_ista(state, D, W, cfg, cfg.lam)
        _check_finite(it, state.L, state.S, state.U1, state.U2)

        r = (
            float(np.linalg.norm(D - state.L - state.S)),
            float(np.linalg.norm(state.L - state.U1)) if cfg.use_aux else 0.0,
            float(np.linalg.norm(state.L - state.U2)) if cfg.use_aux else 0.0,
        )
        report.primal_residuals.append(r)
        report.objective_trace.append(
            objective(state.L, state.S, W, pair, cfg.lam, cfg.gamma1, cfg.gamma2)
        )
        report.iterations = it
        if max(r) <= cfg.tol_primal * dnorm:
            report.converged = True
            break
        if cfg.use_aux:
            state = dual_update(state, D, cfg)
        else:
            state.Y1 = state.Y1 + state.mu * (D - state.L - state.S)
            state.mu = min(cfg.mu_growth * state.mu, cfg.mu_max)
        _check_finite(it, state.Y1, state.Y2, state.Y3)
    return state.L, state.S, report


def rpca_pcp(D, lam=None, cfg=None, trajectory=None):
    """Principal component pursuit by inexact augmented Lagrangian.

    ``trajectory``, if a list, receives ``(L, S)`` after every iteration.
    """
    D = np.asarray(D, dtype=float)
    cfg = cfg or SolverConfig()
    if lam is not None:
        if not lam > 0:
            raise ValueError("lambda must be positive")
        cfg = replace(cfg, lam=lam)
    cfg = cfg.resolve(D)
    L = np.zeros_like(D)
    S = np.zeros_like(D)
    Y = np.zeros_like(D)
    mu = cfg.mu0
    dnorm = float(np.linalg.norm(D))
    report = SolveReport()
    for it in range(1, cfg.max_iter + 1):
        lres = svt(D - S + Y / mu, 1.0 / mu)
        L = lres.value
        S = soft_threshold(D - L + Y / mu, cfg.lam / mu)
        _check_finite(it, L, S)
        R = D - L - S
        r = float(np.linalg.norm(R))
        nuclear = float(np.sum(np.maximum(lres.factors[1] - lres.threshold, 0.0))) if lres.factors else 0.0
        report.objective_trace.append(nuclear + cfg.lam * float(np.sum(np.abs(S))))
        report.primal_residuals.append((r,))
        report.iterations = it
        if trajectory is not None:
            trajectory.append((L.copy(), S.copy()))
        if r <= cfg.tol_primal * dnorm:
            report.converged = True
            break
        Y = Y + mu * R
        mu = min(cfg.mu_growth * mu, cfg.mu_max)
    return L, S, report
