"""
ITC — Optimal transport solver
Affinity construction for copy-or-generate decoding, the entropic Sinkhorn
solver, and the stacked (2L)x(2L) decode problem.

Affinities use -inf as the "never" sentinel; costs are the negated
affinities, so forbidden pairs carry +inf cost and an exactly-zero plan entry.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from _itc_common import ConfigError, GridShape, NumericalError

logger = logging.getLogger(__name__)

NEG_INF = -np.inf
BENCH_COST_SCALE = 0.1                   # benchmark costs are uniform on [0, scale]


# ── Types ──────────────────────────────────────────────────────────────────────

class GridCoord(NamedTuple):
    x: int
    y: int


@dataclass
class OtConfig:
    c_d: float = 0.6
    c_w: float = 0.3
    cap: float = 4.0
    epsilon: float = 1e-5
    iterations: int = 10

    def __post_init__(self):
        if self.c_d < 0:
            raise ConfigError(f"c_d must be >= 0, got {self.c_d}")
        if self.cap < 0:
            raise ConfigError(f"cap must be >= 0, got {self.cap}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if int(self.iterations) < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        self.iterations = int(self.iterations)


@dataclass
class AffinityPair:
    """prev[i, j]: previous token i explaining destination j. gen[j]: wildcard at j."""

    prev: np.ndarray
    gen: np.ndarray

    def __post_init__(self):
        self.prev = np.asarray(self.prev, dtype=np.float64)
        self.gen = np.asarray(self.gen, dtype=np.float64)
        L = self.gen.shape[0] if self.gen.ndim == 1 else 0
        if L == 0 or self.prev.shape != (L, L):
            raise ConfigError(
                f"affinity shapes disagree: prev {self.prev.shape}, gen {self.gen.shape}"
            )
        if np.isnan(self.prev).any() or np.isposinf(self.prev).any():
            raise ConfigError("prev affinities must be finite or -inf")
        if not np.isfinite(self.gen).all():
            raise ConfigError("gen affinities must be finite")

    @property
    def size(self) -> int:
        return self.gen.shape[0]


@dataclass
class TransportPair:
    """Left-column slices of the stacked plan: prev (L, L) and diag of the gen block."""

    prev: np.ndarray
    gen: np.ndarray

    def __post_init__(self):
        self.prev = np.asarray(self.prev, dtype=np.float64)
        self.gen = np.asarray(self.gen, dtype=np.float64)
        L = self.gen.shape[0] if self.gen.ndim == 1 else 0
        if L == 0 or self.prev.shape != (L, L):
            raise ConfigError(
                f"plan shapes disagree: prev {self.prev.shape}, gen {self.gen.shape}"
            )
        if not (np.isfinite(self.prev).all() and np.isfinite(self.gen).all()):
            raise NumericalError("transport plan contains non-finite entries")
        if (self.prev < 0).any() or (self.gen < 0).any():
            raise NumericalError("transport plan contains negative entries")

    @property
    def size(self) -> int:
        return self.gen.shape[0]

    def column_totals(self) -> np.ndarray:
        return self.prev.sum(axis=0) + self.gen


# ── Affinities ─────────────────────────────────────────────────────────────────

def distance_cost(a: GridCoord, b: GridCoord, cap: float) -> float:
    """Squared Euclidean distance, or +inf past the displacement cap."""
    d = (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2
    return float(d) if d <= cap else np.inf


def distance_matrix(shape: GridShape, cap: float) -> np.ndarray:
    """(L, L) matrix of `distance_cost` between every pair of grid positions."""
    xy = shape.coords()
    diff = xy[:, None, :] - xy[None, :, :]
    d = (diff ** 2).sum(axis=-1).astype(np.float64)
    d[d > cap] = np.inf
    return d


def build_affinity(pred, prev, cfg: OtConfig) -> AffinityPair:
    """
    pred: PredictionGrid (probs (L, K)); prev: FrameTokens.
    prev affinity = p_j[u_i] - c_d * D(i, j), -inf past the cap.
    gen affinity  = max_k p_j[k] - c_w.
    """
    if pred.shape != prev.shape:
        raise ConfigError(
            f"prediction grid {pred.shape.height}x{pred.shape.width} does not match "
            f"previous frame {prev.shape.height}x{prev.shape.width}"
        )
    probs = pred.probs
    K = probs.shape[1]
    if prev.tokens.max(initial=0) >= K:
        raise ConfigError(f"previous frame holds token ids >= codebook size {K}")
    row_err = np.abs(probs.sum(axis=1) - 1.0).max()
    if row_err > 1e-6:
        raise NumericalError(f"prediction rows must sum to 1 (max error {row_err:.2e})")

    # match[i, j] = <p_j, onehot(u_i)>
    match = probs[:, prev.tokens].T
    D = distance_matrix(pred.shape, cfg.cap)
    finite = np.isfinite(D)
    a_prev = np.full(D.shape, NEG_INF)
    a_prev[finite] = match[finite] - cfg.c_d * D[finite]
    a_gen = probs.max(axis=1) - cfg.c_w
    return AffinityPair(prev=a_prev, gen=a_gen)


# ── Sinkhorn ───────────────────────────────────────────────────────────────────

def _check_feasible(finite: np.ndarray) -> None:
    rows_ok = finite.any(axis=-1)
    cols_ok = finite.any(axis=-2)
    if not rows_ok.all():
        bad = np.argwhere(~rows_ok)[0]
        raise NumericalError(f"infeasible cost matrix: row {tuple(bad)} is entirely +inf")
    if not cols_ok.all():
        bad = np.argwhere(~cols_ok)[0]
        raise NumericalError(f"infeasible cost matrix: column {tuple(bad)} is entirely +inf")


def _marginal_errors(plan: np.ndarray, r: float, c: float) -> Tuple[float, float]:
    row = np.abs(plan.sum(axis=-1) - r).max()
    col = np.abs(plan.sum(axis=-2) - c).max()
    return float(row), float(col)


def sinkhorn(
    cost,
    epsilon: float,
    iterations: int,
    *,
    log_domain: bool = True,
    return_info: bool = False,
) -> Union[np.ndarray, Tuple[np.ndarray, dict]]:
    """
    Entropic OT with uniform marginals r = 1/n, c = 1/m.

    cost: (..., n, m) with +inf marking forbidden pairs. Leading dimensions
    are solved independently. Each iteration scales rows then columns, so the
    returned plan meets the column marginals to rounding error.

    log_domain=False runs the plain scaling form (K = exp(-C/eps)); it is only
    usable where exp(-C/eps) stays in range.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim < 2:
        raise ConfigError(f"cost must be at least 2-D, got shape {C.shape}")
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    if int(iterations) < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    if np.isnan(C).any() or np.isneginf(C).any():
        raise NumericalError("cost matrix contains NaN or -inf")
    finite = np.isfinite(C)
    _check_feasible(finite)

    n, m = C.shape[-2:]
    r, c = 1.0 / n, 1.0 / m
    info = {"row_deviation": [], "col_deviation": []}

    if log_domain:
        log_K = np.full(C.shape, -np.inf)
        log_K[finite] = -C[finite] / epsilon
        log_r, log_c = -np.log(n), -np.log(m)
        log_u = np.zeros(C.shape[:-1])
        log_v = np.zeros(C.shape[:-2] + (m,))
        for _ in range(int(iterations)):
            log_u = log_r - logsumexp(log_K + log_v[..., None, :], axis=-1)
            log_v = log_c - logsumexp(log_K + log_u[..., :, None], axis=-2)
            if return_info:
                P = np.exp(log_u[..., :, None] + log_K + log_v[..., None, :])
                row, col = _marginal_errors(P, r, c)
                info["row_deviation"].append(row)
                info["col_deviation"].append(col)
        plan = np.exp(log_u[..., :, None] + log_K + log_v[..., None, :])
    else:
        K = np.zeros(C.shape)
        K[finite] = np.exp(-C[finite] / epsilon)
        u = np.ones(C.shape[:-1])
        v = np.ones(C.shape[:-2] + (m,))
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            for _ in range(int(iterations)):
                u = r / np.einsum("...ij,...j->...i", K, v)
                v = c / np.einsum("...ij,...i->...j", K, u)
                if return_info:
                    P = u[..., :, None] * K * v[..., None, :]
                    row, col = _marginal_errors(P, r, c)
                    info["row_deviation"].append(row)
                    info["col_deviation"].append(col)
            plan = u[..., :, None] * K * v[..., None, :]
        if not (np.isfinite(u).all() and np.isfinite(v).all() and np.isfinite(plan).all()):
            raise NumericalError(
                f"plain Sinkhorn overflowed at epsilon={epsilon:g}; use the log-domain path"
            )

    if logger.isEnabledFor(logging.DEBUG):
        row, col = _marginal_errors(plan, r, c)
        logger.debug("sinkhorn %dx%d eps=%g T=%d: row dev %.3e, col dev %.3e",
                     n, m, epsilon, iterations, row, col)
    if return_info:
        return plan, info
    return plan


def random_costs(rng: np.random.Generator, count: int, n: int,
                 scale: float = BENCH_COST_SCALE) -> np.ndarray:
    """(count, n, n) costs drawn uniformly from [0, scale]."""
    if not scale > 0:
        raise ConfigError(f"cost scale must be > 0, got {scale}")
    return rng.uniform(0.0, scale, size=(count, n, n))


def transport_cost(plan: np.ndarray, cost: np.ndarray) -> float:
    """<C, P> over the finite entries of C."""
    cost = np.asarray(cost, dtype=np.float64)
    finite = np.isfinite(cost)
    return float((plan[finite] * cost[finite]).sum())


# ── Decode problem ─────────────────────────────────────────────────────────────

def stacked_affinity(aff: AffinityPair) -> np.ndarray:
    """
    [[A_prev, 0],
     [A_gen,  0]]  of side 2L; the gen block is diagonal with -inf elsewhere
    and the right L columns are zero-affinity sinks for unused sources.
    """
    L = aff.size
    A = np.zeros((2 * L, 2 * L))
    A[:L, :L] = aff.prev
    gen_block = np.full((L, L), NEG_INF)
    np.fill_diagonal(gen_block, aff.gen)
    A[L:, :L] = gen_block
    return A


def solve_decode_ot(aff: AffinityPair, cfg: OtConfig) -> TransportPair:
    """Run Sinkhorn on -A for the stacked problem and return the real-destination slices."""
    L = aff.size
    plan = sinkhorn(-stacked_affinity(aff), cfg.epsilon, cfg.iterations)
    return TransportPair(
        prev=plan[:L, :L].copy(),
        gen=np.diagonal(plan[L:, :L]).copy(),
    )


def read_cost_text(text: str) -> np.ndarray:
    """
    Parse "n m" followed by n rows of m whitespace-separated reals
    ("inf" allowed) into an (n, m) array.
    """
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ConfigError("cost file is empty")
    try:
        n, m = (int(v) for v in lines[0].split())
        rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    except ValueError as err:
        raise ConfigError(f"cost file is malformed: {err}") from err
    if len(rows) != n or any(len(row) != m for row in rows):
        raise ConfigError(f"cost file header says {n}x{m} but the body does not match")
    return np.array(rows, dtype=np.float64)


def format_plan(plan: np.ndarray) -> str:
    """One row per line, 9 decimal digits."""
    return "\n".join(" ".join(f"{v:.9f}" for v in row) for row in np.atleast_2d(plan))


def plan_summary(plan: np.ndarray, cost: Optional[np.ndarray] = None) -> dict:
    n, m = plan.shape[-2:]
    row, col = _marginal_errors(plan, 1.0 / n, 1.0 / m)
    out = {"rows": int(n), "cols": int(m), "row_deviation": row, "col_deviation": col}
    if cost is not None:
        out["transport_cost"] = transport_cost(plan, cost)
    return out
