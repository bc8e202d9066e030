"""
ITC — Copy-or-generate decoder
From the world model's per-position distributions and the previous frame to
the final next-frame tokens: affinity → Sinkhorn → binarization → copy the
assigned previous token, or sample a fresh one where the wildcard won.

Positions outside the OT region take the transformer's sample directly.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from _itc_common import ConfigError, GridShape, NumericalError, substream
from assignment import AssignmentPair, BinarizeConfig, binarize
from ot_solver import OtConfig, build_affinity, solve_decode_ot

logger = logging.getLogger(__name__)

PROB_TOL = 1e-6


# ── Frames and predictions ─────────────────────────────────────────────────────

@dataclass
class FrameTokens:
    tokens: np.ndarray
    shape: GridShape

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.tokens.shape[0] != self.shape.size:
            raise ConfigError(
                f"frame has {self.tokens.shape[0]} tokens, grid "
                f"{self.shape.height}x{self.shape.width} needs {self.shape.size}"
            )
        if self.tokens.size and self.tokens.min() < 0:
            raise ConfigError("token identifiers must be >= 0")

    def grid(self) -> np.ndarray:
        return self.tokens.reshape(self.shape.height, self.shape.width)

    def __eq__(self, other):
        if not isinstance(other, FrameTokens):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.tokens, other.tokens)


@dataclass
class PredictionGrid:
    """probs[j] is the categorical distribution over the codebook at position j."""

    probs: np.ndarray
    shape: GridShape

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.shape.size:
            raise ConfigError(
                f"prediction grid must be ({self.shape.size}, K), got {self.probs.shape}"
            )
        if (self.probs < 0).any():
            raise NumericalError("prediction grid holds negative probabilities")
        err = np.abs(self.probs.sum(axis=1) - 1.0).max()
        if err > PROB_TOL:
            raise NumericalError(f"prediction rows must sum to 1 (max error {err:.2e})")

    @property
    def num_codes(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def from_logits(cls, logits, shape: GridShape) -> "PredictionGrid":
        z = np.asarray(logits, dtype=np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return cls(e / e.sum(axis=-1, keepdims=True), shape)

    @classmethod
    def one_hot(cls, frame: FrameTokens, num_codes: int) -> "PredictionGrid":
        probs = np.zeros((frame.shape.size, num_codes))
        probs[np.arange(frame.shape.size), frame.tokens] = 1.0
        return cls(probs, frame.shape)


# ── Config ─────────────────────────────────────────────────────────────────────

class SamplingMode(str, Enum):
    CATEGORICAL = "categorical"
    GREEDY = "greedy"


@dataclass
class DecodeConfig:
    ot: OtConfig = field(default_factory=OtConfig)
    bin: BinarizeConfig = field(default_factory=BinarizeConfig)
    ot_region: Optional[np.ndarray] = None   # None → OT everywhere
    sampling: SamplingMode = SamplingMode.CATEGORICAL
    rng_seed: int = 0

    def __post_init__(self):
        self.sampling = SamplingMode(self.sampling)
        if self.ot_region is not None:
            self.ot_region = np.asarray(self.ot_region).astype(bool).reshape(-1)

    def region(self, shape: GridShape) -> np.ndarray:
        if self.ot_region is None:
            return np.ones(shape.size, dtype=bool)
        if self.ot_region.shape[0] != shape.size:
            raise ConfigError(
                f"OT region mask has {self.ot_region.shape[0]} entries, frame has {shape.size}"
            )
        return self.ot_region


def full_mask(shape: GridShape) -> np.ndarray:
    return np.ones(shape.size, dtype=bool)


def interior_mask(shape: GridShape, border: int = 1) -> np.ndarray:
    """OT on interior cells, transformer output on a `border`-cell frame."""
    if border < 0:
        raise ConfigError(f"border must be >= 0, got {border}")
    xy = shape.coords()
    x, y = xy[:, 0], xy[:, 1]
    return (
        (x >= border) & (x < shape.width - border)
        & (y >= border) & (y < shape.height - border)
    )


# ── Sampling ───────────────────────────────────────────────────────────────────

def sample_token(p, mode, rng: Optional[np.random.Generator] = None) -> int:
    """Categorical draw from p, or its argmax (lowest index on ties)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ConfigError(f"distribution must be a non-empty vector, got shape {p.shape}")
    if (p < 0).any() or abs(p.sum() - 1.0) > PROB_TOL:
        raise NumericalError(f"distribution is not normalized (sum {p.sum():.8f})")
    mode = SamplingMode(mode)
    if mode is SamplingMode.GREEDY:
        return int(np.argmax(p))
    if rng is None:
        raise ConfigError("categorical sampling needs a generator")
    return int(rng.choice(p.size, p=p / p.sum()))


def position_rng(seed: int, position: int) -> np.random.Generator:
    """Per-position substream; the same (seed, position) always yields the same draw."""
    return substream(seed, 0x17C, position)


# ── Decoding ───────────────────────────────────────────────────────────────────

@dataclass
class DecodeResult:
    frame: FrameTokens
    sources: np.ndarray                      # previous index copied per position, -1 otherwise
    assignment: Optional[AssignmentPair]


def _check_inputs(pred: PredictionGrid, prev: FrameTokens) -> None:
    if pred.shape != prev.shape:
        raise ConfigError(
            f"prediction grid {pred.shape.height}x{pred.shape.width} does not match "
            f"previous frame {prev.shape.height}x{prev.shape.width}"
        )
    if prev.tokens.max(initial=0) >= pred.num_codes:
        raise ConfigError(
            f"previous frame holds token ids >= codebook size {pred.num_codes}"
        )


def direct_decode(pred: PredictionGrid, cfg: Optional[DecodeConfig] = None) -> FrameTokens:
    """Transformer output only: sample every position from its own substream."""
    cfg = cfg or DecodeConfig()
    out = np.array([
        sample_token(pred.probs[j], cfg.sampling, position_rng(cfg.rng_seed, j))
        for j in range(pred.shape.size)
    ], dtype=np.int64)
    return FrameTokens(out, pred.shape)


def decode_next_frame_detailed(
    pred: PredictionGrid, prev: FrameTokens, cfg: Optional[DecodeConfig] = None
) -> DecodeResult:
    cfg = cfg or DecodeConfig()
    _check_inputs(pred, prev)
    region = cfg.region(pred.shape)
    L = pred.shape.size

    assignment = None
    src = np.full(L, -1, dtype=np.int64)
    if region.any():
        aff = build_affinity(pred, prev, cfg.ot)
        plan = solve_decode_ot(aff, cfg.ot)
        # copies only along pairs the plan actually moves mass over
        allowed = np.isfinite(aff.prev) & (plan.prev > 0)
        assignment = binarize(plan, cfg.bin, allowed=allowed)
        src = assignment.sources()

    out = np.empty(L, dtype=np.int64)
    sources = np.full(L, -1, dtype=np.int64)
    for j in range(L):
        if region[j] and src[j] >= 0:
            if assignment.gen[j]:
                raise NumericalError(f"destination {j} is both copied and generated")
            out[j] = prev.tokens[src[j]]
            sources[j] = src[j]
        else:
            out[j] = sample_token(pred.probs[j], cfg.sampling, position_rng(cfg.rng_seed, j))

    copied = sources[sources >= 0]
    if np.unique(copied).size != copied.size:
        raise NumericalError("a previous token was copied to more than one destination")
    logger.debug("decode: %d/%d positions copied, %d in OT region",
                 copied.size, L, int(region.sum()))
    return DecodeResult(FrameTokens(out, pred.shape), sources, assignment)


def decode_next_frame(
    pred: PredictionGrid, prev: FrameTokens, cfg: Optional[DecodeConfig] = None
) -> FrameTokens:
    return decode_next_frame_detailed(pred, prev, cfg).frame
