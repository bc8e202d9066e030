"""
Shared helpers for the ITC modules.
Provides the error hierarchy, logging setup, seeded random substreams and
grid geometry.
"""

import hashlib
import logging
import random
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

LOG_FORMAT = "%(asctime)s - %(levelname)s - [itc] %(message)s"


# ── Errors ─────────────────────────────────────────────────────────────────────

class ItcError(Exception):
    """Base error. `exit_code` is what the CLI returns when this escapes."""

    exit_code = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage


class ConfigError(ItcError):
    """Invalid configuration, mismatched geometry, or unusable inputs."""

    exit_code = 2


class NumericalError(ItcError):
    """Infeasible transport, runaway binarization, non-finite loss."""

    exit_code = 3


class StageError(ItcError):
    """A pipeline stage failed; keeps the exit code of the underlying error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}", stage=stage)
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


# ── Logging ────────────────────────────────────────────────────────────────────

def setup_logging(verbosity: int = 0) -> None:
    """
    Configure the root handler once.
    verbosity: -1 → WARNING, 0 → INFO, 1+ → DEBUG.
    """
    if verbosity < 0:
        level = logging.WARNING
    elif verbosity == 0:
        level = logging.INFO
    else:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


# ── Seeding ────────────────────────────────────────────────────────────────────

def substream(seed: int, *keys: int) -> np.random.Generator:
    """
    Counter-based generator for one named substream of `seed`.
    Each key path gets its own Philox stream, so results do not depend on
    how many other streams were drawn from or in which order.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seed python, numpy and torch; optionally pin torch to deterministic kernels."""
    import torch

    random.seed(seed)
    np.random.seed(seed & 0xFFFFFFFF)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def fingerprint(*arrays) -> str:
    """Short sha256 prefix over the raw bytes of the given arrays."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


# ── Grid geometry ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class GridShape:
    """Token grid geometry; tokens are stored row-major."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def size(self) -> int:
        return self.height * self.width

    def coords(self) -> np.ndarray:
        """(L, 2) integer array of (x, y) per row-major position."""
        return _coords(self.height, self.width)

    def index(self, x: int, y: int) -> int:
        return y * self.width + x


@lru_cache(maxsize=32)
def _coords(height: int, width: int) -> np.ndarray:
    ys, xs = np.divmod(np.arange(height * width), width)
    out = np.stack([xs, ys], axis=1)
    out.setflags(write=False)
    return out
