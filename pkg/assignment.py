"""
ITC — Binarization of the partial transport plan
Turns the continuous prev/gen plans into a one-to-one source→destination
assignment by repeated row-argmax proposals and column-argmax acceptance,
suppressing losing entries by a large value v.

The working matrix has 2L source rows (L previous tokens, then L wildcards)
and L destination columns. Wildcard k may only serve destination k; every
other wildcard entry is -inf and can never be picked.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from _itc_common import ConfigError, NumericalError
from ot_solver import TransportPair

logger = logging.getLogger(__name__)


@dataclass
class BinarizeConfig:
    v: float = 1e6
    max_rounds: Optional[int] = None         # None: 2 * L * L

    def __post_init__(self):
        if not self.v > 1.0:
            raise ConfigError(f"suppression value v must exceed 1, got {self.v}")
        if self.max_rounds is not None:
            if int(self.max_rounds) < 1:
                raise ConfigError(f"max_rounds must be >= 1, got {self.max_rounds}")
            self.max_rounds = int(self.max_rounds)

    def round_limit(self, L: int) -> int:
        return 2 * L * L if self.max_rounds is None else self.max_rounds


@dataclass
class AssignmentPair:
    """prev[i, j] = 1: destination j copies previous token i. gen[j] = 1: j is generated."""

    prev: np.ndarray
    gen: np.ndarray
    rounds: int = field(default=0, compare=False)

    def __post_init__(self):
        self.prev = np.asarray(self.prev).astype(np.int8)
        self.gen = np.asarray(self.gen).astype(np.int8)
        self.validate()

    @property
    def size(self) -> int:
        return self.gen.shape[0]

    def validate(self) -> None:
        L = self.gen.shape[0]
        if self.prev.shape != (L, L):
            raise ConfigError(f"assignment shapes disagree: {self.prev.shape} vs {self.gen.shape}")
        if self.prev.sum(axis=1).max(initial=0) > 1:
            raise NumericalError("a previous token is assigned to more than one destination")
        per_dest = self.prev.sum(axis=0) + self.gen
        if not (per_dest == 1).all():
            j = int(np.argmax(per_dest != 1))
            raise NumericalError(f"destination {j} has {int(per_dest[j])} sources, expected 1")

    def sources(self) -> np.ndarray:
        """Source index per destination, -1 where the wildcard was chosen."""
        src = np.full(self.size, -1, dtype=np.int64)
        rows, cols = np.nonzero(self.prev)
        src[cols] = rows
        return src

    def as_plan(self) -> TransportPair:
        return TransportPair(prev=self.prev.astype(np.float64), gen=self.gen.astype(np.float64))


def working_matrix(plan: TransportPair, allowed: Optional[np.ndarray] = None) -> np.ndarray:
    """(2L, L): prev rows on top, wildcard rows as a diagonal below, -inf where forbidden."""
    L = plan.size
    W = np.full((2 * L, L), -np.inf)
    if allowed is None:
        W[:L] = plan.prev
    else:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != (L, L):
            raise ConfigError(f"allowed mask must be {L}x{L}, got {allowed.shape}")
        W[:L] = np.where(allowed, plan.prev, -np.inf)
    W[L + np.arange(L), np.arange(L)] = plan.gen
    return W


def binarize(
    plan: TransportPair,
    cfg: Optional[BinarizeConfig] = None,
    *,
    allowed: Optional[np.ndarray] = None,
    history: Optional[List[np.ndarray]] = None,
) -> AssignmentPair:
    """
    Greedy binarization. Each round every source row proposes its argmax
    destination and each destination accepts its best proposer (lowest row on
    ties). Only losing proposals drop by v, so a source that lost one
    destination proposes its next best and can take over a destination held
    by a weaker entry. A winner is displaced only by a larger entry, or an
    equal one from a lower row.

    Stops when every destination has a winner and the winner set matches the
    previous round. `allowed` (L, L) forbids prev entries (e.g. past the
    displacement cap). `history`, if given, receives the winner row per
    destination for every round (-1 = none).
    """
    cfg = cfg or BinarizeConfig()
    L = plan.size
    limit = cfg.round_limit(L)
    if limit < L:
        raise ConfigError(f"max_rounds ({limit}) must be >= L ({L})")
    if max(plan.prev.max(initial=0.0), plan.gen.max(initial=0.0)) >= cfg.v:
        raise ConfigError(f"suppression value v={cfg.v:g} must exceed every plan entry")

    W = working_matrix(plan, allowed)
    n = 2 * L
    rows = np.arange(n)
    cols = np.arange(L)
    previous = None
    out = None

    for t in range(1, limit + 1):
        target = W.argmax(axis=1)
        initial = np.zeros((n, L), dtype=bool)
        initial[rows, target] = True

        C = np.where(initial, W, -np.inf)
        source = C.argmax(axis=0)
        out = np.zeros((n, L), dtype=bool)
        out[source, cols] = True
        out &= initial

        won = out.any(axis=0)
        winners = np.where(won, source, -1)

        losers = ~out & initial
        W = W - cfg.v * losers

        if history is not None:
            history.append(winners.copy())
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug("binarize round %d: winners %s", t, winners.tolist())

        if won.all() and previous is not None and np.array_equal(winners, previous):
            break
        previous = winners
    else:
        raise NumericalError(
            f"binarization did not settle within {limit} rounds (L={L})"
        )

    return AssignmentPair(prev=out[:L], gen=np.diagonal(out[L:]), rounds=t)
