"""
ITC — Symbolic gridworld
A walled grid with one player, a goal, a few interior walls and creatures
that random-walk one cell at a time. Frames are rendered as one-hot cell
symbols and tokenized with 1x1xC patches, so every cell is one token.

Every entity moves at most one cell per step and creatures are never spawned
or removed inside an episode; any duplication or disappearance seen in an
imagined rollout therefore comes from the decoder, not the environment.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from _itc_common import ConfigError, GridShape, substream
from itc_decoder import FrameTokens
from tokenizer import Codebook, encode_frame, grow_from_frames

logger = logging.getLogger(__name__)

FLOOR, WALL, GOAL, PLAYER, CREATURE = range(5)
SYMBOLS = ("floor", "wall", "goal", "player", "creature")
ALPHABET_SIZE = len(SYMBOLS)

UP, DOWN, LEFT, RIGHT, NOOP = range(5)
ACTIONS = ("up", "down", "left", "right", "noop")
NUM_ACTIONS = len(ACTIONS)
_MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0), NOOP: (0, 0)}
_NEIGHBOURS = ((0, -1), (0, 1), (-1, 0), (1, 0))


@dataclass
class GridConfig:
    height: int = 6
    width: int = 6
    num_creatures: int = 2
    creature_prob: float = 0.5      # chance an episode contains creatures at all
    num_walls: int = 2              # interior walls besides the border
    max_steps: int = 100

    def __post_init__(self):
        if self.height < 3 or self.width < 3:
            raise ConfigError(f"grid must be at least 3x3, got {self.height}x{self.width}")
        if not 0.0 <= self.creature_prob <= 1.0:
            raise ConfigError(f"creature_prob must be in [0, 1], got {self.creature_prob}")
        if self.num_creatures < 0 or self.num_walls < 0:
            raise ConfigError("num_creatures and num_walls must be >= 0")
        interior = (self.height - 2) * (self.width - 2)
        if self.num_walls + self.num_creatures + 2 > interior:
            raise ConfigError(
                f"{interior} interior cells cannot hold player, goal, "
                f"{self.num_walls} walls and {self.num_creatures} creatures"
            )
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")

    @property
    def shape(self) -> GridShape:
        return GridShape(self.height, self.width)


@dataclass
class GridState:
    terrain: np.ndarray                      # (H, W) of FLOOR / WALL / GOAL
    player: Tuple[int, int]                  # (x, y)
    creatures: List[Tuple[int, int]]
    step_count: int
    rng: np.random.Generator = field(repr=False)

    def symbols(self) -> np.ndarray:
        grid = self.terrain.copy()
        for x, y in self.creatures:
            grid[y, x] = CREATURE
        px, py = self.player
        grid[py, px] = PLAYER
        return grid

    @property
    def has_creature(self) -> bool:
        return len(self.creatures) > 0


# ── Dynamics ───────────────────────────────────────────────────────────────────

def reset(cfg: GridConfig, seed: int) -> GridState:
    rng = substream(seed, 0x6D)
    terrain = np.full((cfg.height, cfg.width), FLOOR, dtype=np.int64)
    terrain[0, :] = terrain[-1, :] = WALL
    terrain[:, 0] = terrain[:, -1] = WALL

    cells = [(x, y) for y in range(1, cfg.height - 1) for x in range(1, cfg.width - 1)]
    n_creatures = cfg.num_creatures if rng.random() < cfg.creature_prob else 0
    picks = rng.permutation(len(cells))[: 2 + cfg.num_walls + n_creatures]
    chosen = [cells[i] for i in picks]
    player, goal = chosen[0], chosen[1]
    walls = chosen[2: 2 + cfg.num_walls]
    creatures = chosen[2 + cfg.num_walls:]

    gx, gy = goal
    terrain[gy, gx] = GOAL
    for wx, wy in walls:
        terrain[wy, wx] = WALL
    return GridState(terrain, player, list(creatures), 0, rng)


def _free_for_creature(state: GridState, x: int, y: int, taken) -> bool:
    return state.terrain[y, x] == FLOOR and (x, y) != state.player and (x, y) not in taken


def step(state: GridState, action: int, cfg: Optional[GridConfig] = None) -> Tuple[GridState, int, bool]:
    """
    Advance one step on a copy of `state`.
    The player moves onto floor or goal; creatures then each move to a
    uniformly chosen free neighbouring floor cell, or stay put.
    Reaching the goal pays 1 and ends the episode; so does the step cap.
    """
    if action not in _MOVES:
        raise ConfigError(f"unknown action {action}")
    max_steps = cfg.max_steps if cfg is not None else 100
    s = GridState(state.terrain, state.player, list(state.creatures), state.step_count,
                  copy.deepcopy(state.rng))

    dx, dy = _MOVES[action]
    px, py = s.player
    nx, ny = px + dx, py + dy
    if s.terrain[ny, nx] in (FLOOR, GOAL) and (nx, ny) not in s.creatures:
        s.player = (nx, ny)

    for k, (cx, cy) in enumerate(s.creatures):
        taken = set(s.creatures[:k] + s.creatures[k + 1:])
        options = [(cx, cy)] + [
            (cx + ox, cy + oy) for ox, oy in _NEIGHBOURS
            if _free_for_creature(s, cx + ox, cy + oy, taken)
        ]
        s.creatures[k] = options[int(s.rng.integers(len(options)))]

    s.step_count += 1
    reached = s.terrain[s.player[1], s.player[0]] == GOAL
    reward = 1 if reached else 0
    done = bool(reached or s.step_count >= max_steps)
    return s, reward, done


def render(state: GridState) -> np.ndarray:
    """(H, W, ALPHABET_SIZE) one-hot image of the cell symbols."""
    return np.eye(ALPHABET_SIZE)[state.symbols()]


def symbol_codebook(tau: float = 0.75, k_max: int = 4096) -> Codebook:
    return Codebook((1, 1, ALPHABET_SIZE), tau=tau, k_max=k_max)


def token_symbols(cb: Codebook) -> np.ndarray:
    """Symbol id for every token id of a one-hot cell codebook."""
    return cb.flat_codes.argmax(axis=1)


# ── Transitions and datasets ───────────────────────────────────────────────────

@dataclass
class Transition:
    s_t: FrameTokens
    a_t: int
    s_next: FrameTokens
    r_t: int
    d_t: bool
    has_creature: bool
    episode: int = 0
    step: int = 0


@dataclass
class Dataset:
    header: Dict
    transitions: List[Transition]

    @property
    def shape(self) -> GridShape:
        g = self.header["geometry"]
        return GridShape(g["height"], g["width"])

    def __len__(self) -> int:
        return len(self.transitions)

    def episodes(self) -> Dict[int, List[Transition]]:
        out: Dict[int, List[Transition]] = {}
        for tr in self.transitions:
            out.setdefault(tr.episode, []).append(tr)
        for eps in out.values():
            eps.sort(key=lambda t: t.step)
        return out

    def split(self, holdout_fraction: float = 0.1) -> Tuple["Dataset", "Dataset"]:
        """(train, held-out): the last `holdout_fraction` of episode indices are held out."""
        ids = sorted({t.episode for t in self.transitions})
        if not ids:
            return self, self
        n_hold = max(1, int(round(len(ids) * holdout_fraction))) if holdout_fraction > 0 else 0
        held = set(ids[len(ids) - n_hold:])
        train = [t for t in self.transitions if t.episode not in held]
        test = [t for t in self.transitions if t.episode in held]
        return Dataset(dict(self.header), train), Dataset(dict(self.header), test)


def random_policy(rng: np.random.Generator, state: GridState) -> int:
    return int(rng.integers(NUM_ACTIONS))


def run_episode(cfg: GridConfig, seed: int, episode: int, policy=random_policy) -> Tuple[List[np.ndarray], List[Tuple[int, int, bool, bool]]]:
    """Rendered frames (n+1) and per-step (action, reward, done, has_creature)."""
    state = reset(cfg, substream(seed, episode).integers(2**63))
    policy_rng = substream(seed, episode, 0x90)
    frames = [render(state)]
    steps = []
    done = False
    while not done:
        action = policy(policy_rng, state)
        had_creature = state.has_creature
        state, reward, done = step(state, action, cfg)
        frames.append(render(state))
        steps.append((action, reward, done, had_creature))
    return frames, steps


def collect(cfg: GridConfig, episodes: int, seed: int,
            codebook: Optional[Codebook] = None, policy=random_policy,
            grow: bool = True) -> Dataset:
    """
    Roll out `episodes` episodes with the scripted policy, grow the codebook
    over the frames in collection order, then tokenize every frame.
    Each episode draws from its own seed substream.
    """
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")
    cb = codebook if codebook is not None else symbol_codebook()
    rollouts = [run_episode(cfg, seed, e, policy) for e in range(episodes)]

    if grow:
        added = sum(grow_from_frames(frames, cb) for frames, _ in rollouts)
        logger.debug("codebook grew by %d to %d codes", added, cb.size)

    transitions = []
    for e, (frames, steps) in enumerate(rollouts):
        tokens = [encode_frame(f, cb) for f in frames]
        for t, (action, reward, done, had_creature) in enumerate(steps):
            transitions.append(Transition(
                s_t=tokens[t], a_t=action, s_next=tokens[t + 1],
                r_t=reward, d_t=done, has_creature=had_creature,
                episode=e, step=t,
            ))

    header = {
        "geometry": {"height": cfg.height, "width": cfg.width},
        "alphabet": list(SYMBOLS),
        "patch_shape": list(cb.patch_shape),
        "codebook_hash": cb.content_hash(),
        "codebook_size": cb.size,
        "seed": int(seed),
        "episodes": int(episodes),
    }
    logger.info("collected %d transitions over %d episodes (K=%d)",
                len(transitions), episodes, cb.size)
    return Dataset(header, transitions)


def creature_counts(frames: Sequence[FrameTokens], creature_tokens) -> List[int]:
    """Number of creature tokens in each frame."""
    creature_tokens = np.asarray(sorted(creature_tokens), dtype=np.int64)
    return [int(np.isin(f.tokens, creature_tokens).sum()) for f in frames]
