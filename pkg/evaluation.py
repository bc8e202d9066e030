"""
ITC — Evaluation
Per-step exact-frame accuracy on held-out transitions, imagined rollouts
with creature persistence counts, and the c_d / c_w robustness sweep.

Baseline and ITC are always run on the same predictor, dataset and seed, so
any difference between them comes from the decoder.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from _itc_common import ConfigError, GridShape, substream
from assignment import BinarizeConfig
from gridworld import (
    CREATURE,
    NUM_ACTIONS,
    Dataset,
    GridConfig,
    Transition,
    creature_counts,
    render,
    reset,
    step,
)
from itc_decoder import (
    DecodeConfig,
    FrameTokens,
    PredictionGrid,
    SamplingMode,
    decode_next_frame,
    direct_decode,
    interior_mask,
)
from ot_solver import OtConfig
from tokenizer import Codebook, encode_frame

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    BASELINE = "baseline-sample"
    ITC = "itc"


# ── Predictors ─────────────────────────────────────────────────────────────────

class WorldModelPredictor:
    """
    Feeds frames and actions one step at a time and returns the predicted
    distribution over the next frame. Uses the key/value cache while the
    history fits the model window, then recomputes over the last window.
    """

    def __init__(self, model, codebook_hash: Optional[str] = None):
        self.model = model
        self.cfg = model.cfg
        self.codebook_hash = codebook_hash
        self.window = self.cfg.seq_len
        self.reset()

    def reset(self) -> None:
        self._states: List[np.ndarray] = []
        self._actions: List[int] = []
        self._cache = None

    @torch.no_grad()
    def observe(self, frame: FrameTokens, action: int) -> PredictionGrid:
        self.model.eval()
        self._states.append(frame.tokens)
        self._actions.append(int(action))
        t = len(self._states) - 1
        if t < self.window:
            s = torch.as_tensor(frame.tokens, dtype=torch.long)[None, None]
            a = torch.tensor([[int(action)]], dtype=torch.long)
            out = self.model(s, a, cache=self._cache, start_step=t, use_cache=True)
            self._cache = out.cache
        else:
            s = torch.as_tensor(np.stack(self._states[-self.window:]), dtype=torch.long)[None]
            a = torch.as_tensor(self._actions[-self.window:], dtype=torch.long)[None]
            out = self.model(s, a)
            self._cache = None
        logits = out.next_state[0, -1].to(torch.float64).cpu().numpy()
        return PredictionGrid.from_logits(logits, frame.shape)

    def predict_episode(self, episode: Sequence[Transition]) -> List[PredictionGrid]:
        self.reset()
        return [self.observe(tr.s_t, tr.a_t) for tr in episode]


class OraclePredictor:
    """
    One-hot predictions of known frames. `predict_episode` answers with each
    transition's true next frame; `observe` walks through `script`.
    """

    def __init__(self, num_codes: int, script: Optional[Sequence[FrameTokens]] = None,
                 window: int = 1 << 30):
        self.num_codes = num_codes
        self.script = list(script) if script is not None else None
        self.window = window
        self.codebook_hash = None
        self.reset()

    def reset(self) -> None:
        self._t = 0

    def observe(self, frame: FrameTokens, action: int) -> PredictionGrid:
        if self.script is None or self._t + 1 >= len(self.script):
            raise ConfigError("oracle script has no frame left to predict")
        self._t += 1
        return PredictionGrid.one_hot(self.script[self._t], self.num_codes)

    def predict_episode(self, episode: Sequence[Transition]) -> List[PredictionGrid]:
        return [PredictionGrid.one_hot(tr.s_next, self.num_codes) for tr in episode]


# ── Reports ────────────────────────────────────────────────────────────────────

@dataclass
class EvalReport:
    variant: str
    overall_accuracy: float = 0.0
    accuracy_with_creature: float = 0.0
    accuracy_without_creature: float = 0.0
    token_error_rate: float = 0.0
    transitions: int = 0
    with_creature: int = 0
    without_creature: int = 0
    duplication: int = 0
    disappearance: int = 0
    rollout_length: int = 0
    outcomes: List[Dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        for name in ("overall_accuracy", "accuracy_with_creature",
                     "accuracy_without_creature", "token_error_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("transitions", "duplication", "disappearance", "rollout_length"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self, with_outcomes: bool = False) -> Dict:
        d = dataclasses.asdict(self)
        if not with_outcomes:
            d.pop("outcomes")
        return d

    @classmethod
    def from_outcomes(cls, variant: str, outcomes: List[Dict], tokens_per_frame: int) -> "EvalReport":
        """Recount every accuracy field from per-transition outcomes."""
        n = len(outcomes)
        with_c = [o for o in outcomes if o["has_creature"]]
        without_c = [o for o in outcomes if not o["has_creature"]]

        def acc(rows):
            return sum(1 for o in rows if o["correct"]) / len(rows) if rows else 0.0

        errors = sum(o["token_errors"] for o in outcomes)
        return cls(
            variant=variant,
            overall_accuracy=acc(outcomes),
            accuracy_with_creature=acc(with_c),
            accuracy_without_creature=acc(without_c),
            token_error_rate=errors / (n * tokens_per_frame) if n else 0.0,
            transitions=n,
            with_creature=len(with_c),
            without_creature=len(without_c),
            outcomes=outcomes,
        )


def default_decode_config(shape: GridShape, sampling=SamplingMode.GREEDY,
                          ot: Optional[OtConfig] = None,
                          bin: Optional[BinarizeConfig] = None,
                          border: int = 1, rng_seed: int = 0) -> DecodeConfig:
    """OT over the interior, transformer output on the wall border."""
    return DecodeConfig(
        ot=ot or OtConfig(),
        bin=bin or BinarizeConfig(),
        ot_region=interior_mask(shape, border),
        sampling=sampling,
        rng_seed=rng_seed,
    )


def _decode(variant: Variant, pred: PredictionGrid, prev: FrameTokens, cfg: DecodeConfig) -> FrameTokens:
    if variant is Variant.ITC:
        return decode_next_frame(pred, prev, cfg)
    return direct_decode(pred, cfg)


def _step_seed(seed: int, episode: int, step_index: int) -> int:
    return int(substream(seed, 0xE7, episode, step_index).integers(2**63))


def check_codebook(predictor, dataset: Dataset) -> None:
    expected = getattr(predictor, "codebook_hash", None)
    actual = dataset.header.get("codebook_hash")
    if expected and actual and expected != actual:
        raise ConfigError(
            f"codebook mismatch: model was trained on {expected[:12]}…, "
            f"dataset was tokenized with {actual[:12]}…"
        )


def eval_accuracy(predictor, variant, dataset: Dataset, seed: int,
                  decode_cfg: Optional[DecodeConfig] = None) -> EvalReport:
    """
    Next-frame prediction from the true history over every transition in `dataset`
    (pass the held-out split), decoded with `variant` and scored by exact
    frame match and per-token errors, split by whether a creature is present.
    """
    variant = Variant(variant)
    check_codebook(predictor, dataset)
    shape = dataset.shape
    base = decode_cfg or default_decode_config(shape)
    outcomes = []
    for ep, transitions in sorted(dataset.episodes().items()):
        preds = predictor.predict_episode(transitions)
        for tr, pred in zip(transitions, preds):
            cfg = dataclasses.replace(base, rng_seed=_step_seed(seed, ep, tr.step))
            out = _decode(variant, pred, tr.s_t, cfg)
            errors = int((out.tokens != tr.s_next.tokens).sum())
            outcomes.append({
                "episode": ep,
                "step": tr.step,
                "has_creature": bool(tr.has_creature),
                "correct": errors == 0,
                "token_errors": errors,
            })
    report = EvalReport.from_outcomes(variant.value, outcomes, shape.size)
    logger.info("%s: accuracy %.4f (creature %.4f / none %.4f), token error %.4f over %d transitions",
                variant.value, report.overall_accuracy, report.accuracy_with_creature,
                report.accuracy_without_creature, report.token_error_rate, report.transitions)
    return report


def sweep_ot(predictor, dataset: Dataset, seed: int,
             c_d_values: Iterable[float], c_w_values: Iterable[float],
             decode_cfg: Optional[DecodeConfig] = None) -> List[Dict]:
    """ITC accuracy over a c_d x c_w grid on one predictor and dataset."""
    base = decode_cfg or default_decode_config(dataset.shape)
    rows = []
    for c_d in c_d_values:
        for c_w in c_w_values:
            ot = dataclasses.replace(base.ot, c_d=float(c_d), c_w=float(c_w))
            report = eval_accuracy(predictor, Variant.ITC, dataset, seed,
                                   dataclasses.replace(base, ot=ot))
            rows.append({
                "c_d": float(c_d),
                "c_w": float(c_w),
                "overall_accuracy": report.overall_accuracy,
                "accuracy_with_creature": report.accuracy_with_creature,
                "token_error_rate": report.token_error_rate,
            })
    return rows


# ── Rollouts ───────────────────────────────────────────────────────────────────

@dataclass
class RolloutResult:
    variant: str
    frames: List[FrameTokens]
    counts: List[int]
    true_count: int
    duplication: int
    disappearance: int

    @property
    def horizon(self) -> int:
        return len(self.frames) - 1


def creature_tokens(cb: Codebook) -> np.ndarray:
    """Token ids whose code is the creature symbol."""
    return np.flatnonzero(cb.flat_codes.argmax(axis=1) == CREATURE)


def rollout(predictor, variant, initial: FrameTokens, actions: Sequence[int],
            horizon: int, seed: int, creature_ids,
            decode_cfg: Optional[DecodeConfig] = None,
            true_count: Optional[int] = None) -> RolloutResult:
    """
    Imagine `horizon` frames from `initial`, each decoded frame fed back as the
    next input. Duplication counts frames with more creatures than the true
    count, disappearance frames with fewer.
    """
    variant = Variant(variant)
    limit = getattr(predictor, "window", horizon + 1) - 1
    if horizon < 0 or horizon > limit:
        raise ConfigError(f"horizon {horizon} must lie in [0, {limit}] for this model")
    if horizon > len(actions):
        raise ConfigError(f"horizon {horizon} needs {horizon} actions, got {len(actions)}")
    base = decode_cfg or default_decode_config(initial.shape)

    predictor.reset()
    frames = [initial]
    for t in range(horizon):
        pred = predictor.observe(frames[-1], actions[t])
        cfg = dataclasses.replace(base, rng_seed=_step_seed(seed, 0, t))
        frames.append(_decode(variant, pred, frames[-1], cfg))

    counts = creature_counts(frames, creature_ids)
    truth = counts[0] if true_count is None else int(true_count)
    dup = sum(1 for c in counts if c > truth)
    dis = sum(1 for c in counts if c < truth)
    return RolloutResult(variant.value, frames, counts, truth, dup, dis)


def episode_script(cfg: GridConfig, seed: int, codebook: Codebook, horizon: int):
    """
    True frames and the random actions of one environment episode, for
    seeding rollouts. Episodes that end early are padded with the last frame.
    """
    rng = substream(seed, 0xA5)
    state = reset(cfg, seed)
    frames = [encode_frame(render(state), codebook)]
    actions = []
    done = False
    for _ in range(horizon):
        action = int(rng.integers(NUM_ACTIONS))
        actions.append(action)
        if not done:
            state, _, done = step(state, action, cfg)
        frames.append(encode_frame(render(state), codebook))
    return frames, actions, len(state.creatures)


def compare_rollouts(predictor, grid_cfg: GridConfig, codebook: Codebook,
                     seeds: Iterable[int], horizon: int,
                     decode_cfg: Optional[DecodeConfig] = None) -> Dict:
    """
    Paired rollouts: for each seed both decoders start from the same frame,
    take the same actions and use the same predictor and decode seed.
    """
    ids = creature_tokens(codebook)
    totals = {Variant.BASELINE.value: 0, Variant.ITC.value: 0}
    per_seed = []
    for seed in seeds:
        frames, actions, n_true = episode_script(grid_cfg, seed, codebook, horizon)
        row = {"seed": int(seed)}
        for variant in (Variant.BASELINE, Variant.ITC):
            res = rollout(predictor, variant, frames[0], actions, horizon, seed, ids,
                          decode_cfg, true_count=n_true)
            row[variant.value] = res.duplication + res.disappearance
            totals[variant.value] += res.duplication + res.disappearance
        per_seed.append(row)
    logger.info("paired rollouts over %d seeds: baseline %d, itc %d artifact frames",
                len(per_seed), totals[Variant.BASELINE.value], totals[Variant.ITC.value])
    return {"horizon": horizon, "totals": totals, "per_seed": per_seed}
