"""
ITC — Training pipeline
collect → grow codebook → train world model → checkpoint + metrics, all
under one output directory and fully determined by the run seed.
"""

import contextlib
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from _itc_common import ConfigError, StageError, seed_everything, substream
from assignment import BinarizeConfig
from gridworld import ALPHABET_SIZE, Dataset, GridConfig, collect, symbol_codebook
from itc_decoder import SamplingMode
from ot_solver import OtConfig
from store import (
    MetricsWriter,
    file_sha256,
    read_codebook,
    read_dataset,
    write_checkpoint,
    write_codebook,
    write_dataset,
    write_json,
)
from tokenizer import TokenizerConfig
from world_model import Batch, WmConfig, WorldModel, make_optimizer, train_step

logger = logging.getLogger(__name__)

DATASET_FILE = "data.jsonl"
CODEBOOK_FILE = "codebook.bin"
CHECKPOINT_FILE = "model.ckpt"
METRICS_FILE = "metrics.jsonl"
CONFIG_FILE = "run_config.json"


# ── Config ─────────────────────────────────────────────────────────────────────

@dataclass
class TrainConfig:
    episodes: int = 40
    updates: int = 200              # world-model updates
    batch_size: int = 8
    log_every: int = 10
    holdout_fraction: float = 0.1

    def __post_init__(self):
        for name in ("episodes", "updates", "batch_size", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(f"train.holdout_fraction must be in [0, 1), got {self.holdout_fraction}")


@dataclass
class EvalConfig:
    sampling: str = "greedy"
    seeds: List[int] = field(default_factory=lambda: [0])
    border: int = 1
    rollout_horizon: int = 10
    rollout_seeds: int = 100
    sweep_c_d: List[float] = field(default_factory=lambda: [0.3, 0.6, 0.9])
    sweep_c_w: List[float] = field(default_factory=lambda: [0.1, 0.3, 0.5])

    def __post_init__(self):
        self.sampling = SamplingMode(self.sampling).value
        if not self.seeds:
            raise ConfigError("eval.seeds must name at least one seed")
        if self.border < 0 or self.rollout_horizon < 0 or self.rollout_seeds < 1:
            raise ConfigError("eval.border and eval.rollout_horizon must be >= 0, rollout_seeds >= 1")


_SECTIONS = {
    "grid": GridConfig,
    "tokenizer": TokenizerConfig,
    "wm": WmConfig,
    "ot": OtConfig,
    "bin": BinarizeConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    tokenizer: TokenizerConfig = field(
        default_factory=lambda: TokenizerConfig(patch_shape=(1, 1, ALPHABET_SIZE))
    )
    wm: WmConfig = field(default_factory=WmConfig)
    ot: OtConfig = field(default_factory=OtConfig)
    bin: BinarizeConfig = field(default_factory=BinarizeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    deterministic: bool = True
    dataset_path: Optional[str] = None      # reuse a collected dataset instead of collecting
    codebook_path: Optional[str] = None

    def __post_init__(self):
        if int(self.seed) < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        self.seed = int(self.seed)
        if (self.dataset_path is None) != (self.codebook_path is None):
            raise ConfigError("dataset_path and codebook_path must be given together")
        for p in (self.dataset_path, self.codebook_path):
            if p is not None and not os.path.isfile(p):
                raise ConfigError(f"referenced file does not exist: {p}")
        if tuple(self.tokenizer.patch_shape) != (1, 1, ALPHABET_SIZE):
            raise ConfigError(
                f"the gridworld renders 1x1x{ALPHABET_SIZE} cells, "
                f"tokenizer.patch_shape is {self.tokenizer.patch_shape}"
            )

    @classmethod
    def from_dict(cls, d: Dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            section = _SECTIONS.get(key)
            if section is None:
                kwargs[key] = value
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be an object")
            fields = {f.name for f in dataclasses.fields(section)}
            bad = set(value) - fields
            if bad:
                raise ConfigError(f"unknown keys in '{key}': {sorted(bad)}")
            try:
                kwargs[key] = section(**value)
            except (TypeError, ValueError) as err:
                raise ConfigError(f"config section '{key}': {err}") from err
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        from store import read_json
        return cls.from_dict(read_json(path))

    @classmethod
    def tiny(cls, **overrides) -> "RunConfig":
        """
        Demo-sized run: at most 500 transitions, 200 updates on a narrow
        model with an 11-step window (room for a 10-frame rollout).
        """
        base = dict(
            grid=GridConfig(max_steps=50),
            wm=WmConfig(num_heads=2, embed_dim=32, mlp_dim=128, seq_len=11, head_hidden=64),
            train=TrainConfig(episodes=10, updates=200, batch_size=4),
            out_dir="runs/tiny",
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> Dict:
        d = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "wm":
                d[f.name] = value.to_dict()
            elif dataclasses.is_dataclass(value):
                d[f.name] = dataclasses.asdict(value)
                for k, v in d[f.name].items():
                    if isinstance(v, tuple):
                        d[f.name][k] = list(v)
            else:
                d[f.name] = value
        return d

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)


@contextlib.contextmanager
def stage(name: str):
    """Tag any failure inside the block with the stage name."""
    logger.info("── %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as err:
        raise StageError(name, err) from err


# ── Training ───────────────────────────────────────────────────────────────────

def sample_windows(episodes: List[List], batch_size: int, seq_len: int,
                   rng: np.random.Generator) -> List[List]:
    """Random length-seq_len slices of random episodes (whole episode if shorter)."""
    windows = []
    for _ in range(batch_size):
        ep = episodes[int(rng.integers(len(episodes)))]
        start = int(rng.integers(max(len(ep) - seq_len, 0) + 1))
        windows.append(ep[start:start + seq_len])
    return windows


def train_world_model(model: WorldModel, train: Dataset, cfg: TrainConfig, seed: int,
                      metrics_path: Optional[str] = None) -> List[Dict]:
    """Run cfg.updates clipped Adam steps on random windows; returns the logged rows."""
    episodes = [ep for _, ep in sorted(train.episodes().items()) if ep]
    if not episodes:
        raise ConfigError("training split holds no transitions")
    optimizer = make_optimizer(model)
    logged = []
    writer = MetricsWriter(metrics_path) if metrics_path else None
    try:
        for s in range(1, cfg.updates + 1):
            windows = sample_windows(episodes, cfg.batch_size, model.cfg.seq_len,
                                     substream(seed, 0x7A, s))
            metrics = train_step(model, optimizer, Batch.from_windows(windows, model.cfg.seq_len))
            if s == 1 or s % cfg.log_every == 0 or s == cfg.updates:
                row = {"step": s, **metrics}
                logged.append(row)
                if writer:
                    writer.write(row)
                logger.info("step %4d  loss %.4f  state %.4f  token err %.4f  |g| %.3f",
                            s, metrics["loss"], metrics["loss_state"],
                            metrics["token_error_rate"], metrics["grad_norm"])
    finally:
        if writer:
            writer.close()
    return logged


def build_model(cfg: RunConfig, codebook_size: int) -> WorldModel:
    wm = dataclasses.replace(cfg.wm, grid_height=cfg.grid.height, grid_width=cfg.grid.width,
                             codebook_size=codebook_size)
    return WorldModel(wm)


def train_pipeline(cfg: RunConfig) -> Dict[str, str]:
    """
    Produce data.jsonl, codebook.bin, model.ckpt, metrics.jsonl and
    run_config.json in cfg.out_dir. Returns the artifact paths plus the
    checkpoint sha256 under "checkpoint_sha256".
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    logger.info(write_json(cfg.to_dict(), cfg.path(CONFIG_FILE)))

    with stage("collect"):
        if cfg.dataset_path:
            codebook = read_codebook(cfg.codebook_path)
            dataset = read_dataset(cfg.dataset_path)
            if dataset.header.get("codebook_hash") != codebook.content_hash():
                raise ConfigError("dataset was not tokenized with the given codebook")
        else:
            codebook = symbol_codebook(cfg.tokenizer.tau, cfg.tokenizer.k_max)
            dataset = collect(cfg.grid, cfg.train.episodes, cfg.seed, codebook)

    with stage("tokenizer"):
        if codebook.overflow_count:
            logger.warning("codebook overflowed %d times", codebook.overflow_count)
        logger.info(write_codebook(codebook, cfg.path(CODEBOOK_FILE)))
        logger.info(write_dataset(dataset, cfg.path(DATASET_FILE)))

    with stage("train"):
        seed_everything(cfg.seed, cfg.deterministic)
        model = build_model(cfg, codebook.size)
        train, held_out = dataset.split(cfg.train.holdout_fraction)
        logger.info("training on %d transitions, %d held out, %d parameters",
                    len(train), len(held_out), model.num_parameters())
        train_world_model(model, train, cfg.train, cfg.seed, cfg.path(METRICS_FILE))

    with stage("checkpoint"):
        logger.info(write_checkpoint(model, cfg.path(CHECKPOINT_FILE), codebook.content_hash()))
        digest = file_sha256(cfg.path(CHECKPOINT_FILE))

    return {
        "dataset": cfg.path(DATASET_FILE),
        "codebook": cfg.path(CODEBOOK_FILE),
        "checkpoint": cfg.path(CHECKPOINT_FILE),
        "metrics": cfg.path(METRICS_FILE),
        "config": cfg.path(CONFIG_FILE),
        "checkpoint_sha256": digest,
    }
