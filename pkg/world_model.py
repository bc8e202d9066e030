"""
ITC — Token world model
Decoder-only transformer over interleaved (state tokens, action) blocks with
block-causal attention, learned absolute position embeddings and 3D rotary
embeddings on queries and keys. Three heads read the output: next-state
logits from each state position, reward and done logits from the action
position.
"""

import dataclasses
import functools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from _itc_common import ConfigError, GridShape, ItcError, NumericalError, fingerprint

logger = logging.getLogger(__name__)

KVCache = List[Tuple[torch.Tensor, torch.Tensor]]


# ── Config ─────────────────────────────────────────────────────────────────────

@dataclass
class WmConfig:
    num_blocks: int = 2
    num_heads: int = 4
    embed_dim: int = 64
    mlp_dim: int = 256
    dropout_rate: float = 0.1
    seq_len: int = 20                       # timesteps per training window
    grid_height: int = 6
    grid_width: int = 6
    codebook_size: int = 5
    num_actions: int = 5
    learning_rate: float = 1e-3
    grad_clip_norm: float = 0.5
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    rope_base: float = 10000.0
    rope_split: Tuple[int, int] = (3, 1)    # spatial : temporal dimension pairs
    rope: str = "3d"                        # "3d" or "none"
    head_hidden: int = 128

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.rope_split = tuple(int(s) for s in self.rope_split)
        for name in ("num_blocks", "num_heads", "embed_dim", "mlp_dim", "seq_len",
                     "grid_height", "grid_width", "codebook_size", "num_actions", "head_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % (2 * self.num_heads):
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must be divisible by 2*num_heads ({2 * self.num_heads})"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.rope not in ("3d", "none"):
            raise ConfigError(f"rope must be '3d' or 'none', got {self.rope!r}")
        if self.rope_base <= 0:
            raise ConfigError(f"rope_base must be > 0, got {self.rope_base}")
        if len(self.rope_split) != 2 or min(self.rope_split) < 1:
            raise ConfigError(f"rope_split must be two positive ints, got {self.rope_split}")
        spatial, _ = self.rope_pairs
        if spatial % 2:
            raise ConfigError(
                f"rope_split {self.rope_split} gives {spatial} spatial pairs; x/y need an even count"
            )
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ConfigError("learning_rate and grad_clip_norm must be > 0")

    @classmethod
    def full_size(cls, **overrides) -> "WmConfig":
        """The full-size settings (3 blocks, 8 heads, width 128)."""
        base = dict(num_blocks=3, num_heads=8, embed_dim=128, mlp_dim=512)
        base.update(overrides)
        return cls(**base)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def grid(self) -> GridShape:
        return GridShape(self.grid_height, self.grid_width)

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def block_len(self) -> int:
        return self.tokens_per_frame + 1

    @property
    def rope_pairs(self) -> Tuple[int, int]:
        pairs = self.head_dim // 2
        s, t = self.rope_split
        if (pairs * s) % (s + t):
            raise ConfigError(
                f"{pairs} dimension pairs per head cannot be split {s}:{t}"
            )
        spatial = pairs * s // (s + t)
        return spatial, pairs - spatial

    def to_dict(self) -> Dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["rope_split"] = list(self.rope_split)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "WmConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown world-model config keys: {sorted(unknown)}")
        return cls(**d)


# ── Positions ──────────────────────────────────────────────────────────────────

def rope_axes(spatial_pairs: int, temporal_pairs: int) -> torch.Tensor:
    """Axis per dimension pair: x, y, x, y, ... over the spatial pairs, then t."""
    axes = [i % 2 for i in range(spatial_pairs)] + [2] * temporal_pairs
    return torch.tensor(axes, dtype=torch.long)


def rope_thetas(num_pairs: int, base: float) -> torch.Tensor:
    """theta_i = base^(-2i / head_dim), highest frequency first."""
    i = torch.arange(num_pairs, dtype=torch.float64)
    return base ** (-2.0 * i / (2 * num_pairs))


def rope3d_rotate(vec: torch.Tensor, coords: torch.Tensor,
                  thetas: torch.Tensor, axes: torch.Tensor) -> torch.Tensor:
    """
    Rotate consecutive dimension pairs of `vec` (..., N, d) by
    theta_i * coords[..., axes[i]], with coords (N, 3) as (x, y, t).
    """
    d = vec.shape[-1]
    if d % 2:
        raise ConfigError(f"rotary embedding needs an even head dimension, got {d}")
    if thetas.shape[0] != d // 2 or axes.shape[0] != d // 2:
        raise ConfigError(f"{d // 2} dimension pairs but {thetas.shape[0]} frequencies")
    angles = coords.to(vec.dtype)[..., axes] * thetas.to(vec.dtype)
    cos, sin = torch.cos(angles), torch.sin(angles)
    even, odd = vec[..., 0::2], vec[..., 1::2]
    out = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
    return out.flatten(-2)


class Rope3D(nn.Module):
    def __init__(self, cfg: WmConfig):
        super().__init__()
        spatial, temporal = cfg.rope_pairs
        self.register_buffer("thetas", rope_thetas(spatial + temporal, cfg.rope_base), persistent=False)
        self.register_buffer("axes", rope_axes(spatial, temporal), persistent=False)

    def forward(self, x: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        return rope3d_rotate(x, coords, self.thetas, self.axes)


@functools.lru_cache(maxsize=64)
def token_coordinates(num_steps: int, shape: GridShape, start_step: int = 0) -> torch.Tensor:
    """
    (num_steps * (L+1), 3) coordinates. State token (x, y) at step t sits at
    (x+t, y+t, 2t); the action token at (t, t, 2t+1).
    """
    xy = torch.tensor(shape.coords(), dtype=torch.long)
    blocks = []
    for t in range(start_step, start_step + num_steps):
        state = torch.cat([xy + t, torch.full((shape.size, 1), 2 * t)], dim=1)
        action = torch.tensor([[t, t, 2 * t + 1]])
        blocks.append(torch.cat([state, action], dim=0))
    coords = torch.cat(blocks, dim=0)
    if torch.unique(coords, dim=0).shape[0] != coords.shape[0]:
        raise ItcError("token coordinates collide")
    return coords


@functools.lru_cache(maxsize=64)
def block_causal_mask(num_steps: int, tokens_per_frame: int, start_step: int = 0) -> torch.Tensor:
    """
    Boolean (queries, keys) mask, True where attention is allowed: a token in
    block t sees every token of blocks <= t. Queries cover blocks
    start_step .. start_step+num_steps-1, keys cover blocks 0 .. the same end
    (the cached prefix plus the new blocks).
    """
    if num_steps < 1 or tokens_per_frame < 1:
        raise ConfigError("block_causal_mask needs T >= 1 and L >= 1")
    n = tokens_per_frame + 1
    q_block = torch.arange(start_step * n, (start_step + num_steps) * n) // n
    k_block = torch.arange(0, (start_step + num_steps) * n) // n
    return q_block[:, None] >= k_block[None, :]


# ── Model ──────────────────────────────────────────────────────────────────────

@dataclass
class WmOutput:
    next_state: torch.Tensor                 # (B, T, L, K) logits
    reward: torch.Tensor                     # (B, T, 2)
    done: torch.Tensor                       # (B, T, 2)
    cache: Optional[KVCache] = None


class Attention(nn.Module):
    def __init__(self, cfg: WmConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim
        self.qkv = nn.Linear(cfg.embed_dim, 3 * cfg.embed_dim)
        self.proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.rope = Rope3D(cfg) if cfg.rope == "3d" else None

    def forward(self, x, coords, mask, kv: Optional[Tuple[torch.Tensor, torch.Tensor]] = None):
        B, N, D = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        if self.rope is not None:
            q = self.rope(q, coords)
            k = self.rope(k, coords)
        if kv is not None:
            k = torch.cat([kv[0], k], dim=2)
            v = torch.cat([kv[1], v], dim=2)
        # boolean mask: True attends
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        out = out.transpose(1, 2).reshape(B, N, D)
        return self.proj(out), (k, v)


class Block(nn.Module):
    def __init__(self, cfg: WmConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.mlp_dim),
            nn.GELU(),
            nn.Linear(cfg.mlp_dim, cfg.embed_dim),
        )
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, coords, mask, kv=None):
        a, new_kv = self.attn(self.ln1(x), coords, mask, kv)
        x = x + self.drop(a)
        x = x + self.drop(self.mlp(self.ln2(x)))
        return x, new_kv


def _head(dim: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, out))


class WorldModel(nn.Module):
    def __init__(self, cfg: WmConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        self.state_embed = nn.Embedding(cfg.codebook_size, D)
        self.action_embed = nn.Embedding(cfg.num_actions, D)
        self.pos_embed = nn.Embedding(cfg.seq_len * cfg.block_len, D)
        self.drop = nn.Dropout(cfg.dropout_rate)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.num_blocks)])
        self.ln_f = nn.LayerNorm(D)
        self.state_head = _head(D, cfg.head_hidden, cfg.codebook_size)
        self.reward_head = _head(D, cfg.head_hidden, 2)
        self.done_head = _head(D, cfg.head_hidden, 2)

    def zero_heads(self) -> None:
        """Zero the output layers so every head predicts a uniform distribution."""
        with torch.no_grad():
            for head in (self.state_head, self.reward_head, self.done_head):
                head[-1].weight.zero_()
                head[-1].bias.zero_()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        """(B, T, L) states and (B, T) actions → (B, T*(L+1), D) interleaved embeddings."""
        s = self.state_embed(states)
        a = self.action_embed(actions)[:, :, None, :]
        B, T = actions.shape
        return torch.cat([s, a], dim=2).reshape(B, T * self.cfg.block_len, -1)

    def forward(self, states: torch.Tensor, actions: torch.Tensor,
                cache: Optional[KVCache] = None, start_step: int = 0,
                use_cache: bool = False) -> WmOutput:
        cfg = self.cfg
        L = cfg.tokens_per_frame
        if states.dim() != 3 or states.shape[-1] != L or actions.shape != states.shape[:2]:
            raise ConfigError(
                f"expected states (B, T, {L}) and actions (B, T), got "
                f"{tuple(states.shape)} and {tuple(actions.shape)}"
            )
        B, T = actions.shape
        if start_step + T > cfg.seq_len:
            raise ConfigError(
                f"{start_step + T} timesteps exceed the model window of {cfg.seq_len}"
            )
        if cache is not None and cache[0][0].shape[2] != start_step * cfg.block_len:
            raise ConfigError(
                f"cache holds {cache[0][0].shape[2]} tokens but start_step={start_step}"
            )
        if states.numel() and (states.min() < 0 or states.max() >= cfg.codebook_size):
            raise ConfigError(f"state tokens must lie in [0, {cfg.codebook_size})")

        device = states.device
        n0 = start_step * cfg.block_len
        pos = torch.arange(n0, n0 + T * cfg.block_len, device=device)
        x = self.drop(self.embed(states, actions) + self.pos_embed(pos))
        coords = token_coordinates(T, cfg.grid, start_step).to(device)
        if cache is None:
            mask = block_causal_mask(T, L)
        else:
            mask = block_causal_mask(T, L, start_step)
        mask = mask.to(device)

        new_cache: KVCache = []
        for i, block in enumerate(self.blocks):
            kv = cache[i] if cache is not None else None
            x, block_kv = block(x, coords, mask, kv)
            new_cache.append(block_kv)
        x = self.ln_f(x).view(B, T, cfg.block_len, -1)

        return WmOutput(
            next_state=self.state_head(x[:, :, :L]),
            reward=self.reward_head(x[:, :, L]),
            done=self.done_head(x[:, :, L]),
            cache=new_cache if use_cache else None,
        )


# ── Training ───────────────────────────────────────────────────────────────────

@dataclass
class Batch:
    states: torch.Tensor        # (B, T, L) long
    actions: torch.Tensor       # (B, T) long
    next_states: torch.Tensor   # (B, T, L) long
    rewards: torch.Tensor       # (B, T) long in {0, 1}
    dones: torch.Tensor         # (B, T) long in {0, 1}
    valid: torch.Tensor         # (B, T) bool

    @classmethod
    def from_windows(cls, windows: Sequence[Sequence], seq_len: int) -> "Batch":
        """
        Pack windows of transitions (s_t, a_t, s_next, r_t, d_t) into padded
        tensors; positions past a short window's end are marked invalid.
        """
        if not windows:
            raise ConfigError("cannot build a batch from zero windows")
        L = windows[0][0].s_t.tokens.shape[0]
        B = len(windows)
        states = np.zeros((B, seq_len, L), dtype=np.int64)
        nexts = np.zeros((B, seq_len, L), dtype=np.int64)
        actions = np.zeros((B, seq_len), dtype=np.int64)
        rewards = np.zeros((B, seq_len), dtype=np.int64)
        dones = np.zeros((B, seq_len), dtype=np.int64)
        valid = np.zeros((B, seq_len), dtype=bool)
        for b, window in enumerate(windows):
            if len(window) > seq_len:
                raise ConfigError(f"window of {len(window)} steps exceeds seq_len {seq_len}")
            for t, tr in enumerate(window):
                states[b, t] = tr.s_t.tokens
                nexts[b, t] = tr.s_next.tokens
                actions[b, t] = tr.a_t
                rewards[b, t] = 1 if tr.r_t > 0 else 0
                dones[b, t] = int(bool(tr.d_t))
                valid[b, t] = True
        return cls(*(torch.from_numpy(a) for a in (states, actions, nexts, rewards, dones, valid)))

    def fingerprint(self) -> str:
        return fingerprint(self.states.numpy(), self.actions.numpy(), self.next_states.numpy())


def compute_loss(out: WmOutput, batch: Batch) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    Next-state cross entropy summed over the L positions plus reward and done
    cross entropy, each averaged over valid timesteps.
    """
    valid = batch.valid
    n = valid.sum().clamp(min=1)
    logits = out.next_state[valid]                       # (n, L, K)
    targets = batch.next_states[valid]                   # (n, L)
    state_ce = F.cross_entropy(logits.flatten(0, 1), targets.flatten(), reduction="sum") / n
    reward_ce = F.cross_entropy(out.reward[valid], batch.rewards[valid], reduction="sum") / n
    done_ce = F.cross_entropy(out.done[valid], batch.dones[valid], reduction="sum") / n
    loss = state_ce + reward_ce + done_ce
    with torch.no_grad():
        wrong = (logits.argmax(dim=-1) != targets).float()
        token_error = wrong.mean().item() if wrong.numel() else 0.0
    metrics = {
        "loss": float(loss.item()),
        "loss_state": float(state_ce.item()),
        "loss_reward": float(reward_ce.item()),
        "loss_done": float(done_ce.item()),
        "token_error_rate": token_error,
    }
    return loss, metrics


def make_optimizer(model: WorldModel) -> torch.optim.Optimizer:
    cfg = model.cfg
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            betas=cfg.adam_betas, eps=cfg.adam_eps)


def train_step(model: WorldModel, optimizer: torch.optim.Optimizer, batch: Batch) -> Dict[str, float]:
    """One clipped Adam update; raises NumericalError on a non-finite loss."""
    model.train()
    out = model(batch.states, batch.actions)
    loss, metrics = compute_loss(out, batch)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite training loss {loss.item()} (batch {batch.fingerprint()})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), model.cfg.grad_clip_norm)
    optimizer.step()
    metrics["grad_norm"] = float(grad_norm)
    return metrics


@torch.no_grad()
def predict_logits(model: WorldModel, states: torch.Tensor, actions: torch.Tensor) -> WmOutput:
    model.eval()
    return model(states, actions)
