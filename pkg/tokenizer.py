"""
ITC — Nearest-neighbour patch tokenizer
Splits frames into h×w×c patches, maps each patch to its nearest code, and
grows the codebook with patches that sit farther than tau (squared distance)
from every existing code. Codes are append-only, so token ids stay stable.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from _itc_common import ConfigError, GridShape
from itc_decoder import FrameTokens

logger = logging.getLogger(__name__)


@dataclass
class TokenizerConfig:
    patch_shape: Tuple[int, int, int] = (7, 7, 3)
    tau: float = 0.75
    k_max: int = 4096

    def __post_init__(self):
        self.patch_shape = tuple(int(v) for v in self.patch_shape)
        if len(self.patch_shape) != 3 or min(self.patch_shape) < 1:
            raise ConfigError(f"patch shape must be (h, w, c) >= 1, got {self.patch_shape}")
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {self.k_max}")


class Codebook:
    """Ordered, append-only list of patch vectors."""

    def __init__(self, patch_shape, tau: float = 0.75, k_max: int = 4096,
                 codes: Optional[np.ndarray] = None):
        cfg = TokenizerConfig(tuple(patch_shape), tau, k_max)
        self.patch_shape = cfg.patch_shape
        self.tau = float(cfg.tau)
        self.k_max = int(cfg.k_max)
        self.overflow_count = 0
        self.insert_distances: List[float] = []
        dim = int(np.prod(self.patch_shape))
        self._codes = np.zeros((0, dim))
        if codes is not None:
            codes = np.asarray(codes, dtype=np.float64).reshape(-1, dim)
            self._codes = codes.copy()
            self.insert_distances = [np.inf] * len(codes)

    @classmethod
    def from_config(cls, cfg: TokenizerConfig) -> "Codebook":
        return cls(cfg.patch_shape, cfg.tau, cfg.k_max)

    @property
    def size(self) -> int:
        return self._codes.shape[0]

    def __len__(self) -> int:
        return self.size

    @property
    def flat_codes(self) -> np.ndarray:
        return self._codes

    def patches(self) -> np.ndarray:
        return self._codes.reshape((self.size,) + self.patch_shape)

    def append(self, flat_patch: np.ndarray, distance: float) -> int:
        self._codes = np.vstack([self._codes, flat_patch[None, :]])
        self.insert_distances.append(float(distance))
        return self.size - 1

    def content_hash(self) -> str:
        """sha256 over the shape, tau and the float32 codes (what gets persisted)."""
        h = hashlib.sha256()
        h.update(struct.pack("<IIId", *self.patch_shape, self.tau))
        h.update(self._codes.astype("<f4").tobytes())
        return h.hexdigest()


# ── Patch helpers ──────────────────────────────────────────────────────────────

def _flat_patch(p, cb: Codebook) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != cb.patch_shape:
        raise ConfigError(f"patch shape {p.shape} does not match codebook {cb.patch_shape}")
    return p.reshape(-1)


def split_patches(image, patch_shape) -> Tuple[np.ndarray, GridShape]:
    """(H, W, c) image → (L, h*w*c) flattened patches in row-major grid order."""
    img = np.asarray(image, dtype=np.float64)
    h, w, c = patch_shape
    if img.ndim != 3 or img.shape[2] != c:
        raise ConfigError(f"image must be (H, W, {c}), got {img.shape}")
    H, W = img.shape[:2]
    if H % h or W % w:
        raise ConfigError(f"image {H}x{W} is not divisible by patch {h}x{w}")
    gh, gw = H // h, W // w
    patches = img.reshape(gh, h, gw, w, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, h * w * c)
    return patches, GridShape(gh, gw)


def _nearest(flat: np.ndarray, codes: np.ndarray, chunk: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    # exact differences rather than the |a|^2 - 2ab + |b|^2 expansion, so an
    # identical patch scores exactly 0 and ties resolve to the lowest index
    idx = np.empty(len(flat), dtype=np.int64)
    dist = np.empty(len(flat))
    for s in range(0, len(flat), chunk):
        d = ((flat[s:s + chunk, None, :] - codes[None, :, :]) ** 2).sum(axis=-1)
        best = d.argmin(axis=1)
        idx[s:s + chunk] = best
        dist[s:s + chunk] = d[np.arange(len(best)), best]
    return idx, dist


# ── Public API ─────────────────────────────────────────────────────────────────

def encode_patch(p, cb: Codebook) -> int:
    """Index of the nearest code by squared distance; lowest index on ties."""
    flat = _flat_patch(p, cb)
    if cb.size == 0:
        raise ConfigError("cannot encode with an empty codebook")
    idx, _ = _nearest(flat[None, :], cb.flat_codes)
    return int(idx[0])


def grow_codebook(p, cb: Codebook) -> Tuple[Codebook, bool]:
    """
    Append p if its squared distance to every code exceeds tau.
    At k_max nothing is added and `overflow_count` is bumped instead.
    Mutates and returns `cb` (single writer).
    """
    flat = _flat_patch(p, cb)
    if cb.size == 0:
        cb.append(flat, np.inf)
        return cb, True
    _, dist = _nearest(flat[None, :], cb.flat_codes)
    if dist[0] <= cb.tau:
        return cb, False
    if cb.size >= cb.k_max:
        cb.overflow_count += 1
        if cb.overflow_count == 1:
            logger.warning("codebook reached k_max=%d; new patches are no longer added", cb.k_max)
        return cb, False
    cb.append(flat, dist[0])
    return cb, True


def grow_from_frames(images: Iterable[np.ndarray], cb: Codebook) -> int:
    """Scan every patch of every frame in order; returns how many codes were added."""
    added = 0
    h, w, c = cb.patch_shape
    for image in images:
        patches, _ = split_patches(image, cb.patch_shape)
        for flat in patches:
            _, grew = grow_codebook(flat.reshape(h, w, c), cb)
            added += grew
    return added


def encode_frame(image, cb: Codebook) -> FrameTokens:
    if cb.size == 0:
        raise ConfigError("cannot encode with an empty codebook")
    patches, shape = split_patches(image, cb.patch_shape)
    idx, _ = _nearest(patches, cb.flat_codes)
    return FrameTokens(idx, shape)


def decode_frame(t: FrameTokens, cb: Codebook) -> np.ndarray:
    """Reassemble the (H, W, c) image from the codes named by t."""
    if t.tokens.size and t.tokens.max() >= cb.size:
        raise ConfigError(f"frame refers to token {t.tokens.max()} but codebook has {cb.size}")
    h, w, c = cb.patch_shape
    gh, gw = t.shape.height, t.shape.width
    patches = cb.flat_codes[t.tokens].reshape(gh, gw, h, w, c)
    return patches.transpose(0, 2, 1, 3, 4).reshape(gh * h, gw * w, c)
