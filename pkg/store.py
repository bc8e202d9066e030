#!/usr/bin/env python3
"""
Store — on-disk formats for datasets, codebooks, checkpoints and reports
Every writer takes an explicit path; a run's files go under RunConfig.out_dir.

Dataset (JSON lines)
    line 1   header: {"geometry", "alphabet", "patch_shape", "codebook_hash",
             "codebook_size", "seed", "episodes", "format": "itc-dataset/1"}
    line 2+  one transition per line with the keys in TRANSITION_FIELDS;
             token frames as integer lists, flags as 0/1.

Codebook (little endian)
    b"ITCB"  u32 version  u32 K  u32 h  u32 w  u32 c  f64 tau  u32 k_max
    u32 overflow_count, then K*h*w*c float32 values, code by code.

Checkpoint (little endian)
    b"ITCW"  u32 version  u32 meta_len  meta JSON (utf-8; "config" and
    "codebook_hash")  u64 parameter count  u32 tensor count, then per tensor:
    u16 name_len  name  u8 ndim  u32 dims[ndim]  float32 values.
"""

import hashlib
import json
import os
import struct
from typing import Dict, List, Tuple

import numpy as np

from _itc_common import ConfigError, GridShape
from gridworld import Dataset, Transition
from itc_decoder import FrameTokens
from tokenizer import Codebook

DATASET_FORMAT = "itc-dataset/1"
CODEBOOK_MAGIC = b"ITCB"
CHECKPOINT_MAGIC = b"ITCW"
FORMAT_VERSION = 1

TRANSITION_FIELDS = [
    "episode",
    "step",
    "s_t",
    "a_t",
    "s_next",
    "r_t",
    "d_t",
    "has_creature",
]


# ── Path helpers ───────────────────────────────────────────────────────────────

def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _require_file(path: str, what: str) -> None:
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")


def _dumps(obj) -> str:
    # fixed key order and separators so equal content gives equal bytes
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ── Datasets ───────────────────────────────────────────────────────────────────

def _transition_row(tr: Transition) -> dict:
    return {
        "episode": int(tr.episode),
        "step": int(tr.step),
        "s_t": tr.s_t.tokens.tolist(),
        "a_t": int(tr.a_t),
        "s_next": tr.s_next.tokens.tolist(),
        "r_t": int(tr.r_t),
        "d_t": int(bool(tr.d_t)),
        "has_creature": int(bool(tr.has_creature)),
    }


def write_dataset(ds: Dataset, path: str) -> str:
    """Write the header line and one line per transition. Returns a status string."""
    _ensure_parent(path)
    header = dict(ds.header, format=DATASET_FORMAT)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(_dumps(header) + "\n")
        for tr in ds.transitions:
            f.write(_dumps(_transition_row(tr)) + "\n")
    return f"Wrote {len(ds)} transitions → {path}"


def read_dataset(path: str) -> Dataset:
    _require_file(path, "dataset")
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f if ln.strip()]
    if not lines:
        raise ConfigError(f"dataset {path} is empty")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as err:
        raise ConfigError(f"dataset {path} is not valid JSON lines: {err}") from err
    if header.pop("format", None) != DATASET_FORMAT:
        raise ConfigError(f"{path} is not an {DATASET_FORMAT} file")

    g = header["geometry"]
    shape = GridShape(int(g["height"]), int(g["width"]))
    transitions = []
    for row in rows:
        missing = [k for k in TRANSITION_FIELDS if k not in row]
        if missing:
            raise ConfigError(f"dataset row lacks {missing}")
        transitions.append(Transition(
            s_t=FrameTokens(row["s_t"], shape),
            a_t=int(row["a_t"]),
            s_next=FrameTokens(row["s_next"], shape),
            r_t=int(row["r_t"]),
            d_t=bool(row["d_t"]),
            has_creature=bool(row["has_creature"]),
            episode=int(row["episode"]),
            step=int(row["step"]),
        ))
    return Dataset(header, transitions)


# ── Codebooks ──────────────────────────────────────────────────────────────────

_CB_HEADER = struct.Struct("<4sIIIIIdII")


def write_codebook(cb: Codebook, path: str) -> str:
    _ensure_parent(path)
    h, w, c = cb.patch_shape
    with open(path, "wb") as f:
        f.write(_CB_HEADER.pack(CODEBOOK_MAGIC, FORMAT_VERSION, cb.size, h, w, c,
                                cb.tau, cb.k_max, cb.overflow_count))
        f.write(cb.flat_codes.astype("<f4").tobytes())
    return f"Wrote codebook ({cb.size} codes) → {path}"


def read_codebook(path: str) -> Codebook:
    _require_file(path, "codebook")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CB_HEADER.size:
        raise ConfigError(f"codebook {path} is truncated")
    magic, version, K, h, w, c, tau, k_max, overflow = _CB_HEADER.unpack_from(raw)
    if magic != CODEBOOK_MAGIC or version != FORMAT_VERSION:
        raise ConfigError(f"{path} is not a version {FORMAT_VERSION} codebook")
    body = np.frombuffer(raw, dtype="<f4", offset=_CB_HEADER.size)
    if body.size != K * h * w * c:
        raise ConfigError(f"codebook {path} holds {body.size} values, header says {K * h * w * c}")
    cb = Codebook((h, w, c), tau=tau, k_max=k_max, codes=body.astype(np.float64))
    cb.overflow_count = overflow
    return cb


# ── Checkpoints ────────────────────────────────────────────────────────────────

def write_checkpoint(model, path: str, codebook_hash: str = "") -> str:
    """Serialize a WorldModel's parameters as float32 blobs behind a config header."""
    _ensure_parent(path)
    meta = _dumps({"config": model.cfg.to_dict(), "codebook_hash": codebook_hash}).encode("utf-8")
    state = model.state_dict()
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", CHECKPOINT_MAGIC, FORMAT_VERSION, len(meta)))
        f.write(meta)
        f.write(struct.pack("<QI", model.num_parameters(), len(state)))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    return f"Wrote checkpoint ({model.num_parameters()} parameters) → {path}"


def read_checkpoint(path: str) -> Tuple[object, Dict]:
    """Returns (WorldModel in eval mode, meta dict with 'config' and 'codebook_hash')."""
    import torch
    from world_model import WmConfig, WorldModel

    _require_file(path, "checkpoint")
    with open(path, "rb") as f:
        raw = f.read()
    try:
        magic, version, meta_len = struct.unpack_from("<4sII", raw, 0)
        if magic != CHECKPOINT_MAGIC or version != FORMAT_VERSION:
            raise ConfigError(f"{path} is not a version {FORMAT_VERSION} checkpoint")
        pos = 12
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        n_params, n_tensors = struct.unpack_from("<QI", raw, pos)
        pos += 12
        state = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            state[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as err:
        raise ConfigError(f"checkpoint {path} is corrupt: {err}") from err

    model = WorldModel(WmConfig.from_dict(meta["config"]))
    if model.num_parameters() != n_params:
        raise ConfigError(
            f"checkpoint declares {n_params} parameters, config builds {model.num_parameters()}"
        )
    model.load_state_dict(state)
    model.eval()
    return model, meta


# ── Reports and metrics ────────────────────────────────────────────────────────

def write_json(obj, path: str) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    return f"Wrote {os.path.basename(path)} → {path}"


def read_json(path: str) -> dict:
    _require_file(path, "JSON file")
    with open(path, encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path} is not valid JSON: {err}") from err


class MetricsWriter:
    """Appends one JSON object per logged training step."""

    def __init__(self, path: str):
        _ensure_parent(path)
        self.path = path
        self._f = open(path, "w", encoding="utf-8", newline="\n")
        self.rows = 0

    def write(self, row: dict) -> None:
        self._f.write(_dumps(row) + "\n")
        self._f.flush()
        self.rows += 1

    def close(self) -> None:
        if not self._f.closed:
            self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str) -> List[dict]:
    _require_file(path, "metrics file")
    with open(path, encoding="utf-8") as f:
        return [json.loads(ln) for ln in f if ln.strip()]
