"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PPCK"                 4-byte magic
    u32 version             currently 1
    u64 header_len          bytes of the JSON header that follows
    header                  UTF-8 JSON: {"kind", "config", "tensors": [{"name", "shape", "offset", "nbytes"}]}
    blobs                   raw little-endian float32 data; offsets are relative to the end of the header

``kind`` is ``"full"`` for whole-module state or ``"lora"`` for adapter-only
state (``*.lora_A`` / ``*.lora_B`` keyed by layer path).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .lora import apply_lora, lora_state_dict
from .nn import Module

MAGIC = b"PPCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_LE_F32 = np.dtype("<f4")


class CheckpointError(IOError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray], config: dict | None = None, kind: str = "full") -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=_LE_F32)  # tobytes() is C-ordered; keeps 0-d shapes
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "config": config or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (header, tensors). Raises CheckpointError on a malformed or truncated file."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint {path} not found; run the train command first") from e
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (this build reads {VERSION})")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[_PREFIX.size:start].decode())
    tensors = {}
    for e in header["tensors"]:
        lo = start + e["offset"]
        if lo + e["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: tensor {e['name']} is truncated")
        arr = np.frombuffer(raw, dtype=_LE_F32, count=e["nbytes"] // 4, offset=lo)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return header, tensors


def save_module(path, module: Module, config: dict | None = None) -> None:
    save_tensors(path, module.state_dict(), config, kind="full")


def load_module(path, module: Module, strict: bool = True) -> dict:
    """Load full state into ``module``; returns the stored config."""
    header, tensors = load_tensors(path)
    if header["kind"] != "full":
        raise CheckpointError(f"{path} holds {header['kind']!r} state, expected a full checkpoint")
    try:
        module.load_state_dict(tensors, strict=strict)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path} does not match this model: {e}") from e
    return header["config"]


def save_lora(path, model: Module, config: dict | None = None) -> None:
    state = lora_state_dict(model)
    if not state:
        raise CheckpointError("model has no LoRA layers to save")
    save_tensors(path, state, config, kind="lora")


def load_lora(path, model: Module) -> dict:
    """Wrap ``model`` (if needed) and load adapter weights on top of its current base weights."""
    header, tensors = load_tensors(path)
    if header["kind"] != "lora":
        raise CheckpointError(f"{path} holds {header['kind']!r} state, expected a LoRA checkpoint")
    cfg = header["config"]
    apply_lora(model, r=cfg.get("rank", 8), alpha=cfg.get("alpha", 8.0))
    own = dict(model.named_parameters())
    missing = sorted(k for k in own if k.endswith(("lora_A", "lora_B")) and k not in tensors)
    extra = sorted(k for k in tensors if k not in own)
    if missing or extra:
        raise CheckpointError(f"{path}: LoRA layout mismatch (missing={missing[:3]}, unexpected={extra[:3]})")
    model.load_state_dict(tensors, strict=False)
    return cfg
