"""Versioned, checksummed binary checkpoint container.

Layout (little-endian):

    magic "DBCK" | version u32 | header length u64 | header JSON (UTF-8)
    | raw tensor payload | sha256 digest of everything before it (32 bytes)

The header carries the model config, iteration counter, optimizer metadata,
and a tensor index (name, dtype, shape, byte length); tensors are stored
back-to-back in index order. Saves are atomic (write temp, fsync, rename) and
the save/load roundtrip is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
from torch import Tensor

__all__ = [
    "CheckpointError",
    "CheckpointCorruptError",
    "CheckpointVersionError",
    "TrainState",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"DBCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class TrainState:
    """Everything needed to resume training deterministically."""

    model_config: dict
    iteration: int
    model_state: dict[str, Tensor]
    ema_state: dict[str, Tensor]
    optimizer_state: dict
    generator_state: Tensor  # torch.Generator byte state
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        # EMA shadows every trainable parameter; the model table may add buffers.
        for name, t in self.ema_state.items():
            if name not in self.model_state:
                raise CheckpointError(f"EMA tensor {name!r} missing from model table")
            if tuple(self.model_state[name].shape) != tuple(t.shape):
                raise CheckpointError(f"model/EMA shape mismatch for {name!r}")


def _flatten_optimizer(opt_state: dict):
    tensors: dict[str, Tensor] = {}
    meta: dict[str, Any] = {"param_groups": opt_state.get("param_groups", []), "scalars": {}}
    for idx, sub in opt_state.get("state", {}).items():
        for key, val in sub.items():
            if isinstance(val, Tensor):
                tensors[f"opt.{idx}.{key}"] = val
            else:
                meta["scalars"][f"{idx}.{key}"] = val
    return tensors, meta


def _unflatten_optimizer(meta: dict, tensors: dict[str, Tensor]) -> dict:
    state: dict[int, dict] = {}
    for name, t in tensors.items():
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = t
    for name, val in meta.get("scalars", {}).items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = val
    return {"state": state, "param_groups": meta.get("param_groups", [])}


def _to_numpy(t: Tensor) -> np.ndarray:
    # note: np.ascontiguousarray would promote 0-dim arrays to 1-dim, which
    # breaks the shape roundtrip for scalar optimizer state
    return t.detach().cpu().contiguous().numpy()


def save_checkpoint(state: TrainState, path) -> None:
    tables: list[tuple[str, Tensor]] = []
    for prefix, table in (("model", state.model_state), ("ema", state.ema_state)):
        for name, t in sorted(table.items()):
            tables.append((f"{prefix}.{name}", t))
    opt_tensors, opt_meta = _flatten_optimizer(state.optimizer_state)
    for name, t in sorted(opt_tensors.items()):
        tables.append((name, t))
    tables.append(("rng.generator", state.generator_state))

    index = []
    blobs = []
    for name, t in tables:
        arr = _to_numpy(t)
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)

    header = json.dumps(
        {
            "model_config": state.model_config,
            "iteration": state.iteration,
            "optimizer_meta": opt_meta,
            "extra": state.extra,
            "tensors": index,
        }
    ).encode("utf-8")

    digest = hashlib.sha256()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(header)), header]
    parts.extend(blobs)
    for p in parts:
        digest.update(p)

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            for p in parts:
                f.write(p)
            f.write(digest.digest())
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 + 32 or data[:4] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    stored = data[-32:]
    if hashlib.sha256(data[:-32]).digest() != stored:
        raise CheckpointCorruptError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    off = 16
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"{path}: bad header ({e})") from e
    off += hlen

    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        n = entry["nbytes"]
        if off + n > len(data) - 32:
            raise CheckpointCorruptError(f"{path}: truncated tensor payload")
        arr = np.frombuffer(data[off : off + n], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = torch.from_numpy(
            arr.reshape(entry["shape"]).copy()
        )
        off += n

    model_state = {
        k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")
    }
    ema_state = {k[len("ema.") :]: v for k, v in tensors.items() if k.startswith("ema.")}
    opt_tensors = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    if "rng.generator" not in tensors:
        raise CheckpointCorruptError(f"{path}: missing RNG state tensor")
    return TrainState(
        model_config=header["model_config"],
        iteration=header["iteration"],
        model_state=model_state,
        ema_state=ema_state,
        optimizer_state=_unflatten_optimizer(header["optimizer_meta"], opt_tensors),
        generator_state=tensors["rng.generator"],
        extra=header.get("extra", {}),
    )
