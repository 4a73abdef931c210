"""Conditioning inputs: timestep embeddings, labels, precomputed text
embeddings, classifier-free dropout, and the embedding-file interface.

Text embeddings are ingested from files (the text encoder itself is external);
see :func:`write_embedding_file` / :class:`EmbeddingStore` for the format.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

__all__ = [
    "NULL_LABEL",
    "ConditioningBundle",
    "apply_conditioning_dropout",
    "sinusoidal_embedding",
    "TimestepEmbedder",
    "LabelEmbedding",
    "EmbeddingFileError",
    "BadMagicError",
    "TruncatedFileError",
    "DimensionMismatchError",
    "EmbeddingStore",
    "write_embedding_file",
    "load_embedding_file",
]

NULL_LABEL = -1  # sentinel meaning "conditioning dropped"; mapped to the
# reserved null row of LabelEmbedding by the backbone.


@dataclass(frozen=True)
class ConditioningBundle:
    """Per-batch conditioning: pooled vector, token sequence with mask,
    integer labels, and per-sample dropped flags."""

    pooled: Optional[Tensor] = None  # (B, D_pool)
    sequence: Optional[Tensor] = None  # (B, L_ctx, D_seq)
    mask: Optional[Tensor] = None  # (B, L_ctx) bool, True = attend
    label: Optional[Tensor] = None  # (B,) long
    dropped: Optional[Tensor] = None  # (B,) bool

    def __post_init__(self):
        if (self.sequence is None) != (self.mask is None):
            raise ValueError("mask must be present iff sequence is present")
        b = self.batch_size
        if self.dropped is None:
            object.__setattr__(self, "dropped", torch.zeros(b, dtype=torch.bool))

    @property
    def batch_size(self) -> int:
        for t in (self.sequence, self.pooled, self.label, self.dropped):
            if t is not None:
                return t.shape[0]
        raise ValueError("empty conditioning bundle")

    def pooled_or_mean(self) -> Optional[Tensor]:
        """Pooled vector; falls back to the masked mean of the sequence rows."""
        if self.pooled is not None:
            return self.pooled
        if self.sequence is None:
            return None
        m = self.mask.to(self.sequence.dtype).unsqueeze(-1)
        denom = m.sum(dim=1).clamp(min=1.0)
        return (self.sequence * m).sum(dim=1) / denom


def apply_conditioning_dropout(
    bundle: ConditioningBundle, p_drop: float, generator: torch.Generator
) -> ConditioningBundle:
    """Independently drop each sample's conditioning with probability p_drop.

    Dropped samples have their text/pooled content zeroed, mask cleared, and
    label set to NULL_LABEL; the backbone substitutes its learned null
    embedding wherever ``dropped`` is set.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must lie in [0, 1]")
    b = bundle.batch_size
    if p_drop == 0.0:
        return bundle
    u = torch.rand(b, generator=generator)
    drop = u < p_drop
    fields = {"dropped": bundle.dropped | drop}
    if bundle.sequence is not None:
        fields["sequence"] = bundle.sequence.masked_fill(drop.reshape(-1, 1, 1), 0.0)
        fields["mask"] = bundle.mask & ~drop.unsqueeze(-1)
    if bundle.pooled is not None:
        fields["pooled"] = bundle.pooled.masked_fill(drop.unsqueeze(-1), 0.0)
    if bundle.label is not None:
        fields["label"] = bundle.label.masked_fill(drop, NULL_LABEL)
    return replace(bundle, **fields)


def sinusoidal_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Standard transformer sinusoid: first half sines, second half cosines.

    Pair i is (sin(t * w_i), cos(t * w_i)) with log-spaced frequencies w_i.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    half = dim // 2
    t = torch.as_tensor(t).float().reshape(-1)
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / half
    ).to(t.device)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    """Sinusoidal timestep embedding followed by a two-layer MLP."""

    def __init__(self, dim: int, out_dim: Optional[int] = None):
        super().__init__()
        out_dim = out_dim or dim
        self.dim = dim
        hidden = out_dim * 4
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, t: Tensor) -> Tensor:
        base = sinusoidal_embedding(t, self.dim)
        return self.mlp(base.to(next(self.parameters()).dtype))


class LabelEmbedding(nn.Module):
    """Learned class-label lookup with a reserved null row at index num_classes."""

    def __init__(self, num_classes: int, dim: int):
        super().__init__()
        self.num_classes = num_classes
        self.table = nn.Embedding(num_classes + 1, dim)

    def forward(self, label: Tensor) -> Tensor:
        null = self.num_classes
        idx = torch.where(label == NULL_LABEL, torch.full_like(label, null), label)
        if bool((idx < 0).any()) or bool((idx > null).any()):
            raise ValueError("label out of range")
        return self.table(idx)


def resolve_text(
    null_text: Tensor,
    cond: Optional[ConditioningBundle],
    batch: int,
    device,
    dtype,
):
    """Materialize the (sequence, mask, pooled) triple a backbone attends to.

    Absent or dropped conditioning attends to the learned null embedding
    (batch-uniform compute), so the unconditional branch has capacity.
    """
    null = null_text.to(dtype)
    if cond is None or cond.sequence is None:
        ctx = null.expand(batch, 1, -1)
        mask = torch.ones(batch, 1, dtype=torch.bool, device=device)
        pooled = null.expand(batch, -1)
        return ctx, mask, pooled
    drop = cond.dropped.to(device)
    ctx = torch.where(
        drop[:, None, None], null.expand_as(cond.sequence), cond.sequence.to(dtype)
    )
    mask = torch.where(drop[:, None], torch.ones_like(cond.mask), cond.mask)
    pooled = cond.pooled_or_mean()
    pooled = torch.where(drop[:, None], null.expand(batch, -1), pooled.to(dtype))
    return ctx, mask, pooled


# ---------------------------------------------------------------------------
# Embedding file format (little-endian):
#   magic "DBEM" | version u32 = 1 | count N u32 | context L u32 | width D u32
#   then N records: key length u16 | key bytes (UTF-8) | L*D float32
# ---------------------------------------------------------------------------

MAGIC = b"DBEM"
FORMAT_VERSION = 1


class EmbeddingFileError(Exception):
    pass


class BadMagicError(EmbeddingFileError):
    pass


class TruncatedFileError(EmbeddingFileError):
    pass


class DimensionMismatchError(EmbeddingFileError):
    pass


def write_embedding_file(path, entries: dict[str, np.ndarray], context: int, width: int):
    """Write a key-addressed table of (context, width) float32 embeddings."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, len(entries), context, width))
        for key, rows in entries.items():
            rows = np.ascontiguousarray(rows, dtype="<f4")
            if rows.shape != (context, width):
                raise DimensionMismatchError(
                    f"entry {key!r} has shape {rows.shape}, expected {(context, width)}"
                )
            kb = key.encode("utf-8")
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            f.write(rows.tobytes())


class EmbeddingStore:
    """In-memory table of text-embedding rows addressable by sample key."""

    def __init__(self, context: int, width: int, rows: dict[str, np.ndarray]):
        self.context = context
        self.width = width
        self._rows = rows

    def keys(self):
        return self._rows.keys()

    def __len__(self):
        return len(self._rows)

    def __contains__(self, key):
        return key in self._rows

    def __getitem__(self, key: str) -> np.ndarray:
        return self._rows[key]


def load_embedding_file(
    path, expected_context: Optional[int] = None, expected_width: Optional[int] = None
) -> EmbeddingStore:
    """Read an embedding file, validating magic, version, and declared geometry."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an embedding file")
    if len(data) < 20:
        raise TruncatedFileError(f"{path}: truncated header")
    version, count, context, width = struct.unpack_from("<IIII", data, 4)
    if version != FORMAT_VERSION:
        raise EmbeddingFileError(f"{path}: unsupported version {version}")
    if expected_context is not None and context != expected_context:
        raise DimensionMismatchError(
            f"{path}: context {context} does not match configured {expected_context}"
        )
    if expected_width is not None and width != expected_width:
        raise DimensionMismatchError(
            f"{path}: width {width} does not match configured {expected_width}"
        )
    rows: dict[str, np.ndarray] = {}
    off = 20
    rec_bytes = context * width * 4
    for _ in range(count):
        if off + 2 > len(data):
            raise TruncatedFileError(f"{path}: truncated record header")
        (klen,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + klen + rec_bytes > len(data):
            raise TruncatedFileError(f"{path}: truncated record payload")
        key = data[off : off + klen].decode("utf-8")
        off += klen
        arr = np.frombuffer(data[off : off + rec_bytes], dtype="<f4").reshape(
            context, width
        )
        rows[key] = arr.copy()
        off += rec_bytes
    return EmbeddingStore(context, width, rows)
