"""IU-ViT denoiser: patch tokens plus a time token through a stack of
transformer blocks with long skip connections, separated self/cross-attention,
a depthwise-convolution FFN, and a Rearrange-first prediction head.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from einops import rearrange
from torch import Tensor, nn

from .conditioning import (
    NULL_LABEL,
    ConditioningBundle,
    LabelEmbedding,
    TimestepEmbedder,
    resolve_text,
)

__all__ = ["IUViTConfig", "IUViT", "DWConvFFN", "TokenSelfAttention", "TokenCrossAttention"]


@dataclass(frozen=True)
class IUViTConfig:
    image_size: int
    patch_size: int
    depth: int
    hidden_size: int
    num_heads: int
    use_dwconv_ffn: bool = True
    head_mode: str = "rearrange_first"  # "rearrange_first" | "linear_first"
    cross_attention: bool = False
    text_width: int = 1024
    text_context: int = 256
    num_classes: Optional[int] = None
    in_channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")
        if self.head_mode not in ("rearrange_first", "linear_first"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        p2 = self.patch_size**2
        if self.head_mode == "rearrange_first" and self.hidden_size % p2 != 0:
            raise ValueError("rearrange_first head needs patch_size**2 | hidden_size")
        if self.depth % 2 != 1:
            raise ValueError("depth must be odd (in / middle / out block split)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2

    @property
    def num_extras(self) -> int:
        return 1 + (1 if self.num_classes is not None else 0)


class TokenSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class TokenCrossAttention(nn.Module):
    """Queries from image/extra tokens, keys and values from the text sequence.

    The output projection is zero-initialized so conditioning starts as a
    no-op inside the residual block. Fully masked rows contribute zero.
    """

    def __init__(self, dim: int, context_width: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(context_width, dim * 2)
        self.proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: Tensor, ctx: Tensor, mask: Optional[Tensor]) -> Tensor:
        b, n, c = x.shape
        l = ctx.shape[1]
        hd = c // self.num_heads
        q = self.q(x).reshape(b, n, self.num_heads, hd).transpose(1, 2)
        kv = self.kv(ctx).reshape(b, l, 2, self.num_heads, hd)
        k, v = kv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            attn = attn.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        attn = torch.nan_to_num(attn, nan=0.0)  # fully masked rows -> zero output
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class DWConvFFN(nn.Module):
    """Feed-forward with an optional 3x3 depthwise convolution over the token
    grid after the expansion; extra (non-spatial) tokens bypass the conv."""

    def __init__(self, dim: int, grid: tuple[int, int], use_dwconv: bool):
        super().__init__()
        hidden = dim * 4
        self.grid = grid
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = (
            nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
            if use_dwconv
            else None
        )
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor, num_extras: int) -> Tensor:
        h = self.fc1(x)
        if self.dwconv is not None:
            gh, gw = self.grid
            img = h[:, num_extras:]
            if img.shape[1] != gh * gw:
                raise ValueError("token count does not match the conv grid")
            img = rearrange(img, "b (gh gw) c -> b c gh gw", gh=gh, gw=gw)
            img = self.dwconv(img)
            img = rearrange(img, "b c gh gw -> b (gh gw) c")
            h = torch.cat([h[:, :num_extras], img], dim=1)
        return self.fc2(self.act(h))


class IUViTBlock(nn.Module):
    def __init__(self, cfg: IUViTConfig):
        super().__init__()
        c = cfg.hidden_size
        self.norm1 = nn.LayerNorm(c)
        self.attn = TokenSelfAttention(c, cfg.num_heads)
        if cfg.cross_attention:
            self.norm_ca = nn.LayerNorm(c)
            self.cross = TokenCrossAttention(c, cfg.text_width, cfg.num_heads)
        else:
            self.cross = None
        self.norm2 = nn.LayerNorm(c)
        self.ffn = DWConvFFN(c, (cfg.grid_size, cfg.grid_size), cfg.use_dwconv_ffn)

    def forward(self, x, num_extras, ctx=None, ctx_mask=None):
        x = x + self.attn(self.norm1(x))
        if self.cross is not None and ctx is not None:
            x = x + self.cross(self.norm_ca(x), ctx, ctx_mask)
        return x + self.ffn(self.norm2(x), num_extras)


class IUViT(nn.Module):
    """Epsilon-predicting denoiser with constant token count across depth."""

    def __init__(self, cfg: IUViTConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.hidden_size
        p = cfg.patch_size
        self.patch_embed = nn.Linear(cfg.in_channels * p * p, c)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, c))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.time_embed = TimestepEmbedder(c)
        self.label_embed = (
            LabelEmbedding(cfg.num_classes, c) if cfg.num_classes is not None else None
        )
        if cfg.cross_attention:
            self.null_text = nn.Parameter(torch.zeros(cfg.text_width))
            nn.init.trunc_normal_(self.null_text, std=0.02)
            self.pooled_proj = nn.Linear(cfg.text_width, c)
        self.blocks = nn.ModuleList(IUViTBlock(cfg) for _ in range(cfg.depth))
        self.skip_merges = nn.ModuleList(
            nn.Linear(2 * c, c) for _ in range(cfg.depth // 2)
        )
        self.final_norm = nn.LayerNorm(c)
        if cfg.head_mode == "rearrange_first":
            self.out_conv = nn.Conv2d(c // (p * p), cfg.in_channels, 3, padding=1)
        else:
            self.head_linear = nn.Linear(c, cfg.in_channels * p * p)
            self.out_conv = nn.Conv2d(cfg.in_channels, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _resolve_text(self, cond: Optional[ConditioningBundle], b, device, dtype):
        if not self.cfg.cross_attention:
            return None, None, None
        return resolve_text(self.null_text, cond, b, device, dtype)

    def forward(
        self, x_t: Tensor, t: Tensor, cond: Optional[ConditioningBundle] = None
    ) -> Tensor:
        cfg = self.cfg
        b, _, h, w = x_t.shape
        if h != cfg.image_size or w != cfg.image_size:
            raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} input")
        p = cfg.patch_size
        tokens = rearrange(
            x_t, "b c (gh p1) (gw p2) -> b (gh gw) (c p1 p2)", p1=p, p2=p
        )
        tokens = self.patch_embed(tokens) + self.pos_embed.to(x_t.dtype)

        ctx, ctx_mask, pooled = self._resolve_text(cond, b, x_t.device, x_t.dtype)
        temb = self.time_embed(t).to(x_t.dtype)
        if pooled is not None:
            temb = temb + self.pooled_proj(pooled)
        extras = [temb.unsqueeze(1)]
        if self.label_embed is not None:
            if cond is not None and cond.label is not None:
                label = torch.where(
                    cond.dropped, torch.full_like(cond.label, NULL_LABEL), cond.label
                )
            else:
                label = torch.full((b,), NULL_LABEL, dtype=torch.long, device=x_t.device)
            extras.append(self.label_embed(label).to(x_t.dtype).unsqueeze(1))
        x = torch.cat(extras + [tokens], dim=1)

        n_extras = cfg.num_extras
        half = cfg.depth // 2
        skips = []
        for i, blk in enumerate(self.blocks):
            if i > half:
                merge = self.skip_merges[i - half - 1]
                x = merge(torch.cat([x, skips.pop()], dim=-1))
            x = blk(x, n_extras, ctx, ctx_mask)
            if i < half:
                skips.append(x)

        x = self.final_norm(x)[:, n_extras:]
        if cfg.head_mode == "rearrange_first":
            fmap = rearrange(
                x, "b (gh gw) (c p1 p2) -> b c (gh p1) (gw p2)",
                gh=cfg.grid_size, p1=p, p2=p,
            )
            return self.out_conv(fmap)
        x = self.head_linear(x)
        fmap = rearrange(
            x, "b (gh gw) (c p1 p2) -> b c (gh p1) (gw p2)",
            gh=cfg.grid_size, p1=p, p2=p,
        )
        return self.out_conv(fmap)
