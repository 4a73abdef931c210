"""ASCEND denoiser: hierarchical Swin-block encoder with residual
down-sampling, a lightweight convolutional decoder with residual up-sampling,
dense encoder-to-decoder skips, and adaptive-normalization timestep
conditioning throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from .conditioning import ConditioningBundle, TimestepEmbedder, resolve_text
from .iuvit import TokenCrossAttention

__all__ = [
    "ASCENDConfig",
    "ASCEND",
    "WindowAttention",
    "window_partition",
    "window_merge",
    "ConvResBlock",
    "ResidualDownsample",
    "ResidualUpsample",
    "PatchMerge",
    "PatchExpand",
]


@dataclass(frozen=True)
class ASCENDConfig:
    image_size: int
    base_channels: int
    depth_per_stage: int
    channel_mult: tuple[int, ...]
    head_channels: int = 64
    attention_resolutions: tuple[int, ...] = ()
    window_size: int = 8
    dropout: float = 0.0
    encoder_block: str = "swin"  # "swin" | "conv"
    decoder_block: str = "conv"  # "conv" | "swin"
    resample_mode: str = "residual"  # "residual" | "patch_merge"
    skip_mode: str = "dense"  # "dense" | "reduced"
    cross_attention: bool = False
    text_width: int = 1024
    text_context: int = 256
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(self.channel_mult))
        object.__setattr__(
            self, "attention_resolutions", tuple(self.attention_resolutions)
        )
        s = self.num_stages
        if self.image_size % (1 << (s - 1)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2**{s - 1}"
            )
        if self.encoder_block not in ("swin", "conv"):
            raise ValueError(f"unknown encoder_block {self.encoder_block!r}")
        if self.decoder_block not in ("conv", "swin"):
            raise ValueError(f"unknown decoder_block {self.decoder_block!r}")
        if self.resample_mode not in ("residual", "patch_merge"):
            raise ValueError(f"unknown resample_mode {self.resample_mode!r}")
        if self.skip_mode not in ("dense", "reduced"):
            raise ValueError(f"unknown skip_mode {self.skip_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for res, ch, swin_enc, swin_dec, _ in self.stage_plan():
            if swin_enc or swin_dec:
                if ch % self.head_channels != 0:
                    raise ValueError(
                        f"stage channels {ch} not divisible by head_channels"
                        f" {self.head_channels}"
                    )
                if res % self.window_size != 0:
                    raise ValueError(
                        f"window_size {self.window_size} does not divide the"
                        f" attended feature-map side {res}"
                    )

    @property
    def num_stages(self) -> int:
        return len(self.channel_mult)

    def stage_plan(self):
        """(resolution, channels, swin_in_encoder, swin_in_decoder, cross) per stage."""
        plan = []
        for s, mult in enumerate(self.channel_mult):
            res = self.image_size >> s
            ch = self.base_channels * mult
            attended = res in self.attention_resolutions
            swin_enc = attended and self.encoder_block == "swin"
            swin_dec = attended and self.decoder_block == "swin"
            cross = attended and self.cross_attention
            plan.append((res, ch, swin_enc, swin_dec, cross))
        return plan


def norm_groups(channels: int, target: int = 32) -> int:
    g = min(target, channels)
    while channels % g != 0:
        g -= 1
    return g


def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, H, W, C) -> (B * num_windows, window*window, C), row-major windows."""
    return rearrange(
        x, "b (nh wh) (nw ww) c -> (b nh nw) (wh ww) c", wh=window, ww=window
    )


def window_merge(wins: Tensor, window: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    return rearrange(
        wins,
        "(b nh nw) (wh ww) c -> b (nh wh) (nw ww) c",
        nh=height // window,
        nw=width // window,
        wh=window,
        ww=window,
    )


def _shift_mask(height: int, width: int, window: int, shift: int, device) -> Tensor:
    """Additive attention mask forbidding pairs that wrapped across the cyclic
    shift boundary; shape (num_windows, window**2, window**2)."""
    img = torch.zeros(1, height, width, 1, device=device)
    region = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[:, hs, ws, :] = region
            region += 1
    ids = window_partition(img, window).squeeze(-1)  # (nW, window**2)
    diff = ids.unsqueeze(1) - ids.unsqueeze(2)
    return torch.where(diff == 0, 0.0, float("-inf"))


class WindowAttention(nn.Module):
    """Multi-head self-attention within (optionally cyclically shifted)
    non-overlapping windows of a (B, H, W, C) feature map.

    Relative position bias is included and zero-initialized; the output
    projection is zero-initialized so the residual branch starts as a no-op.
    """

    def __init__(self, dim: int, window: int, num_heads: int, shifted: bool):
        super().__init__()
        self.window = window
        self.num_heads = num_heads
        self.shift = window // 2 if shifted else 0
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.rel_bias = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, num_heads)
        )
        coords = torch.stack(
            torch.meshgrid(
                torch.arange(window), torch.arange(window), indexing="ij"
            )
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + window - 1
        self.register_buffer(
            "rel_index", rel[0] * (2 * window - 1) + rel[1], persistent=False
        )

    def _attend(self, wins: Tensor, mask: Optional[Tensor]) -> Tensor:
        bw, n, c = wins.shape
        qkv = self.qkv(wins).reshape(bw, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).to(attn.dtype)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(bw // nw, nw, self.num_heads, n, n)
            attn = attn + mask[None, :, None].to(attn.dtype)
            attn = attn.reshape(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        return (attn @ v).transpose(1, 2).reshape(bw, n, c)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % self.window or w % self.window:
            raise ValueError("window size must divide the feature-map sides")
        if self.shift:
            x = torch.roll(x, (-self.shift, -self.shift), dims=(1, 2))
            mask = _shift_mask(h, w, self.window, self.shift, x.device)
        else:
            mask = None
        wins = window_partition(x, self.window)
        wins = self._attend(wins, mask)
        x = window_merge(wins, self.window, h, w)
        if self.shift:
            x = torch.roll(x, (self.shift, self.shift), dims=(1, 2))
        return self.proj(x)


class SwinAttentionLayer(nn.Module):
    """One window-attention layer with adaptive scale-shift conditioning and
    its own FFN, both in pre-norm residual form."""

    def __init__(self, dim, window, num_heads, shifted, t_dim, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.ada = nn.Linear(t_dim, 2 * dim)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)
        self.attn = WindowAttention(dim, window, num_heads, shifted)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(4 * dim, dim),
        )

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        scale, shift = self.ada(F.silu(temb)).chunk(2, dim=-1)
        h = self.norm1(x) * (1 + scale[:, None, None, :]) + shift[:, None, None, :]
        x = x + self.attn(h)
        return x + self.ffn(self.norm2(x))


class SwinPairBlock(nn.Module):
    """One encoder/decoder Swin block: an unshifted and a shifted
    window-attention layer, with optional text cross-attention between them."""

    def __init__(self, in_ch, out_ch, window, head_channels, t_dim, dropout,
                 cross=False, text_width=1024):
        super().__init__()
        heads = out_ch // head_channels
        self.proj_in = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None
        self.layer1 = SwinAttentionLayer(out_ch, window, heads, False, t_dim, dropout)
        self.layer2 = SwinAttentionLayer(out_ch, window, heads, True, t_dim, dropout)
        if cross:
            self.cross_norm = nn.LayerNorm(out_ch)
            self.cross = TokenCrossAttention(out_ch, text_width, heads)
        else:
            self.cross = None

    def forward(self, x, temb, ctx=None, ctx_mask=None):
        if self.proj_in is not None:
            x = self.proj_in(x)
        x = x.permute(0, 2, 3, 1)  # to (B, H, W, C)
        x = self.layer1(x, temb)
        if self.cross is not None and ctx is not None:
            b, h, w, c = x.shape
            tokens = x.reshape(b, h * w, c)
            tokens = tokens + self.cross(self.cross_norm(tokens), ctx, ctx_mask)
            x = tokens.reshape(b, h, w, c)
        x = self.layer2(x, temb)
        return x.permute(0, 3, 1, 2)


class ConvResBlock(nn.Module):
    """Convolutional residual block with adaptive group-norm scale-shift
    conditioning; the second convolution is zero-initialized."""

    def __init__(self, in_ch, out_ch, t_dim, dropout=0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(t_dim, 2 * out_ch)
        nn.init.zeros_(self.emb.weight)
        nn.init.zeros_(self.emb.bias)
        self.norm2 = nn.GroupNorm(norm_groups(out_ch), out_ch, affine=False)
        self.drop = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb, ctx=None, ctx_mask=None):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(self.drop(F.silu(h)))
        return self.skip(x) + h


class ResidualDownsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.norm = nn.GroupNorm(norm_groups(in_ch), in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=2)

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError("downsample requires even spatial dimensions")
        return self.conv(F.silu(self.norm(x))) + self.shortcut(x)


class ResidualUpsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.norm = nn.GroupNorm(norm_groups(in_ch), in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.conv(F.silu(self.norm(x))) + self.shortcut(x)


class PatchMerge(nn.Module):
    """2x2 neighborhood concat followed by a linear projection (ablation arm)."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.proj = nn.Conv2d(4 * in_ch, out_ch, 1)

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError("patch merging requires even spatial dimensions")
        return self.proj(F.pixel_unshuffle(x, 2))


class PatchExpand(nn.Module):
    """Linear projection followed by a 2x2 pixel rearrangement (ablation arm)."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, 4 * out_ch, 1)

    def forward(self, x):
        return F.pixel_shuffle(self.proj(x), 2)


def _make_block(kind, in_ch, out_ch, cfg: ASCENDConfig, t_dim, cross):
    if kind == "swin":
        return SwinPairBlock(
            in_ch, out_ch, cfg.window_size, cfg.head_channels, t_dim,
            cfg.dropout, cross=cross, text_width=cfg.text_width,
        )
    return ConvResBlock(in_ch, out_ch, t_dim, cfg.dropout)


class ASCEND(nn.Module):
    """Epsilon-predicting asymmetric encoder-decoder denoiser."""

    def __init__(self, cfg: ASCENDConfig):
        super().__init__()
        self.cfg = cfg
        plan = cfg.stage_plan()
        t_dim = 4 * cfg.base_channels
        ch0 = cfg.base_channels * cfg.channel_mult[0]
        self.time_embed = TimestepEmbedder(cfg.base_channels, out_dim=t_dim)
        if cfg.cross_attention:
            self.null_text = nn.Parameter(torch.zeros(cfg.text_width))
            nn.init.trunc_normal_(self.null_text, std=0.02)
            self.pooled_proj = nn.Linear(cfg.text_width, t_dim)
        self.stem = nn.Conv2d(cfg.in_channels, ch0, 3, padding=1)

        down_cls = ResidualDownsample if cfg.resample_mode == "residual" else PatchMerge
        up_cls = ResidualUpsample if cfg.resample_mode == "residual" else PatchExpand

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for s, (res, ch, swin_enc, _, cross) in enumerate(plan):
            kind = "swin" if swin_enc else "conv"
            stage = nn.ModuleList(
                _make_block(kind, ch, ch, cfg, t_dim, cross)
                for _ in range(cfg.depth_per_stage)
            )
            self.enc_blocks.append(stage)
            if s < len(plan) - 1:
                self.downs.append(down_cls(ch, plan[s + 1][1]))

        bot_res, bot_ch, bot_swin, _, bot_cross = plan[-1]
        bot_kind = "swin" if bot_swin else "conv"
        self.bottleneck = nn.ModuleList(
            _make_block(bot_kind, bot_ch, bot_ch, cfg, t_dim, bot_cross)
            for _ in range(2)
        )

        self.dec_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for s in reversed(range(len(plan))):
            res, ch, _, swin_dec, cross = plan[s]
            kind = "swin" if swin_dec else "conv"
            stage = nn.ModuleList()
            for d in range(cfg.depth_per_stage + 1):
                concat = cfg.skip_mode == "dense" or d == 0
                in_ch = 2 * ch if concat else ch
                stage.append(_make_block(kind, in_ch, ch, cfg, t_dim, cross and kind == "swin"))
            self.dec_blocks.append(stage)
            if s > 0:
                self.ups.append(up_cls(ch, plan[s - 1][1]))

        self.out_norm = nn.GroupNorm(norm_groups(ch0), ch0)
        self.out_conv = nn.Conv2d(ch0, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(
        self, x_t: Tensor, t: Tensor, cond: Optional[ConditioningBundle] = None
    ) -> Tensor:
        cfg = self.cfg
        if x_t.shape[-1] != cfg.image_size or x_t.shape[-2] != cfg.image_size:
            raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} input")
        b = x_t.shape[0]
        temb = self.time_embed(t).to(x_t.dtype)
        ctx = ctx_mask = None
        if cfg.cross_attention:
            ctx, ctx_mask, pooled = resolve_text(
                self.null_text, cond, b, x_t.device, x_t.dtype
            )
            temb = temb + self.pooled_proj(pooled)

        h = self.stem(x_t)
        skips = [h]
        for s, stage in enumerate(self.enc_blocks):
            for blk in stage:
                h = blk(h, temb, ctx, ctx_mask)
                skips.append(h)
            if s < len(self.downs):
                h = self.downs[s](h)
                skips.append(h)

        for blk in self.bottleneck:
            h = blk(h, temb, ctx, ctx_mask)

        for i, stage in enumerate(self.dec_blocks):
            for d, blk in enumerate(stage):
                skip = skips.pop()
                if self.cfg.skip_mode == "dense" or d == 0:
                    h = torch.cat([h, skip], dim=1)
                h = blk(h, temb, ctx, ctx_mask)
            if i < len(self.ups):
                h = self.ups[i](h)

        assert not skips
        return self.out_conv(F.silu(self.out_norm(h)))
