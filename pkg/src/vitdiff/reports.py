"""Inspection tools: parameter/FLOP accounting from config algebra alone,
sample-grid PNG emission, and per-channel statistics.

Parameter counts are computed without allocating any tensors, by walking the
same construction plan the backbones use; tests assert exact agreement with
the materialized models.

FLOP convention: one multiply-add counts as 2 FLOPs; attention is counted as
its QK^T and AV matmuls; normalizations and activations are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .ascend import ASCENDConfig
from .iuvit import IUViTConfig

__all__ = ["ModelReport", "count_report", "emit_sample_grid", "channel_stats"]


@dataclass
class ModelReport:
    backbone: str
    total_params: int
    breakdown: dict[str, int]
    forward_flops: int
    attention_tokens: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if sum(self.breakdown.values()) != self.total_params:
            raise ValueError("parameter breakdown does not sum to the total")

    def lines(self):
        yield f"backbone={self.backbone}"
        yield f"total_params={self.total_params}"
        for name, n in self.breakdown.items():
            yield f"params.{name}={n}"
        yield f"forward_flops={self.forward_flops}"
        for name, n in self.attention_tokens.items():
            yield f"attention_tokens.{name}={n}"


def _linear(i, o):
    return i * o + o


def _conv(i, o, k, groups=1):
    return o * (i // groups) * k * k + o


def _ln(c):
    return 2 * c


def _mlp_time(dim, out_dim):
    return _linear(dim, 4 * out_dim) + _linear(4 * out_dim, out_dim)


def _iuvit_counts(cfg: IUViTConfig) -> tuple[dict[str, int], int]:
    c = cfg.hidden_size
    p = cfg.patch_size
    n = cfg.num_tokens
    tw = cfg.text_width
    bd: dict[str, int] = {}
    bd["patch_embed"] = _linear(cfg.in_channels * p * p, c) + n * c
    bd["time_embed"] = _mlp_time(c, c)
    if cfg.num_classes is not None:
        bd["label_embed"] = (cfg.num_classes + 1) * c
    if cfg.cross_attention:
        bd["text_conditioning"] = tw + _linear(tw, c)

    per_block = _ln(c) + _linear(c, 3 * c) + _linear(c, c)  # self-attention
    if cfg.cross_attention:
        per_block += _ln(c) + _linear(c, c) + _linear(tw, 2 * c) + _linear(c, c)
    per_block += _ln(c) + _linear(c, 4 * c) + _linear(4 * c, c)  # FFN
    if cfg.use_dwconv_ffn:
        per_block += _conv(4 * c, 4 * c, 3, groups=4 * c)
    bd["blocks"] = per_block * cfg.depth
    bd["skip_merges"] = (cfg.depth // 2) * _linear(2 * c, c)

    head = _ln(c)
    if cfg.head_mode == "rearrange_first":
        head += _conv(c // (p * p), cfg.in_channels, 3)
    else:
        head += _linear(c, cfg.in_channels * p * p) + _conv(
            cfg.in_channels, cfg.in_channels, 3
        )
    bd["head"] = head

    # FLOPs for one forward pass at the configured resolution
    tokens = n + cfg.num_extras
    fl = 2 * n * (cfg.in_channels * p * p) * c  # patch embedding
    per_block_fl = 2 * tokens * (c * 3 * c + c * c)  # qkv + output proj
    per_block_fl += 2 * 2 * tokens * tokens * c  # QK^T and AV
    if cfg.cross_attention:
        lctx = cfg.text_context
        per_block_fl += 2 * tokens * c * c + 2 * lctx * tw * 2 * c
        per_block_fl += 2 * 2 * tokens * lctx * c + 2 * tokens * c * c
    per_block_fl += 2 * tokens * (c * 4 * c + 4 * c * c)
    if cfg.use_dwconv_ffn:
        per_block_fl += 2 * n * 4 * c * 9
    fl += per_block_fl * cfg.depth
    fl += (cfg.depth // 2) * 2 * tokens * 2 * c * c
    if cfg.head_mode == "rearrange_first":
        fl += 2 * cfg.image_size**2 * (c // (p * p)) * cfg.in_channels * 9
    else:
        fl += 2 * n * c * cfg.in_channels * p * p
        fl += 2 * cfg.image_size**2 * cfg.in_channels * cfg.in_channels * 9
    return bd, fl


def _ascend_counts(cfg: ASCENDConfig) -> tuple[dict[str, int], int, dict[str, int]]:
    base = cfg.base_channels
    t_dim = 4 * base
    tw = cfg.text_width
    plan = cfg.stage_plan()
    ch0 = plan[0][1]
    w = cfg.window_size

    def conv_block(i, o):
        n = _ln(i) + _conv(i, o, 3) + _linear(t_dim, 2 * o) + _conv(o, o, 3)
        if i != o:
            n += _conv(i, o, 1)
        return n

    def swin_layer(o):
        n = _linear(t_dim, 2 * o)  # adaptive scale-shift
        n += _linear(o, 3 * o) + _linear(o, o)  # window attention
        n += (2 * w - 1) ** 2 * (o // cfg.head_channels)  # relative bias
        n += _ln(o) + _linear(o, 4 * o) + _linear(4 * o, o)  # FFN
        return n

    def swin_block(i, o, cross):
        n = 2 * swin_layer(o)
        if i != o:
            n += _conv(i, o, 1)
        if cross:
            n += _ln(o) + _linear(o, o) + _linear(tw, 2 * o) + _linear(o, o)
        return n

    def block(kind, i, o, cross):
        return swin_block(i, o, cross) if kind == "swin" else conv_block(i, o)

    def resample(i, o):
        if cfg.resample_mode == "residual":
            return _ln(i) + _conv(i, o, 3) + _conv(i, o, 1)
        return _conv(4 * i, o, 1)  # merge; expand below

    def expand(i, o):
        if cfg.resample_mode == "residual":
            return _ln(i) + _conv(i, o, 3) + _conv(i, o, 1)
        return _conv(i, 4 * o, 1)

    bd: dict[str, int] = {}
    bd["time_embed"] = _mlp_time(base, t_dim)
    if cfg.cross_attention:
        bd["text_conditioning"] = tw + _linear(tw, t_dim)
    bd["stem"] = _conv(cfg.in_channels, ch0, 3)

    enc = 0
    attn_tokens: dict[str, int] = {}
    for s, (res, ch, swin_enc, swin_dec, cross) in enumerate(plan):
        kind = "swin" if swin_enc else "conv"
        enc += cfg.depth_per_stage * block(kind, ch, ch, cross)
        if s < len(plan) - 1:
            enc += resample(ch, plan[s + 1][1])
        if swin_enc or swin_dec:
            attn_tokens[f"stage{s}_res{res}"] = res * res
    bd["encoder"] = enc

    bot_res, bot_ch, bot_swin, _, bot_cross = plan[-1]
    bd["bottleneck"] = 2 * block("swin" if bot_swin else "conv", bot_ch, bot_ch, bot_cross)

    dec = 0
    for s in reversed(range(len(plan))):
        res, ch, _, swin_dec, cross = plan[s]
        kind = "swin" if swin_dec else "conv"
        for d in range(cfg.depth_per_stage + 1):
            concat = cfg.skip_mode == "dense" or d == 0
            dec += block(kind, 2 * ch if concat else ch, ch, cross and kind == "swin")
        if s > 0:
            dec += expand(ch, plan[s - 1][1])
    bd["decoder"] = dec
    bd["head"] = _ln(ch0) + _conv(ch0, cfg.in_channels, 3)

    # FLOP estimate: convolutions and linears over the spatial ladder
    def conv_fl(i, o, k, hw, groups=1):
        return 2 * hw * (i // groups) * o * k * k

    fl = conv_fl(cfg.in_channels, ch0, 3, cfg.image_size**2)
    for s, (res, ch, swin_enc, swin_dec, cross) in enumerate(plan):
        hw = res * res
        if swin_enc:
            per = 2 * (2 * hw * (ch * 3 * ch + ch * ch) + 2 * 2 * hw * w * w * ch)
            per += 2 * 2 * hw * (ch * 4 * ch + 4 * ch * ch)
        else:
            per = conv_fl(ch, ch, 3, hw) * 2
        fl += (cfg.depth_per_stage * 2 + cfg.depth_per_stage + 3) * per  # enc+dec+bottleneck share
        if s < len(plan) - 1:
            fl += conv_fl(ch, plan[s + 1][1], 3, (res // 2) ** 2)
            fl += conv_fl(ch, plan[s - 1][1] if s > 0 else ch0, 3, hw)
    fl += conv_fl(ch0, cfg.in_channels, 3, cfg.image_size**2)
    return bd, fl, attn_tokens


def count_report(cfg) -> ModelReport:
    """Exact parameter count and FLOP estimate from the config alone."""
    if isinstance(cfg, IUViTConfig):
        bd, fl = _iuvit_counts(cfg)
        tokens = {"all_blocks": cfg.num_tokens + cfg.num_extras}
        return ModelReport("iuvit", sum(bd.values()), bd, fl, tokens)
    if isinstance(cfg, ASCENDConfig):
        bd, fl, tokens = _ascend_counts(cfg)
        return ModelReport("ascend", sum(bd.values()), bd, fl, tokens)
    raise TypeError(f"unsupported config type {type(cfg).__name__}")


def emit_sample_grid(batch: Tensor, path, grid_cols: int) -> None:
    """Tile a batch of [-1, 1] images row-major into an 8-bit RGB PNG."""
    if batch.ndim != 4:
        raise ValueError("expected a (B, C, H, W) batch")
    b, c, h, w = batch.shape
    if grid_cols < 1:
        raise ValueError("grid_cols must be >= 1")
    rows = (b + grid_cols - 1) // grid_cols
    arr = batch.detach().cpu().float().numpy()
    arr = np.clip((arr + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)
    canvas = np.zeros((rows * h, grid_cols * w, c), dtype=np.uint8)
    for i in range(b):
        r, col = divmod(i, grid_cols)
        canvas[r * h : (r + 1) * h, col * w : (col + 1) * w] = arr[i].transpose(1, 2, 0)
    img = Image.fromarray(canvas.squeeze(-1) if c == 1 else canvas)
    img.save(path, format="PNG")


def channel_stats(batch: Tensor) -> dict[str, np.ndarray]:
    """Exact per-channel mean/std/min/max in float64."""
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise ValueError("expected a nonempty (B, C, H, W) batch")
    arr = batch.detach().cpu().double().numpy()
    flat = arr.transpose(1, 0, 2, 3).reshape(arr.shape[1], -1)
    return {
        "mean": flat.mean(axis=1),
        "std": flat.std(axis=1),
        "min": flat.min(axis=1),
        "max": flat.max(axis=1),
    }
