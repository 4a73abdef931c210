import numpy as np
import pytest
import torch
from PIL import Image

from conftest import toy_ascend_config, toy_iuvit_config
from vitdiff.ascend import ASCEND
from vitdiff.iuvit import IUViT
from vitdiff.reports import ModelReport, channel_stats, count_report, emit_sample_grid


def _torch_count(model):
    return sum(p.numel() for p in model.parameters())


IUVIT_VARIANTS = [
    dict(),
    dict(use_dwconv_ffn=False),
    dict(head_mode="linear_first"),
    dict(num_classes=7),
    dict(cross_attention=True, text_width=12, text_context=4),
    dict(depth=5, hidden_size=32, num_heads=8),
    dict(image_size=16, patch_size=4, hidden_size=32, num_heads=4),
]

ASCEND_VARIANTS = [
    dict(),
    dict(resample_mode="patch_merge"),
    dict(skip_mode="reduced"),
    dict(decoder_block="swin"),
    dict(encoder_block="conv"),
    dict(cross_attention=True, text_width=12, text_context=4),
    dict(channel_mult=(1, 2, 4), attention_resolutions=(8, 4), window_size=4),
    dict(depth_per_stage=2),
]


@pytest.mark.parametrize("overrides", IUVIT_VARIANTS)
def test_iuvit_count_matches_materialized_model(overrides):
    cfg = toy_iuvit_config(**overrides)
    report = count_report(cfg)
    assert report.backbone == "iuvit"
    assert report.total_params == _torch_count(IUViT(cfg))


@pytest.mark.parametrize("overrides", ASCEND_VARIANTS)
def test_ascend_count_matches_materialized_model(overrides):
    cfg = toy_ascend_config(**overrides)
    report = count_report(cfg)
    assert report.backbone == "ascend"
    assert report.total_params == _torch_count(ASCEND(cfg))


def test_report_breakdown_must_sum():
    with pytest.raises(ValueError):
        ModelReport("x", total_params=10, breakdown={"a": 3}, forward_flops=0)


def test_report_lines_format():
    cfg = toy_iuvit_config()
    lines = list(count_report(cfg).lines())
    assert lines[0] == "backbone=iuvit"
    assert any(l.startswith("total_params=") for l in lines)
    assert any(l.startswith("forward_flops=") for l in lines)


def test_count_report_rejects_unknown_config():
    with pytest.raises(TypeError):
        count_report(object())


def test_flops_scale_with_resolution():
    small = count_report(toy_iuvit_config())
    big = count_report(toy_iuvit_config(image_size=16))
    assert big.forward_flops > small.forward_flops


def test_emit_sample_grid_roundtrip(tmp_path):
    # two solid-color 2x2 images: pure red and pure blue
    batch = torch.full((2, 3, 2, 2), -1.0)
    batch[0, 0] = 1.0
    batch[1, 2] = 1.0
    path = tmp_path / "grid.png"
    emit_sample_grid(batch, path, grid_cols=2)
    img = np.asarray(Image.open(path))
    assert img.shape == (2, 4, 3)
    assert (img[:, :2] == [255, 0, 0]).all()
    assert (img[:, 2:] == [0, 0, 255]).all()


def test_emit_sample_grid_pads_last_row(tmp_path):
    batch = torch.zeros(3, 3, 4, 4)
    path = tmp_path / "grid.png"
    emit_sample_grid(batch, path, grid_cols=2)
    img = np.asarray(Image.open(path))
    assert img.shape == (8, 8, 3)
    with pytest.raises(ValueError):
        emit_sample_grid(batch, path, grid_cols=0)
    with pytest.raises(ValueError):
        emit_sample_grid(batch[0], path, grid_cols=1)


def test_channel_stats_reference():
    batch = torch.zeros(2, 2, 2, 2, dtype=torch.float64)
    batch[:, 0] = torch.tensor([[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]])
    batch[:, 1] = -1.0
    stats = channel_stats(batch)
    assert stats["mean"][0] == pytest.approx(4.5)
    assert stats["mean"][1] == pytest.approx(-1.0)
    assert stats["min"][0] == 1.0 and stats["max"][0] == 8.0
    assert stats["std"][1] == 0.0
    with pytest.raises(ValueError):
        channel_stats(torch.zeros(0, 3, 2, 2))
