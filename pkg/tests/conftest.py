import pytest
import torch

from vitdiff import ASCENDConfig, IUViTConfig, make_linear_schedule


def toy_iuvit_config(**overrides):
    kw = dict(image_size=8, patch_size=2, depth=3, hidden_size=16, num_heads=4)
    kw.update(overrides)
    return IUViTConfig(**kw)


def toy_ascend_config(**overrides):
    kw = dict(
        image_size=16,
        base_channels=16,
        depth_per_stage=1,
        channel_mult=(1, 2),
        head_channels=16,
        attention_resolutions=(16,),
        window_size=8,
    )
    kw.update(overrides)
    return ASCENDConfig(**kw)


@pytest.fixture
def lin4():
    return make_linear_schedule(4)


@pytest.fixture
def lin50():
    return make_linear_schedule(50)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
