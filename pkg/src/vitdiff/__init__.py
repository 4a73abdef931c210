"""Diffusion image generation with transformer denoiser backbones."""

from .ascend import ASCEND, ASCENDConfig
from .conditioning import ConditioningBundle, EmbeddingStore, load_embedding_file, write_embedding_file
from .config import RunConfig, build_backbone, build_schedule, load_run_config
from .core import cfg_combine, epsilon_loss, posterior_mean, q_sample
from .iuvit import IUViT, IUViTConfig
from .reports import count_report
from .samplers import GuidanceSpec, SamplerSpec, run_sampler
from .schedule import NoiseSchedule, make_cosine_schedule, make_linear_schedule
from .training import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "ASCEND",
    "ASCENDConfig",
    "ConditioningBundle",
    "EmbeddingStore",
    "GuidanceSpec",
    "IUViT",
    "IUViTConfig",
    "NoiseSchedule",
    "RunConfig",
    "SamplerSpec",
    "TrainConfig",
    "Trainer",
    "build_backbone",
    "build_schedule",
    "cfg_combine",
    "count_report",
    "epsilon_loss",
    "load_embedding_file",
    "load_run_config",
    "make_cosine_schedule",
    "make_linear_schedule",
    "posterior_mean",
    "q_sample",
    "run_sampler",
    "write_embedding_file",
    "__version__",
]
