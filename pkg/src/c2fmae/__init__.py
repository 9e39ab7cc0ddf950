"""Coarse-to-fine multi-granular masked autoencoder on numpy."""

from .masking import MaskConfig, MaskPlan, ScheduleConfig, build_mask_plan, schedule_alphas
from .model import C2FMAE, ModelConfig
from .objective import LossWeights
from .synthdata import MultiGranularSample, SceneConfig, generate_sample
from .tokenizer import TokenLayout
from .trainer import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "C2FMAE", "LossWeights", "MaskConfig", "MaskPlan", "ModelConfig", "MultiGranularSample", "SceneConfig",
    "ScheduleConfig", "TokenLayout", "TrainConfig", "build_mask_plan", "generate_sample", "schedule_alphas",
    "train_loop",
]
