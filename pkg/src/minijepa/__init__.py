"""Desk-scale masked latent prediction with dense context supervision."""

from .config import RunConfig, desk_config, full_scale_config
from .masking import MaskParams, MaskSpec, min_distance_map, sample_mask
from .model import ModelConfig, MultiLevelFeatures, PatchGrid
from .objective import LossWeights, Schedule, lambda_weight, lr_at
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "desk_config", "full_scale_config",
    "MaskParams", "MaskSpec", "min_distance_map", "sample_mask",
    "ModelConfig", "MultiLevelFeatures", "PatchGrid",
    "LossWeights", "Schedule", "lambda_weight", "lr_at",
    "Tensor",
]
