"""Lesion-aware cross-phase attention for multi-phase volumetric classification."""
from .model import (
    AttentionRecord,
    CasePrediction,
    ModelConfig,
    ModelParams,
    cross_phase_attention,
    downsample_mask,
    embed_lesion_features,
    forward,
    init_params,
    loss,
    masked_average_pool,
)
from .phantom import PhantomCase, PhantomConfig, generate_case, generate_dataset, load_volume, save_volume
from .tensor import Tensor, backward
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
