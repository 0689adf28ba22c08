"""Masked-token and contrastive pre-training of video transformers on discrete token grids."""

from .config import RunConfig
from .estimators import VimpacClassifier, VimpacPretrainer
from .masking import MaskingConfig, MaskSet, sample_mask
from .model import ModelConfig, VimpacModel
from .objectives import ContrastiveConfig, ObjectiveConfig, info_nce, mask_nll
from .pipeline import CropConfig, FinetuneConfig, PairSamplerConfig, TrainConfig, Trainer
from .tokens import TokenGrid, VideoTokenStore, Vocabulary, load_store, save_store

__version__ = "0.1.0"

__all__ = [
    "ContrastiveConfig", "CropConfig", "FinetuneConfig", "MaskSet", "MaskingConfig", "ModelConfig",
    "ObjectiveConfig", "PairSamplerConfig", "RunConfig", "TokenGrid", "TrainConfig", "Trainer",
    "VideoTokenStore", "VimpacClassifier", "VimpacModel", "VimpacPretrainer", "Vocabulary", "info_nce",
    "load_store", "mask_nll", "sample_mask", "save_store",
]
