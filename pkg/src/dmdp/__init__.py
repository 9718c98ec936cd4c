"""Gated, modality-disentangled deep prompt tuning on a small frozen dual encoder."""
from .encoder import DualEncoderParams, EncoderConfig
from .prompts import PromptBank, PromptConfig, Variant, dmdp_forward
from .training import Metrics, TrainConfig, compute_metrics, evaluate, train

__all__ = [
    "DualEncoderParams", "EncoderConfig", "PromptBank", "PromptConfig", "Variant", "dmdp_forward",
    "Metrics", "TrainConfig", "compute_metrics", "evaluate", "train",
]
__version__ = "0.1.0"
