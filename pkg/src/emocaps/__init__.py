"""EmoCaps multimodal emotion recognition in conversation."""
from ._accel import backend
from .config import PRESETS, EmoformerConfig, ModelConfig, TrainConfig, get_preset
from .model import EmoCaps, collate
from .tensor import Rng, Tensor

__version__ = "0.1.0"

__all__ = ["EmoCaps", "EmoformerConfig", "ModelConfig", "PRESETS", "Rng", "Tensor",
           "TrainConfig", "backend", "collate", "get_preset"]
