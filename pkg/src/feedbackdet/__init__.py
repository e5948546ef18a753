"""Two-phase feature-feedback detector for thyroid ultrasound lesions."""

from .config import CLASS_NAMES, ConfigError, ModelConfig, ShapeError, TrainConfig, load_config, model_preset
from .model import FeedbackDetector

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "ConfigError",
    "FeedbackDetector",
    "ModelConfig",
    "ShapeError",
    "TrainConfig",
    "load_config",
    "model_preset",
]
