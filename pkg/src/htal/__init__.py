"""Anchor-free temporal action localization with hierarchical transformers."""

from .config import ModelConfig, TrainConfig, load_config
from .estimator import TemporalActionLocalizer
from .evaluation import EvalReport, average_precision, map_grid, tiou
from .inference import Detection, decode_detections, soft_nms
from .model import LocalizerNet

__version__ = "0.1.0"

__all__ = [
    "Detection",
    "EvalReport",
    "LocalizerNet",
    "ModelConfig",
    "TemporalActionLocalizer",
    "TrainConfig",
    "average_precision",
    "decode_detections",
    "load_config",
    "map_grid",
    "soft_nms",
    "tiou",
    "__version__",
]
