"""Desk-scale change captioning with two-stage procedure modeling."""

__version__ = "0.1.0"

from .config import DataConfig, PipelineConfig, TrainConfig

__all__ = ["DataConfig", "PipelineConfig", "TrainConfig", "__version__"]
