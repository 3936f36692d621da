"""Decision-feedback in-context symbol detection.

A small decoder-only transformer reads pilot pairs ``(y, x)`` from a
block-fading frame and classifies each subsequent received vector; with
decision feedback its own decisions are appended to the prompt as extra,
possibly noisy, pilots. Classical MMSE receivers are included as
baselines.
"""

from .channel import ChannelTask, Constellation, FrameBatch, PromptFrame, build_constellation, generate_batch
from .config import ExperimentConfig, ModelConfig, SimConfig, TrainConfig
from .estimators import DefinedDetector, MMSEDetector, PerfectCSIDetector

__version__ = "0.1.0"

__all__ = [
    "ChannelTask",
    "Constellation",
    "DefinedDetector",
    "ExperimentConfig",
    "FrameBatch",
    "MMSEDetector",
    "ModelConfig",
    "PerfectCSIDetector",
    "PromptFrame",
    "SimConfig",
    "TrainConfig",
    "build_constellation",
    "generate_batch",
]
