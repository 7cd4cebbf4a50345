"""Detect comma-shaped cloud systems in infrared satellite frames.

The pipeline segments high cloud with per-(hour, tile) intensity mixtures,
measures motion with lagged correlation, proposes windows through a three-stage
cascade, describes survivors by gradient and motion histograms, and stacks
per-batch logistic learners with boosted stumps.
"""

from .detector import CommaDetector, Detection, ModelBundle
from .exceptions import (
    CommaCloudError,
    CoverageError,
    EmptyGroupError,
    FormatError,
    FrameNameError,
    InsufficientHistoryError,
    PreconditionError,
    TrainingError,
)
from .imagery import BBox, Frame, LabeledCloud, StormEvent
from .segmentation import GmmBank, HighCloudSegmenter
from .synth import SynthConfig, generate_corpus

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "CommaCloudError",
    "CommaDetector",
    "CoverageError",
    "Detection",
    "EmptyGroupError",
    "FormatError",
    "Frame",
    "FrameNameError",
    "GmmBank",
    "HighCloudSegmenter",
    "InsufficientHistoryError",
    "LabeledCloud",
    "ModelBundle",
    "PreconditionError",
    "StormEvent",
    "SynthConfig",
    "TrainingError",
    "generate_corpus",
]
