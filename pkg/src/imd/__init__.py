"""Desk-scale detector-free image matcher with prompt-conditioned features."""

from .core import (
    CameraFrame,
    CoarseMatchSet,
    FeatureMap,
    FineMatchSet,
    Image,
    InstanceMaskPair,
    InvariantError,
    MatchingConfig,
)
from .pipeline import MatcherModel, build_model, load_checkpoint, match_pair, save_checkpoint

__all__ = [
    "CameraFrame",
    "CoarseMatchSet",
    "FeatureMap",
    "FineMatchSet",
    "Image",
    "InstanceMaskPair",
    "InvariantError",
    "MatcherModel",
    "MatchingConfig",
    "build_model",
    "load_checkpoint",
    "match_pair",
    "save_checkpoint",
]

__version__ = "0.1.0"
