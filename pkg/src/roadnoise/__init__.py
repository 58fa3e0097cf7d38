"""Road-surface recognition from tyre/road noise.

Synthetic corpus generation, log-mel front end, small CNN and transformer
classifiers trained from scratch, int8 post-training quantization and a
streaming classifier with majority-vote smoothing.
"""

from __future__ import annotations

from .errors import (
    InvalidArgument,
    InvalidModel,
    RoadNoiseError,
    StreamClosed,
    TrainingDiverged,
    UnsupportedRate,
)
from .modelfile import load_model, save_model
from .signal import AudioClip, FeatureConfig, FeatureMatrix, extract_logmel
from .synth import RoadClass, SubProfile, default_profile, synth_clip

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "FeatureConfig",
    "FeatureMatrix",
    "InvalidArgument",
    "InvalidModel",
    "RoadClass",
    "RoadNoiseError",
    "StreamClosed",
    "SubProfile",
    "TrainingDiverged",
    "UnsupportedRate",
    "default_profile",
    "extract_logmel",
    "load_model",
    "save_model",
    "synth_clip",
]
