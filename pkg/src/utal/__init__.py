"""Unsupervised tracklet association learning for person re-identification.

Per-camera soft-label tracklet discrimination plus cross-camera reciprocal
nearest-neighbour association, trained jointly on multi-camera tracklet
corpora, with re-id evaluation and trajectory merging diagnostics.
"""

from utal.datagen import Camera, Corpus, GenConfig, Tracklet, generate_corpus, load_corpus, save_corpus
from utal.embedding import AdamState, EmbeddingModel, adam_step
from utal.errors import (
    ConfigError,
    CorpusFormatError,
    DegenerateCameraError,
    ModeError,
    NumericError,
    ShapeError,
    UTALError,
)
from utal.trainer import TrainConfig, TrainLog, TrainResult, train, train_weakly_supervised

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Camera",
    "ConfigError",
    "Corpus",
    "CorpusFormatError",
    "DegenerateCameraError",
    "EmbeddingModel",
    "GenConfig",
    "ModeError",
    "NumericError",
    "ShapeError",
    "TrainConfig",
    "TrainLog",
    "TrainResult",
    "Tracklet",
    "UTALError",
    "adam_step",
    "generate_corpus",
    "load_corpus",
    "save_corpus",
    "train",
    "train_weakly_supervised",
]
