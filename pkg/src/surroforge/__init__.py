"""Translate noisy cardiac-SPECT center-of-mass motion into EMT-like respiratory surrogates."""

from .errors import (
    CoverageGap,
    DegenerateSignal,
    DivergenceError,
    InvalidDataset,
    InvalidParameter,
    InvalidSignal,
    InvalidSpec,
    MissingArtifact,
    MissingChannel,
    ShapeError,
    SurroforgeError,
    TapeConsumed,
)
from .models import Model, ModelSpec, build, load_checkpoint, model_avg, save_checkpoint
from .synth import AcquisitionRecord, BreathingParams, NoiseModel, generate_cohort
from .training import DifficultyPlan, TrainConfig, kfold_split, train

__version__ = "0.1.0"
