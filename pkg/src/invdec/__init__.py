"""Patch-based multivariate forecaster with an inverted variate-attention
decoder, built on a self-contained reverse-mode autodiff core."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    CsvFormatError,
    DatasetBundle,
    NormStats,
    RawSeries,
    SplitSpec,
    WindowSample,
    chronological_split,
    load_csv,
    make_datasets,
    synth_coupled,
    windows,
    write_csv,
)
from .model import (
    ConfigError,
    ForwardTrace,
    ModelConfig,
    ModelParams,
    backbone_forward,
    forward,
    init_params,
)
from .rng import RngPool, stream
from .tensor import (
    GradTape,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    finite_diff_grad,
    max_relative_error,
    mse,
    zero_grads,
)
from .training import RunRecord, TrainConfig, TrainingDiverged, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "CsvFormatError",
    "DatasetBundle",
    "ForwardTrace",
    "GradTape",
    "ModelConfig",
    "ModelParams",
    "NormStats",
    "Parameter",
    "RawSeries",
    "RngPool",
    "RunRecord",
    "ShapeError",
    "SplitSpec",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "WindowSample",
    "backbone_forward",
    "backward",
    "chronological_split",
    "evaluate",
    "finite_diff_grad",
    "forward",
    "init_params",
    "load_checkpoint",
    "load_csv",
    "make_datasets",
    "max_relative_error",
    "mse",
    "save_checkpoint",
    "stream",
    "synth_coupled",
    "train",
    "windows",
    "write_csv",
    "zero_grads",
]
