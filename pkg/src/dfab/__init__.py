"""Distributed FAB inference for piecewise sparse linear models."""

from .data import Dataset, SyntheticSpec, load_csv, split_train_test, standardize, synth_generate
from .model import ModelParams, TaskKind, deserialize_model, predict, predict_batch, serialize_model
from .runtime import ClusterConfig, TrainConfig, TrainReport, run_training

__all__ = [
    "ClusterConfig",
    "Dataset",
    "ModelParams",
    "SyntheticSpec",
    "TaskKind",
    "TrainConfig",
    "TrainReport",
    "deserialize_model",
    "load_csv",
    "predict",
    "predict_batch",
    "run_training",
    "serialize_model",
    "split_train_test",
    "standardize",
    "synth_generate",
]

__version__ = "0.1.0"
