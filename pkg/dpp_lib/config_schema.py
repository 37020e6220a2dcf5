"""Configuration schema definitions for training runs.

This module provides typed configuration schemas for dppkit
using TypedDict for better type checking and linting.
"""

from typing import List, Literal, Optional, TypedDict


class LayerConfig(TypedDict):
    """Pruning granularity and K of one prunable layer."""

    granularity: Literal["fine", "medium", "coarse"]
    k: int


class OptimizerConfig(TypedDict):
    """Optimizer configuration schema."""

    name: Literal["adam", "sgd"]
    lr: float
    momentum: float


class ScheduleConfig(TypedDict):
    """Temperature annealing, linear from tau_init to tau_end."""

    tau_init: float
    tau_end: float


class QuantConfig(TypedDict):
    bits: int


class MetricsConfig(TypedDict):
    """Per-epoch metric estimation."""

    enabled: bool
    samples: int


class DataConfig(TypedDict):
    """Optional caps on the number of training and test items used."""

    train_limit: Optional[int]
    test_limit: Optional[int]


class TrainConfig(TypedDict):
    """Training run configuration schema."""

    arch: Literal["lenet300-100", "lenet5-caffe"]
    layers: List[LayerConfig]
    mu: float
    beta: float
    batch_size: int
    n_iter: int
    seed: int
    optimizer: OptimizerConfig
    schedule: ScheduleConfig
    quant: QuantConfig
    metrics: MetricsConfig
    data: DataConfig
