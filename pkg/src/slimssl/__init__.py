"""Slimmable self-supervised encoders trained once and run at any width."""

from .autograd import Tape, Tensor, backward, no_grad, stop_gradient
from .config import ExperimentConfig, load_config, save_config
from .data import DataConfig, load_dataset, parse_cifar, synthetic_blobs, two_view_augment, write_cifar
from .estimator import SlimmableSSL
from .evaluation import CollapseDetector, LinearProbe, collapse_metrics, linear_probe, width_sweep
from .nn import EncoderSpec, MomentumEncoder, SlimmableEncoder, recalibrate_stats
from .objectives import ConfigError, GroupRegConfig, LossSpec, check_guidelines
from .schedule import SamplingSchedule, expected_forward_count
from .trainer import RunArtifacts, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CollapseDetector",
    "ConfigError",
    "DataConfig",
    "EncoderSpec",
    "ExperimentConfig",
    "GroupRegConfig",
    "LinearProbe",
    "LossSpec",
    "MomentumEncoder",
    "RunArtifacts",
    "SamplingSchedule",
    "SlimmableEncoder",
    "SlimmableSSL",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "check_guidelines",
    "collapse_metrics",
    "expected_forward_count",
    "linear_probe",
    "load_config",
    "load_dataset",
    "no_grad",
    "parse_cifar",
    "recalibrate_stats",
    "save_config",
    "stop_gradient",
    "synthetic_blobs",
    "train",
    "two_view_augment",
    "width_sweep",
    "write_cifar",
]
