"""Lipschitz-certified shift networks on a small numpy autodiff core."""

from .attack import AttackConfig, empirical_robust_acc, pgd_l2, random_probe
from .certify import Certificate, certify_batch, certify_sample, vra
from .data import Dataset, batch_iter, load_cifar_binary, random_crop_pad, synthetic_blobs
from .exceptions import (
    AttackError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    LipShiftError,
    TrainingError,
)
from .model import ArchConfig, LipschitzReport, LipShiFTModel, build_model, lipschitz_report, load_checkpoint, save_checkpoint
from .spectral import LinearOperator, power_iteration, svd_oracle
from .tensor import Tensor, backward
from .train import EpsSchedule, TrainConfig, emma_loss, eps_at, train, trades_eval_loss

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "AttackConfig",
    "AttackError",
    "Certificate",
    "ConfigError",
    "ContractError",
    "Dataset",
    "DimensionError",
    "EpsSchedule",
    "FormatError",
    "LinearOperator",
    "LipShiFTClassifier",
    "LipShiFTModel",
    "LipShiftError",
    "LipschitzReport",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "backward",
    "batch_iter",
    "build_model",
    "certify_batch",
    "certify_sample",
    "emma_loss",
    "empirical_robust_acc",
    "eps_at",
    "lipschitz_report",
    "load_checkpoint",
    "load_cifar_binary",
    "pgd_l2",
    "power_iteration",
    "random_crop_pad",
    "random_probe",
    "save_checkpoint",
    "svd_oracle",
    "synthetic_blobs",
    "train",
    "trades_eval_loss",
    "vra",
]


def __getattr__(name):
    # keep scikit-learn off the import path unless the wrapper is used
    if name == "LipShiFTClassifier":
        from .estimator import LipShiFTClassifier

        return LipShiFTClassifier
    raise AttributeError(f"module 'lipshift' has no attribute {name!r}")
