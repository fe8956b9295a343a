"""Teacher-student distillation for 3D brain tumor segmentation with missing MR modalities."""

from .config import ConfigError, ExperimentConfig, TrainConfig, build_experiment, preset
from .evaluation import DiceTable, dice_score, emit_report, evaluate_subsets, read_report
from .losses import LossReport, dice_loss, ds_transfer_loss, teacher_pretrain_loss, total_loss
from .masking import FULL_MASK, ModalityMask, apply_mask, enumerate_subsets, sample_mask
from .network import NetworkConfig, StageOutputs, UNet3D, build_network, init_student_from_teacher
from .training import TrainingDivergenceError, lr_schedule, pretrain_teacher, train_student

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "TrainConfig",
    "build_experiment",
    "preset",
    "DiceTable",
    "dice_score",
    "emit_report",
    "evaluate_subsets",
    "read_report",
    "LossReport",
    "dice_loss",
    "ds_transfer_loss",
    "teacher_pretrain_loss",
    "total_loss",
    "FULL_MASK",
    "ModalityMask",
    "apply_mask",
    "enumerate_subsets",
    "sample_mask",
    "NetworkConfig",
    "StageOutputs",
    "UNet3D",
    "build_network",
    "init_student_from_teacher",
    "TrainingDivergenceError",
    "lr_schedule",
    "pretrain_teacher",
    "train_student",
]
