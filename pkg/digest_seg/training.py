import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, Dataset

from .config import ConfigError, TrainConfig, deterministic_mode, seed_everything
from .evaluation import SubsetEvaluator
from .logger_config import (
    get_training_logger,
    log_error,
    log_function_entry,
    log_info,
    log_success,
    log_warning,
)
from .losses import (
    LossReport,
    TrainingDivergenceError,
    distillation_objective,
    per_channel_dice_loss,
    teacher_pretrain_loss,
)
from .masking import FULL_MASK, ModalityMask, apply_mask, enumerate_subsets, sample_mask
from .network import (
    CheckpointMismatchError,
    NetworkConfig,
    UNet3D,
    build_network,
    init_student_from_teacher,
    load_checkpoint,
    save_checkpoint,
)
from .optim import build_optimizer, set_learning_rate

logger = get_training_logger()

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDivergenceError",
    "lr_schedule",
    "pretrain_teacher",
    "train_student",
]

VALIDATION_COLUMNS = ["epoch", "lr", "val_dice_et", "val_dice_tc", "val_dice_wt", "val_dice_mean", "best"]

# * step(batch) -> (differentiable loss, report, mask used)
StepFn = Callable[[Dict[str, torch.Tensor]], Tuple[torch.Tensor, LossReport, ModalityMask]]
ValidateFn = Callable[[UNet3D], Tuple[float, float, float]]


@dataclass
class TrainResult:
    """Where a training phase left its checkpoints, and how the best one scored."""

    checkpoint: Path
    last_checkpoint: Path
    best_epoch: Optional[int]
    best_val_dice: Optional[float]
    history: pd.DataFrame


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant ``lr_initial`` until the cosine start epoch, then cosine decay toward 0."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    start = cfg.cosine_decay_start_epoch
    if epoch < start:
        return cfg.lr_initial
    progress = (epoch - start) / (cfg.epochs - start)
    return cfg.lr_initial * 0.5 * (1 + math.cos(math.pi * progress))


def default_device() -> torch.device:
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


class LossLog:
    """Per-step training telemetry as JSON lines, appended once per epoch."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.write_text("", encoding="utf-8")

    def append(self, records: List[Dict[str, object]]) -> None:
        if not records:
            return
        pd.DataFrame(records).to_json(self.path, orient="records", lines=True, mode="a")


def _make_loader(dataset: Dataset, cfg: TrainConfig) -> DataLoader:
    workers = 0 if deterministic_mode() else cfg.num_workers
    return DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        num_workers=workers,
        generator=torch.Generator().manual_seed(cfg.seed),
    )


def _fit(
    net: UNet3D,
    train_set: Dataset,
    val_set: Optional[Dataset],
    cfg: TrainConfig,
    out_dir: Path,
    step_fn: StepFn,
    validate_fn: ValidateFn,
) -> TrainResult:
    """Epoch loop shared by both phases: schedule, step, log, validate, checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path, last_path = out_dir / "best.pt", out_dir / "last.pt"
    history_path = out_dir / "validation.csv"
    loss_log = LossLog(out_dir / "losses.jsonl")

    if cfg.epochs == 0:
        log_warning(logger, f"{cfg.phase}: zero epochs, saving the initialization")
        save_checkpoint(best_path, net, cfg.phase, epoch=0)
        save_checkpoint(last_path, net, cfg.phase, epoch=0)
        history = pd.DataFrame(columns=VALIDATION_COLUMNS)
        history.to_csv(history_path, index=False)
        return TrainResult(best_path, last_path, None, None, history)

    if val_set is None or len(val_set) == 0:
        log_warning(logger, f"{cfg.phase}: no validation cases, the last epoch is kept as best")
        val_set = None

    optimizer = build_optimizer(
        net.parameters(),
        cfg.optimizer_kind,
        cfg.lr_initial,
        cfg.weight_decay,
        cfg.lookahead_k,
        cfg.lookahead_alpha,
    )
    loader = _make_loader(train_set, cfg)

    step = 0
    best_val: Optional[float] = None
    best_epoch: Optional[int] = None
    history: List[Dict[str, object]] = []

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        set_learning_rate(optimizer, lr)
        if hasattr(train_set, "set_epoch"):
            train_set.set_epoch(epoch)

        net.train()
        records = []
        for batch in loader:
            optimizer.zero_grad()
            try:
                loss, report, mask = step_fn(batch)
            except TrainingDivergenceError as e:
                error = TrainingDivergenceError(f"{cfg.phase} step {step} (epoch {epoch}): {e}")
                log_error(logger, error, "Training diverged")
                loss_log.append(records)
                raise error from e
            loss.backward()
            optimizer.step()
            records.append({"step": step, "epoch": epoch, "mask": mask.bitstring, "lr": lr, **report.to_dict()})
            step += 1
        loss_log.append(records)

        scores = validate_fn(net) if val_set is not None else (math.nan, math.nan, math.nan)
        mean = float(np.mean(scores))
        improved = val_set is None or best_val is None or mean > best_val
        if improved:
            best_val = None if val_set is None else mean
            best_epoch = epoch
            save_checkpoint(best_path, net, cfg.phase, epoch=epoch, val_dice=best_val)
        save_checkpoint(last_path, net, cfg.phase, epoch=epoch, val_dice=None if val_set is None else mean)

        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "val_dice_et": scores[0],
                "val_dice_tc": scores[1],
                "val_dice_wt": scores[2],
                "val_dice_mean": mean,
                "best": improved,
            }
        )
        pd.DataFrame(history, columns=VALIDATION_COLUMNS).to_csv(history_path, index=False)

        epoch_loss = float(np.mean([r["l_total"] for r in records])) if records else math.nan
        log_info(
            logger,
            f"{cfg.phase} epoch {epoch + 1}/{cfg.epochs}: lr={lr:.2e} loss={epoch_loss:.4f} "
            f"val ET={scores[0]:.4f} TC={scores[1]:.4f} WT={scores[2]:.4f}{' *' if improved else ''}",
        )

    log_success(logger, f"{cfg.phase} finished: best epoch {best_epoch}, val Dice {best_val}")
    return TrainResult(best_path, last_path, best_epoch, best_val, pd.DataFrame(history, columns=VALIDATION_COLUMNS))


def _check_phase(cfg: TrainConfig, phase: str) -> None:
    cfg.validate()
    if cfg.phase != phase:
        raise ConfigError(f"expected phase={phase!r}, got {cfg.phase!r}")


def pretrain_teacher(
    train_set: Dataset,
    val_set: Optional[Dataset],
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    out_dir: Path,
    device: Optional[torch.device] = None,
) -> TrainResult:
    """
    Train the teacher on complete inputs with deep supervision.

    Args:
        train_set: samples with "image" (4 modalities) and "target" (ET, TC, WT)
        val_set: held-out samples, evaluated on complete inputs every epoch
        net_cfg: backbone config; attention blocks are always off for the teacher
        cfg: optimization settings, ``phase`` must be "teacher"
        out_dir: receives best.pt, last.pt, losses.jsonl and validation.csv

    Returns:
        TrainResult whose ``checkpoint`` is the best-validation teacher

    Raises:
        TrainingDivergenceError: the loss became NaN or Inf
    """
    log_function_entry(logger, "pretrain_teacher", epochs=cfg.epochs, out_dir=out_dir)
    _check_phase(cfg, "teacher")
    seed_everything(cfg.seed)
    device = device or default_device()

    teacher = build_network(replace(net_cfg, use_cbam=False)).to(device)
    evaluator = SubsetEvaluator(device=device)

    def step_fn(batch):
        image = batch["image"].to(device)
        target = batch["target"].to(device)
        outputs = teacher(image)
        loss = teacher_pretrain_loss(outputs, target, cfg.dice_smoothing, cfg.strict_dice)
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(f"Non-finite teacher loss {float(loss)}")
        channel_dice = 1 - per_channel_dice_loss(
            outputs.final.detach(), target, cfg.dice_smoothing, cfg.strict_dice
        )
        value = float(loss.detach())
        report = LossReport(
            l_ds=0.0,
            l_seg=value,
            l_total=value,
            per_channel_dice=[float(c) for c in channel_dice],
        )
        return loss, report, FULL_MASK

    def validate_fn(net):
        return evaluator.score(net, val_set, [FULL_MASK])[0].scores

    return _fit(teacher, train_set, val_set, cfg, out_dir, step_fn, validate_fn)


def _load_frozen_teacher(teacher_ckpt: Path, device: torch.device) -> UNet3D:
    teacher, meta = load_checkpoint(teacher_ckpt)
    if meta["phase"] != "teacher":
        log_warning(logger, f"{teacher_ckpt} was saved by phase {meta['phase']!r}, using it as teacher")
    teacher.to(device).eval()
    teacher.requires_grad_(False)
    return teacher


def train_student(
    train_set: Dataset,
    val_set: Optional[Dataset],
    teacher_ckpt: Path,
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    out_dir: Path,
    device: Optional[torch.device] = None,
) -> TrainResult:
    """
    Distill the frozen teacher into an attention-equipped student on masked inputs.

    Every iteration draws a fresh modality mask; the teacher sees the complete
    batch and the student the masked one. The student is validated on all 15
    subsets of the validation set and selected on the mean region Dice.

    Raises:
        CheckpointMismatchError: teacher and student backbones differ
        TrainingDivergenceError: the objective became NaN or Inf
    """
    log_function_entry(logger, "train_student", epochs=cfg.epochs, teacher=teacher_ckpt, out_dir=out_dir)
    _check_phase(cfg, "student")
    seed_everything(cfg.seed)
    device = device or default_device()

    teacher = _load_frozen_teacher(teacher_ckpt, device)
    student_cfg = replace(net_cfg, use_cbam=True)
    teacher_structure, student_structure = teacher.config.structure(), student_cfg.structure()
    if teacher_structure != student_structure:
        differing = sorted(k for k in student_structure if teacher_structure.get(k) != student_structure[k])
        error = CheckpointMismatchError([f"config.{k}" for k in differing])
        log_error(logger, error, f"Teacher checkpoint {teacher_ckpt} does not fit the student")
        raise error

    student = build_network(student_cfg).to(device)
    if cfg.copy_init:
        init_student_from_teacher(student, teacher)

    full_only = cfg.force_full_mask or not cfg.use_masking
    if full_only:
        log_info(logger, "Masking disabled: the student sees complete inputs")
    mask_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    evaluator = SubsetEvaluator(device=device)
    subsets = enumerate_subsets()

    def step_fn(batch):
        image = batch["image"].to(device)
        target = batch["target"].to(device)
        mask = FULL_MASK if full_only else sample_mask(mask_rng)
        with torch.no_grad():
            teacher_out = teacher(image)
        student_out = student(apply_mask(image, mask))
        total, report = distillation_objective(
            teacher_out, student_out, target, cfg.dice_smoothing, cfg.strict_dice, cfg.ds_weight
        )
        return total, report, mask

    def validate_fn(net):
        rows = evaluator.score(net, val_set, subsets)
        return tuple(float(v) for v in np.mean([row.scores for row in rows], axis=0))

    return _fit(student, train_set, val_set, cfg, out_dir, step_fn, validate_fn)
