import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .network import StageOutputs


class TrainingDivergenceError(RuntimeError):
    """The training objective became NaN or Inf."""


@dataclass
class LossReport:
    """Scalar view of one training step's objective."""

    l_ds: float
    l_seg: float
    l_total: float
    per_stage_ds: List[float] = field(default_factory=list)
    per_channel_dice: List[float] = field(default_factory=list)

    def __post_init__(self):
        values = [self.l_ds, self.l_seg, self.l_total, *self.per_stage_ds, *self.per_channel_dice]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"Non-finite loss component in {self}")

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def _stage_differences(
    teacher_aux: Sequence[torch.Tensor], student_aux: Sequence[torch.Tensor]
) -> List[torch.Tensor]:
    """Per-stage, per-sample mean |teacher - student| over channels and voxels."""
    if len(teacher_aux) != len(student_aux):
        raise ValueError(
            f"Teacher has {len(teacher_aux)} stages, student has {len(student_aux)}"
        )
    diffs = []
    for z, (t, s) in enumerate(zip(teacher_aux, student_aux)):
        if t.shape != s.shape:
            raise ValueError(
                f"Stage {z} shape mismatch: teacher {tuple(t.shape)} vs student {tuple(s.shape)}"
            )
        diffs.append((t.detach() - s).abs().flatten(1).mean(dim=1))
    return diffs


def ds_transfer_loss(
    teacher_aux: Sequence[torch.Tensor],
    student_aux: Sequence[torch.Tensor],
    batch_size: Optional[int] = None,
) -> torch.Tensor:
    """
    Deeply supervised transfer loss between matching decoder stages.

    Each stage contributes the mean absolute difference over channels and
    voxels; stages are summed and the result is averaged over the batch.
    Teacher maps are detached.

    Args:
        teacher_aux: teacher stage maps, coarsest first
        student_aux: student stage maps, same shapes
        batch_size: N of the batch average (defaults to the tensors' batch dim)
    """
    diffs = _stage_differences(teacher_aux, student_aux)
    n = batch_size if batch_size is not None else diffs[0].shape[0]
    return torch.stack(diffs).sum() / n


def _soft_dice_terms(
    pred: torch.Tensor, target: torch.Tensor, smoothing: float, strict: bool
) -> torch.Tensor:
    """Per-sample, per-channel smoothed Dice ratios, shape (B, C)."""
    if pred.shape != target.shape:
        raise ValueError(f"Prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.numel() and (pred.min() < 0 or pred.max() > 1):
        raise ValueError("Predictions must lie in [0, 1]")
    target = target.to(pred.dtype)
    dims = tuple(range(2, pred.dim()))
    overlap = (pred * target).sum(dim=dims)
    numerator = (overlap if strict else 2 * overlap) + smoothing
    denominator = (pred * pred).sum(dim=dims) + (target * target).sum(dim=dims) + smoothing
    return numerator / denominator


def dice_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    smoothing: float = 1.0,
    strict: bool = False,
) -> torch.Tensor:
    """
    Smoothed soft Dice loss averaged over channels (ET, TC, WT) and batch.

    ``strict=True`` drops the factor 2 in the numerator, matching the formula
    as printed; a perfect prediction then scores about 0.5 instead of 0.
    """
    return 1 - _soft_dice_terms(pred, target, smoothing, strict).mean()


def per_channel_dice_loss(
    pred: torch.Tensor, target: torch.Tensor, smoothing: float = 1.0, strict: bool = False
) -> torch.Tensor:
    return 1 - _soft_dice_terms(pred, target, smoothing, strict).mean(dim=0)


def downsample_target(target: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Max-pool a binary target down to ``size`` so thin structures survive."""
    if tuple(target.shape[2:]) == tuple(size):
        return target
    return F.adaptive_max_pool3d(target.float(), output_size=tuple(size))


def teacher_pretrain_loss(
    outputs: StageOutputs,
    target: torch.Tensor,
    smoothing: float = 1.0,
    strict: bool = False,
) -> torch.Tensor:
    """Dice on the final map plus the mean Dice over all stage maps against pooled targets."""
    if not outputs.aux:
        raise ValueError("Deep supervision needs at least one stage map")
    loss = dice_loss(outputs.final, target, smoothing, strict)
    weight = 1.0 / len(outputs.aux)
    for stage_map in outputs.aux:
        stage_target = downsample_target(target, stage_map.shape[2:])
        loss = loss + weight * dice_loss(stage_map, stage_target, smoothing, strict)
    return loss


def total_loss(l_ds, l_seg):
    """Overall objective: unweighted sum of the transfer and segmentation losses."""
    return l_ds + l_seg


def distillation_objective(
    teacher_out: StageOutputs,
    student_out: StageOutputs,
    target: torch.Tensor,
    smoothing: float = 1.0,
    strict: bool = False,
    ds_weight: float = 1.0,
) -> Tuple[torch.Tensor, LossReport]:
    """
    Student objective for one step.

    ``ds_weight`` only exists for the ablation without the transfer term; it
    is 1 for the actual method.

    Returns:
        (differentiable total, LossReport)
    """
    stage_diffs = _stage_differences(teacher_out.aux, student_out.aux)
    n = stage_diffs[0].shape[0]
    l_ds = torch.stack(stage_diffs).sum() / n
    channel_losses = per_channel_dice_loss(student_out.final, target, smoothing, strict)
    l_seg = channel_losses.mean()
    weighted_ds = ds_weight * l_ds
    total = total_loss(weighted_ds, l_seg)
    if not torch.isfinite(total):
        raise TrainingDivergenceError(
            f"Non-finite objective: l_ds={float(weighted_ds)}, l_seg={float(l_seg)}"
        )

    report = LossReport(
        l_ds=float(weighted_ds.detach()),
        l_seg=float(l_seg.detach()),
        l_total=float(total.detach()),
        per_stage_ds=[float(d.detach().sum() / n) for d in stage_diffs],
        per_channel_dice=[float(1 - c.detach()) for c in channel_losses],
    )
    return total, report
