from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from .config import ExperimentConfig
from .data import BratsCaseDataset, generate_dataset, list_cases, split_cases
from .evaluation import AblationEntry, DiceTable, emit_report, evaluate_subsets, modality_absent_mean
from .logger_config import get_training_logger, log_info, log_success, log_warning
from .network import load_checkpoint, sliding_window_predict
from .training import TrainResult, default_device, pretrain_teacher, train_student

logger = get_training_logger()

Splits = Tuple[List[Path], List[Path], List[Path]]


@dataclass
class PipelineRun:
    """Artifacts of one gen-data → teacher → student → evaluate run."""

    out_dir: Path
    splits: Splits
    teacher: TrainResult
    student: TrainResult
    table: DiceTable
    reports: Dict[str, Path] = field(default_factory=dict)


@dataclass
class AblationRun:
    entries: List[AblationEntry]
    t1ce_missing: pd.DataFrame
    reports: Dict[str, Path]


# ----- Building blocks --------------------------------------------------------------


def prepare_data(exp: ExperimentConfig, data_dir: Path) -> Splits:
    """Render the phantom dataset (overwriting) and split it with the experiment seed."""
    data = exp.data
    generate_dataset(
        data_dir,
        num_cases=data.num_cases,
        seed=exp.seed,
        volume_size=data.volume_size,
        lesion_radius_range=data.lesion_radius_range,
        max_lesions=data.max_lesions,
        noise_std=data.noise_std,
    )
    return split_cases(list_cases(data_dir), data.split, exp.seed)


def load_splits(exp: ExperimentConfig, data_dir: Path) -> Splits:
    """Split an existing case directory; an empty directory is an error."""
    cases = list_cases(data_dir)
    if not cases:
        raise FileNotFoundError(f"No cases found under {data_dir}")
    return split_cases(cases, exp.data.split, exp.seed)


def build_datasets(
    exp: ExperimentConfig, splits: Splits
) -> Tuple[BratsCaseDataset, BratsCaseDataset, BratsCaseDataset]:
    train_cases, val_cases, test_cases = splits
    crop = exp.train.crop
    # * Sliding-window evaluation sees the whole brain box
    test_crop = None if exp.eval.sliding_window else crop
    return (
        BratsCaseDataset(train_cases, crop, train=True, seed=exp.seed),
        BratsCaseDataset(val_cases, crop, train=False, seed=exp.seed),
        BratsCaseDataset(test_cases, test_crop, train=False, seed=exp.seed),
    )


def evaluation_predictor(exp: ExperimentConfig):
    if not exp.eval.sliding_window:
        return None
    return partial(sliding_window_predict, window=exp.train.crop, overlap=exp.eval.window_overlap)


def evaluate_checkpoint(checkpoint: Path, test_set, exp: ExperimentConfig) -> DiceTable:
    device = default_device()
    net, _ = load_checkpoint(checkpoint)
    net.to(device)
    return evaluate_subsets(
        net,
        test_set,
        threshold=exp.eval.threshold,
        device=device,
        predictor=evaluation_predictor(exp),
    )


def _teacher_cfg(exp: ExperimentConfig):
    return exp.train.for_phase("teacher")


def _student_cfg(exp: ExperimentConfig, **changes):
    return exp.train.for_phase("student", **changes)


# ----- Runners ----------------------------------------------------------------------


def run_pipeline(exp: ExperimentConfig, out_dir: Path) -> PipelineRun:
    """
    Full desk pipeline under ``out_dir``: data/, teacher/, student/, report/.

    Returns:
        PipelineRun holding the student's DiceTable over the test split
    """
    out_dir = Path(out_dir)
    splits = prepare_data(exp, out_dir / "data")
    train_set, val_set, test_set = build_datasets(exp, splits)

    teacher = pretrain_teacher(train_set, val_set, exp.network, _teacher_cfg(exp), out_dir / "teacher")
    student = train_student(
        train_set, val_set, teacher.checkpoint, exp.network, _student_cfg(exp), out_dir / "student"
    )
    table = evaluate_checkpoint(student.checkpoint, test_set, exp)
    reports = emit_report(table, out_dir / "report", plot=True)

    et, tc, wt = table.mean_row
    log_success(logger, f"Pipeline done: mean ET={et:.4f} TC={tc:.4f} WT={wt:.4f}")
    return PipelineRun(out_dir, splits, teacher, student, table, reports)


def t1ce_missing_frame(labeled: Sequence[Tuple[str, DiceTable]]) -> pd.DataFrame:
    records = []
    for label, table in labeled:
        et, tc, wt = modality_absent_mean(table, "T1ce")
        records.append({"label": label, "dice_et": et, "dice_tc": tc, "dice_wt": wt})
    return pd.DataFrame(records, columns=["label", "dice_et", "dice_tc", "dice_wt"])


def run_ablation(
    exp: ExperimentConfig, out_dir: Path, splits: Optional[Splits] = None
) -> AblationRun:
    """
    The three knowledge-transfer / transfer-loss configurations on one split.

    * teacher only: the complete-input teacher evaluated on masked inputs
    * student, no transfer loss: copy-initialized student on masked inputs, Dice term only
    * student + transfer loss: the full distillation objective

    A single teacher serves all three rows.
    """
    out_dir = Path(out_dir)
    if splits is None:
        splits = prepare_data(exp, out_dir / "data")
    train_set, val_set, test_set = build_datasets(exp, splits)
    if len(test_set) < 20:
        log_warning(logger, f"Ablation on only {len(test_set)} test cases; trends may be noisy")

    teacher = pretrain_teacher(train_set, val_set, exp.network, _teacher_cfg(exp), out_dir / "teacher")
    baseline = evaluate_checkpoint(teacher.checkpoint, test_set, exp)

    no_transfer = train_student(
        train_set,
        val_set,
        teacher.checkpoint,
        exp.network,
        _student_cfg(exp, ds_weight=0.0),
        out_dir / "student_no_transfer",
    )
    no_transfer_table = evaluate_checkpoint(no_transfer.checkpoint, test_set, exp)

    full = train_student(
        train_set, val_set, teacher.checkpoint, exp.network, _student_cfg(exp), out_dir / "student"
    )
    full_table = evaluate_checkpoint(full.checkpoint, test_set, exp)

    entries = [
        AblationEntry("teacher only", False, False, baseline),
        AblationEntry("student, no transfer loss", True, False, no_transfer_table),
        AblationEntry("student + transfer loss", True, True, full_table),
    ]
    report_dir = out_dir / "report"
    reports = emit_report(full_table, report_dir, ablation=entries, plot=True)

    t1ce_missing = t1ce_missing_frame([(entry.label, entry.table) for entry in entries])
    reports["t1ce_missing"] = report_dir / "t1ce_missing.csv"
    t1ce_missing.to_csv(reports["t1ce_missing"], index=False, float_format="%.4f")

    for entry in entries:
        et, tc, wt = entry.table.mean_row
        log_info(logger, f"{entry.label:>18}: ET={et:.4f} TC={tc:.4f} WT={wt:.4f}")
    return AblationRun(entries, t1ce_missing, reports)
