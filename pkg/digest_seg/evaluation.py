from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from .data.volumes import MODALITIES, REGIONS
from .logger_config import (
    get_evaluation_logger,
    log_debug,
    log_error,
    log_info,
    log_success,
    log_warning,
)
from .masking import ModalityMask, apply_mask, enumerate_subsets
from .network import StageOutputs

logger = get_evaluation_logger()

REPORT_COLUMNS = ["mask", "dice_et", "dice_tc", "dice_wt"]
MEAN_LABEL = "mean"

Predictor = Callable[[torch.Tensor], Union[torch.Tensor, StageOutputs]]


@dataclass
class DiceRow:
    """Mean Dice per region over the test cases for one modality subset."""

    mask: str
    dice_et: float
    dice_tc: float
    dice_wt: float

    @property
    def scores(self) -> Tuple[float, float, float]:
        return (self.dice_et, self.dice_tc, self.dice_wt)


@dataclass
class DiceTable:
    """Fifteen subset rows in results-table order; the mean row is derived."""

    rows: List[DiceRow]

    def __post_init__(self):
        expected = [m.bitstring for m in enumerate_subsets()]
        found = [row.mask for row in self.rows]
        if found != expected:
            raise ValueError(f"DiceTable rows must follow subset order {expected}, got {found}")
        for row in self.rows:
            if not all(0.0 <= s <= 1.0 for s in row.scores):
                raise ValueError(f"Dice scores of mask {row.mask} outside [0, 1]: {row.scores}")

    @property
    def mean_row(self) -> Tuple[float, float, float]:
        scores = np.array([row.scores for row in self.rows], dtype=np.float64)
        return tuple(float(v) for v in scores.mean(axis=0))

    def to_frame(self, include_mean: bool = True) -> pd.DataFrame:
        records = [vars(row).copy() for row in self.rows]
        if include_mean:
            et, tc, wt = self.mean_row
            records.append({"mask": MEAN_LABEL, "dice_et": et, "dice_tc": tc, "dice_wt": wt})
        return pd.DataFrame(records, columns=REPORT_COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "DiceTable":
        body = frame[frame["mask"] != MEAN_LABEL]
        return cls(
            rows=[
                DiceRow(str(r.mask), float(r.dice_et), float(r.dice_tc), float(r.dice_wt))
                for r in body.itertuples(index=False)
            ]
        )


@dataclass
class AblationEntry:
    """One ablation configuration: knowledge transfer on/off, transfer loss on/off."""

    label: str
    knowledge_transfer: bool
    transfer_loss: bool
    table: DiceTable


# ----- Scores ----------------------------------------------------------------------


def dice_score(pred_binary, target_binary) -> float:
    """Hard Dice 2|S∩R| / (|S|+|R|); 1.0 when both maps are empty."""
    pred = torch.as_tensor(pred_binary).bool()
    target = torch.as_tensor(target_binary).bool()
    if pred.shape != target.shape:
        raise ValueError(f"Shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    denominator = int(pred.sum()) + int(target.sum())
    if denominator == 0:
        return 1.0
    return 2.0 * int((pred & target).sum()) / denominator


def _as_case(sample) -> Tuple[torch.Tensor, torch.Tensor]:
    if isinstance(sample, dict):
        image, target = sample["image"], sample["target"]
    else:
        image, target = sample
    if image.dim() == 4:
        image, target = image.unsqueeze(0), target.unsqueeze(0)
    return image, target


class SubsetEvaluator:
    """Runs a frozen model on every test case under each modality subset."""

    def __init__(
        self,
        threshold: float = 0.5,
        device: Optional[torch.device] = None,
        predictor: Optional[Callable[[Predictor, torch.Tensor], torch.Tensor]] = None,
    ):
        self.threshold = threshold
        self.device = device or torch.device("cpu")
        self.predictor = predictor

    def predict(self, model: Predictor, image: torch.Tensor) -> torch.Tensor:
        if self.predictor is not None:
            out = self.predictor(model, image)
        else:
            out = model(image)
        return out.final if isinstance(out, StageOutputs) else out

    @torch.no_grad()
    def score_mask(
        self,
        model: Predictor,
        cases: Sequence[Tuple[torch.Tensor, torch.Tensor]],
        mask: ModalityMask,
    ) -> DiceRow:
        """Mean Dice per region over cases with ``mask`` applied to every input."""
        per_case = []
        for image, target in cases:
            masked = apply_mask(image.to(self.device), mask)
            binary = self.predict(model, masked).cpu() > self.threshold
            for b in range(binary.shape[0]):
                per_case.append(
                    [dice_score(binary[b, ch], target[b, ch]) for ch in range(len(REGIONS))]
                )
        et, tc, wt = np.mean(np.asarray(per_case), axis=0)
        return DiceRow(mask.bitstring, float(et), float(tc), float(wt))

    def score(
        self, model: Predictor, test_set: Iterable, masks: Sequence[ModalityMask]
    ) -> List[DiceRow]:
        """One DiceRow per mask; the model is put in eval mode for the pass."""
        cases = [_as_case(sample) for sample in test_set]
        if not cases:
            error = ValueError("Test set is empty")
            log_error(logger, error, "evaluate_subsets")
            raise error

        was_training = getattr(model, "training", False)
        if hasattr(model, "eval"):
            model.eval()
        try:
            rows = []
            for mask in masks:
                row = self.score_mask(model, cases, mask)
                log_debug(logger, f"Mask {row.mask}: ET={row.dice_et:.4f} TC={row.dice_tc:.4f} WT={row.dice_wt:.4f}")
                rows.append(row)
        finally:
            if was_training and hasattr(model, "train"):
                model.train()
        return rows

    def evaluate(self, model: Predictor, test_set: Iterable) -> DiceTable:
        rows = self.score(model, test_set, enumerate_subsets())
        table = DiceTable(rows=rows)
        et, tc, wt = table.mean_row
        log_success(
            logger,
            f"Evaluated {len(rows)} subsets: mean ET={et:.4f} TC={tc:.4f} WT={wt:.4f}",
        )
        return table


def evaluate_subsets(
    model: Predictor,
    test_set: Iterable,
    threshold: float = 0.5,
    device: Optional[torch.device] = None,
    predictor=None,
) -> DiceTable:
    """
    Dice per region for each of the 15 modality subsets.

    Args:
        model: network (or any callable) mapping a (B, 4, D, H, W) batch to
            probabilities or StageOutputs
        test_set: samples as dicts with "image"/"target" or (image, target) pairs
        threshold: binarization threshold on the final probability maps
        device: where inputs are moved before the forward pass
        predictor: optional ``predictor(model, image)`` replacing the plain
            forward call, e.g. sliding-window inference

    Returns:
        DiceTable with one row per subset
    """
    return SubsetEvaluator(threshold, device, predictor).evaluate(model, test_set)


def modality_absent_mean(table: DiceTable, modality: str) -> Tuple[float, float, float]:
    """Mean (ET, TC, WT) Dice over the subsets that lack ``modality``."""
    if modality not in MODALITIES:
        raise ValueError(f"Unknown modality {modality!r}")
    rows = [row for row in table.rows if ModalityMask.from_bitstring(row.mask).missing(modality)]
    scores = np.array([row.scores for row in rows], dtype=np.float64)
    return tuple(float(v) for v in scores.mean(axis=0))


# ----- Reports ---------------------------------------------------------------------


def _availability_columns(mask: str) -> Dict[str, str]:
    if mask == MEAN_LABEL:
        return {name: "" for name in MODALITIES}
    return {name: ("●" if bit == "1" else "○") for name, bit in zip(MODALITIES, mask)}


def format_table(table: DiceTable) -> str:
    """Aligned text table in results-table layout (Dice in %)."""
    records = []
    for _, r in table.to_frame().iterrows():
        record = _availability_columns(r["mask"])
        if r["mask"] == MEAN_LABEL:
            record[MODALITIES[0]] = MEAN_LABEL
        record.update(
            {region: f"{100 * r[f'dice_{region.lower()}']:.1f}" for region in REGIONS}
        )
        records.append(record)
    return pd.DataFrame(records).to_string(index=False) + "\n"


def plot_table(table: DiceTable, path: Path) -> Path:
    """Grouped bar chart of region Dice over the 15 subsets."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frame = table.to_frame(include_mean=False).set_index("mask")
    frame.columns = list(REGIONS)
    ax = frame.plot.bar(figsize=(10, 4), ylim=(0, 1), rot=45)
    ax.set_xlabel("available modalities (T1, T1ce, T2, FLAIR)")
    ax.set_ylabel("Dice")
    fig = ax.get_figure()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def emit_report(
    table: DiceTable,
    out_dir: Path,
    ablation: Optional[Sequence[AblationEntry]] = None,
    plot: bool = False,
) -> Dict[str, Path]:
    """
    Write the machine-readable CSV and the aligned text table (plus optional plot
    and the per-configuration ablation report).

    Returns:
        Mapping of report kind to written path
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out_dir / "dice_table.csv", "text": out_dir / "dice_table.txt"}
        table.to_frame().to_csv(paths["csv"], index=False, float_format="%.4f")
        paths["text"].write_text(format_table(table), encoding="utf-8")
        if plot:
            paths["plot"] = plot_table(table, out_dir / "dice_table.png")
        if ablation:
            paths.update(emit_ablation_report(ablation, out_dir))
    except OSError as e:
        log_error(logger, e, f"Cannot write report to {out_dir}")
        raise

    log_info(logger, f"Report written to {out_dir}")
    return paths


def ablation_frame(entries: Sequence[AblationEntry]) -> pd.DataFrame:
    records = []
    for entry in entries:
        et, tc, wt = entry.table.mean_row
        records.append(
            {
                "label": entry.label,
                "knowledge_transfer": entry.knowledge_transfer,
                "transfer_loss": entry.transfer_loss,
                "dice_et": et,
                "dice_tc": tc,
                "dice_wt": wt,
            }
        )
    return pd.DataFrame(records, columns=["label", "knowledge_transfer", "transfer_loss", "dice_et", "dice_tc", "dice_wt"])


def emit_ablation_report(entries: Sequence[AblationEntry], out_dir: Path) -> Dict[str, Path]:
    """One row per configuration, Dice averaged over the 15 subsets."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = ablation_frame(entries)
    csv_path = out_dir / "ablation.csv"
    text_path = out_dir / "ablation.txt"
    frame.to_csv(csv_path, index=False, float_format="%.4f")

    text = pd.DataFrame(
        {
            "Knowledge transfer": ["✔" if v else "✘" for v in frame["knowledge_transfer"]],
            "Transfer loss": ["✔" if v else "✘" for v in frame["transfer_loss"]],
            "ET": [f"{100 * v:.1f}" for v in frame["dice_et"]],
            "TC": [f"{100 * v:.1f}" for v in frame["dice_tc"]],
            "WT": [f"{100 * v:.1f}" for v in frame["dice_wt"]],
        }
    )
    text_path.write_text(text.to_string(index=False) + "\n", encoding="utf-8")
    return {"ablation_csv": csv_path, "ablation_text": text_path}


def read_report(path: Path) -> DiceTable:
    """Parse a machine-readable report back into a DiceTable."""
    path = Path(path)
    frame = pd.read_csv(path, dtype={"mask": str})
    missing = [c for c in REPORT_COLUMNS if c not in frame.columns]
    if missing:
        error = ValueError(f"Report {path} lacks columns {missing}")
        log_error(logger, error, "read_report")
        raise error
    if MEAN_LABEL not in set(frame["mask"]):
        log_warning(logger, f"Report {path} has no mean row")
    return DiceTable.from_frame(frame)
