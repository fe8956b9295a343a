from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import nibabel as nib
import numpy as np

from ..logger_config import get_data_logger, log_debug, log_error, log_info, log_success
from .volumes import LabelVolume, MultiModalVolume, check_paired

logger = get_data_logger()

# * File suffix per modality, in channel order
MODALITY_SUFFIXES: Dict[str, str] = {
    "T1": "t1",
    "T1ce": "t1ce",
    "T2": "t2",
    "FLAIR": "flair",
}
SEGMENTATION_SUFFIX = "seg"
NIFTI_EXT = ".nii.gz"


class MissingModalityError(FileNotFoundError):
    """Raised when a case directory lacks one of the expected volumes."""

    def __init__(self, modality: str, case_dir: Path):
        self.modality = modality
        super().__init__(f"No {modality} volume (*_{_suffix(modality)}{NIFTI_EXT}) in {case_dir}")


def _suffix(modality: str) -> str:
    return MODALITY_SUFFIXES.get(modality, SEGMENTATION_SUFFIX)


def _find_volume(case_dir: Path, modality: str) -> Path:
    matches = sorted(case_dir.glob(f"*_{_suffix(modality)}{NIFTI_EXT}"))
    if not matches:
        raise MissingModalityError(modality, case_dir)
    return matches[0]


def load_brats_case(path: Path) -> Tuple[MultiModalVolume, LabelVolume]:
    """
    Load one BraTS-format case directory.

    Args:
        path: directory holding *_t1, *_t1ce, *_t2, *_flair and *_seg .nii.gz files

    Returns:
        (MultiModalVolume, LabelVolume) with channels ordered T1, T1ce, T2, FLAIR
    """
    case_dir = Path(path)
    log_debug(logger, f"Loading case from {case_dir}")

    try:
        channels = []
        affine = None
        for modality in MODALITY_SUFFIXES:
            image = nib.load(str(_find_volume(case_dir, modality)))
            channels.append(image.get_fdata(dtype=np.float32))
            if affine is None:
                affine = image.affine

        seg = nib.load(str(_find_volume(case_dir, "segmentation")))
        labels = LabelVolume(labels=np.rint(seg.get_fdata()).astype(np.int16))

        spacing = tuple(float(s) for s in np.linalg.norm(affine[:3, :3], axis=0))
        volume = MultiModalVolume(
            intensities=np.stack(channels), voxel_spacing=spacing, affine=affine
        )
        check_paired(volume, labels)

    except Exception as e:
        log_error(logger, e, f"Failed to load case {case_dir}")
        raise

    return volume, labels


def save_case(case_dir: Path, case_id: str, volume: MultiModalVolume, labels: LabelVolume) -> None:
    """Write a case in the layout read by load_brats_case, overwriting existing files."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    check_paired(volume, labels)

    for channel, suffix in enumerate(MODALITY_SUFFIXES.values()):
        image = nib.Nifti1Image(volume.intensities[channel].astype(np.float32), volume.affine)
        nib.save(image, str(case_dir / f"{case_id}_{suffix}{NIFTI_EXT}"))

    seg = nib.Nifti1Image(labels.labels.astype(np.uint8), volume.affine)
    nib.save(seg, str(case_dir / f"{case_id}_{SEGMENTATION_SUFFIX}{NIFTI_EXT}"))
    log_debug(logger, f"Saved case {case_id} to {case_dir}")


def list_cases(data_dir: Path) -> List[Path]:
    """Return case directories (those holding a segmentation file), sorted by name."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {data_dir}")
    cases = sorted(
        p for p in data_dir.iterdir()
        if p.is_dir() and any(p.glob(f"*_{SEGMENTATION_SUFFIX}{NIFTI_EXT}"))
    )
    log_info(logger, f"Found {len(cases)} cases in {data_dir}")
    return cases


def split_cases(
    cases: Sequence[Path], fractions: Tuple[float, float, float], seed: int
) -> Tuple[List[Path], List[Path], List[Path]]:
    """
    Randomly split cases into train / validation / test lists.

    The test split takes whatever the first two fractions leave over.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise ValueError(f"Split fractions must be three non-negative values summing to <= 1, got {fractions}")

    order = np.random.default_rng(seed).permutation(len(cases))
    shuffled = [cases[i] for i in order]
    n_train = int(round(fractions[0] * len(cases)))
    n_val = int(round(fractions[1] * len(cases)))
    train = sorted(shuffled[:n_train])
    val = sorted(shuffled[n_train:n_train + n_val])
    test = sorted(shuffled[n_train + n_val:])

    log_success(logger, f"Split {len(cases)} cases into {len(train)}/{len(val)}/{len(test)}")
    return train, val, test
