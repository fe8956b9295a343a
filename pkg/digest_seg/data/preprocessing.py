from typing import Optional, Tuple

import numpy as np

from ..logger_config import get_data_logger, log_debug, log_error
from .volumes import LabelVolume, MultiModalVolume, check_paired

logger = get_data_logger()


class CropSizeError(ValueError):
    """Raised when the requested crop exceeds the brain bounding box."""


def brain_bounding_box(intensities: np.ndarray) -> Tuple[slice, slice, slice]:
    """Smallest box containing every voxel that is nonzero in any channel."""
    brain = np.any(intensities != 0, axis=0)
    if not brain.any():
        raise ValueError("Volume has no nonzero voxels; cannot locate the brain")
    box = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(brain.any(axis=other))
        box.append(slice(int(hits[0]), int(hits[-1]) + 1))
    return tuple(box)


def normalize_intensities(intensities: np.ndarray) -> np.ndarray:
    """Z-score each channel over its nonzero voxels; zero voxels stay zero."""
    out = np.zeros_like(intensities, dtype=np.float32)
    for channel in range(intensities.shape[0]):
        image = intensities[channel].astype(np.float64)
        brain = image != 0
        if not brain.any():
            continue
        values = image[brain]
        std = values.std()
        scale = std if std > 0 else 1.0
        out[channel][brain] = ((values - values.mean()) / scale).astype(np.float32)
    return out


def crop_offsets(
    shape: Tuple[int, ...], crop: Tuple[int, int, int], train: bool, seed: int
) -> Tuple[int, int, int]:
    for axis, (size, want) in enumerate(zip(shape, crop)):
        if want > size:
            raise CropSizeError(
                f"Crop {tuple(crop)} larger than brain box {tuple(shape)} along axis {axis}"
            )
    if train:
        rng = np.random.default_rng(seed)
        return tuple(int(rng.integers(0, size - want + 1)) for size, want in zip(shape, crop))
    return tuple((size - want) // 2 for size, want in zip(shape, crop))


def preprocess(
    vol: MultiModalVolume,
    labels: LabelVolume,
    crop: Optional[Tuple[int, int, int]],
    train: bool,
    seed: int,
) -> Tuple[MultiModalVolume, LabelVolume]:
    """
    Crop to the brain, normalize, then take a random (train) or center (eval) crop.

    Normalization statistics come from the whole brain box, before the final crop.

    Args:
        vol: raw four-channel volume
        labels: paired label volume
        crop: output spatial size; None keeps the whole brain box (sliding-window inference)
        train: random crop when True, center crop otherwise
        seed: seed of the random crop offsets

    Returns:
        Cropped and normalized (MultiModalVolume, LabelVolume)
    """
    check_paired(vol, labels)
    try:
        box = brain_bounding_box(vol.intensities)
        brain = vol.intensities[(slice(None),) + box]
        brain_labels = labels.labels[box]

        normalized = normalize_intensities(brain)
        if crop is None:
            crop = brain.shape[1:]
        offsets = crop_offsets(brain.shape[1:], tuple(crop), train, seed)
        window = tuple(slice(o, o + c) for o, c in zip(offsets, crop))
    except ValueError as e:
        log_error(logger, e, "Preprocessing failed")
        raise

    log_debug(logger, f"Brain box {[(s.start, s.stop) for s in box]}, crop offsets {offsets}")

    affine = vol.affine.copy()
    start = np.array([s.start for s in box]) + np.array(offsets)
    affine[:3, 3] = affine[:3, 3] + affine[:3, :3] @ start

    out_vol = MultiModalVolume(
        intensities=np.ascontiguousarray(normalized[(slice(None),) + window]),
        voxel_spacing=vol.voxel_spacing,
        affine=affine,
    )
    out_labels = LabelVolume(labels=np.ascontiguousarray(brain_labels[window]))
    return out_vol, out_labels
