"""Volume containers shared by the phantom generator, the loader and preprocessing."""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

MODALITIES: Tuple[str, ...] = ("T1", "T1ce", "T2", "FLAIR")

# * BraTS label convention
BACKGROUND = 0
NCR = 1
ED = 2
ET = 4
LABEL_IDS = frozenset({BACKGROUND, NCR, ED, ET})

REGIONS: Tuple[str, ...] = ("ET", "TC", "WT")


class LabelFormatError(ValueError):
    """Raised when a label volume holds ids outside the BraTS convention."""


def affine_from_spacing(spacing: Tuple[float, float, float]) -> np.ndarray:
    affine = np.eye(4)
    affine[:3, :3] = np.diag(spacing)
    return affine


@dataclass
class MultiModalVolume:
    """
    Four co-registered MR channels in the fixed order T1, T1ce, T2, FLAIR.

    Attributes:
        intensities: float32 array of shape (4, D, H, W)
        voxel_spacing: spacing in mm along D, H, W
        affine: 4x4 voxel-to-world matrix carried through NIfTI I/O
    """

    intensities: np.ndarray
    voxel_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None
    modality_names: Tuple[str, ...] = field(default=MODALITIES, init=False)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 4 or self.intensities.shape[0] != len(MODALITIES):
            raise ValueError(
                f"Expected intensities of shape (4, D, H, W), got {self.intensities.shape}"
            )
        if not np.isfinite(self.intensities).all():
            raise ValueError("Intensities contain NaN or Inf values")
        self.voxel_spacing = tuple(float(s) for s in self.voxel_spacing)
        if self.affine is None:
            self.affine = affine_from_spacing(self.voxel_spacing)

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        return tuple(self.intensities.shape[1:])


@dataclass
class LabelVolume:
    """Voxelwise class ids in {0, 1, 2, 4}."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"Expected a 3D label volume, got shape {self.labels.shape}")
        found = set(np.unique(self.labels).tolist())
        unexpected = found - LABEL_IDS
        if unexpected:
            raise LabelFormatError(
                f"Label ids {sorted(unexpected)} outside the BraTS convention {sorted(LABEL_IDS)}"
            )
        self.labels = self.labels.astype(np.uint8)

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass
class NestedTargets:
    """Binary ET, TC and WT maps with et <= tc <= wt voxelwise."""

    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def __post_init__(self):
        if np.any(self.et & ~self.tc) or np.any(self.tc & ~self.wt):
            raise ValueError("Region maps violate ET <= TC <= WT nesting")

    def stack(self) -> np.ndarray:
        """Return a float32 (3, D, H, W) array in ET, TC, WT channel order."""
        return np.stack([self.et, self.tc, self.wt]).astype(np.float32)


def nested_targets(labels: LabelVolume) -> NestedTargets:
    """Combine BraTS labels into the three nested evaluation regions."""
    lab = labels.labels
    et = lab == ET
    tc = et | (lab == NCR)
    wt = tc | (lab == ED)
    return NestedTargets(et=et, tc=tc, wt=wt)


def check_paired(volume: MultiModalVolume, labels: LabelVolume) -> None:
    if volume.spatial_shape != labels.spatial_shape:
        raise ValueError(
            f"Volume shape {volume.spatial_shape} does not match label shape {labels.spatial_shape}"
        )
