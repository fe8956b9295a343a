from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..logger_config import get_data_logger, log_error, log_info, log_success
from .volumes import ED, ET, NCR, LabelVolume, MultiModalVolume

logger = get_data_logger()

# * Mean intensity of (NCR, ED, ET) per modality, rows T1, T1ce, T2, FLAIR.
# * Only the T1ce row tells the core apart from the edema.
DEFAULT_CONTRAST: Tuple[Tuple[float, float, float], ...] = (
    (80.0, 80.0, 80.0),
    (55.0, 100.0, 220.0),
    (165.0, 165.0, 165.0),
    (150.0, 150.0, 150.0),
)
DEFAULT_BACKGROUND = (100.0, 100.0, 100.0, 100.0)

# * Painting order across overlapping lesions: higher wins
_PRIORITY = {ED: 1, ET: 2, NCR: 3}


@dataclass(frozen=True)
class PhantomSpec:
    """
    Parameters of one synthetic multi-modal case.

    Each lesion is a sphere of outer radius r: an NCR core up to
    ``core_fraction * r``, an ET rim up to ``rim_fraction * r`` and an ED halo
    up to r. The brain is an ellipsoid filling ``brain_fraction`` of the
    volume; everything outside it is exactly zero.
    """

    volume_size: Tuple[int, int, int] = (40, 40, 40)
    num_lesions: int = 1
    lesion_radius_range: Tuple[float, float] = (5.0, 9.0)
    contrast: Tuple[Tuple[float, float, float], ...] = DEFAULT_CONTRAST
    background: Tuple[float, ...] = DEFAULT_BACKGROUND
    noise_std: float = 8.0
    seed: int = 0
    core_fraction: float = 0.4
    rim_fraction: float = 0.65
    brain_fraction: float = 0.95
    lesion_centers: Optional[Tuple[Tuple[float, float, float], ...]] = None
    voxel_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        size = np.asarray(self.volume_size)
        low, high = self.lesion_radius_range
        if len(self.volume_size) != 3 or np.any(size < 1):
            raise ValueError(f"volume_size must be 3 positive ints, got {self.volume_size}")
        if self.num_lesions < 0:
            raise ValueError("num_lesions must be non-negative")
        if not 0 < low <= high:
            raise ValueError(f"Invalid lesion radius range {self.lesion_radius_range}")
        if high > size.min() / 2:
            raise ValueError(
                f"Lesion radius {high} exceeds half the smallest volume side {size.min() / 2}"
            )
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if np.asarray(self.contrast).shape != (4, 3):
            raise ValueError("contrast must be a 4x3 matrix (modality x NCR/ED/ET)")
        if len(self.background) != 4:
            raise ValueError("background needs one mean per modality")
        if not 0 < self.core_fraction < self.rim_fraction < 1:
            raise ValueError("Need 0 < core_fraction < rim_fraction < 1")
        if self.lesion_centers is not None and len(self.lesion_centers) != self.num_lesions:
            raise ValueError("lesion_centers must list one center per lesion")


# ----- Helper utilities -------------------------------------------------------


def _distance_grid(shape: Sequence[int], center: Sequence[float]) -> np.ndarray:
    axes = np.ogrid[tuple(slice(0, s) for s in shape)]
    return np.sqrt(sum((ax - c) ** 2 for ax, c in zip(axes, center)))


def _brain_mask(spec: PhantomSpec) -> np.ndarray:
    shape = spec.volume_size
    axes = np.ogrid[tuple(slice(0, s) for s in shape)]
    semi = [spec.brain_fraction * s / 2 for s in shape]
    center = [(s - 1) / 2 for s in shape]
    r2 = sum(((ax - c) / a) ** 2 for ax, c, a in zip(axes, center, semi))
    return r2 <= 1.0


def _place_lesion(
    rng: np.random.Generator, spec: PhantomSpec, radius: float
) -> Tuple[float, float, float]:
    center = []
    for axis, size in enumerate(spec.volume_size):
        low, high = radius, size - 1 - radius
        if high < low:
            raise ValueError(
                f"Lesion of radius {radius:.2f} cannot fit along axis {axis} of size {size}"
            )
        center.append(float(rng.uniform(low, high)))
    return tuple(center)


# ----- Core generators --------------------------------------------------------


def generate_phantom(spec: PhantomSpec) -> Tuple[MultiModalVolume, LabelVolume]:
    """
    Render a synthetic case whose lesions follow the BraTS nesting by construction.

    Args:
        spec: phantom parameters; the same spec always yields the same arrays

    Returns:
        (MultiModalVolume, LabelVolume) pair
    """
    rng = np.random.default_rng(spec.seed)
    shape = tuple(spec.volume_size)

    labels = np.zeros(shape, dtype=np.uint8)
    priority = np.zeros(shape, dtype=np.uint8)

    for index in range(spec.num_lesions):
        radius = float(rng.uniform(*spec.lesion_radius_range))
        if spec.lesion_centers is not None:
            center = tuple(float(c) for c in spec.lesion_centers[index])
            for axis, (c, size) in enumerate(zip(center, shape)):
                if c - radius < 0 or c + radius > size - 1:
                    raise ValueError(
                        f"Lesion {index} of radius {radius:.2f} at {center} cannot fit along axis {axis}"
                    )
        else:
            center = _place_lesion(rng, spec, radius)

        dist = _distance_grid(shape, center)
        shells = (
            (ED, dist <= radius),
            (ET, dist <= spec.rim_fraction * radius),
            (NCR, dist <= spec.core_fraction * radius),
        )
        for label, region in shells:
            paint = region & (priority < _PRIORITY[label])
            labels[paint] = label
            priority[paint] = _PRIORITY[label]

    brain = _brain_mask(spec) | (labels > 0)
    contrast = np.asarray(spec.contrast, dtype=np.float32)
    intensities = np.zeros((4,) + shape, dtype=np.float32)
    for channel in range(4):
        image = np.full(shape, spec.background[channel], dtype=np.float32)
        image[labels == NCR] = contrast[channel, 0]
        image[labels == ED] = contrast[channel, 1]
        image[labels == ET] = contrast[channel, 2]
        if spec.noise_std > 0:
            image += rng.normal(0.0, spec.noise_std, size=shape).astype(np.float32)
        image[~brain] = 0.0
        intensities[channel] = image

    volume = MultiModalVolume(intensities=intensities, voxel_spacing=spec.voxel_spacing)
    return volume, LabelVolume(labels=labels)


def case_seeds(seed: int, num_cases: int) -> List[int]:
    """Spawn independent per-case seeds from one top-level seed."""
    children = np.random.SeedSequence(seed).spawn(num_cases)
    return [int(child.generate_state(1)[0]) for child in children]


# ----- Main I/O ----------------------------------------------------------------


def generate_dataset(
    out_dir: Path,
    num_cases: int,
    seed: int,
    volume_size: Tuple[int, int, int] = (40, 40, 40),
    lesion_radius_range: Tuple[float, float] = (5.0, 9.0),
    max_lesions: int = 2,
    noise_std: float = 8.0,
) -> pd.DataFrame:
    """
    Write ``num_cases`` phantoms in the BraTS directory layout plus a manifest.

    Existing case directories with the same ids are overwritten.

    Returns:
        The manifest as a DataFrame (case_id, seed, num_lesions)
    """
    from .brats import save_case

    out_dir = Path(out_dir)
    log_info(logger, f"Generating {num_cases} phantom cases into {out_dir} (seed={seed})")

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for index, case_seed in enumerate(case_seeds(seed, num_cases)):
            lesion_count = int(np.random.default_rng(case_seed).integers(1, max_lesions + 1))
            spec = PhantomSpec(
                volume_size=volume_size,
                num_lesions=lesion_count,
                lesion_radius_range=lesion_radius_range,
                noise_std=noise_std,
                seed=case_seed,
            )
            volume, labels = generate_phantom(spec)
            case_id = f"Phantom_{index:04d}"
            save_case(out_dir / case_id, case_id, volume, labels)
            rows.append({"case_id": case_id, "seed": case_seed, "num_lesions": lesion_count})

        manifest = pd.DataFrame(rows, columns=["case_id", "seed", "num_lesions"])
        manifest.to_csv(out_dir / "manifest.csv", index=False)
        log_success(logger, f"Wrote {len(manifest):>4} cases to {out_dir}")
        return manifest

    except Exception as e:
        log_error(logger, e, "Failed to generate phantom dataset")
        raise
