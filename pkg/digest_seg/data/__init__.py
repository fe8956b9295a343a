from .volumes import (
    MODALITIES,
    REGIONS,
    LabelFormatError,
    LabelVolume,
    MultiModalVolume,
    NestedTargets,
    nested_targets,
)
from .phantoms import PhantomSpec, generate_dataset, generate_phantom
from .brats import MissingModalityError, list_cases, load_brats_case, save_case, split_cases
from .preprocessing import CropSizeError, preprocess
from .dataset import BratsCaseDataset

__all__ = [
    "MODALITIES",
    "REGIONS",
    "LabelFormatError",
    "LabelVolume",
    "MultiModalVolume",
    "NestedTargets",
    "nested_targets",
    "PhantomSpec",
    "generate_dataset",
    "generate_phantom",
    "MissingModalityError",
    "list_cases",
    "load_brats_case",
    "save_case",
    "split_cases",
    "CropSizeError",
    "preprocess",
    "BratsCaseDataset",
]
