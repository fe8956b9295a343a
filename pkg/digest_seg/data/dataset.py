from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from ..logger_config import get_data_logger, log_info
from .brats import load_brats_case
from .preprocessing import preprocess
from .volumes import LabelVolume, MultiModalVolume, nested_targets

logger = get_data_logger()


class BratsCaseDataset(Dataset):
    """
    Preprocessed samples over a list of case directories.

    Crop offsets depend only on (seed, epoch, index), so a run is reproducible
    regardless of worker scheduling. Call ``set_epoch`` at the start of every
    epoch to draw new training crops.
    """

    def __init__(
        self,
        case_dirs: Sequence[Path],
        crop: Optional[Tuple[int, int, int]],
        train: bool,
        seed: int = 0,
        cache: bool = True,
    ):
        self.case_dirs: List[Path] = [Path(p) for p in case_dirs]
        self.crop = None if crop is None else tuple(crop)
        self.train = train
        self.seed = seed
        self.epoch = 0
        self.cache = cache
        self._cache: Dict[int, Tuple[MultiModalVolume, LabelVolume]] = {}
        log_info(
            logger,
            f"Dataset over {len(self.case_dirs)} cases (crop={self.crop}, train={train})",
        )

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.case_dirs)

    def _load(self, idx: int) -> Tuple[MultiModalVolume, LabelVolume]:
        if idx in self._cache:
            return self._cache[idx]
        case = load_brats_case(self.case_dirs[idx])
        if self.cache:
            self._cache[idx] = case
        return case

    def crop_seed(self, idx: int) -> int:
        return int(np.random.SeedSequence([self.seed, self.epoch, idx]).generate_state(1)[0])

    def __getitem__(self, idx: int) -> Dict[str, object]:
        volume, labels = self._load(idx)
        volume, labels = preprocess(volume, labels, self.crop, self.train, self.crop_seed(idx))
        targets = nested_targets(labels)
        return {
            "image": torch.from_numpy(volume.intensities),
            "target": torch.from_numpy(targets.stack()),
            "case_id": self.case_dirs[idx].name,
        }
