from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch

from .data.volumes import MODALITIES
from .logger_config import get_masking_logger, log_debug, log_error

logger = get_masking_logger()


@dataclass(frozen=True)
class ModalityMask:
    """Availability of the four modalities, ordered T1, T1ce, T2, FLAIR."""

    bits: Tuple[bool, bool, bool, bool]

    def __post_init__(self):
        bits = tuple(bool(b) for b in self.bits)
        if len(bits) != len(MODALITIES):
            raise ValueError(f"Mask needs {len(MODALITIES)} bits, got {len(bits)}")
        if not any(bits):
            raise ValueError("Mask must keep at least one modality")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_bitstring(cls, text: str) -> "ModalityMask":
        text = text.strip()
        if len(text) != len(MODALITIES) or set(text) - {"0", "1"}:
            raise ValueError(f"Invalid mask bitstring {text!r}")
        return cls(tuple(c == "1" for c in text))

    @property
    def bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    @property
    def num_available(self) -> int:
        return sum(self.bits)

    @property
    def num_total(self) -> int:
        return len(self.bits)

    @property
    def available_modalities(self) -> Tuple[str, ...]:
        return tuple(name for name, bit in zip(MODALITIES, self.bits) if bit)

    def missing(self, modality: str) -> bool:
        return not self.bits[MODALITIES.index(modality)]

    def as_tensor(self, device=None, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.bits, device=device, dtype=dtype)

    def __str__(self) -> str:
        return self.bitstring


FULL_MASK = ModalityMask((True, True, True, True))
KEEP_PROBABILITY = 0.5

# * Row order of the results table: singles, pairs, triples, all four
_SUBSET_ORDER = (
    "1000", "0100", "0010", "0001",
    "1100", "1010", "1001", "0110", "0101", "0011",
    "1110", "1101", "0111", "1011",
    "1111",
)


def enumerate_subsets() -> List[ModalityMask]:
    """All 15 non-empty modality subsets in results-table row order."""
    return [ModalityMask.from_bitstring(bits) for bits in _SUBSET_ORDER]


def sample_mask(rng: np.random.Generator, n_total: int = 4) -> ModalityMask:
    """
    Keep each modality independently with probability 0.5, redrawing the empty mask.

    The result is uniform over the 15 non-empty subsets.
    """
    if n_total != len(MODALITIES):
        raise ValueError(f"Only {len(MODALITIES)}-modality masks are supported, got n_total={n_total}")
    while True:
        bits = rng.random(n_total) < KEEP_PROBABILITY
        if bits.any():
            mask = ModalityMask(tuple(bits.tolist()))
            log_debug(logger, f"Sampled mask {mask.bitstring}")
            return mask


def apply_mask(batch: torch.Tensor, mask: ModalityMask) -> torch.Tensor:
    """Zero the channels of a (B, 4, D, H, W) batch whose mask bit is off."""
    if batch.dim() != 5 or batch.shape[1] != mask.num_total:
        error = ValueError(
            f"Expected a (B, {mask.num_total}, D, H, W) batch, got shape {tuple(batch.shape)}"
        )
        log_error(logger, error, "apply_mask")
        raise error
    keep = torch.tensor(mask.bits, device=batch.device).view(1, -1, 1, 1, 1)
    return torch.where(keep, batch, torch.zeros((), dtype=batch.dtype, device=batch.device))
