import os
import random
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import numpy as np
import torch
from dotenv import dotenv_values, load_dotenv

from .logger_config import get_cli_logger, log_error, log_info, log_warning
from .network import NetworkConfig

# * Load environment variables from .env file
load_dotenv()

logger = get_cli_logger()

SCALES = ("desk", "paper")
PHASES = ("teacher", "student")
_TRUTHY = {"1", "true", "yes", "on"}
_FALSY = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is the 1-based config file line when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _check_schedule(epochs: int, start: int, prefix: str) -> None:
    if epochs < 0:
        raise ConfigError(f"{prefix}epochs must be >= 0, got {epochs}")
    if epochs > 0 and not 0 < start <= epochs:
        raise ConfigError(
            f"{prefix}cosine_decay_start_epoch must be in (0, {prefix}epochs={epochs}], got {start}"
        )


@dataclass
class TrainConfig:
    """Optimization settings for one training phase."""

    epochs: int = 200
    batch_size: int = 1
    lr_initial: float = 1e-4
    cosine_decay_start_epoch: int = 100
    optimizer_kind: str = "ranger"
    weight_decay: float = 0.0
    crop: Tuple[int, int, int] = (128, 128, 128)
    seed: int = 0
    phase: str = "teacher"
    copy_init: bool = True
    ds_weight: float = 1.0
    use_masking: bool = True
    force_full_mask: bool = False
    dice_smoothing: float = 1.0
    strict_dice: bool = False
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5
    num_workers: int = 0
    # * Teacher-only schedule; None falls back to epochs / cosine_decay_start_epoch
    teacher_epochs: Optional[int] = None
    teacher_cosine_decay_start_epoch: Optional[int] = None

    def for_phase(self, phase: str, **changes) -> "TrainConfig":
        """Settings for one phase, with the teacher schedule resolved for ``phase="teacher"``."""
        if phase == "teacher":
            epochs, start = self._teacher_schedule()
            changes.setdefault("epochs", epochs)
            changes.setdefault("cosine_decay_start_epoch", start)
        return replace(self, phase=phase, **changes)

    def _teacher_schedule(self) -> Tuple[int, int]:
        epochs = self.epochs if self.teacher_epochs is None else self.teacher_epochs
        start = (
            self.cosine_decay_start_epoch
            if self.teacher_cosine_decay_start_epoch is None
            else self.teacher_cosine_decay_start_epoch
        )
        return epochs, start

    def validate(self) -> None:
        _check_schedule(self.epochs, self.cosine_decay_start_epoch, "")
        _check_schedule(*self._teacher_schedule(), "teacher_")
        if self.lr_initial <= 0:
            raise ConfigError("lr_initial must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.optimizer_kind not in ("ranger", "adam"):
            raise ConfigError(f"optimizer_kind must be 'ranger' or 'adam', got {self.optimizer_kind!r}")
        if len(self.crop) != 3 or any(c < 1 for c in self.crop):
            raise ConfigError(f"crop must be three positive ints, got {self.crop}")
        if self.dice_smoothing <= 0:
            raise ConfigError("dice_smoothing must be > 0")


@dataclass
class DataConfig:
    """Synthetic dataset size, phantom geometry and the train/val/test split."""

    num_cases: int = 40
    volume_size: Tuple[int, int, int] = (40, 40, 40)
    lesion_radius_range: Tuple[float, float] = (5.0, 9.0)
    max_lesions: int = 2
    noise_std: float = 8.0
    split: Tuple[float, float, float] = (0.4, 0.1, 0.5)


@dataclass
class EvalConfig:
    threshold: float = 0.5
    sliding_window: bool = False
    window_overlap: float = 0.5


@dataclass
class ExperimentConfig:
    scale: str = "desk"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Route the single top-level seed into every section."""
        return replace(
            self,
            seed=seed,
            network=replace(self.network, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def validate(self) -> None:
        self.train.validate()
        try:
            self.network.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not 0 < self.eval.threshold < 1:
            raise ConfigError("eval.threshold must be in (0, 1)")
        divisor = 2 ** (self.network.depth - 1)
        if any(c % divisor for c in self.train.crop):
            raise ConfigError(f"crop {self.train.crop} must be divisible by {divisor} for depth {self.network.depth}")


def desk_preset(seed: int = 0) -> ExperimentConfig:
    """Reduced configuration that runs on a CPU in minutes."""
    return ExperimentConfig(
        scale="desk",
        data=DataConfig(
            num_cases=40,
            volume_size=(40, 40, 40),
            lesion_radius_range=(5.0, 9.0),
            max_lesions=2,
            noise_std=8.0,
            split=(0.4, 0.1, 0.5),
        ),
        network=NetworkConfig(base_width=8, depth=4),
        train=TrainConfig(
            epochs=30,
            cosine_decay_start_epoch=15,
            lr_initial=2e-3,
            crop=(32, 32, 32),
            # * The teacher must converge before it is distilled
            teacher_epochs=50,
            teacher_cosine_decay_start_epoch=30,
        ),
        eval=EvalConfig(sliding_window=False),
    ).with_seed(seed)


def paper_preset(seed: int = 0) -> ExperimentConfig:
    """Full-size configuration: 128³ crops, 200 epochs, 220/74/75 split."""
    return ExperimentConfig(
        scale="paper",
        data=DataConfig(
            num_cases=369,
            volume_size=(144, 144, 144),
            lesion_radius_range=(10.0, 30.0),
            max_lesions=2,
            noise_std=8.0,
            split=(220 / 369, 74 / 369, 75 / 369),
        ),
        network=NetworkConfig(base_width=16, depth=4),
        train=TrainConfig(
            epochs=200,
            cosine_decay_start_epoch=100,
            lr_initial=1e-4,
            crop=(128, 128, 128),
        ),
        eval=EvalConfig(sliding_window=True, window_overlap=0.5),
    ).with_seed(seed)


def preset(scale: str, seed: int = 0) -> ExperimentConfig:
    if scale == "desk":
        return desk_preset(seed)
    if scale == "paper":
        return paper_preset(seed)
    raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")


# ----- Key=value parsing ----------------------------------------------------------


def _coerce(raw: str, hint) -> object:
    raw = raw.strip()
    origin = get_origin(hint)
    if origin is Union:
        args = [a for a in get_args(hint) if a is not type(None)]
        if raw.lower() in ("", "none", "null"):
            return None
        return _coerce(raw, args[0])
    if origin is tuple:
        args = get_args(hint)
        parts = [p for p in raw.replace(" ", "").split(",") if p]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {raw!r}")
        return tuple(_coerce(p, a) for p, a in zip(parts, args))
    if hint is bool:
        lowered = raw.lower()
        if lowered in _TRUTHY:
            return True
        if lowered in _FALSY:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def set_value(exp: ExperimentConfig, key: str, raw: str, line: Optional[int] = None) -> None:
    """
    Assign one ``key=value`` setting in place.

    Undotted keys are TrainConfig fields; dotted keys name a section
    (``train``, ``network``, ``data``, ``eval``). ``seed`` is the single
    top-level seed and reaches every section; per-section seeds are rejected.
    """
    section_name, _, name = key.strip().rpartition(".")
    if name == "seed":
        if section_name:
            raise ConfigError(f"{key!r} cannot be set on its own, use 'seed'", line)
        try:
            seed = _coerce(raw, int)
        except ValueError as e:
            raise ConfigError(f"bad value for 'seed': {e}", line) from e
        exp.seed = exp.network.seed = exp.train.seed = seed
        return
    section_name = section_name or "train"
    sections = {"train": exp.train, "network": exp.network, "data": exp.data, "eval": exp.eval}
    if section_name not in sections:
        raise ConfigError(f"unknown section {section_name!r} in key {key!r}", line)

    target = sections[section_name]
    hints = get_type_hints(type(target))
    if name not in {f.name for f in fields(target)}:
        raise ConfigError(f"unknown key {key!r}", line)
    try:
        value = _coerce(raw, hints[name])
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {e}", line) from e
    setattr(target, name, value)


def load_config_file(path: Path, exp: ExperimentConfig) -> ExperimentConfig:
    """Apply a ``key=value`` config file to ``exp``; reports the offending line on error."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")

    line_of: Dict[str, int] = {}
    for number, text in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = text.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("export "):
            stripped = stripped[len("export "):]
        if "=" not in stripped:
            raise ConfigError(f"expected key=value, got {stripped!r}", number)
        key = stripped.split("=", 1)[0].strip()
        if not key:
            raise ConfigError("empty key", number)
        line_of[key] = number

    for key, value in dotenv_values(path).items():
        set_value(exp, key, value if value is not None else "", line_of.get(key))

    log_info(logger, f"Loaded {len(line_of)} settings from {path}")
    return exp


def apply_overrides(exp: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply CLI ``--set key=value`` overrides."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        set_value(exp, key, value)
    return exp


def build_experiment(
    scale: str = "desk",
    seed: int = 0,
    config_path: Optional[Path] = None,
    overrides=None,
) -> ExperimentConfig:
    """Preset, then config file, then overrides; validated."""
    exp = preset(scale, seed)
    if config_path is not None:
        load_config_file(config_path, exp)
    apply_overrides(exp, overrides)
    try:
        exp.validate()
    except ConfigError as e:
        log_error(logger, e, "Invalid configuration")
        raise
    return exp


# ----- Determinism ------------------------------------------------------------------


def deterministic_mode() -> bool:
    return os.getenv("DIGEST_DETERMINISTIC", "").lower() in _TRUTHY


def seed_everything(seed: int, deterministic: Optional[bool] = None) -> None:
    """Seed Python, NumPy and torch; in deterministic mode also pin torch kernels."""
    if deterministic is None:
        deterministic = deterministic_mode()
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True
        log_warning(logger, "Deterministic mode on: data loading is serialized")
