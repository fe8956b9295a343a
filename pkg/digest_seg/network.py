import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .logger_config import (
    get_network_logger,
    log_debug,
    log_error,
    log_info,
    log_success,
)

logger = get_network_logger()

CHECKPOINT_FORMAT_VERSION = 1
NORM_KINDS = ("group", "instance", "batch")
# * Narrowest channel-attention bottleneck
MIN_ATTENTION_HIDDEN = 2


@dataclass
class NetworkConfig:
    """
    Backbone hyper-parameters shared by teacher and student.

    Only ``use_cbam`` may differ between a teacher and the student distilled from it.
    """

    in_channels: int = 4
    out_channels: int = 3
    base_width: int = 8
    depth: int = 4
    use_cbam: bool = False
    norm_kind: str = "group"
    num_groups: int = 8
    cbam_reduction: int = 4
    cbam_kernel_size: int = 7
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 2:
            raise ValueError(f"base_width must be >= 2, got {self.base_width}")
        if self.out_channels != 3:
            raise ValueError("out_channels must be 3 (ET, TC, WT)")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.cbam_kernel_size % 2 != 1:
            raise ValueError("cbam_kernel_size must be odd")

    def widths(self) -> List[int]:
        return [self.base_width * 2 ** level for level in range(self.depth)]

    def structure(self) -> Dict[str, Any]:
        """Fields that must agree for parameters to transfer between two networks."""
        return {k: v for k, v in asdict(self).items() if k not in ("use_cbam", "seed")}


@dataclass
class StageOutputs:
    """Final probability map plus one auxiliary map per decoder stage, coarsest first."""

    final: torch.Tensor
    aux: List[torch.Tensor]


class CheckpointMismatchError(ValueError):
    """Raised when two networks differ beyond their attention blocks."""

    def __init__(self, unmatched: Sequence[str]):
        self.unmatched = list(unmatched)
        preview = ", ".join(self.unmatched[:10])
        more = f" (+{len(self.unmatched) - 10} more)" if len(self.unmatched) > 10 else ""
        super().__init__(f"Unmatched parameters: {preview}{more}")


def _norm(kind: str, channels: int, num_groups: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(math.gcd(num_groups, channels), channels)
    if kind == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    return nn.BatchNorm3d(channels)


class ConvBlock(nn.Module):
    """Two conv-norm-ReLU layers."""

    def __init__(self, in_channels: int, out_channels: int, norm_kind: str, num_groups: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1, bias=False),
            _norm(norm_kind, out_channels, num_groups),
            nn.ReLU(inplace=True),
            nn.Conv3d(out_channels, out_channels, kernel_size=3, padding=1, bias=False),
            _norm(norm_kind, out_channels, num_groups),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class ChannelAttention3d(nn.Module):
    """Channel weights from average- and max-pooled descriptors through a shared bottleneck."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, MIN_ATTENTION_HIDDEN)
        self.mlp = nn.Sequential(
            nn.Conv3d(channels, hidden, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(hidden, channels, kernel_size=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        avg = self.mlp(F.adaptive_avg_pool3d(x, 1))
        mx = self.mlp(F.adaptive_max_pool3d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention3d(nn.Module):
    """Voxel weights from channelwise average and max maps through one convolution."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv3d(2, 1, kernel_size=kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        avg = torch.mean(x, dim=1, keepdim=True)
        mx = torch.amax(x, dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class CBAM3d(nn.Module):
    """Channel attention followed by spatial attention on a 3D feature map."""

    def __init__(self, channels: int, reduction: int = 4, kernel_size: int = 7):
        super().__init__()
        if channels < 2:
            raise ValueError(f"CBAM needs at least 2 channels, got {channels}")
        self.channel_attention = ChannelAttention3d(channels, reduction)
        self.spatial_attention = SpatialAttention3d(kernel_size)
        # * Test hook: when set, the block is the identity
        self.bypass = False

    def attention_maps(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return (channel map B×C×1×1×1, spatial map B×1×d×h×w)."""
        channel = self.channel_attention(x)
        spatial = self.spatial_attention(x * channel)
        return channel, spatial

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.bypass:
            return x
        channel, spatial = self.attention_maps(x)
        return x * channel * spatial


class EncoderLevel(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, cfg: NetworkConfig):
        super().__init__()
        self.conv = ConvBlock(in_channels, out_channels, cfg.norm_kind, cfg.num_groups)
        self.attention = (
            CBAM3d(out_channels, cfg.cbam_reduction, cfg.cbam_kernel_size)
            if cfg.use_cbam
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.attention(self.conv(x))


class DecoderStage(nn.Module):
    """Upsample, merge the skip connection, convolve, and emit a 1×1×1 head map."""

    def __init__(self, in_channels: int, out_channels: int, cfg: NetworkConfig):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_channels, out_channels, kernel_size=2, stride=2)
        self.conv = ConvBlock(2 * out_channels, out_channels, cfg.norm_kind, cfg.num_groups)
        self.head = nn.Conv3d(out_channels, cfg.out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = self.conv(torch.cat([self.up(x), skip], dim=1))
        return x, torch.sigmoid(self.head(x))


class UNet3D(nn.Module):
    """
    3D encoder-decoder with deep supervision.

    Every decoder stage carries a sigmoid head, so a network of depth L emits
    L - 1 maps; the last (full resolution) one is the final segmentation.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        widths = cfg.widths()

        self.encoders = nn.ModuleList()
        in_channels = cfg.in_channels
        for width in widths:
            self.encoders.append(EncoderLevel(in_channels, width, cfg))
            in_channels = width
        self.pool = nn.MaxPool3d(kernel_size=2, stride=2)

        self.decoders = nn.ModuleList(
            DecoderStage(widths[level + 1], widths[level], cfg)
            for level in reversed(range(cfg.depth - 1))
        )

    @property
    def divisor(self) -> int:
        return 2 ** (self.config.depth - 1)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"Expected input (B, {self.config.in_channels}, D, H, W), got {tuple(x.shape)}"
            )
        for axis, size in zip("DHW", x.shape[2:]):
            if size % self.divisor:
                raise ValueError(
                    f"Spatial axis {axis} has size {size}, not divisible by {self.divisor}"
                )

    def forward(self, x: torch.Tensor) -> StageOutputs:
        self.check_input(x)
        skips = []
        for level, encoder in enumerate(self.encoders):
            if level > 0:
                x = self.pool(x)
            x = encoder(x)
            skips.append(x)

        aux = []
        x = skips[-1]
        for decoder, skip in zip(self.decoders, reversed(skips[:-1])):
            x, stage_map = decoder(x, skip)
            aux.append(stage_map)
        return StageOutputs(final=aux[-1], aux=aux)

    def set_attention_bypass(self, bypass: bool) -> None:
        for module in self.modules():
            if isinstance(module, CBAM3d):
                module.bypass = bypass


def build_network(cfg: NetworkConfig) -> UNet3D:
    """Construct a network whose initial weights depend only on ``cfg.seed``."""
    try:
        cfg.validate()
    except ValueError as e:
        log_error(logger, e, "Invalid network config")
        raise
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = UNet3D(cfg)
    log_info(
        logger,
        f"Built {'student' if cfg.use_cbam else 'teacher'} network: depth={cfg.depth}, "
        f"width={cfg.base_width}, params={count_parameters(net)}",
    )
    return net


def count_parameters(net: nn.Module, prefix: str = "") -> int:
    return sum(p.numel() for name, p in net.named_parameters() if name.startswith(prefix))


def _is_attention_key(name: str) -> bool:
    return ".attention." in name


def transferable_fraction(student: nn.Module, teacher: nn.Module) -> float:
    """Share of student parameters (by count) that have a same-name, same-shape teacher counterpart."""
    teacher_params = dict(teacher.named_parameters())
    total = copied = 0
    for name, param in student.named_parameters():
        total += param.numel()
        match = teacher_params.get(name)
        if match is not None and match.shape == param.shape:
            copied += param.numel()
    return copied / total if total else 0.0


def init_student_from_teacher(student: UNet3D, teacher: UNet3D) -> UNet3D:
    """
    Copy every teacher tensor into the student; attention blocks keep their init.

    Raises:
        CheckpointMismatchError: the networks differ anywhere but in attention blocks
    """
    teacher_state = teacher.state_dict()
    student_state = student.state_dict()

    unmatched = [
        name for name, tensor in teacher_state.items()
        if name not in student_state or student_state[name].shape != tensor.shape
    ]
    unmatched += [
        name for name in student_state
        if name not in teacher_state and not _is_attention_key(name)
    ]
    if unmatched:
        error = CheckpointMismatchError(unmatched)
        log_error(logger, error, "Cannot initialize student from teacher")
        raise error

    student.load_state_dict(teacher_state, strict=False)
    log_success(
        logger,
        f"Student initialized from teacher ({len(teacher_state)} tensors, "
        f"{transferable_fraction(student, teacher):.1%} of parameters)",
    )
    return student


# ----- Checkpoints ----------------------------------------------------------------


def save_checkpoint(
    path: Path,
    net: UNet3D,
    phase: str,
    epoch: int = 0,
    val_dice: Optional[float] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "network_config": asdict(net.config),
        "state_dict": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
        "phase": phase,
        "epoch": int(epoch),
        "val_dice": None if val_dice is None else float(val_dice),
    }
    torch.save(payload, path)
    log_debug(logger, f"Saved {phase} checkpoint (epoch {epoch}) to {path}")
    return path


def load_checkpoint(
    path: Path, map_location: Union[str, torch.device] = "cpu"
) -> Tuple[UNet3D, Dict[str, Any]]:
    """Rebuild a network from a checkpoint; returns (network, metadata)."""
    path = Path(path)
    if not path.exists():
        error = FileNotFoundError(f"Checkpoint not found: {path}")
        log_error(logger, error, "load_checkpoint")
        raise error

    payload = torch.load(path, map_location=map_location, weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint format version {version} in {path}")

    known = {f.name for f in fields(NetworkConfig)}
    cfg = NetworkConfig(**{k: v for k, v in payload["network_config"].items() if k in known})
    net = UNet3D(cfg)
    net.load_state_dict(payload["state_dict"])
    meta = {k: payload[k] for k in ("phase", "epoch", "val_dice")}
    log_debug(logger, f"Loaded {meta['phase']} checkpoint from {path}")
    return net, meta


# ----- Inference ----------------------------------------------------------------


def _window_starts(size: int, window: int, step: int) -> List[int]:
    starts = list(range(0, max(size - window, 0) + 1, step))
    if starts[-1] != max(size - window, 0):
        starts.append(size - window)
    return starts


@torch.no_grad()
def sliding_window_predict(
    net: UNet3D,
    image: torch.Tensor,
    window: Tuple[int, int, int],
    overlap: float = 0.5,
) -> torch.Tensor:
    """
    Average the final map over overlapping windows covering the whole volume.

    Volumes smaller than the window are zero-padded and cropped back.
    """
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    spatial = image.shape[2:]
    pad = [max(w - s, 0) for s, w in zip(spatial, window)]
    if any(pad):
        image = F.pad(image, (0, pad[2], 0, pad[1], 0, pad[0]))
    padded = image.shape[2:]

    steps = [max(int(w * (1 - overlap)), 1) for w in window]
    out = image.new_zeros((image.shape[0], net.config.out_channels) + tuple(padded))
    counts = image.new_zeros((1, 1) + tuple(padded))
    for d in _window_starts(padded[0], window[0], steps[0]):
        for h in _window_starts(padded[1], window[1], steps[1]):
            for w in _window_starts(padded[2], window[2], steps[2]):
                tile = (slice(d, d + window[0]), slice(h, h + window[1]), slice(w, w + window[2]))
                pred = net(image[(slice(None), slice(None)) + tile]).final
                out[(slice(None), slice(None)) + tile] += pred
                counts[(slice(None), slice(None)) + tile] += 1
    out = out / counts
    return out[:, :, : spatial[0], : spatial[1], : spatial[2]]
