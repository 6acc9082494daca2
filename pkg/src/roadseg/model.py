"""Encoder-decoder segmentation network with a residual encoder.

The encoder stacks residual stages (each halves the resolution); the decoder
mirrors them upward, concatenating the equal-resolution encoder feature map
at every step, and ends in a zero-initialized 1x1 projection to per-pixel
class logits. `forward` requires H and W divisible by 2**num_stages; the
prediction helpers pad inputs to the next multiple and crop the logits back,
so callers of the data path can use any size.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ConfigError, ShapeError

CHECKPOINT_FORMAT = "roadseg-checkpoint-v1"

# variant -> (stage_channels, blocks_per_stage, bottleneck blocks)
ENCODER_VARIANTS = {
    "Tiny": ((16, 32, 64), (1, 1, 1), False),
    "R34-like": ((64, 128, 256, 512), (3, 4, 6, 3), False),
    "R50-like": ((64, 128, 256, 512), (3, 4, 6, 3), True),
}


@dataclass(frozen=True)
class ModelConfig:
    encoder_variant: str = "Tiny"
    stage_channels: tuple[int, ...] = ()
    blocks_per_stage: tuple[int, ...] = ()
    num_classes: int = 12
    pretrained_source: str | None = None

    def __post_init__(self) -> None:
        if self.encoder_variant not in ENCODER_VARIANTS:
            raise ConfigError(
                f"encoder_variant must be one of {sorted(ENCODER_VARIANTS)}, got {self.encoder_variant!r}"
            )
        channels, blocks, _ = ENCODER_VARIANTS[self.encoder_variant]
        if not self.stage_channels:
            object.__setattr__(self, "stage_channels", tuple(channels))
        if not self.blocks_per_stage:
            object.__setattr__(self, "blocks_per_stage", tuple(blocks))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.stage_channels) != len(self.blocks_per_stage) or len(self.stage_channels) < 2:
            raise ConfigError("stage_channels and blocks_per_stage must have equal length >= 2")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def bottleneck(self) -> bool:
        return ENCODER_VARIANTS[self.encoder_variant][2]

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.stage_channels)

    def to_dict(self) -> dict:
        return {
            "encoder_variant": self.encoder_variant,
            "stage_channels": list(self.stage_channels),
            "blocks_per_stage": list(self.blocks_per_stage),
            "num_classes": self.num_classes,
            "pretrained_source": self.pretrained_source,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(
            encoder_variant=data["encoder_variant"],
            stage_channels=tuple(data["stage_channels"]),
            blocks_per_stage=tuple(data["blocks_per_stage"]),
            num_classes=int(data["num_classes"]),
            pretrained_source=data.get("pretrained_source"),
        )


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions plus an identity shortcut over them."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class BottleneckBlock(nn.Module):
    """1x1 - 3x3 - 1x1 convolution stack plus an identity shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        mid = max(out_ch // 4, 4)
        self.conv1 = nn.Conv2d(in_ch, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


class DecoderBlock(nn.Module):
    """Upsample x2, concatenate the equal-resolution encoder skip, convolve."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if x.shape[-2:] != skip.shape[-2:]:
            raise ShapeError(
                f"skip connection joins unequal resolutions {tuple(x.shape[-2:])} vs {tuple(skip.shape[-2:])}"
            )
        x = torch.cat([x, skip], dim=1)
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class SegmentationNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        channels = config.stage_channels
        block = BottleneckBlock if config.bottleneck else ResidualBlock
        self.stem = nn.Sequential(
            nn.Conv2d(3, channels[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(channels[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = channels[0]
        for out_ch, n_blocks in zip(channels, config.blocks_per_stage):
            blocks = [block(in_ch, out_ch, stride=2)]
            blocks += [block(out_ch, out_ch) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        skip_channels = [channels[0]] + list(channels[:-1])
        decoders = []
        in_ch = channels[-1]
        for skip_ch in reversed(skip_channels):
            decoders.append(DecoderBlock(in_ch, skip_ch, skip_ch))
            in_ch = skip_ch
        self.decoders = nn.ModuleList(decoders)
        self.head = nn.Conv2d(channels[0], config.num_classes, 1)
        self._init_parameters()

    def _init_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # zero head: a fresh model predicts the uniform distribution everywhere
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def downsample_factor(self) -> int:
        return self.config.downsample_factor

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) normalized input -> (B, C, H, W) logits."""
        h, w = x.shape[-2:]
        factor = self.downsample_factor
        if h % factor or w % factor:
            raise ShapeError(
                f"input size {h}x{w} is not divisible by {factor}; "
                f"pad to a multiple of {factor} (see predict_logits)"
            )
        features = [self.stem(x)]
        for stage in self.stages:
            features.append(stage(features[-1]))
        out = features[-1]
        for decoder, skip in zip(self.decoders, reversed(features[:-1])):
            out = decoder(out, skip)
        return self.head(out)


def build_model(config: ModelConfig) -> SegmentationNet:
    model = SegmentationNet(config)
    if config.pretrained_source:
        warm_start_encoder(model, load_checkpoint(config.pretrained_source))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class Checkpoint:
    """Parameter map plus the config and metadata needed to rebuild the model."""

    parameters: dict[str, torch.Tensor]
    model_config: ModelConfig
    training_meta: dict = field(default_factory=dict)
    normalization: dict | None = None  # {"mean": [r,g,b], "std": [r,g,b]} over unit-scaled pixels


def checkpoint_from_model(
    model: SegmentationNet, training_meta: dict | None = None, normalization: dict | None = None
) -> Checkpoint:
    params = {k: v.detach().clone().cpu() for k, v in model.state_dict().items()}
    return Checkpoint(
        parameters=params,
        model_config=model.config,
        training_meta=dict(training_meta or {}),
        normalization=normalization,
    )


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": json.dumps(checkpoint.model_config.to_dict()),
        "parameters": checkpoint.parameters,
        "meta": checkpoint.training_meta,
        "normalization": checkpoint.normalization,
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    Path(path).write_bytes(buffer.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return Checkpoint(
        parameters=payload["parameters"],
        model_config=ModelConfig.from_dict(json.loads(payload["config"])),
        training_meta=payload.get("meta", {}),
        normalization=payload.get("normalization"),
    )


def transfer_parameters(source: Checkpoint, target_model: SegmentationNet) -> SegmentationNet:
    """Copy every parameter/buffer from the checkpoint into the target model.

    The architectures must match exactly; the first mismatched entry is
    reported. Forward passes of the target then equal the source's.
    """
    target_state = target_model.state_dict()
    for name, tensor in target_state.items():
        if name not in source.parameters:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if tuple(source.parameters[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(source.parameters[name].shape)} "
                f"in the checkpoint but {tuple(tensor.shape)} in the model"
            )
    extra = [k for k in source.parameters if k not in target_state]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter {extra[0]!r}")
    target_model.load_state_dict(source.parameters)
    return target_model


def warm_start_encoder(model: SegmentationNet, source: Checkpoint) -> int:
    """Copy encoder entries that match by name and shape; returns how many."""
    state = model.state_dict()
    copied = {}
    for name, tensor in source.parameters.items():
        if not (name.startswith("stem.") or name.startswith("stages.")):
            continue
        if tensor.ndim == 0:  # bookkeeping buffers, e.g. num_batches_tracked
            continue
        if name in state and tuple(state[name].shape) == tuple(tensor.shape):
            copied[name] = tensor
    if not copied:
        raise CheckpointError("pretrained source shares no encoder parameters with this model")
    state.update(copied)
    model.load_state_dict(state)
    return len(copied)


def normalize_images(images: np.ndarray, normalization: dict | None) -> torch.Tensor:
    """(B, H, W, 3) uint8/float pixels -> (B, 3, H, W) standardized float32."""
    arr = np.asarray(images, dtype=np.float32) / 255.0
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (B, H, W, 3) images, got {arr.shape}")
    if normalization is not None:
        mean = np.asarray(normalization["mean"], dtype=np.float32)
        std = np.asarray(normalization["std"], dtype=np.float32)
        arr = (arr - mean) / std
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def pad_to_multiple(batch: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Replicate-pad (B, C, H, W) on the bottom/right up to the next multiple."""
    h, w = batch.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h or pad_w:
        batch = F.pad(batch, (0, pad_w, 0, pad_h), mode="replicate")
    return batch, (h, w)


def predict_logits(
    model: SegmentationNet, images: np.ndarray, normalization: dict | None = None
) -> np.ndarray:
    """(B, H, W, 3) images of any size -> (B, H, W, C) logits."""
    model.eval()
    with torch.no_grad():
        batch = normalize_images(images, normalization)
        batch, (h, w) = pad_to_multiple(batch, model.downsample_factor)
        logits = model(batch)[:, :, :h, :w]
    return logits.permute(0, 2, 3, 1).numpy()


def predict_mask(
    model: SegmentationNet, images: np.ndarray, normalization: dict | None = None
) -> np.ndarray:
    """(B, H, W, 3) images -> (B, H, W) predicted class ids."""
    return predict_logits(model, images, normalization).argmax(axis=-1).astype(np.uint8)
