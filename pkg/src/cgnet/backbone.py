"""Siamese five-stage convolutional encoder.

The encoder follows the canonical 13-conv/batch-norm layout and is cut into
five stages at fixed layer indices; both temporal images pass through the
same weights. Stage 1 keeps the input resolution, stages 2-5 each begin with
a 2x2 max-pool, so the pyramid strides are 1/2/4/8/16.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import ConfigurationError, IngestionError, ShapeError
from .tensorio import load_tensor_archive, save_tensor_archive

# Canonical feature sequence: ("conv", out_width) | ("bn",) | ("relu",) | ("pool",).
# Indices 0..42 match the standard 13-conv batch-norm layout; the encoder
# instantiates 0..41 (the trailing ReLU at 42 belongs to no stage).
_LAYER_PLAN = (
    ("conv", 64), ("bn",), ("relu",),
    ("conv", 64), ("bn",), ("relu",),
    ("pool",),
    ("conv", 128), ("bn",), ("relu",),
    ("conv", 128), ("bn",), ("relu",),
    ("pool",),
    ("conv", 256), ("bn",), ("relu",),
    ("conv", 256), ("bn",), ("relu",),
    ("conv", 256), ("bn",), ("relu",),
    ("pool",),
    ("conv", 512), ("bn",), ("relu",),
    ("conv", 512), ("bn",), ("relu",),
    ("conv", 512), ("bn",), ("relu",),
    ("pool",),
    ("conv", 512), ("bn",), ("relu",),
    ("conv", 512), ("bn",), ("relu",),
    ("conv", 512), ("bn",), ("relu",),
)

STAGE_SLICES = ((0, 5), (5, 12), (12, 22), (22, 32), (32, 42))
STAGE_CHANNELS = (64, 128, 256, 512, 512)
STAGE_STRIDES = (1, 2, 4, 8, 16)
PYRAMID_STRIDE = 16  # product of the per-stage pools; inputs must divide it


def scaled_width(width: int, channel_scale: float) -> int:
    return max(1, round(width * channel_scale))


@dataclass(frozen=True)
class StageSpec:
    """Static description of one encoder stage."""

    stage_id: int
    layer_slice: tuple[int, int]
    out_channels: int
    stride_vs_input: int


def stage_specs(channel_scale: float = 1.0) -> tuple[StageSpec, ...]:
    """Stage table for a given channel-width scale (1.0 = full profile)."""
    return tuple(
        StageSpec(
            stage_id=i + 1,
            layer_slice=STAGE_SLICES[i],
            out_channels=scaled_width(STAGE_CHANNELS[i], channel_scale),
            stride_vs_input=STAGE_STRIDES[i],
        )
        for i in range(5)
    )


class SiameseEncoder(nn.Module):
    """Weight-shared encoder producing a five-level feature pyramid.

    Parameters are plain torch modules initialized randomly (seed them via
    ``torch.manual_seed`` before construction); externally supplied weights
    can be loaded from a flat tensor archive, see :meth:`load_weight_archive`.
    """

    def __init__(self, channel_scale: float = 1.0):
        super().__init__()
        if channel_scale <= 0:
            raise ConfigurationError(f"channel_scale must be positive, got {channel_scale}")
        self.channel_scale = channel_scale
        self.specs = stage_specs(channel_scale)

        layers: list[nn.Module] = []
        in_ch = 3
        for kind in _LAYER_PLAN:
            if kind[0] == "conv":
                out_ch = scaled_width(kind[1], channel_scale)
                layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1))
                in_ch = out_ch
            elif kind[0] == "bn":
                layers.append(nn.BatchNorm2d(in_ch, momentum=0.1))
            elif kind[0] == "relu":
                # not inplace: stage outputs are kept and the next stage
                # starts with this activation
                layers.append(nn.ReLU(inplace=False))
            else:
                layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        self.layers = nn.ModuleList(layers)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(spec.out_channels for spec in self.specs)

    def _stage_in_channels(self, stage_id: int) -> int:
        return 3 if stage_id == 1 else self.specs[stage_id - 2].out_channels

    def encode_stage(self, x: torch.Tensor, stage_id: int) -> torch.Tensor:
        """Run one stage; stages 2-5 halve the spatial dims."""
        if not 1 <= stage_id <= 5:
            raise ConfigurationError(f"stage_id must be in 1..5, got {stage_id}")
        expected = self._stage_in_channels(stage_id)
        if x.shape[-3] != expected:
            raise ConfigurationError(
                f"stage {stage_id} expects {expected} input channels, got {x.shape[-3]}"
            )
        if stage_id > 1 and (x.shape[-2] % 2 or x.shape[-1] % 2):
            raise ShapeError(
                f"stage {stage_id} pools by 2 but got spatial dims "
                f"{tuple(x.shape[-2:])}"
            )
        start, stop = STAGE_SLICES[stage_id - 1]
        for layer in self.layers[start:stop]:
            x = layer(x)
        return x

    def encode_pyramid(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Encode one image ([3,H,W] or [B,3,H,W]) into 5 stage features."""
        if image.shape[-2] % PYRAMID_STRIDE or image.shape[-1] % PYRAMID_STRIDE:
            raise ShapeError(
                f"input spatial dims must be divisible by {PYRAMID_STRIDE}, "
                f"got {tuple(image.shape[-2:])}"
            )
        stages = []
        x = image
        for stage_id in range(1, 6):
            x = self.encode_stage(x, stage_id)
            stages.append(x)
        return stages

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        return self.encode_pyramid(image)

    # -- weight archive -----------------------------------------------------

    def _archive_entries(self):
        """Yield (archive key, parameter/buffer tensor) pairs."""
        for stage_idx, (start, stop) in enumerate(STAGE_SLICES):
            for layer_idx in range(start, stop):
                layer = self.layers[layer_idx]
                prefix = f"stage{stage_idx + 1}.layer{layer_idx}"
                if isinstance(layer, nn.Conv2d):
                    yield f"{prefix}.weight", layer.weight
                    yield f"{prefix}.bias", layer.bias
                elif isinstance(layer, nn.BatchNorm2d):
                    yield f"{prefix}.weight", layer.weight
                    yield f"{prefix}.bias", layer.bias
                    yield f"{prefix}.running_mean", layer.running_mean
                    yield f"{prefix}.running_var", layer.running_var

    def save_weight_archive(self, path: str | Path) -> None:
        save_tensor_archive(
            path, {key: t.detach().cpu().numpy() for key, t in self._archive_entries()}
        )

    def load_weight_archive(self, path: str | Path) -> None:
        """Load externally supplied weights; keys must match the layout exactly."""
        archive = load_tensor_archive(path)
        seen = set()
        with torch.no_grad():
            for key, target in self._archive_entries():
                if key not in archive:
                    raise IngestionError(f"weight archive {path} is missing key {key}")
                value = archive[key]
                if tuple(value.shape) != tuple(target.shape):
                    raise IngestionError(
                        f"weight archive key {key}: shape {tuple(value.shape)} "
                        f"does not match model shape {tuple(target.shape)}"
                    )
                target.copy_(torch.from_numpy(value).to(target.dtype))
                seen.add(key)
        unknown = sorted(set(archive) - seen)
        if unknown:
            raise IngestionError(f"weight archive {path} has unknown keys: {unknown}")
