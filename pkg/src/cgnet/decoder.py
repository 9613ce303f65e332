"""Multi-scale fusion decoder driven by a change guiding map.

Per stage, the two temporal feature maps are concatenated and fused by a
conv block. Decoding runs deep to shallow: each node upsamples the deeper
decoded feature, concatenates the fused feature of its stage, and applies a
conv block. The one-channel change guiding map is generated once from the
stage-4 decoded feature, then resampled for every consumer: the guided
attention blocks at stages 4/3/2 and the auxiliary supervision head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import SiameseEncoder, scaled_width
from .cgm import ChangeGuideModule
from .errors import ConfigurationError, ShapeError

DECODER_WIDTHS = (64, 128, 256, 512, 512)  # stages 1..5 at channel scale 1.0
CGM_STAGES = (4, 3, 2)


def _upsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ConvBlock(nn.Module):
    """3x3 convolution, batch norm, ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.bn(self.conv(x)))


class ChangeGuidingMap:
    """One-channel change-prior logits with cached resampled views.

    A single instance per forward pass feeds every consumer, so all guided
    stages and the auxiliary loss head see the same prior.
    """

    def __init__(self, logits: torch.Tensor):
        self.logits = logits
        self._views: dict[tuple[int, int], torch.Tensor] = {}

    def resampled(self, size: tuple[int, int]) -> torch.Tensor:
        size = (int(size[0]), int(size[1]))
        if size == tuple(self.logits.shape[-2:]):
            return self.logits
        if size not in self._views:
            self._views[size] = _upsample(self.logits, size)
        return self._views[size]


@dataclass
class ChangePrediction:
    """Network output: 2-channel class logits plus auxiliary guiding logits."""

    logits: torch.Tensor
    aux_guiding_logits: torch.Tensor

    @property
    def binary_map(self) -> torch.Tensor:
        """Argmax over the two logit channels; ties resolve to unchanged (0)."""
        change_logit, keep_logit = self.logits.select(-3, 1), self.logits.select(-3, 0)
        return (change_logit > keep_logit).long()

    @property
    def change_probability(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-3).select(-3, 1)


class FusionDecoder(nn.Module):
    """Fuses two feature pyramids into a per-pixel change prediction."""

    def __init__(
        self,
        encoder_channels: tuple[int, ...],
        widths: tuple[int, ...],
        cgm_stages: tuple[int, ...] = CGM_STAGES,
        num_heads: int = 4,
        token_cap: int = 4096,
    ):
        super().__init__()
        if len(encoder_channels) != 5 or len(widths) != 5:
            raise ConfigurationError("expected 5 encoder channel counts and 5 widths")
        cgm_stages = tuple(cgm_stages)
        if len(set(cgm_stages)) != len(cgm_stages) or any(s not in CGM_STAGES for s in cgm_stages):
            raise ConfigurationError(
                f"cgm_stages must be distinct values from {CGM_STAGES}, got {cgm_stages}"
            )
        self.widths = tuple(widths)
        self.cgm_stages = cgm_stages

        self.fuse_blocks = nn.ModuleList(
            ConvBlock(2 * enc, width) for enc, width in zip(encoder_channels, widths)
        )
        # decode node s consumes the upsampled deeper feature plus fused stage s
        self.decode_blocks = nn.ModuleDict(
            {
                str(s): ConvBlock(widths[s] + widths[s - 1], widths[s - 1])
                for s in (4, 3, 2, 1)
            }
        )
        self.guide_head = nn.Conv2d(widths[3], 1, kernel_size=1)
        self.cgms = nn.ModuleDict(
            {
                str(s): ChangeGuideModule(
                    widths[s - 1],
                    num_heads=num_heads,
                    token_cap=token_cap,
                    pool_over_cap=True,
                )
                for s in cgm_stages
            }
        )
        self.classifier = nn.Conv2d(widths[0], 2, kernel_size=1)

    def fuse_stage(self, feat_a: torch.Tensor, feat_b: torch.Tensor, stage_id: int) -> torch.Tensor:
        """Concatenate the two temporal features and apply the stage's conv block."""
        if feat_a.shape != feat_b.shape:
            raise ShapeError(
                f"stage {stage_id}: temporal features differ in shape "
                f"{tuple(feat_a.shape)} vs {tuple(feat_b.shape)}"
            )
        return self.fuse_blocks[stage_id - 1](torch.cat([feat_a, feat_b], dim=-3))

    def generate_guiding_map(self, fused_stage4: torch.Tensor) -> ChangeGuidingMap:
        """Project the stage-4 decoded feature to one-channel change logits."""
        return ChangeGuidingMap(self.guide_head(fused_stage4))

    def classify(self, feature: torch.Tensor) -> torch.Tensor:
        """1x1 convolution to raw 2-channel logits; no activation."""
        return self.classifier(feature)

    def decode(self, pyr_a: list[torch.Tensor], pyr_b: list[torch.Tensor]) -> ChangePrediction:
        if len(pyr_a) != 5 or len(pyr_b) != 5:
            raise ShapeError("feature pyramids must have 5 stages")
        for s, (a, b) in enumerate(zip(pyr_a, pyr_b), start=1):
            if a.shape != b.shape:
                raise ShapeError(f"pyramid stage {s} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")

        fused = [self.fuse_stage(a, b, s) for s, (a, b) in enumerate(zip(pyr_a, pyr_b), start=1)]

        x = fused[4]
        x = self.decode_blocks["4"](torch.cat([_upsample(x, fused[3].shape[-2:]), fused[3]], dim=-3))
        guiding = self.generate_guiding_map(x)
        if 4 in self.cgm_stages:
            x = self.cgms["4"](x, guiding.resampled(x.shape[-2:]))
        for s in (3, 2, 1):
            x = self.decode_blocks[str(s)](
                torch.cat([_upsample(x, fused[s - 1].shape[-2:]), fused[s - 1]], dim=-3)
            )
            if s in self.cgm_stages:
                x = self.cgms[str(s)](x, guiding.resampled(x.shape[-2:]))
        logits = self.classify(x)
        aux = guiding.resampled(logits.shape[-2:])
        return ChangePrediction(logits=logits, aux_guiding_logits=aux)

    def forward(self, pyr_a: list[torch.Tensor], pyr_b: list[torch.Tensor]) -> ChangePrediction:
        return self.decode(pyr_a, pyr_b)


class CGNet(nn.Module):
    """Siamese encoder plus guided fusion decoder.

    ``cgm_stages`` selects which decoder stages carry a guided attention
    block: () is the plain fusion baseline, (4, 3, 2) the full network.
    """

    def __init__(
        self,
        channel_scale: float = 1.0,
        cgm_stages: tuple[int, ...] = CGM_STAGES,
        num_heads: int = 4,
        token_cap: int = 4096,
    ):
        super().__init__()
        self.channel_scale = channel_scale
        self.encoder = SiameseEncoder(channel_scale)
        widths = tuple(scaled_width(w, channel_scale) for w in DECODER_WIDTHS)
        self.decoder = FusionDecoder(
            self.encoder.stage_channels,
            widths,
            cgm_stages=cgm_stages,
            num_heads=num_heads,
            token_cap=token_cap,
        )

    @property
    def cgm_stages(self) -> tuple[int, ...]:
        return self.decoder.cgm_stages

    def forward(self, t1: torch.Tensor, t2: torch.Tensor) -> ChangePrediction:
        if t1.shape != t2.shape:
            raise ShapeError(f"temporal images differ in shape: {tuple(t1.shape)} vs {tuple(t2.shape)}")
        squeeze = t1.dim() == 3
        if squeeze:
            t1, t2 = t1.unsqueeze(0), t2.unsqueeze(0)
        prediction = self.decoder.decode(self.encoder(t1), self.encoder(t2))
        if squeeze:
            prediction = ChangePrediction(
                logits=prediction.logits.squeeze(0),
                aux_guiding_logits=prediction.aux_guiding_logits.squeeze(0),
            )
        return prediction
