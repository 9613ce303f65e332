"""Pixel-wise cross-entropy with deep supervision on the change guiding map.

The main head scores the 2-channel classifier logits through a softmax; the
auxiliary head scores the 1-channel guiding logits through a sigmoid. Both
are averaged over all pixels (times batch), so the loss scale is independent
of batch and image size. The total is main + aux_weight * aux.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .decoder import ChangePrediction
from .errors import ConfigurationError, InputError, ShapeError

CLAMP_EPS = 1e-7


@dataclass
class LossReport:
    """Loss components as 0-dim tensors (call ``.item()`` for logging)."""

    main: torch.Tensor
    aux: torch.Tensor
    total: torch.Tensor
    pixel_count: int


def bce_loss(pred_prob: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of probabilities against a {0,1} label mask.

    Probabilities are clamped to [CLAMP_EPS, 1 - CLAMP_EPS] before the logs.
    """
    if pred_prob.shape != label.shape:
        raise ShapeError(
            f"prediction shape {tuple(pred_prob.shape)} != label shape {tuple(label.shape)}"
        )
    if not torch.all((label == 0) | (label == 1)):
        raise InputError("labels must contain only 0 and 1")
    y = pred_prob.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    target = label.to(y.dtype)
    return -(target * y.log() + (1.0 - target) * (1.0 - y).log()).mean()


def total_loss(
    prediction: ChangePrediction, label: torch.Tensor, aux_weight: float = 1.0
) -> LossReport:
    """Deep-supervised loss: classifier head plus guiding-map head."""
    if aux_weight < 0:
        raise ConfigurationError(f"aux_weight must be >= 0, got {aux_weight}")
    if prediction.logits.shape[-2:] != label.shape[-2:]:
        raise ShapeError(
            f"label resolution {tuple(label.shape[-2:])} != prediction resolution "
            f"{tuple(prediction.logits.shape[-2:])}"
        )
    main_prob = torch.softmax(prediction.logits, dim=-3).select(-3, 1)
    aux_prob = torch.sigmoid(prediction.aux_guiding_logits.select(-3, 0))
    main = bce_loss(main_prob, label)
    aux = bce_loss(aux_prob, label)
    total = main + aux_weight * aux
    return LossReport(main=main, aux=aux, total=total, pixel_count=label.numel())
