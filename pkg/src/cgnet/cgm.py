"""Change guide module: change-prior-weighted multi-head self-attention.

A one-channel map of change logits is squashed to a (0,1) weight map and
multiplied into a projected copy of the feature map. Queries and keys come
from this guided tensor, so the prior steers which positions match; values
come from the unmodified features, so content is not overwritten. The
attended values are merged across heads, projected, and added back onto the
input as a residual update.

Attention cost is O(L^2) in the token count L = H*W, so a configurable cap
guards against accidental huge inputs. Callers that own both sides of the
contract (the decoder) may instead enable pooled guidance: the update is
computed on an average-pooled grid within the cap and bilinearly upsampled
before the residual addition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, NumericInputError, ResourceLimitError, ShapeError


@dataclass(frozen=True)
class AttentionConfig:
    """Head layout of the guided attention."""

    num_heads: int
    key_dim: int
    value_dim: int

    def __post_init__(self):
        if self.num_heads < 1:
            raise ConfigurationError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.key_dim < 1:
            raise ConfigurationError(f"key_dim must be >= 1, got {self.key_dim}")
        if self.value_dim < 1:
            raise ConfigurationError(f"value_dim must be >= 1, got {self.value_dim}")


def compute_weight_map(guiding_logits: torch.Tensor) -> torch.Tensor:
    """Logistic sigmoid of the change logits; output strictly in (0,1)."""
    if not torch.isfinite(guiding_logits).all():
        raise NumericInputError("guiding logits contain NaN or Inf")
    return torch.sigmoid(guiding_logits)


def guide_features(
    feature: torch.Tensor,
    weight_map: torch.Tensor,
    proj_weight: torch.Tensor,
    proj_bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Weight a 1x1-projected feature map by the change-prior map."""
    if feature.shape[-2:] != weight_map.shape[-2:]:
        raise ShapeError(
            f"weight map spatial dims {tuple(weight_map.shape[-2:])} do not match "
            f"feature dims {tuple(feature.shape[-2:])}"
        )
    squeeze = feature.dim() == 3
    if squeeze:
        feature = feature.unsqueeze(0)
    projected = F.conv2d(feature, proj_weight, proj_bias)
    out = weight_map * projected
    return out.squeeze(0) if squeeze else out


def _tokens(x: torch.Tensor) -> torch.Tensor:
    """[..., C, H, W] -> [..., H*W, C]."""
    return x.flatten(-2).transpose(-1, -2)


def _split_heads(tokens: torch.Tensor, num_heads: int) -> torch.Tensor:
    """[..., L, N_h*d] -> [..., N_h, L, d]."""
    length, width = tokens.shape[-2], tokens.shape[-1]
    tokens = tokens.reshape(*tokens.shape[:-2], length, num_heads, width // num_heads)
    return tokens.transpose(-3, -2)


def _merge_heads(heads: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """[..., N_h, L, d] -> [..., N_h*d, H, W]."""
    merged = heads.transpose(-3, -2).flatten(-2)  # [..., L, N_h*d]
    return merged.transpose(-1, -2).reshape(*merged.shape[:-2], -1, height, width)


def project_qkv(
    guided: torch.Tensor,
    feature: torch.Tensor,
    cfg: AttentionConfig,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Project guided tokens to queries/keys and input tokens to values.

    Weights are right-multiplied ([C_in, N_h*d]); outputs are per-head token
    matrices [..., N_h, L, d].
    """
    if guided.shape[-2:] != feature.shape[-2:]:
        raise ShapeError("guided and input feature maps must share spatial dims")
    if w_q.shape[-1] != cfg.num_heads * cfg.key_dim or w_k.shape[-1] != w_q.shape[-1]:
        raise ConfigurationError(
            f"query/key weights must project to num_heads*key_dim = "
            f"{cfg.num_heads * cfg.key_dim} channels"
        )
    if w_v.shape[-1] != cfg.num_heads * cfg.value_dim:
        raise ConfigurationError(
            f"value weights must project to num_heads*value_dim = "
            f"{cfg.num_heads * cfg.value_dim} channels"
        )
    if w_q.shape[0] != guided.shape[-3] or w_k.shape[0] != guided.shape[-3]:
        raise ConfigurationError("query/key weight rows must match guided channels")
    if w_v.shape[0] != feature.shape[-3]:
        raise ConfigurationError("value weight rows must match input feature channels")

    guided_tokens = _tokens(guided)
    feature_tokens = _tokens(feature)
    q = _split_heads(guided_tokens @ w_q, cfg.num_heads)
    k = _split_heads(guided_tokens @ w_k, cfg.num_heads)
    v = _split_heads(feature_tokens @ w_v, cfg.num_heads)
    return q, k, v


def attention_map(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-softmax of scaled query-key scores; every row sums to 1.

    The softmax subtracts the per-row maximum before exponentiation, so
    arbitrary logit offsets cannot overflow.
    """
    key_dim = q.shape[-1]
    if key_dim == 0:
        raise ConfigurationError("key_dim must be positive")
    if k.shape[-1] != key_dim:
        raise ShapeError(f"query dim {key_dim} != key dim {k.shape[-1]}")
    scores = q @ k.transpose(-1, -2) / math.sqrt(key_dim)
    scores = scores - scores.amax(dim=-1, keepdim=True)
    weights = scores.exp()
    return weights / weights.sum(dim=-1, keepdim=True)


def attend(attn: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Per-head matrix product of attention rows with value tokens."""
    if attn.shape[-1] != v.shape[-2]:
        raise ShapeError(
            f"attention columns {attn.shape[-1]} != value rows {v.shape[-2]}"
        )
    return attn @ v


def _pooled_grid(height: int, width: int, token_cap: int) -> tuple[int, int]:
    """Halve the grid until it fits the token cap."""
    while height * width > token_cap:
        height = max(1, (height + 1) // 2)
        width = max(1, (width + 1) // 2)
    return height, width


class ChangeGuideModule(nn.Module):
    """Guided-attention residual block; output shape equals input shape.

    Args:
        channels: feature channel count C of the input map.
        num_heads: attention heads (default 4).
        key_dim / value_dim: per-head dims, default C // num_heads.
        token_cap: max H*W accepted by dense attention (default 4096).
        pool_over_cap: if True, inputs over the cap are average-pooled to the
            cap, attended there, and the update is bilinearly upsampled before
            the residual addition; if False such inputs raise.
    """

    def __init__(
        self,
        channels: int,
        num_heads: int = 4,
        key_dim: int | None = None,
        value_dim: int | None = None,
        token_cap: int = 4096,
        pool_over_cap: bool = False,
    ):
        super().__init__()
        if channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {channels}")
        if key_dim is None:
            key_dim = max(1, channels // num_heads)
        if value_dim is None:
            value_dim = max(1, channels // num_heads)
        self.config = AttentionConfig(num_heads, key_dim, value_dim)
        self.channels = channels
        self.token_cap = token_cap
        self.pool_over_cap = pool_over_cap

        scale = channels ** -0.5
        self.guide_proj = nn.Conv2d(channels, channels, kernel_size=1)
        self.w_q = nn.Parameter(torch.randn(channels, num_heads * key_dim) * scale)
        self.w_k = nn.Parameter(torch.randn(channels, num_heads * key_dim) * scale)
        self.w_v = nn.Parameter(torch.randn(channels, num_heads * value_dim) * scale)
        self.out_proj = nn.Conv2d(num_heads * value_dim, channels, kernel_size=1)

    def _attention_update(self, feature: torch.Tensor, guiding_logits: torch.Tensor) -> torch.Tensor:
        weight_map = compute_weight_map(guiding_logits)
        guided = guide_features(feature, weight_map, self.guide_proj.weight, self.guide_proj.bias)
        q, k, v = project_qkv(guided, feature, self.config, self.w_q, self.w_k, self.w_v)
        heads = attend(attention_map(q, k), v)
        merged = _merge_heads(heads, feature.shape[-2], feature.shape[-1])
        return self.out_proj(merged)

    def forward(self, feature: torch.Tensor, guiding_logits: torch.Tensor) -> torch.Tensor:
        squeeze = feature.dim() == 3
        if squeeze:
            feature = feature.unsqueeze(0)
            guiding_logits = guiding_logits.unsqueeze(0)
        if feature.shape[-3] != self.channels:
            raise ShapeError(
                f"expected {self.channels} feature channels, got {feature.shape[-3]}"
            )
        if guiding_logits.shape[-3] != 1:
            raise ShapeError("guiding logits must have exactly 1 channel")
        if feature.shape[-2:] != guiding_logits.shape[-2:]:
            raise ShapeError("feature and guiding logits must share spatial dims")

        height, width = feature.shape[-2], feature.shape[-1]
        tokens = height * width
        if tokens <= self.token_cap:
            update = self._attention_update(feature, guiding_logits)
        elif not self.pool_over_cap:
            raise ResourceLimitError(
                f"attention over {tokens} tokens exceeds the cap of {self.token_cap}; "
                f"pool the feature map or lower the resolution"
            )
        else:
            ph, pw = _pooled_grid(height, width, self.token_cap)
            pooled = F.adaptive_avg_pool2d(feature, (ph, pw))
            pooled_logits = F.interpolate(
                guiding_logits, size=(ph, pw), mode="bilinear", align_corners=False
            )
            update = F.interpolate(
                self._attention_update(pooled, pooled_logits),
                size=(height, width),
                mode="bilinear",
                align_corners=False,
            )
        out = feature + update
        return out.squeeze(0) if squeeze else out
