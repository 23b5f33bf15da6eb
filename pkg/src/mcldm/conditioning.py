"""Condition encoders mapping attributes and semantic masks to token sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from ._exceptions import ConfigurationError, ContractError

__all__ = [
    "ConditionTokens",
    "AttributeEncoder",
    "MaskEncoder",
    "ConditionEncoder",
    "concat_conditions",
    "MODES",
]

MODES = ("uncond", "attr", "mask_pooled", "mask_nopool", "multi")
SOURCES = ("attributes", "mask_pooled", "mask_nopool", "multi", "null")


@dataclass
class ConditionTokens:
    """A batch of condition token sequences, ``tokens`` shaped ``(B, psi, width)``."""

    tokens: torch.Tensor
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ContractError(f"unknown token source {self.source!r}")
        if self.tokens.ndim != 3:
            raise ContractError(f"tokens must be (B, psi, width), got {tuple(self.tokens.shape)}")
        if self.tokens.shape[1] < 1:
            raise ContractError("condition sequences need at least one token")
        if not torch.isfinite(self.tokens).all():
            raise ContractError("condition tokens contain non-finite values")

    @property
    def psi(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def width(self) -> int:
        return int(self.tokens.shape[2])


def concat_conditions(a: ConditionTokens, m: ConditionTokens) -> ConditionTokens:
    """Attribute tokens first, then mask tokens, along the sequence axis."""
    if a.width != m.width:
        raise ContractError(f"token widths differ: {a.width} vs {m.width}")
    if a.tokens.shape[0] != m.tokens.shape[0]:
        raise ContractError("batch sizes differ")
    return ConditionTokens(torch.cat([a.tokens, m.tokens], dim=1), "multi")


def _check_binary(x: torch.Tensor, what: str):
    if not torch.all((x == 0) | (x == 1)):
        raise ContractError(f"{what} must contain only 0/1 entries")


class AttributeEncoder(nn.Module):
    """MLP from a binary attribute vector to a single token."""

    def __init__(self, n_attributes: int = 8, width: int = 64):
        super().__init__()
        hidden = 2 * width
        self.n_attributes = n_attributes
        self.net = nn.Sequential(
            nn.Linear(n_attributes, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, width),
        )

    def forward(self, attrs: torch.Tensor) -> ConditionTokens:
        attrs = torch.as_tensor(attrs)
        if attrs.ndim != 2 or attrs.shape[1] != self.n_attributes:
            raise ContractError(
                f"attributes must be (B, {self.n_attributes}), got {tuple(attrs.shape)}")
        _check_binary(attrs, "attributes")
        dtype = self.net[0].weight.dtype
        return ConditionTokens(self.net(attrs.to(dtype))[:, None, :], "attributes")


class _DownStage(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=2)

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.silu(h + self.skip(x))


class MaskEncoder(nn.Module):
    """Residual strided conv stack over one-hot masks (32 -> 16 -> 8 -> 4).

    ``variant="pooled"`` averages the final feature map into one token;
    ``"nopool"`` keeps one token per spatial cell. Both go through the same
    linear head; the spatial tokens also get a learned position embedding.
    """

    def __init__(self, n_parts: int = 6, width: int = 64, size: int = 32,
                 variant: str = "nopool", channels=(16, 32, 64)):
        super().__init__()
        if variant not in ("pooled", "nopool"):
            raise ConfigurationError(f"variant must be 'pooled' or 'nopool', got {variant!r}")
        stages = len(channels)
        if size % 2 ** stages:
            raise ConfigurationError(f"mask size {size} not divisible by {2 ** stages}")
        self.n_parts = n_parts
        self.size = size
        self.variant = variant
        self.side = size // 2 ** stages
        self.stem = nn.Conv2d(n_parts, channels[0], 3, padding=1)
        prev = channels[0]
        blocks = []
        for ch in channels:
            blocks.append(_DownStage(prev, ch))
            prev = ch
        self.stages = nn.Sequential(*blocks)
        self.head = nn.Linear(prev, width)
        self.pos = nn.Parameter(torch.randn(1, self.side * self.side, width) * 0.02)

    def features(self, masks: torch.Tensor) -> torch.Tensor:
        return self.stages(F.silu(self.stem(masks)))

    def forward(self, masks: torch.Tensor, variant: Optional[str] = None,
                strict: bool = True) -> ConditionTokens:
        """Encode a ``(B, M, H, W)`` mask stack.

        With ``strict`` every pixel must belong to at most one part; mixed
        masks from component swapping are encoded with ``strict=False``.
        """
        variant = self.variant if variant is None else variant
        masks = torch.as_tensor(masks)
        expected = (self.n_parts, self.size, self.size)
        if masks.ndim != 4 or tuple(masks.shape[1:]) != expected:
            raise ContractError(f"masks must be (B, {expected}), got {tuple(masks.shape)}")
        _check_binary(masks, "masks")
        if strict and (masks.sum(dim=1) > 1).any():
            raise ContractError("mask has pixels assigned to more than one part")
        feats = self.features(masks.to(self.head.weight.dtype))
        if variant == "pooled":
            return ConditionTokens(self.head(feats.mean(dim=(2, 3)))[:, None, :], "mask_pooled")
        tokens = self.head(feats.flatten(2).transpose(1, 2)) + self.pos
        return ConditionTokens(tokens, "mask_nopool")


class ConditionEncoder(nn.Module):
    """All encoders a training mode needs, behind one ``(attrs, masks)`` call.

    ``uncond`` returns ``None`` and the denoiser falls back to its null token.
    """

    def __init__(self, mode: str, n_attributes: int = 8, n_parts: int = 6, size: int = 32,
                 width: int = 64):
        super().__init__()
        if mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.attributes = (AttributeEncoder(n_attributes, width)
                           if mode in ("attr", "multi") else None)
        if mode in ("mask_pooled", "mask_nopool", "multi"):
            variant = "pooled" if mode == "mask_pooled" else "nopool"
            self.mask = MaskEncoder(n_parts, width, size, variant)
        else:
            self.mask = None

    @property
    def uses_attributes(self) -> bool:
        return self.attributes is not None

    @property
    def uses_masks(self) -> bool:
        return self.mask is not None

    def forward(self, attrs=None, masks=None, strict: bool = True) -> Optional[ConditionTokens]:
        parts = []
        if self.attributes is not None:
            if attrs is None:
                raise ContractError(f"mode {self.mode!r} needs attributes")
            parts.append(self.attributes(attrs))
        if self.mask is not None:
            if masks is None:
                raise ContractError(f"mode {self.mode!r} needs masks")
            parts.append(self.mask(masks, strict=strict))
        if not parts:
            return None
        if len(parts) == 2:
            return concat_conditions(*parts)
        return parts[0]
