"""The noise-prediction U-Net and its spatial-transformer conditioning blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ._exceptions import ConfigurationError, ContractError

__all__ = [
    "SpatialTransformerConfig",
    "attention",
    "CrossAttention",
    "FeedForward",
    "SpatialTransformer",
    "ResBlock",
    "UNet",
    "DenoiserNet",
    "timestep_embedding",
]


@dataclass(frozen=True)
class SpatialTransformerConfig:
    heads: int = 4
    head_dim: int = 16
    levels: tuple = (1, 2)

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigurationError("heads and head_dim must be >= 1")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
              return_weights: bool = False):
    """Multi-head ``softmax(Q K^T / sqrt(d)) V`` on already-projected inputs.

    ``q`` is ``(B, phi, h*d)``; ``k`` and ``v`` are ``(B, psi, h*d)``. The
    result has the shape of ``q`` whatever ``psi`` is.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ContractError(
            f"width mismatch: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    if k.shape[1] < 1:
        raise ContractError("condition sequence must contain at least one token")
    if q.shape[-1] % heads:
        raise ContractError(f"width {q.shape[-1]} not divisible by {heads} heads")
    b, phi, width = q.shape
    d = width // heads

    def split(x):
        return x.reshape(x.shape[0], x.shape[1], heads, d).transpose(1, 2)

    qh, kh, vh = split(q), split(k), split(v)
    weights = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(b, phi, width)
    if return_weights:
        return out, weights
    return out


class CrossAttention(nn.Module):
    """Attention whose keys and values come from ``context``.

    Called without a context it attends over its own input (self-attention).
    """

    def __init__(self, query_dim: int, context_dim: Optional[int] = None, heads: int = 4,
                 head_dim: int = 16):
        super().__init__()
        inner = heads * head_dim
        context_dim = query_dim if context_dim is None else context_dim
        self.heads = heads
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, query_dim)

    def forward(self, x, context=None, return_weights=False):
        context = x if context is None else context
        if context.shape[-1] != self.to_k.in_features:
            raise ContractError(
                f"context width {context.shape[-1]} != expected {self.to_k.in_features}")
        out = attention(self.to_q(x), self.to_k(context), self.to_v(context), self.heads,
                        return_weights=return_weights)
        if return_weights:
            return self.to_out(out[0]), out[1]
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class SpatialTransformer(nn.Module):
    """Self-attention, cross-attention and feed-forward over a feature map.

    Each sublayer is pre-normalized and added back residually. The 1x1
    projection out of token space is zero-initialized when ``zero_init`` is
    set, so the block starts as the identity map.
    """

    def __init__(self, channels: int, context_dim: int, heads: int = 4, head_dim: int = 16,
                 ff_mult: int = 4, zero_init: bool = True):
        super().__init__()
        inner = heads * head_dim
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.proj_in = nn.Conv2d(channels, inner, 1)
        self.norm1 = nn.LayerNorm(inner)
        self.attn1 = CrossAttention(inner, None, heads, head_dim)
        self.norm2 = nn.LayerNorm(inner)
        self.attn2 = CrossAttention(inner, context_dim, heads, head_dim)
        self.norm3 = nn.LayerNorm(inner)
        self.ff = FeedForward(inner, ff_mult)
        self.proj_out = nn.Conv2d(inner, channels, 1)
        if zero_init:
            nn.init.zeros_(self.proj_out.weight)
            nn.init.zeros_(self.proj_out.bias)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        tokens = tokens + self.attn1(self.norm1(tokens))
        tokens = tokens + self.attn2(self.norm2(tokens), context)
        tokens = tokens + self.ff(self.norm3(tokens))
        tokens = tokens.transpose(1, 2).reshape(b, -1, h, w)
        return x + self.proj_out(tokens)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class _Level(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim, context_dim, st: Optional[SpatialTransformerConfig]):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, time_dim)
        self.attn = (SpatialTransformer(out_ch, context_dim, st.heads, st.head_dim)
                     if st is not None else None)

    def forward(self, x, temb, context):
        x = self.res(x, temb)
        if self.attn is not None:
            x = self.attn(x, context)
        return x


class UNet(nn.Module):
    """Small U-Net over latents; level ``i`` runs at ``1 / 2**i`` of the input side.

    Spatial transformers sit at the levels listed in ``transformer.levels``
    and in the bottleneck.
    """

    def __init__(self, in_channels: int = 4, base_channels: int = 32,
                 channel_mult: Sequence[int] = (1, 2, 2), context_dim: int = 64,
                 transformer: SpatialTransformerConfig = SpatialTransformerConfig(),
                 time_dim: int = 128):
        super().__init__()
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.time_embed = nn.Sequential(
            nn.Linear(base_channels, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        chans = [base_channels * m for m in channel_mult]
        levels = len(chans)

        def st_at(i):
            return transformer if i in transformer.levels else None

        self.conv_in = nn.Conv2d(in_channels, chans[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.down.append(_Level(prev, ch, time_dim, context_dim, st_at(i)))
            prev = ch
            if i < levels - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = _Level(prev, prev, time_dim, context_dim, transformer)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(levels)):
            self.up.append(_Level(prev + chans[i], chans[i], time_dim, context_dim, st_at(i)))
            prev = chans[i]
            if i > 0:
                self.upsample.append(nn.Conv2d(prev, chans[i - 1], 3, padding=1))
                prev = chans[i - 1]
        self.norm_out = nn.GroupNorm(min(8, prev), prev)
        self.conv_out = nn.Conv2d(prev, in_channels, 3, padding=1)

    def forward(self, x, t, context):
        temb = self.time_embed(timestep_embedding(t, self.base_channels).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for i, level in enumerate(self.down):
            h = level(h, temb, context)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, temb, context)
        for j, level in enumerate(self.up):
            h = level(torch.cat([h, skips.pop()], dim=1), temb, context)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


class DenoiserNet(nn.Module):
    """``eps_theta(z_t, t, tokens)``; a learned null token stands in for no condition."""

    def __init__(self, latent_channels: int = 4, latent_size: int = 8, base_channels: int = 32,
                 channel_mult: Sequence[int] = (1, 2, 2),
                 transformer: SpatialTransformerConfig = SpatialTransformerConfig()):
        super().__init__()
        if latent_size % 2 ** (len(channel_mult) - 1):
            raise ConfigurationError(
                f"latent_size {latent_size} not divisible by 2**{len(channel_mult) - 1}")
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.width = transformer.width
        self.unet = UNet(latent_channels, base_channels, channel_mult, transformer.width,
                         transformer)
        self.null_token = nn.Parameter(torch.randn(1, 1, transformer.width) * 0.02)

    def forward(self, z_t, t, context=None):
        expected = (self.latent_channels, self.latent_size, self.latent_size)
        if z_t.ndim != 4 or tuple(z_t.shape[1:]) != expected:
            raise ContractError(f"z_t must be (B, {expected}), got {tuple(z_t.shape)}")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        if context is None:
            context = self.null_token.to(z_t.dtype).expand(z_t.shape[0], -1, -1)
        elif context.ndim != 3 or context.shape[0] != z_t.shape[0] or context.shape[-1] != self.width:
            raise ContractError(
                f"context must be (B={z_t.shape[0]}, psi, {self.width}), got {tuple(context.shape)}")
        return self.unet(z_t, t, context)
