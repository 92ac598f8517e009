"""Shared 3-D network building blocks: stem, ConvNext, downsampling, heads.

All convolutions use replicate padding so that a spatially constant input
stays constant through the whole network (group norm and GELU preserve
constancy as well).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class BlockConfig:
    base_width: int = 32       # channels after the stem; doubles per depth
    kernel_size: int = 3       # depthwise kernel
    expansion: int = 4         # inverted-bottleneck expansion ratio
    gn_groups: int = 8

    def __post_init__(self):
        if self.base_width < 2:
            raise ValueError("base_width must be >= 2")
        if self.base_width % self.gn_groups:
            raise ValueError(
                f"base_width {self.base_width} not divisible by gn_groups {self.gn_groups}"
            )
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    def width_at(self, depth: int) -> int:
        """Channels at depth N (1-based): 2^(N-1) * base_width."""
        return self.base_width * 2 ** (depth - 1)


class Stem(nn.Module):
    """Expands the raw phase channels to the base feature width."""

    def __init__(self, in_channels: int, cfg: BlockConfig):
        super().__init__()
        k = cfg.kernel_size
        self.conv = nn.Conv3d(in_channels, cfg.base_width, k, padding=k // 2,
                              padding_mode="replicate")
        self.norm = nn.GroupNorm(cfg.gn_groups, cfg.base_width)
        self.in_channels = in_channels

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"stem built for {self.in_channels} channels, got {x.shape[1]}")
        return self.norm(self.conv(x))


class ConvNext3d(nn.Module):
    """Residual inverted-bottleneck block: depthwise conv, norm, MLP, skip."""

    def __init__(self, channels: int, cfg: BlockConfig):
        super().__init__()
        k = cfg.kernel_size
        self.dw = nn.Conv3d(channels, channels, k, padding=k // 2, groups=channels,
                            padding_mode="replicate")
        self.norm = nn.GroupNorm(cfg.gn_groups, channels)
        self.pw1 = nn.Conv3d(channels, cfg.expansion * channels, 1)
        self.act = nn.GELU()
        self.pw2 = nn.Conv3d(cfg.expansion * channels, channels, 1)

    def forward(self, x):
        return x + self.pw2(self.act(self.pw1(self.norm(self.dw(x)))))


class DownConvNext3d(nn.Module):
    """Strided ConvNext variant: halves each spatial dim, doubles channels."""

    def __init__(self, in_channels: int, cfg: BlockConfig):
        super().__init__()
        k = cfg.kernel_size
        out_channels = 2 * in_channels
        self.dw = nn.Conv3d(in_channels, in_channels, k, stride=2, padding=k // 2,
                            groups=in_channels, padding_mode="replicate")
        self.norm = nn.GroupNorm(cfg.gn_groups, in_channels)
        self.pw1 = nn.Conv3d(in_channels, cfg.expansion * in_channels, 1)
        self.act = nn.GELU()
        self.pw2 = nn.Conv3d(cfg.expansion * in_channels, out_channels, 1)
        self.skip = nn.Conv3d(in_channels, out_channels, 1, stride=2)

    def forward(self, x):
        if any(s % 2 for s in x.shape[2:]):
            raise ValueError(f"spatial dims must be even to downsample, got {tuple(x.shape[2:])}")
        return self.skip(x) + self.pw2(self.act(self.pw1(self.norm(self.dw(x)))))


class OutputHead(nn.Module):
    """1x1x1 projection from feature width to class logits; no activation."""

    def __init__(self, channels: int, n_classes: int = 2):
        super().__init__()
        self.proj = nn.Conv3d(channels, n_classes, 1)
        self.in_channels = channels
        self.n_classes = n_classes

    def forward(self, x):
        return self.proj(x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
