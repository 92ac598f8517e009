"""Coarse+fine feature fusion and attention for skip connections.

Two gating mechanisms act on the encoder features ``x_f`` using the decoder
features ``x_g`` as context. The coarse branch pools the mixed features onto
the three axes and rebuilds a smooth spatial gate from the axis profiles; the
fine branch gates per voxel without any pooling. Both gates are sigmoid maps
in (0, 1) multiplying ``x_f``; the module output merges the two gated maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class FFAConfig:
    reduced_width: int = 0     # compact mixing width; 0 means c_f // 2 with a floor of 8
    gn_groups: int = 8
    combine_mode: str = "mean"  # how the two gated maps merge: "mean" or "sum"

    def __post_init__(self):
        if self.reduced_width < 0:
            raise ValueError("reduced_width must be >= 0")
        if self.combine_mode not in ("mean", "sum"):
            raise ValueError(f"unknown combine_mode {self.combine_mode!r}")

    def resolve_width(self, c_f: int) -> int:
        r = self.reduced_width or max(c_f // 2, 8)
        if r % self.gn_groups:
            raise ValueError(f"reduced width {r} not divisible by gn_groups {self.gn_groups}")
        return r


class _Proj(nn.Sequential):
    def __init__(self, c_in, c_out, groups):
        super().__init__(nn.Conv3d(c_in, c_out, 1), nn.GroupNorm(groups, c_out))


def _check_aligned(x_f, x_g):
    if x_f.shape[2:] != x_g.shape[2:]:
        raise ValueError(f"spatial mismatch {tuple(x_f.shape[2:])} vs {tuple(x_g.shape[2:])}")


class AxialCoarseAttention(nn.Module):
    """Smooth gate built from per-axis average profiles of the mixed features."""

    def __init__(self, c_f: int, c_g: int, cfg: FFAConfig):
        super().__init__()
        r = cfg.resolve_width(c_f)
        self.proj_f = _Proj(c_f, r, cfg.gn_groups)
        self.proj_g = _Proj(c_g, r, cfg.gn_groups)
        self.mix = nn.Sequential(
            nn.Conv3d(3 * r, r, 1), nn.GELU(), nn.Conv3d(r, 1, 1)
        )

    def gate(self, x_f, x_g):
        _check_aligned(x_f, x_g)
        m = self.proj_f(x_f) + self.proj_g(x_g)
        d, h, w = m.shape[2:]
        pd = F.adaptive_avg_pool3d(m, (d, 1, 1)).expand(-1, -1, d, h, w)
        ph = F.adaptive_avg_pool3d(m, (1, h, 1)).expand(-1, -1, d, h, w)
        pw = F.adaptive_avg_pool3d(m, (1, 1, w)).expand(-1, -1, d, h, w)
        return torch.sigmoid(self.mix(torch.cat([pd, ph, pw], dim=1)))

    def forward(self, x_f, x_g):
        return x_f * self.gate(x_f, x_g)


class GatedFineAttention(nn.Module):
    """Per-voxel gate without axial pooling; keeps fine spatial detail."""

    def __init__(self, c_f: int, c_g: int, cfg: FFAConfig):
        super().__init__()
        r = cfg.resolve_width(c_f)
        self.proj_f = _Proj(c_f, r, cfg.gn_groups)
        self.proj_g = _Proj(c_g, r, cfg.gn_groups)
        self.act = nn.GELU()
        self.out = nn.Conv3d(r, 1, 1)

    def gate(self, x_f, x_g):
        _check_aligned(x_f, x_g)
        return torch.sigmoid(self.out(self.act(self.proj_f(x_f) + self.proj_g(x_g))))

    def forward(self, x_f, x_g):
        return x_f * self.gate(x_f, x_g)


class CoarseFineFFA(nn.Module):
    """Full skip module: upsample decoder context, apply both gates, merge.

    ``x_g`` may arrive at half the spatial resolution of ``x_f`` (straight
    from the deeper decoder stage); it is upsampled trilinearly before
    gating. The output has exactly the shape of ``x_f``.
    """

    def __init__(self, c_f: int, c_g: int, cfg: FFAConfig | None = None):
        super().__init__()
        self.cfg = cfg or FFAConfig()
        self.coarse = AxialCoarseAttention(c_f, c_g, self.cfg)
        self.fine = GatedFineAttention(c_f, c_g, self.cfg)

    def forward(self, x_f, x_g):
        if x_g.shape[2:] != x_f.shape[2:]:
            expected = tuple(2 * s for s in x_g.shape[2:])
            if expected != x_f.shape[2:]:
                raise ValueError(
                    f"x_g spatial {tuple(x_g.shape[2:])} is neither aligned with nor half of "
                    f"x_f spatial {tuple(x_f.shape[2:])}"
                )
            x_g = F.interpolate(x_g, size=x_f.shape[2:], mode="nearest-exact")
        a = self.coarse(x_f, x_g)
        g = self.fine(x_f, x_g)
        return (a + g) / 2 if self.cfg.combine_mode == "mean" else a + g
