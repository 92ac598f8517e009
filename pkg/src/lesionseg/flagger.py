"""Stage 1: multiscale lesion-region flagging and heatmap construction.

The flagger is a fully convolutional encoder whose taps at 1/4, 1/8 and 1/16
of the input resolution classify 4, 8 and 16 mm blocks (at 1 mm spacing) as
lesion-containing or not. The per-scale probabilities combine into a
multiplicative heatmap that emphasizes suspicious regions of the stage-2
input without erasing the rest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .blocks import BlockConfig, ConvNext3d, DownConvNext3d, OutputHead, Stem
from .volume import PatchSample

SCALES_MM = (4, 8, 16)


@dataclass
class FlaggerConfig:
    in_channels: int = 3
    blocks: BlockConfig = field(default_factory=BlockConfig)
    n_classes: int = 2


@dataclass
class ScaleMap:
    """Flag logits for one scale: (2, D/s, H/s, W/s) at s mm blocks."""

    logits: np.ndarray
    scale_mm: int

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float32)
        if self.logits.ndim != 4:
            raise ValueError(f"scale map logits must be 4-D, got {self.logits.shape}")
        if not np.isfinite(self.logits).all():
            raise ValueError("scale map logits must be finite")
        if self.scale_mm not in SCALES_MM:
            raise ValueError(f"scale must be one of {SCALES_MM}, got {self.scale_mm}")


@dataclass
class Heatmap:
    """Voxelwise input weights in [w_min, 1] at the stage-2 input resolution."""

    weights: np.ndarray
    w_min: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)


class FlaggerNet(nn.Module):
    """Five ConvNext stages; taps before the 3rd/4th downsampling and at the end."""

    def __init__(self, cfg: FlaggerConfig | None = None):
        super().__init__()
        self.cfg = cfg or FlaggerConfig()
        b = self.cfg.blocks
        c = b.base_width
        self.stem = Stem(self.cfg.in_channels, b)
        self.block1 = nn.Sequential(ConvNext3d(c, b), ConvNext3d(c, b))
        self.down1 = DownConvNext3d(c, b)
        self.block2 = nn.Sequential(ConvNext3d(2 * c, b), ConvNext3d(2 * c, b))
        self.down2 = DownConvNext3d(2 * c, b)
        self.block3 = nn.Sequential(ConvNext3d(4 * c, b), ConvNext3d(4 * c, b))
        self.down3 = DownConvNext3d(4 * c, b)
        self.block4 = nn.Sequential(ConvNext3d(8 * c, b), ConvNext3d(8 * c, b))
        self.down4 = DownConvNext3d(8 * c, b)
        self.block5 = nn.Sequential(ConvNext3d(16 * c, b), ConvNext3d(16 * c, b))
        self.head4 = OutputHead(4 * c, self.cfg.n_classes)
        self.head8 = OutputHead(8 * c, self.cfg.n_classes)
        self.head16 = OutputHead(16 * c, self.cfg.n_classes)

    def forward(self, x):
        """Returns logits at 4, 8 and 16 mm scales for a (B, C, D, H, W) input."""
        if any(s % 16 for s in x.shape[2:]):
            raise ValueError(f"input dims must divide by 16, got {tuple(x.shape[2:])}")
        y = self.down1(self.block1(self.stem(x)))
        y = self.down2(self.block2(y))
        t4 = self.block3(y)
        t8 = self.block4(self.down3(t4))
        t16 = self.block5(self.down4(t8))
        return self.head4(t4), self.head8(t8), self.head16(t16)


def flagger_scale_maps(net: FlaggerNet, image: np.ndarray, device="cpu"):
    """Run the flagger on one (C, D, H, W) image; returns three ScaleMaps."""
    net.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None].to(device)
        outs = net(x)
    return [
        ScaleMap(o[0].cpu().numpy(), s) for o, s in zip(outs, SCALES_MM)
    ]


def flag_targets(mask: np.ndarray, scale_mm: int) -> np.ndarray:
    """Block targets at one scale: 1 iff the s^3 block holds any lesion voxel."""
    s = int(scale_mm)
    mask = np.asarray(mask)
    pad = [(0, (-d) % s) for d in mask.shape]
    if any(p[1] for p in pad):
        mask = np.pad(mask, pad)
    d, h, w = (dim // s for dim in mask.shape)
    blocks = mask.reshape(d, s, h, s, w, s)
    return (blocks.max(axis=(1, 3, 5)) > 0).astype(np.uint8)


def compose_heatmap(maps, w_min: float = 0.5) -> Heatmap:
    """Average per-scale flag probabilities and map them onto [w_min, 1].

    Each scale's lesion-channel sigmoid is nearest-upsampled to the input
    grid; the mean probability p gives weights w_min + (1 - w_min) * p.
    """
    if not 0 <= w_min <= 1:
        raise ValueError("w_min must lie in [0, 1]")
    if not maps:
        raise ValueError("need at least one scale map")
    full = None
    for m in maps:
        p = 1.0 / (1.0 + np.exp(-m.logits[1].astype(np.float64)))
        for axis in range(3):
            p = np.repeat(p, m.scale_mm, axis=axis)
        if full is None:
            full = p
        else:
            if p.shape != full.shape:
                raise ValueError("scale maps disagree on the input grid size")
            full = full + p
    mean_p = full / len(maps)
    weights = w_min + (1.0 - w_min) * mean_p
    return Heatmap(weights.astype(np.float32), w_min)


def apply_heatmap(patch: PatchSample, hm: Heatmap) -> PatchSample:
    """Multiply the image channels by the heatmap weights; mask untouched."""
    if hm.weights.shape != patch.mask.shape:
        raise ValueError(
            f"heatmap shape {hm.weights.shape} != patch shape {patch.mask.shape}"
        )
    image = patch.image * hm.weights[None]
    return PatchSample(image, patch.mask.copy(), patch.origin, patch.patch_size,
                       patch.phase_ids)


def heatmap_weights_for_image(net: FlaggerNet, image: np.ndarray, w_min: float = 0.5,
                              device="cpu") -> np.ndarray:
    """Whole-array convenience: flag, compose, and crop weights back to the input.

    Pads the image up to a multiple of 16 for the forward pass; the returned
    weights match the unpadded grid.
    """
    c, d, h, w = image.shape
    pad = [(0, (-s) % 16) for s in (d, h, w)]
    padded = np.pad(image, [(0, 0)] + pad)
    maps = flagger_scale_maps(net, padded, device)
    hm = compose_heatmap(maps, w_min)
    return hm.weights[:d, :h, :w]
