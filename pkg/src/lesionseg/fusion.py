"""Stage 3: multi-branch fusion model and per-lesion refinement.

Model 1 encodes each phase (CT channel + averaged stage-2 probability)
through its own encoder branch, fuses the branch features channelwise and
decodes a corrected segmentation. Model 2 re-segments every connected lesion
inside an expanded bounding box and writes the refined probabilities back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .blocks import BlockConfig, ConvNext3d, DownConvNext3d, OutputHead, Stem
from .segmenter import DecoderStage, SegModelConfig, SegmenterNet

log = logging.getLogger(__name__)


@dataclass
class FusionModelConfig:
    n_branches: int = 3
    branch_channels: int = 2     # CT channel + averaged probability channel
    depth: int = 4
    blocks: BlockConfig = field(default_factory=BlockConfig)
    deep_supervision: bool = True
    n_classes: int = 2


class _EncoderBranch(nn.Module):
    def __init__(self, in_channels, widths, cfg):
        super().__init__()
        self.stem = Stem(in_channels, cfg)
        self.enc = nn.ModuleList(
            nn.Sequential(ConvNext3d(w, cfg), ConvNext3d(w, cfg)) for w in widths
        )
        self.down = nn.ModuleList(DownConvNext3d(w, cfg) for w in widths)

    def forward(self, x):
        skips = []
        y = self.stem(x)
        for enc, down in zip(self.enc, self.down):
            y = enc(y)
            skips.append(y)
            y = down(y)
        return y, skips


class FusionNet(nn.Module):
    """Three weight-independent encoders, channelwise fusion, one decoder."""

    def __init__(self, cfg: FusionModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or FusionModelConfig()
        b = self.cfg.blocks
        depth = self.cfg.depth
        widths = [b.width_at(n) for n in range(1, depth + 1)]
        bridge_w = 2 * widths[-1]

        self.branches = nn.ModuleList(
            _EncoderBranch(self.cfg.branch_channels, widths, b)
            for _ in range(self.cfg.n_branches)
        )
        self.fuse_bridge = nn.Conv3d(self.cfg.n_branches * bridge_w, bridge_w, 1)
        self.bridge = nn.Sequential(ConvNext3d(bridge_w, b), ConvNext3d(bridge_w, b))
        self.fuse_skip = nn.ModuleList(
            nn.Conv3d(self.cfg.n_branches * w, w, 1) for w in widths
        )
        self.dec = nn.ModuleList(
            DecoderStage(widths[n], 2 * widths[n], b, None) for n in reversed(range(depth))
        )
        self.heads = nn.ModuleList(
            OutputHead(widths[n], self.cfg.n_classes) for n in reversed(range(depth))
        )

    def forward(self, x):
        """x stacks the branch inputs channelwise: (B, branches*channels, D, H, W)."""
        n, c = self.cfg.n_branches, self.cfg.branch_channels
        if x.shape[1] != n * c:
            raise ValueError(f"expected {n * c} channels, got {x.shape[1]}")
        factor = 2 ** self.cfg.depth
        if any(s % factor for s in x.shape[2:]):
            raise ValueError(
                f"input dims {tuple(x.shape[2:])} must divide by 2^depth = {factor}"
            )
        bottoms, all_skips = [], []
        for i, branch in enumerate(self.branches):
            bottom, skips = branch(x[:, i * c:(i + 1) * c])
            bottoms.append(bottom)
            all_skips.append(skips)
        y = self.bridge(self.fuse_bridge(torch.cat(bottoms, dim=1)))
        fused_skips = [
            fuse(torch.cat([skips[lvl] for skips in all_skips], dim=1))
            for lvl, fuse in enumerate(self.fuse_skip)
        ]
        outs = []
        for stage, head, skip in zip(self.dec, self.heads, reversed(fused_skips)):
            y = stage(skip, y)
            outs.append(head(y))
        main = outs[-1]
        aux = list(reversed(outs[:-1])) if self.cfg.deep_supervision else []
        return main, aux


def refiner_config(in_channels: int = 3, blocks: BlockConfig | None = None,
                   deep_supervision: bool = True) -> SegModelConfig:
    """Stage-3 model 2: the main architecture reduced to three stages."""
    return SegModelConfig(
        in_channels=in_channels, depth=3, blocks=blocks or BlockConfig(),
        deep_supervision=deep_supervision,
    )


def build_refiner(cfg: SegModelConfig | None = None) -> SegmenterNet:
    return SegmenterNet(cfg or refiner_config())


def form_fusion_input(v_p: np.ndarray, x_p: np.ndarray, x_3p: np.ndarray) -> np.ndarray:
    """Branch input: the phase volume stacked with the mean probability map."""
    v_p = np.asarray(v_p, dtype=np.float32)
    if v_p.shape != np.shape(x_p) or v_p.shape != np.shape(x_3p):
        raise ValueError(
            f"misaligned grids {v_p.shape}, {np.shape(x_p)}, {np.shape(x_3p)}"
        )
    mean_prob = (np.asarray(x_p, dtype=np.float32) + np.asarray(x_3p, dtype=np.float32)) / 2.0
    return np.stack([v_p, mean_prob])


@dataclass
class LesionInstance:
    """One connected lesion component."""

    voxels: np.ndarray          # (n, 3) integer indices
    bbox_min: tuple
    bbox_max: tuple             # inclusive
    centroid_mm: np.ndarray
    volume_mm3: float

    @property
    def n_voxels(self) -> int:
        return len(self.voxels)

    def span(self):
        return tuple(hi - lo + 1 for lo, hi in zip(self.bbox_min, self.bbox_max))


_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def extract_lesions(mask: np.ndarray, connectivity: int = 26, spacing=(1.0, 1.0, 1.0)):
    """Connected components sorted by volume descending (bbox-origin tie-break)."""
    if connectivity not in _STRUCTS:
        raise ValueError(f"connectivity must be one of {sorted(_STRUCTS)}")
    mask = np.asarray(mask) > 0
    spacing = np.asarray(spacing, dtype=float)
    labels, n = ndimage.label(mask, structure=_STRUCTS[connectivity])
    lesions = []
    for obj_slice, lab in zip(ndimage.find_objects(labels), range(1, n + 1)):
        local = labels[obj_slice] == lab
        idx = np.argwhere(local)
        idx += [s.start for s in obj_slice]
        lo = tuple(int(v) for v in idx.min(axis=0))
        hi = tuple(int(v) for v in idx.max(axis=0))
        lesions.append(
            LesionInstance(
                voxels=idx,
                bbox_min=lo,
                bbox_max=hi,
                centroid_mm=idx.mean(axis=0) * spacing,
                volume_mm3=float(len(idx) * spacing.prod()),
            )
        )
    lesions.sort(key=lambda l: (-l.n_voxels, l.bbox_min))
    return lesions


def expand_bbox(lesion: LesionInstance, margin: float, shape):
    """Grow each bbox dimension by margin*span, split evenly, clamp to shape.

    Returns (lo, hi) with hi exclusive.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    lo, hi = [], []
    for lo_i, hi_i, dim in zip(lesion.bbox_min, lesion.bbox_max, shape):
        span = hi_i - lo_i + 1
        pad = margin * span / 2.0
        lo.append(max(int(np.floor(lo_i - pad)), 0))
        hi.append(min(int(np.ceil(hi_i + pad)) + 1, dim))
    return tuple(lo), tuple(hi)


def crop_with_margin(image: np.ndarray, lesion: LesionInstance, margin: float = 0.2,
                     pad_multiple: int = 1, min_size: int = 1):
    """Crop the expanded lesion box from a (C, D, H, W) or (D, H, W) array.

    The crop is zero padded up to ``min_size`` and the next multiple of
    ``pad_multiple`` per axis. Returns ``(crop, (lo, hi))`` where the box
    bounds refer to the unpadded region inside the parent array.
    """
    image = np.asarray(image)
    spatial = image.shape[-3:]
    lo, hi = expand_bbox(lesion, margin, spatial)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    crop = image[(..., *sl)]
    target = [max(b - a, min_size) for a, b in zip(lo, hi)]
    target = [t + (-t) % pad_multiple for t in target]
    pad = [(0, t - s) for t, s in zip(target, crop.shape[-3:])]
    if any(p[1] for p in pad):
        lead = [(0, 0)] * (image.ndim - 3)
        crop = np.pad(crop, lead + pad)
    return crop, (lo, hi)


def refine_lesions(prob: np.ndarray, images: np.ndarray, predict_fn, *,
                   threshold: float = 0.5, margin: float = 0.2, connectivity: int = 26,
                   spacing=(1.0, 1.0, 1.0), pad_multiple: int = 8, min_size: int = 16,
                   min_lesion_voxels: int = 2) -> np.ndarray:
    """Re-predict each detected lesion inside its expanded box.

    Lesions are processed in volume-descending order and each prediction
    overwrites the box region (last writer wins where boxes overlap); voxels
    outside every box keep their incoming probability. ``predict_fn`` maps
    ``(image_crop (C,d,h,w), prob_crop (d,h,w)) -> (d,h,w)`` probabilities.
    """
    prob = np.asarray(prob, dtype=np.float32)
    out = prob.copy()
    lesions = extract_lesions(prob >= threshold, connectivity, spacing)
    for lesion in lesions:
        if lesion.n_voxels < min_lesion_voxels:
            log.warning("skipping %d-voxel lesion at %s: below refiner minimum",
                        lesion.n_voxels, lesion.bbox_min)
            continue
        crop, (lo, hi) = crop_with_margin(images, lesion, margin, pad_multiple, min_size)
        prob_crop, _ = crop_with_margin(prob, lesion, margin, pad_multiple, min_size)
        refined = np.asarray(predict_fn(crop, prob_crop), dtype=np.float32)
        size = tuple(b - a for a, b in zip(lo, hi))
        out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = refined[:size[0], :size[1], :size[2]]
    return out
