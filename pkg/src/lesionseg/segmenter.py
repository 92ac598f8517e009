"""Stage 2: encoder-decoder segmentation model and whole-volume inference.

Four encoder stages (two ConvNext blocks then a downsampling block each), a
two-block bottleneck bridge, and four decoder stages whose skip connections
pass through the coarse+fine attention module. Deep-supervision heads emit
class logits at every decoder depth. The same architecture serves the
per-phase variants (1 input channel) and the multi-phase variant (N input
channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import BlockConfig, ConvNext3d, DownConvNext3d, OutputHead, Stem
from .ffa import CoarseFineFFA, FFAConfig


@dataclass
class SegModelConfig:
    in_channels: int = 3
    depth: int = 4
    blocks: BlockConfig = field(default_factory=BlockConfig)
    ffa: FFAConfig = field(default_factory=FFAConfig)
    deep_supervision: bool = True
    n_classes: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


class _Up(nn.Module):
    """Nearest 2x upsample followed by a channel-halving projection.

    Nearest keeps constant inputs bitwise constant; trilinear's boundary
    rounding jitter gets amplified through the group norms downstream.
    """

    def __init__(self, c_in, c_out, gn_groups):
        super().__init__()
        self.proj = nn.Conv3d(c_in, c_out, 1)
        self.norm = nn.GroupNorm(gn_groups, c_out)

    def forward(self, x, size):
        x = F.interpolate(x, size=size, mode="nearest-exact")
        return self.norm(self.proj(x))


class DecoderStage(nn.Module):
    """One decoder level: upsample, gate the skip, concatenate, refine."""

    def __init__(self, skip_channels: int, deep_channels: int, cfg: BlockConfig,
                 ffa_cfg: FFAConfig | None = None):
        super().__init__()
        c = skip_channels
        self.up = _Up(deep_channels, c, cfg.gn_groups)
        self.ffa = CoarseFineFFA(c, deep_channels, ffa_cfg) if ffa_cfg is not None else None
        self.fuse = nn.Conv3d(2 * c, c, 1)
        self.body = nn.Sequential(ConvNext3d(c, cfg), ConvNext3d(c, cfg))

    def forward(self, skip, deep):
        up = self.up(deep, skip.shape[2:])
        gated = self.ffa(skip, deep) if self.ffa is not None else skip
        return self.body(self.fuse(torch.cat([gated, up], dim=1)))


class SegmenterNet(nn.Module):
    def __init__(self, cfg: SegModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or SegModelConfig()
        b = self.cfg.blocks
        depth = self.cfg.depth
        widths = [b.width_at(n) for n in range(1, depth + 1)]

        self.stem = Stem(self.cfg.in_channels, b)
        self.enc = nn.ModuleList(
            nn.Sequential(ConvNext3d(w, b), ConvNext3d(w, b)) for w in widths
        )
        self.down = nn.ModuleList(DownConvNext3d(w, b) for w in widths)
        bridge_w = 2 * widths[-1]
        self.bridge = nn.Sequential(ConvNext3d(bridge_w, b), ConvNext3d(bridge_w, b))
        self.dec = nn.ModuleList(
            DecoderStage(widths[n], 2 * widths[n], b, self.cfg.ffa)
            for n in reversed(range(depth))
        )
        # Heads indexed coarse-to-fine alongside the decoder stages; the last
        # one (full resolution) is the main output.
        self.heads = nn.ModuleList(
            OutputHead(widths[n], self.cfg.n_classes) for n in reversed(range(depth))
        )

    def forward(self, x):
        """Returns (main logits, aux logits list at 1/2, 1/4, ... resolution)."""
        factor = 2 ** self.cfg.depth
        if any(s % factor for s in x.shape[2:]):
            raise ValueError(
                f"input dims {tuple(x.shape[2:])} must divide by 2^depth = {factor}"
            )
        skips = []
        y = self.stem(x)
        for enc, down in zip(self.enc, self.down):
            y = enc(y)
            skips.append(y)
            y = down(y)
        y = self.bridge(y)
        outs = []
        for stage, head, skip in zip(self.dec, self.heads, reversed(skips)):
            y = stage(skip, y)
            outs.append(head(y))
        main = outs[-1]
        aux = list(reversed(outs[:-1]))  # finest first: 1/2, 1/4, 1/8
        if not self.cfg.deep_supervision:
            aux = []
        return main, aux


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Deep-supervision target: max-pool so any lesion voxel marks its block."""
    return F.max_pool3d(mask.float(), kernel_size=factor)


def _gaussian_window_weights(window, sigma_scale: float = 0.125) -> np.ndarray:
    profiles = []
    for n in window:
        center = (n - 1) / 2.0
        sigma = max(n * sigma_scale, 1e-8)
        i = np.arange(n, dtype=np.float64)
        profiles.append(np.exp(-((i - center) ** 2) / (2 * sigma**2)))
    w = profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]
    return np.maximum(w / w.max(), 1e-8)


def _window_starts(dim, window, step):
    if dim <= window:
        return [0]
    starts = list(range(0, dim - window + 1, step))
    if starts[-1] != dim - window:
        starts.append(dim - window)
    return starts


def sliding_window_infer(model: nn.Module, image: np.ndarray, window=(128, 128, 128),
                         overlap: float = 0.5, device="cpu") -> np.ndarray:
    """Blend overlapping window predictions into a whole-volume probability map.

    ``image`` is the prepared (channels, D, H, W) input; windows are weighted
    with a Gaussian bump so seams average smoothly. Returns the lesion-channel
    probability at the input grid.
    """
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    window = tuple(int(w) for w in np.atleast_1d(window))
    if len(window) == 1:
        window = window * 3
    c, d, h, w = image.shape
    pad = [max(ws - s, 0) for ws, s in zip(window, (d, h, w))]
    padded = np.pad(image, [(0, 0)] + [(0, p) for p in pad])
    pd, ph, pw = padded.shape[1:]

    step = [max(1, int(round(ws * (1 - overlap)))) for ws in window]
    starts = [
        _window_starts(dim, ws, st)
        for dim, ws, st in zip((pd, ph, pw), window, step)
    ]
    weights = _gaussian_window_weights(window)
    w_t = torch.from_numpy(weights)

    acc = np.zeros((pd, ph, pw), dtype=np.float64)
    norm = np.zeros((pd, ph, pw), dtype=np.float64)
    model.eval()
    with torch.no_grad():
        for sd in starts[0]:
            for sh in starts[1]:
                for sw in starts[2]:
                    crop = padded[:, sd:sd + window[0], sh:sh + window[1], sw:sw + window[2]]
                    x = torch.from_numpy(np.ascontiguousarray(crop))[None].to(device)
                    out = model(x)
                    logits = out[0] if isinstance(out, tuple) else out
                    prob = torch.sigmoid(logits[0, 1].double().cpu()) * w_t
                    sl = (slice(sd, sd + window[0]), slice(sh, sh + window[1]),
                          slice(sw, sw + window[2]))
                    acc[sl] += prob.numpy()
                    norm[sl] += weights
    out = acc / np.maximum(norm, 1e-12)
    return out[:d, :h, :w].astype(np.float32)
