"""Training objectives: voxelwise BCE, soft Dice, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossConfig:
    alpha_b: float = 1.0       # BCE weight
    alpha_d: float = 1.0       # Dice-loss weight
    w_c: float = 1.0           # foreground class weight inside the BCE
    smooth: float = 1.0        # Dice smoothing; defines the empty/empty case
    threshold: float = 0.5     # probability cutoff used at evaluation time

    def __post_init__(self):
        if self.alpha_b < 0 or self.alpha_d < 0:
            raise ValueError("loss weights must be >= 0")
        if self.smooth <= 0:
            raise ValueError("smooth must be > 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


def bce_loss(logits: torch.Tensor, target: torch.Tensor, w_c: float = 1.0) -> torch.Tensor:
    """Mean voxelwise cross-entropy of sigmoid(logits); w_c scales the y=1 term."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(target.shape)}")
    target = target.to(logits.dtype)
    elem = w_c * target * F.logsigmoid(logits) + (1 - target) * F.logsigmoid(-logits)
    return -elem.mean()


def dice_coeff(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice coefficient (2*overlap + smooth) / (sums + smooth)."""
    target = target.to(probs.dtype)
    inter = (probs * target).sum()
    return (2 * inter + smooth) / (probs.sum() + target.sum() + smooth)


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    return 1 - dice_coeff(torch.sigmoid(logits), target, smooth)


def compound_loss(logits: torch.Tensor, target: torch.Tensor,
                  config: LossConfig | None = None) -> torch.Tensor:
    """alpha_b * BCE + alpha_d * Dice loss on the lesion-channel logits."""
    cfg = config or LossConfig()
    return cfg.alpha_b * bce_loss(logits, target, cfg.w_c) + cfg.alpha_d * dice_loss(
        logits, target, cfg.smooth
    )
