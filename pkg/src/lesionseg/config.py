"""One JSON-serializable configuration covering every stage of the pipeline."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentPolicy
from .blocks import BlockConfig
from .errors import ConfigError
from .ffa import FFAConfig
from .flagger import FlaggerConfig
from .fusion import FusionModelConfig, refiner_config
from .losses import LossConfig
from .segmenter import SegModelConfig
from .train import TrainConfig


@dataclass
class PipelineConfig:
    # model widths; the paper-scale value is 32, desk runs use less
    base_width: int = 32
    stage1_base_width: int = 32
    kernel_size: int = 3
    expansion: int = 4
    gn_groups: int = 8
    combine_mode: str = "mean"
    deep_supervision: bool = True
    # grids
    patch_size: tuple = (128, 128, 128)
    stage1_patch_size: tuple = (64, 64, 64)
    window: tuple = (128, 128, 128)
    overlap: float = 0.5
    target_spacing: tuple = (1.0, 1.0, 1.0)
    clip_lo: float = -200.0
    clip_hi: float = 200.0
    # framework knobs
    w_min: float = 0.5
    threshold: float = 0.5
    margin: float = 0.2
    connectivity: int = 26
    lesion_bias: float = 0.5
    # optimization
    epochs: int = 50                 # clinical-scale runs use 800-1200
    iters_per_epoch: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-2
    patches_per_iter: int = 2
    seed: int = 0
    deterministic: bool = True
    device: str = "cpu"
    use_augment: bool = False
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    loss: LossConfig = field(default_factory=LossConfig)

    # -- derived stage configs -------------------------------------------

    def block_config(self, base_width=None) -> BlockConfig:
        return BlockConfig(base_width or self.base_width, self.kernel_size,
                           self.expansion, self.gn_groups)

    def flagger_config(self) -> FlaggerConfig:
        return FlaggerConfig(in_channels=3, blocks=self.block_config(self.stage1_base_width))

    def seg_config(self, variant: str) -> SegModelConfig:
        in_channels = 3 if variant == "threephase" else 1
        return SegModelConfig(
            in_channels=in_channels, depth=4, blocks=self.block_config(),
            ffa=FFAConfig(gn_groups=self.gn_groups, combine_mode=self.combine_mode),
            deep_supervision=self.deep_supervision,
        )

    def fusion_config(self) -> FusionModelConfig:
        return FusionModelConfig(blocks=self.block_config(),
                                 deep_supervision=self.deep_supervision)

    def refiner_config(self) -> SegModelConfig:
        return refiner_config(blocks=self.block_config(),
                              deep_supervision=self.deep_supervision)

    def train_config(self, stage1: bool = False) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, iters_per_epoch=self.iters_per_epoch, lr=self.lr,
            weight_decay=self.weight_decay,
            patch_size=tuple(self.stage1_patch_size if stage1 else self.patch_size),
            patches_per_iter=self.patches_per_iter, lesion_bias=self.lesion_bias,
            w_min=self.w_min, seed=self.seed, deterministic=self.deterministic,
            device=self.device, loss=self.loss,
            augment_policy=self.augment if self.use_augment else None,
        )

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("patch_size", "stage1_patch_size", "window", "target_spacing"):
            if key in d:
                v = d[key]
                d[key] = tuple(v) if isinstance(v, (list, tuple)) else (int(v),) * 3
        if "augment" in d and isinstance(d["augment"], dict):
            a = {k: tuple(v) if isinstance(v, list) else v for k, v in d["augment"].items()}
            d["augment"] = AugmentPolicy(**a)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**d["loss"])
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc

    def content_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]
