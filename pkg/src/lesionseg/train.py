"""Stage-wise training loops, checkpoints, and determinism helpers.

Every stage trains with AdamW against the compound loss; deep-supervision
outputs are penalized equally against max-pooled targets. All loops are
deterministic for a fixed seed: model init comes from the torch seed and
patch sampling from a per-step numpy seed stream.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentPolicy, augment
from .blocks import BlockConfig
from .errors import DependencyError, NumericalError
from .ffa import FFAConfig
from .flagger import SCALES_MM, FlaggerConfig, FlaggerNet, heatmap_weights_for_image
from .fusion import FusionModelConfig, FusionNet, extract_lesions, crop_with_margin
from .losses import LossConfig, compound_loss
from .segmenter import SegModelConfig, SegmenterNet, downsample_mask, sliding_window_infer
from .volume import PHASE_ORDER, extract_patch, weighted_sample_origins

log = logging.getLogger(__name__)

VARIANTS = ("arterial", "delay", "venous", "threephase")
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 50                  # desk-scale default; clinical runs use 800-1200
    iters_per_epoch: int = 0          # 0 means one iteration per training case
    lr: float = 1e-3
    weight_decay: float = 1e-2
    patch_size: tuple = (64, 64, 64)
    patches_per_iter: int = 2         # stage-2/3 models draw two patches per iteration
    lesion_bias: float = 0.5
    w_min: float = 0.5
    seed: int = 0
    deterministic: bool = True
    device: str = "cpu"
    loss: LossConfig = field(default_factory=LossConfig)
    augment_policy: AugmentPolicy | None = None
    log_every: int = 50


def seed_everything(seed: int, deterministic: bool = True):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


# --- checkpoints -----------------------------------------------------------

def _config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def _seg_config(d):
    return SegModelConfig(
        in_channels=d["in_channels"], depth=d["depth"], blocks=BlockConfig(**d["blocks"]),
        ffa=FFAConfig(**d["ffa"]), deep_supervision=d["deep_supervision"],
        n_classes=d["n_classes"],
    )


def _flagger_config(d):
    return FlaggerConfig(in_channels=d["in_channels"], blocks=BlockConfig(**d["blocks"]),
                         n_classes=d["n_classes"])


def _fusion_config(d):
    return FusionModelConfig(
        n_branches=d["n_branches"], branch_channels=d["branch_channels"], depth=d["depth"],
        blocks=BlockConfig(**d["blocks"]), deep_supervision=d["deep_supervision"],
        n_classes=d["n_classes"],
    )


_KINDS = {
    "flagger": (_flagger_config, FlaggerNet),
    "segmenter": (_seg_config, SegmenterNet),
    "fusion": (_fusion_config, FusionNet),
    "refiner": (_seg_config, SegmenterNet),
}


def save_checkpoint(path, model, kind: str, meta=None):
    if kind not in _KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": kind,
            "config": _config_to_dict(model.cfg),
            "state_dict": model.state_dict(),
            "meta": dict(meta or {}),
        },
        path,
    )


def load_checkpoint(path, device="cpu"):
    """Rebuild a model from a checkpoint; returns (model, kind, meta)."""
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"checkpoint {path} does not exist")
    blob = torch.load(path, map_location=device, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('format_version')}")
    kind = blob["kind"]
    build_cfg, build_net = _KINDS[kind]
    model = build_net(build_cfg(blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.to(device)
    model.eval()
    return model, kind, blob["meta"]


def save_history(path, history):
    Path(path).write_text(json.dumps({"loss_curve": history}, indent=2))


# --- shared loop helpers ---------------------------------------------------

def _total_steps(tc: TrainConfig, n_cases: int):
    iters = tc.iters_per_epoch or n_cases
    return tc.epochs * iters


def _step_seeds(tc: TrainConfig, n: int):
    return np.random.SeedSequence(tc.seed).generate_state(max(n, 1) * 4).reshape(-1, 4)


def _check_finite(loss, step):
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()} at step {step}")


def _variant_channels(variant: str):
    if variant == "threephase":
        return list(PHASE_ORDER)
    if variant not in PHASE_ORDER:
        raise ValueError(f"unknown variant {variant!r}")
    return [variant]


def _sample_patches(case, tc: TrainConfig, seeds, count):
    """Draw, extract, and optionally augment `count` patches from one case."""
    origins = weighted_sample_origins(case, tc.patch_size, count, tc.lesion_bias,
                                      seed=int(seeds[1]))
    patches = []
    for k, origin in enumerate(origins):
        patch = extract_patch(case, origin, tc.patch_size)
        if tc.augment_policy is not None:
            patch = augment(patch, tc.augment_policy, seed=int(seeds[2]) + k)
        patches.append(patch)
    return patches


def _ds_loss(main, aux, mask_t, loss_cfg):
    """Compound loss on the main output plus equal-weight aux terms."""
    loss = compound_loss(main[:, 1], mask_t, loss_cfg)
    for a in aux:
        factor = mask_t.shape[-1] // a.shape[-1]
        target = downsample_mask(mask_t.unsqueeze(1), factor).squeeze(1)
        loss = loss + compound_loss(a[:, 1], target, loss_cfg)
    return loss


# --- stage trainers --------------------------------------------------------

def train_stage1(cases, cfg: FlaggerConfig | None = None, tc: TrainConfig | None = None):
    """Train the multiscale flagger; per-scale losses are summed equally."""
    tc = tc or TrainConfig()
    seed_everything(tc.seed, tc.deterministic)
    net = FlaggerNet(cfg or FlaggerConfig()).to(tc.device)
    opt = torch.optim.AdamW(net.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    steps = _total_steps(tc, len(cases))
    seeds = _step_seeds(tc, steps)
    history = []
    net.train()
    for step in range(steps):
        rng = np.random.default_rng(int(seeds[step][0]))
        case = cases[int(rng.integers(len(cases)))]
        patches = _sample_patches(case, tc, seeds[step], tc.patches_per_iter)
        image = torch.from_numpy(np.stack([p.image for p in patches])).to(tc.device)
        mask = torch.from_numpy(np.stack([p.mask for p in patches])).float().to(tc.device)
        opt.zero_grad()
        outs = net(image)
        loss = None
        for out, scale in zip(outs, SCALES_MM):
            target = downsample_mask(mask.unsqueeze(1), scale).squeeze(1)
            term = compound_loss(out[:, 1], target, tc.loss)
            loss = term if loss is None else loss + term
        _check_finite(loss, step)
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": loss.detach().item()})
        if tc.log_every and step % tc.log_every == 0:
            log.info("stage1 step %d loss %.4f", step, history[-1]["loss"])
    net.eval()
    return net, history


def _weighted_variant_image(patch, flagger, variant, w_min, device):
    """Heatmap-weight the 3-phase patch, then keep the variant's channels."""
    weights = heatmap_weights_for_image(flagger, patch.image, w_min, device)
    weighted = patch.image * weights[None]
    chans = [patch.phase_ids.index(p) for p in _variant_channels(variant)]
    return weighted[chans]


def train_stage2(cases, variant: str, flagger: FlaggerNet, cfg: SegModelConfig | None = None,
                 tc: TrainConfig | None = None):
    """Train one stage-2 segmenter on heatmap-weighted patches."""
    tc = tc or TrainConfig()
    seed_everything(tc.seed, tc.deterministic)
    in_channels = len(_variant_channels(variant))
    if cfg is None:
        cfg = SegModelConfig(in_channels=in_channels)
    elif cfg.in_channels != in_channels:
        raise ValueError(f"variant {variant!r} needs {in_channels} input channels, "
                         f"config has {cfg.in_channels}")
    net = SegmenterNet(cfg).to(tc.device)
    opt = torch.optim.AdamW(net.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    steps = _total_steps(tc, len(cases))
    seeds = _step_seeds(tc, steps)
    history = []
    flagger.eval()
    for step in range(steps):
        rng = np.random.default_rng(int(seeds[step][0]))
        case = cases[int(rng.integers(len(cases)))]
        patches = _sample_patches(case, tc, seeds[step], tc.patches_per_iter)
        images = np.stack([
            _weighted_variant_image(p, flagger, variant, tc.w_min, tc.device)
            for p in patches
        ])
        net.train()
        image_t = torch.from_numpy(images).to(tc.device)
        mask_t = torch.from_numpy(np.stack([p.mask for p in patches])).float().to(tc.device)
        opt.zero_grad()
        main, aux = net(image_t)
        loss = _ds_loss(main, aux, mask_t, tc.loss)
        _check_finite(loss, step)
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": loss.detach().item()})
        if tc.log_every and step % tc.log_every == 0:
            log.info("stage2[%s] step %d loss %.4f", variant, step, history[-1]["loss"])
    net.eval()
    return net, history


def precompute_stage2_probs(cases, flagger, seg_models, *, window, overlap=0.5,
                            w_min=0.5, device="cpu"):
    """Per-case stage-2 probability volumes, with the stage-1 weighting applied."""
    missing = [v for v in VARIANTS if v not in seg_models]
    if missing:
        raise DependencyError(f"missing stage-2 models: {missing}")
    out = []
    for case in cases:
        image3 = np.stack([case.phase(p).voxels for p in PHASE_ORDER]).astype(np.float32)
        weights = heatmap_weights_for_image(flagger, image3, w_min, device)
        weighted = image3 * weights[None]
        probs = {}
        for variant in VARIANTS:
            chans = [PHASE_ORDER.index(p) for p in _variant_channels(variant)]
            probs[variant] = sliding_window_infer(
                seg_models[variant], weighted[chans], window, overlap, device
            )
        out.append(probs)
    return out


def _fusion_input_stack(image3, probs, origin, size):
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    channels = []
    for i, phase in enumerate(PHASE_ORDER):
        channels.append(image3[(i, *sl)])
        channels.append(((probs[phase][sl] + probs["threephase"][sl]) / 2.0))
    return np.stack(channels).astype(np.float32)


def train_fusion(cases, flagger, seg_models, cfg: FusionModelConfig | None = None,
                 tc: TrainConfig | None = None, *, window=None, overlap=0.5):
    """Train the stage-3 fusion model on phase volumes plus stage-2 probabilities."""
    tc = tc or TrainConfig()
    window = window or tc.patch_size
    case_probs = precompute_stage2_probs(
        cases, flagger, seg_models, window=window, overlap=overlap,
        w_min=tc.w_min, device=tc.device,
    )
    seed_everything(tc.seed, tc.deterministic)
    net = FusionNet(cfg or FusionModelConfig()).to(tc.device)
    opt = torch.optim.AdamW(net.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    steps = _total_steps(tc, len(cases))
    seeds = _step_seeds(tc, steps)
    history = []
    images3 = [
        np.stack([c.phase(p).voxels for p in PHASE_ORDER]).astype(np.float32)
        for c in cases
    ]
    for step in range(steps):
        rng = np.random.default_rng(int(seeds[step][0]))
        ci = int(rng.integers(len(cases)))
        case = cases[ci]
        origins = weighted_sample_origins(case, tc.patch_size, tc.patches_per_iter,
                                          tc.lesion_bias, seed=int(seeds[step][1]))
        batch = np.stack([
            _fusion_input_stack(images3[ci], case_probs[ci], o, tc.patch_size)
            for o in origins
        ])
        masks = np.stack([
            case.mask[tuple(slice(o, o + s) for o, s in zip(origin, tc.patch_size))]
            for origin in origins
        ])
        net.train()
        image_t = torch.from_numpy(batch).to(tc.device)
        mask_t = torch.from_numpy(masks).float().to(tc.device)
        opt.zero_grad()
        main, aux = net(image_t)
        loss = _ds_loss(main, aux, mask_t, tc.loss)
        _check_finite(loss, step)
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": loss.detach().item()})
        if tc.log_every and step % tc.log_every == 0:
            log.info("fusion step %d loss %.4f", step, history[-1]["loss"])
    net.eval()
    return net, history


def train_refiner(cases, cfg: SegModelConfig | None = None, tc: TrainConfig | None = None,
                  *, margin: float = 0.2, connectivity: int = 26, min_size: int = 16):
    """Train the per-lesion refiner on ground-truth lesion crops (one per step)."""
    from .fusion import refiner_config

    tc = tc or TrainConfig()
    seed_everything(tc.seed, tc.deterministic)
    net = SegmenterNet(cfg or refiner_config()).to(tc.device)
    factor = 2 ** net.cfg.depth
    opt = torch.optim.AdamW(net.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)

    per_case = []
    for case in cases:
        lesions = extract_lesions(case.mask, connectivity, case.spacing)
        image3 = np.stack([case.phase(p).voxels for p in PHASE_ORDER]).astype(np.float32)
        if lesions:
            per_case.append((image3, case.mask, lesions))
    if not per_case:
        raise DependencyError("refiner training needs at least one case with lesions")

    steps = _total_steps(tc, len(cases))
    seeds = _step_seeds(tc, steps)
    history = []
    for step in range(steps):
        rng = np.random.default_rng(int(seeds[step][0]))
        image3, mask, lesions = per_case[int(rng.integers(len(per_case)))]
        lesion = lesions[int(rng.integers(len(lesions)))]
        crop, _ = crop_with_margin(image3, lesion, margin, factor, min_size)
        target, _ = crop_with_margin(mask, lesion, margin, factor, min_size)
        net.train()
        image_t = torch.from_numpy(crop[None]).to(tc.device)
        mask_t = torch.from_numpy(target[None]).float().to(tc.device)
        opt.zero_grad()
        main, aux = net(image_t)
        loss = _ds_loss(main, aux, mask_t, tc.loss)
        _check_finite(loss, step)
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": loss.detach().item()})
        if tc.log_every and step % tc.log_every == 0:
            log.info("refiner step %d loss %.4f", step, history[-1]["loss"])
    net.eval()
    return net, history
