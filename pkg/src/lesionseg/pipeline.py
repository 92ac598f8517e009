"""Whole-volume inference through the three stages."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DependencyError
from .flagger import heatmap_weights_for_image
from .fusion import form_fusion_input, refine_lesions
from .segmenter import sliding_window_infer
from .train import VARIANTS, _variant_channels, load_checkpoint, save_checkpoint
from .volume import PHASE_ORDER, MultiPhaseCase, clip_normalize, resample_isotropic

BUNDLE_FILES = {
    "stage1": "stage1.pt",
    "arterial": "stage2_arterial.pt",
    "delay": "stage2_delay.pt",
    "venous": "stage2_venous.pt",
    "threephase": "stage2_threephase.pt",
    "fusion": "stage3_fusion.pt",
    "refiner": "stage3_refiner.pt",
}


@dataclass
class NetworkBundle:
    """The trained parameter sets of every framework model."""

    flagger: object
    segmenters: dict
    fusion: object
    refiner: object

    @classmethod
    def load(cls, bundle_dir, device="cpu"):
        bundle_dir = Path(bundle_dir)
        missing = [n for n in BUNDLE_FILES.values() if not (bundle_dir / n).exists()]
        if missing:
            raise DependencyError(f"bundle {bundle_dir} is missing {missing}")
        flagger, _, _ = load_checkpoint(bundle_dir / BUNDLE_FILES["stage1"], device)
        segs = {
            v: load_checkpoint(bundle_dir / BUNDLE_FILES[v], device)[0] for v in VARIANTS
        }
        fusion, _, _ = load_checkpoint(bundle_dir / BUNDLE_FILES["fusion"], device)
        refiner, _, _ = load_checkpoint(bundle_dir / BUNDLE_FILES["refiner"], device)
        return cls(flagger, segs, fusion, refiner)

    def save(self, bundle_dir, meta=None):
        bundle_dir = Path(bundle_dir)
        save_checkpoint(bundle_dir / BUNDLE_FILES["stage1"], self.flagger, "flagger", meta)
        for v in VARIANTS:
            save_checkpoint(bundle_dir / BUNDLE_FILES[v], self.segmenters[v], "segmenter", meta)
        save_checkpoint(bundle_dir / BUNDLE_FILES["fusion"], self.fusion, "fusion", meta)
        save_checkpoint(bundle_dir / BUNDLE_FILES["refiner"], self.refiner, "refiner", meta)


@dataclass
class PipelineOutputs:
    heatmap: np.ndarray
    stage2_probs: dict
    fusion_prob: np.ndarray | None
    refined_prob: np.ndarray | None
    final_mask: np.ndarray


def prepare_case(case: MultiPhaseCase, target_spacing=(1.0, 1.0, 1.0),
                 clip_lo: float = -200.0, clip_hi: float = 200.0) -> MultiPhaseCase:
    """Resample to the working spacing and normalize intensities to [0, 1]."""
    case = resample_isotropic(case, target_spacing)
    phases = [clip_normalize(p, clip_lo, clip_hi) for p in case.phases]
    return MultiPhaseCase(phases, case.mask, case.subject_id)


def stacked_image(case: MultiPhaseCase) -> np.ndarray:
    """All phases as one (3, D, H, W) float32 array in canonical order."""
    for pid in PHASE_ORDER:
        if pid not in case.phase_ids:
            raise DependencyError(f"case {case.subject_id!r} is missing phase {pid!r}")
    return np.stack([case.phase(p).voxels for p in PHASE_ORDER]).astype(np.float32)


def _refiner_predict(refiner, device="cpu"):
    def predict(image_crop, _prob_crop):
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(image_crop))[None].to(device)
            main, _ = refiner(x)
            return torch.sigmoid(main[0, 1]).cpu().numpy()
    return predict


def run_pipeline(case: MultiPhaseCase, bundle: NetworkBundle, *, window=(128, 128, 128),
                 overlap: float = 0.5, w_min: float = 0.5, threshold: float = 0.5,
                 margin: float = 0.2, connectivity: int = 26, stop_after: str | None = None,
                 device: str = "cpu") -> PipelineOutputs:
    """Run stages 1-3 on a prepared case (1 mm spacing, normalized intensities).

    ``stop_after="stage2"`` skips stage 3; the final mask is then the
    thresholded multi-phase stage-2 probability map.
    """
    if stop_after not in (None, "stage2"):
        raise ValueError(f"stop_after must be None or 'stage2', got {stop_after!r}")
    image3 = stacked_image(case)

    weights = heatmap_weights_for_image(bundle.flagger, image3, w_min, device)
    weighted = image3 * weights[None]

    stage2 = {}
    for variant in VARIANTS:
        chans = [PHASE_ORDER.index(p) for p in _variant_channels(variant)]
        stage2[variant] = sliding_window_infer(
            bundle.segmenters[variant], weighted[chans], window, overlap, device
        )

    if stop_after == "stage2":
        final = (stage2["threephase"] >= threshold).astype(np.uint8)
        return PipelineOutputs(weights, stage2, None, None, final)

    fusion_in = np.concatenate([
        form_fusion_input(image3[i], stage2[p], stage2["threephase"])
        for i, p in enumerate(PHASE_ORDER)
    ])
    fusion_prob = sliding_window_infer(bundle.fusion, fusion_in, window, overlap, device)

    refined = refine_lesions(
        fusion_prob, image3, _refiner_predict(bundle.refiner, device),
        threshold=threshold, margin=margin, connectivity=connectivity,
        spacing=case.spacing, pad_multiple=2 ** bundle.refiner.cfg.depth,
    )
    final = (refined >= threshold).astype(np.uint8)
    return PipelineOutputs(weights, stage2, fusion_prob, refined, final)
