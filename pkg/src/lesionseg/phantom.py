"""Synthetic multi-phase phantom cases with phase-dependent lesion contrast.

Anatomy is an intensity ellipsoid (the organ) on a darker background;
lesions are smaller ellipsoids fully inside the organ. Per-phase offsets
model the contrast dynamics qualitatively: lesions enhance most against the
organ in the arterial phase, wash out in the venous phase, and retain a
moderate contrast in the delay phase. The lesion mask is the exact ellipsoid
voxelization; only intensities are smoothed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nifti
from .volume import PHASE_ORDER, MultiPhaseCase, PhaseVolume


@dataclass
class PhantomSpec:
    shape: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    organ_axes_mm: tuple = (26.0, 24.0, 22.0)   # ellipsoid semi-axes
    lesion_count_range: tuple = (1, 3)
    lesion_diameter_range_mm: tuple = (8.0, 20.0)
    background_hu: float = -120.0
    organ_hu: dict = field(default_factory=lambda: {
        "arterial": 70.0, "delay": 60.0, "venous": 100.0,
    })
    lesion_contrast_hu: dict = field(default_factory=lambda: {
        # Lesion minus organ; arterial hyperenhancement, venous washout,
        # delay retention.
        "arterial": 80.0, "delay": 30.0, "venous": -55.0,
    })
    noise_sigma_hu: float = 4.0
    texture_sigma_hu: float = 6.0
    texture_scale_mm: float = 6.0
    edge_smooth_mm: float = 0.7
    max_placement_tries: int = 200

    def __post_init__(self):
        if self.lesion_diameter_range_mm[0] < 2.0:
            raise ValueError("lesion diameters below 2 mm are not resolvable")
        if self.lesion_count_range[0] < 0 or self.lesion_count_range[0] > self.lesion_count_range[1]:
            raise ValueError(f"bad lesion count range {self.lesion_count_range}")


def _ellipsoid_mask(shape, spacing, center_mm, axes_mm):
    coords = [np.arange(n) * s for n, s in zip(shape, spacing)]
    zz, yy, xx = np.meshgrid(*coords, indexing="ij")
    r = ((zz - center_mm[0]) / axes_mm[0]) ** 2 \
        + ((yy - center_mm[1]) / axes_mm[1]) ** 2 \
        + ((xx - center_mm[2]) / axes_mm[2]) ** 2
    return r <= 1.0


def generate_case(spec: PhantomSpec, seed: int = 0):
    """Build one deterministic case; returns (MultiPhaseCase, info dict).

    Raises RuntimeError when a lesion cannot be placed fully inside the
    organ, clear of the other lesions, within the retry budget.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in spec.shape)
    spacing = tuple(float(s) for s in spec.spacing)
    extent_mm = np.array([(n - 1) * s for n, s in zip(shape, spacing)])
    organ_center = extent_mm / 2.0
    organ = _ellipsoid_mask(shape, spacing, organ_center, spec.organ_axes_mm)

    n_lesions = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    mask = np.zeros(shape, dtype=np.uint8)
    blocked = np.zeros(shape, dtype=bool)   # existing lesions dilated by one voxel
    lesions = []
    for k in range(n_lesions):
        diameter = float(rng.uniform(*spec.lesion_diameter_range_mm))
        axes = diameter / 2.0 * rng.uniform(0.85, 1.15, size=3)
        placed = False
        for _ in range(spec.max_placement_tries):
            center = organ_center + rng.uniform(-0.6, 0.6, 3) * np.asarray(spec.organ_axes_mm)
            lesion = _ellipsoid_mask(shape, spacing, center, axes)
            if not lesion.any():
                continue
            if (lesion & ~organ).any() or (lesion & blocked).any():
                continue
            mask[lesion] = 1
            blocked |= ndimage.binary_dilation(lesion)
            lesions.append({"center_mm": center.tolist(), "axes_mm": axes.tolist(),
                            "diameter_mm": diameter})
            placed = True
            break
        if not placed:
            raise RuntimeError(
                f"could not place lesion {k + 1}/{n_lesions} (diameter {diameter:.1f} mm) "
                f"inside organ axes {spec.organ_axes_mm} after "
                f"{spec.max_placement_tries} tries"
            )

    texture_sigma_vox = spec.texture_scale_mm / np.asarray(spacing)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), texture_sigma_vox)
    std = texture.std()
    if std > 0:
        texture *= spec.texture_sigma_hu / std

    phases = []
    smooth_vox = spec.edge_smooth_mm / np.asarray(spacing)
    for pid in PHASE_ORDER:
        vol = np.full(shape, spec.background_hu, dtype=np.float32)
        vol[organ] = spec.organ_hu[pid]
        vol[mask > 0] = spec.organ_hu[pid] + spec.lesion_contrast_hu[pid]
        vol = ndimage.gaussian_filter(vol, smooth_vox)
        vol = vol + texture * organ                      # texture inside the organ only
        vol = vol + rng.normal(0.0, spec.noise_sigma_hu, shape)
        phases.append(PhaseVolume(vol.astype(np.float32), spacing, pid))

    case = MultiPhaseCase(phases, mask, subject_id=f"phantom-{seed:08d}")
    info = {"seed": int(seed), "n_lesions": n_lesions, "lesions": lesions}
    return case, info


def save_case(case: MultiPhaseCase, out_dir) -> dict:
    """Write the case volumes; returns a manifest entry with relative paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entry = {"subject_id": case.subject_id, "phases": {}, "mask": ""}
    for p in case.phases:
        name = f"{case.subject_id}_{p.phase_id}.nii.gz"
        nifti.save_volume(out_dir / name, p.voxels.astype(np.float32), p.spacing)
        entry["phases"][p.phase_id] = name
    mask_name = f"{case.subject_id}_mask.nii.gz"
    nifti.save_volume(out_dir / mask_name, case.mask.astype(np.uint8), case.spacing)
    entry["mask"] = mask_name
    return entry


def generate_dataset(spec: PhantomSpec, n_train: int, n_test: int, seed: int, out_dir):
    """Write train/test cases plus manifests; per-case seeds never collide.

    Returns (train_manifest_path, test_manifest_path).
    """
    if n_train < 1 or n_test < 0:
        raise ValueError("need n_train >= 1 and n_test >= 0")
    out_dir = Path(out_dir)
    case_seeds = np.random.SeedSequence(seed).generate_state(n_train + n_test)
    entries = []
    infos = []
    for s in case_seeds:
        case, info = generate_case(spec, int(s))
        entries.append(save_case(case, out_dir / "volumes"))
        infos.append(info)
        # manifests point into volumes/
        entries[-1] = {
            "subject_id": entries[-1]["subject_id"],
            "phases": {k: f"volumes/{v}" for k, v in entries[-1]["phases"].items()},
            "mask": f"volumes/{entries[-1]['mask']}",
        }
    train_path = out_dir / "train.json"
    test_path = out_dir / "test.json"
    nifti.save_manifest(train_path, entries[:n_train], extra={"seed": seed})
    nifti.save_manifest(test_path, entries[n_train:], extra={"seed": seed})
    (out_dir / "cases.json").write_text(json.dumps(infos, indent=2))
    return train_path, test_path
