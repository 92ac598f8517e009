"""Volume containers, resampling, intensity preparation, and patch sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import nifti

#: Channel order used everywhere phases are stacked.
PHASE_ORDER = ("arterial", "delay", "venous")


def _as_tuple3(x, name="value"):
    t = tuple(float(v) for v in np.atleast_1d(x).ravel())
    if len(t) == 1:
        t = t * 3
    if len(t) != 3:
        raise ValueError(f"{name} must have 1 or 3 components, got {x!r}")
    return t


@dataclass
class PhaseVolume:
    """One contrast-phase intensity grid with its voxel spacing in mm."""

    voxels: np.ndarray
    spacing: tuple
    phase_id: str = "venous"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3-D grid, got shape {self.voxels.shape}")
        self.spacing = _as_tuple3(self.spacing, "spacing")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class MultiPhaseCase:
    """Co-registered phase volumes plus the ground-truth lesion mask."""

    phases: list
    mask: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        if not self.phases:
            raise ValueError("a case needs at least one phase")
        self.mask = np.asarray(self.mask)
        shape = self.phases[0].shape
        spacing = self.phases[0].spacing
        for p in self.phases:
            if p.shape != shape or p.spacing != spacing:
                raise ValueError("all phases must share grid shape and spacing")
        if self.mask.shape != shape:
            raise ValueError(f"mask shape {self.mask.shape} != phase shape {shape}")
        vals = np.unique(self.mask)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("mask must be binary")
        self.mask = self.mask.astype(np.uint8)

    @property
    def shape(self):
        return self.phases[0].shape

    @property
    def spacing(self):
        return self.phases[0].spacing

    @property
    def phase_ids(self):
        return tuple(p.phase_id for p in self.phases)

    def phase(self, phase_id: str) -> PhaseVolume:
        for p in self.phases:
            if p.phase_id == phase_id:
                return p
        raise KeyError(f"case {self.subject_id!r} has no phase {phase_id!r}")


@dataclass
class PatchSample:
    """A cropped sub-volume: stacked phase channels plus the mask crop."""

    image: np.ndarray          # (channels, d, h, w)
    mask: np.ndarray           # (d, h, w)
    origin: tuple
    patch_size: tuple
    phase_ids: tuple = ()

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.ndim != 4:
            raise ValueError(f"patch image must be 4-D, got shape {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError("patch image and mask grids differ")
        self.origin = tuple(int(v) for v in self.origin)
        self.patch_size = tuple(int(v) for v in self.patch_size)


def _resample_grid(arr, in_spacing, out_spacing, order, smooth=False):
    in_spacing = np.asarray(in_spacing, dtype=float)
    out_spacing = np.asarray(out_spacing, dtype=float)
    out_shape = np.maximum(1, np.rint(np.asarray(arr.shape) * in_spacing / out_spacing)).astype(int)
    if tuple(out_shape) == arr.shape and np.allclose(in_spacing, out_spacing):
        return arr.copy()
    work = np.asarray(arr, dtype=np.float32)
    if smooth and order > 0:
        # Gaussian prefilter against aliasing on downsampled axes.
        factor = out_spacing / in_spacing
        sigma = np.where(factor > 1, np.sqrt(np.maximum(factor**2 - 1, 0) / 12.0), 0.0)
        if sigma.any():
            work = ndimage.gaussian_filter(work, sigma)
    zoom = out_shape / np.asarray(arr.shape)
    # 'nearest' keeps constant volumes constant at the boundary (edge replicate).
    out = ndimage.zoom(work, zoom, order=order, mode="nearest", grid_mode=True)
    return out


def resample_isotropic(case: MultiPhaseCase, target_spacing, *, image_order: int = 1,
                       smooth_downsample: bool = False) -> MultiPhaseCase:
    """Resample a case to the target spacing (trilinear image, nearest mask)."""
    target = _as_tuple3(target_spacing, "target_spacing")
    if any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    phases = [
        PhaseVolume(
            _resample_grid(p.voxels, p.spacing, target, image_order, smooth_downsample),
            target,
            p.phase_id,
        )
        for p in case.phases
    ]
    mask = _resample_grid(case.mask, case.spacing, target, order=0)
    return MultiPhaseCase(phases, mask.astype(np.uint8), case.subject_id)


def clip_normalize(volume: PhaseVolume, lo: float = -200.0, hi: float = 200.0) -> PhaseVolume:
    """Clip intensities to [lo, hi] and map the range linearly onto [0, 1]."""
    if lo >= hi:
        raise ValueError(f"need lo < hi, got ({lo}, {hi})")
    v = np.clip(volume.voxels.astype(np.float32), lo, hi)
    v = (v - lo) / (hi - lo)
    return PhaseVolume(v, volume.spacing, volume.phase_id)


def extract_patch(case: MultiPhaseCase, origin, size, phases=None) -> PatchSample:
    """Crop a patch; out-of-range voxels are zero padded (normalized background).

    ``phases`` selects a subset of phase ids; channels are stacked in case
    order regardless of the subset's own ordering.
    """
    origin = tuple(int(v) for v in np.atleast_1d(origin))
    size = tuple(int(v) for v in np.atleast_1d(size))
    if len(origin) != 3 or len(size) != 3:
        raise ValueError("origin and size must be 3-vectors")
    if any(s <= 0 for s in size):
        raise ValueError(f"patch size must be positive, got {size}")
    shape = case.shape
    if any(o < 0 or o >= d for o, d in zip(origin, shape)):
        raise ValueError(f"origin {origin} outside grid {shape}")
    if phases is None:
        selected = list(case.phases)
    else:
        wanted = set(phases)
        unknown = wanted - set(case.phase_ids)
        if unknown:
            raise ValueError(f"unknown phases {sorted(unknown)}; case has {case.phase_ids}")
        selected = [p for p in case.phases if p.phase_id in wanted]
    if not selected:
        raise ValueError("phase subset is empty")

    src = tuple(slice(o, min(o + s, d)) for o, s, d in zip(origin, size, shape))
    dst = tuple(slice(0, sl.stop - sl.start) for sl in src)
    image = np.zeros((len(selected), *size), dtype=np.float32)
    for c, p in enumerate(selected):
        image[(c, *dst)] = p.voxels[src]
    mask = np.zeros(size, dtype=np.uint8)
    mask[dst] = case.mask[src]
    return PatchSample(image, mask, origin, size, tuple(p.phase_id for p in selected))


def _window_sums(mask, size):
    """Number of mask voxels inside each size-shaped window, per valid origin."""
    ii = np.zeros(tuple(d + 1 for d in mask.shape), dtype=np.int64)
    ii[1:, 1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    d, h, w = size
    a0, a1 = slice(0, mask.shape[0] - d + 1), slice(d, mask.shape[0] + 1)
    b0, b1 = slice(0, mask.shape[1] - h + 1), slice(h, mask.shape[1] + 1)
    c0, c1 = slice(0, mask.shape[2] - w + 1), slice(w, mask.shape[2] + 1)
    return (
        ii[a1, b1, c1] - ii[a0, b1, c1] - ii[a1, b0, c1] - ii[a1, b1, c0]
        + ii[a0, b0, c1] + ii[a0, b1, c0] + ii[a1, b0, c0] - ii[a0, b0, c0]
    )


def weighted_sample_origins(case: MultiPhaseCase, size, count: int, lesion_bias: float = 0.5,
                            seed: int = 0):
    """Draw patch origins, upweighting lesion-containing patches.

    Origins whose patch contains at least one lesion voxel carry
    ``(1 + lesion_bias)`` times the base probability mass of a background
    origin. Deterministic for a fixed seed.
    """
    size = tuple(int(v) for v in np.atleast_1d(size))
    if len(size) == 1:
        size = size * 3
    if count < 1:
        raise ValueError("count must be >= 1")
    if lesion_bias < 0:
        raise ValueError("lesion_bias must be >= 0")
    shape = case.shape
    if any(s > d for s, d in zip(size, shape)):
        raise ValueError(f"patch size {size} exceeds grid {shape}")

    grid = tuple(d - s + 1 for d, s in zip(shape, size))
    has_lesion = (_window_sums(case.mask, size) > 0).ravel()
    lesion_idx = np.flatnonzero(has_lesion)
    backgr_idx = np.flatnonzero(~has_lesion)
    n_l, n_b = lesion_idx.size, backgr_idx.size

    rng = np.random.default_rng(seed)
    total = n_l * (1.0 + lesion_bias) + n_b
    p_lesion = n_l * (1.0 + lesion_bias) / total if total > 0 else 0.0
    take_lesion = rng.random(count) < p_lesion
    flat = np.empty(count, dtype=np.int64)
    k = int(take_lesion.sum())
    if k:
        flat[take_lesion] = rng.choice(lesion_idx, size=k, replace=True)
    if count - k:
        flat[~take_lesion] = rng.choice(backgr_idx, size=count - k, replace=True)
    origins = np.stack(np.unravel_index(flat, grid), axis=1)
    return [tuple(int(v) for v in o) for o in origins]


def load_case(entry) -> MultiPhaseCase:
    """Build a MultiPhaseCase from one manifest entry (see nifti.load_manifest)."""
    phases = []
    for pid in PHASE_ORDER:
        if pid in entry["phases"]:
            voxels, spacing = nifti.load_volume(entry["phases"][pid])
            phases.append(PhaseVolume(voxels, spacing, pid))
    for pid in entry["phases"]:
        if pid not in PHASE_ORDER:
            voxels, spacing = nifti.load_volume(entry["phases"][pid])
            phases.append(PhaseVolume(voxels, spacing, pid))
    mask, _ = nifti.load_volume(entry["mask"])
    return MultiPhaseCase(phases, mask, entry["subject_id"])
