"""Training-time augmentation: intensity, rigid, affine, and elastic.

Magnitudes and probabilities below are package defaults chosen to keep
phantom lesions topologically intact; they are not validated against any
clinical protocol. Composition order is fixed: spatial first, intensity
second. The mask is only ever co-transformed geometrically (nearest
neighbor), never intensity-adjusted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import PatchSample


@dataclass
class AugmentPolicy:
    brightness_range: tuple = (-0.1, 0.1)
    contrast_range: tuple = (0.9, 1.1)
    noise_sigma_range: tuple = (0.0, 0.05)
    rotation_deg: float = 10.0          # max |angle| per axis
    translation_vox: float = 4.0        # max |shift| per axis
    flip_axes: tuple = (0, 1, 2)
    shear_range: tuple = (-0.05, 0.05)
    scale_range: tuple = (0.9, 1.1)
    elastic_alpha: float = 2.0          # displacement magnitude, voxels
    elastic_sigma: float = 4.0          # displacement smoothing, voxels
    p_brightness: float = 0.3
    p_contrast: float = 0.3
    p_noise: float = 0.3
    p_flip: float = 0.5
    p_rotate: float = 0.3
    p_translate: float = 0.3
    p_affine: float = 0.2
    p_elastic: float = 0.2

    def __post_init__(self):
        for name in ("p_brightness", "p_contrast", "p_noise", "p_flip", "p_rotate",
                     "p_translate", "p_affine", "p_elastic"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("brightness_range", "contrast_range", "noise_sigma_range",
                     "shear_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not well ordered: ({lo}, {hi})")

    @classmethod
    def identity(cls):
        return cls(p_brightness=0, p_contrast=0, p_noise=0, p_flip=0, p_rotate=0,
                   p_translate=0, p_affine=0, p_elastic=0)


def intensity_augment(patch: PatchSample, policy: AugmentPolicy, seed: int = 0) -> PatchSample:
    """Brightness / contrast / noise on the image channels, clamped to [0, 1]."""
    rng = np.random.default_rng(seed)
    img = patch.image.astype(np.float32).copy()
    if rng.random() < policy.p_brightness:
        img += rng.uniform(*policy.brightness_range)
    if rng.random() < policy.p_contrast:
        factor = rng.uniform(*policy.contrast_range)
        mean = img.mean(axis=(1, 2, 3), keepdims=True)
        img = (img - mean) * factor + mean
    if rng.random() < policy.p_noise:
        sigma = rng.uniform(*policy.noise_sigma_range)
        if sigma > 0:
            img += rng.normal(0.0, sigma, size=img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return PatchSample(img, patch.mask.copy(), patch.origin, patch.patch_size,
                       patch.phase_ids)


def _rotation_matrix(angles_rad):
    ax, ay, az = angles_rad
    rx = np.array([[1, 0, 0],
                   [0, np.cos(ax), -np.sin(ax)],
                   [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)],
                   [0, 1, 0],
                   [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0],
                   [np.sin(az), np.cos(az), 0],
                   [0, 0, 1]])
    return rz @ ry @ rx


def _resample(img, mask, matrix, offset, elastic=None):
    """Pull-back resampling around the grid center; trilinear image, nearest mask."""
    center = (np.asarray(mask.shape) - 1) / 2.0
    grid = np.indices(mask.shape, dtype=np.float64)
    rel = grid - center.reshape(3, 1, 1, 1)
    coords = np.einsum("ij,jdhw->idhw", matrix, rel) + (center - offset).reshape(3, 1, 1, 1)
    if elastic is not None:
        coords = coords + np.stack(elastic)
    out_img = np.empty_like(img)
    for ch in range(img.shape[0]):
        out_img[ch] = ndimage.map_coordinates(img[ch], coords, order=1, mode="constant")
    out_mask = ndimage.map_coordinates(mask, coords, order=0, mode="constant")
    return out_img, out_mask


def rigid_transform(patch: PatchSample, angles_deg, translation_vox=(0.0, 0.0, 0.0)) -> PatchSample:
    """Rotate (about the patch center) and translate by fixed amounts."""
    matrix = _rotation_matrix(np.deg2rad(np.asarray(angles_deg, dtype=float))).T
    offset = np.asarray(translation_vox, dtype=float)
    img, mask = _resample(patch.image, patch.mask, matrix, offset)
    return PatchSample(img, mask, patch.origin, patch.patch_size, patch.phase_ids)


def spatial_augment(patch: PatchSample, policy: AugmentPolicy, seed: int = 0) -> PatchSample:
    """Geometric transforms; image and mask share one sampled transform.

    Flips are applied by exact slicing. Rotation, translation, shear/scale
    and elastic displacement combine into a single inverse coordinate map
    resampled once (trilinear image, nearest mask). With none of those
    selected the patch passes through bitwise unchanged.
    """
    rng = np.random.default_rng(seed)
    img = patch.image
    mask = patch.mask

    flip = [ax for ax in policy.flip_axes if rng.random() < policy.p_flip]
    if flip:
        spatial_axes = tuple(ax + 1 for ax in flip)
        img = np.flip(img, axis=spatial_axes).copy()
        mask = np.flip(mask, axis=tuple(flip)).copy()

    matrix = np.eye(3)
    offset = np.zeros(3)
    resample = False
    if rng.random() < policy.p_rotate:
        angles = np.deg2rad(rng.uniform(-policy.rotation_deg, policy.rotation_deg, 3))
        # Inverse map: output voxels pull from rotated input coordinates.
        matrix = matrix @ _rotation_matrix(angles).T
        resample = True
    if rng.random() < policy.p_affine:
        scale = rng.uniform(*policy.scale_range, 3)
        shear = rng.uniform(*policy.shear_range, 3)
        aff = np.diag(scale)
        aff[0, 1] += shear[0]
        aff[1, 2] += shear[1]
        aff[0, 2] += shear[2]
        matrix = matrix @ np.linalg.inv(aff)
        resample = True
    if rng.random() < policy.p_translate:
        offset = rng.uniform(-policy.translation_vox, policy.translation_vox, 3)
        resample = True
    elastic = None
    if rng.random() < policy.p_elastic and policy.elastic_alpha > 0:
        elastic = [
            ndimage.gaussian_filter(rng.uniform(-1, 1, mask.shape), policy.elastic_sigma)
            * policy.elastic_alpha
            for _ in range(3)
        ]
        resample = True

    if not resample:
        return PatchSample(img, mask, patch.origin, patch.patch_size, patch.phase_ids)

    out_img, out_mask = _resample(img, mask, matrix, offset, elastic)
    return PatchSample(out_img, out_mask, patch.origin, patch.patch_size, patch.phase_ids)


def augment(patch: PatchSample, policy: AugmentPolicy, seed: int = 0) -> PatchSample:
    """Spatial then intensity, each with a child seed of ``seed``."""
    s_spatial, s_intensity = np.random.SeedSequence(seed).generate_state(2)
    patch = spatial_augment(patch, policy, int(s_spatial))
    return intensity_augment(patch, policy, int(s_intensity))
