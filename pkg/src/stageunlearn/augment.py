"""Eight-step spatial and intensity augmentation applied to a VolumeSample.

Spatial steps move image and label together, the label through
nearest-neighbour resampling so it stays binary. Intensity steps only touch
the image, which is clipped back to [0, 1] at the end.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import AugmentationConfig, VolumeSample


def _clamp_range(rng_range: Sequence[float], lo: float, hi: float) -> tuple[float, float]:
    a, b = sorted(float(v) for v in rng_range)
    return max(a, lo), min(max(b, lo), hi)


def rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """Rotation about axes 0, 1 and 2 (in that order) by the given angles."""
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate_scale(
    image: np.ndarray, label: np.ndarray, angles_deg: Sequence[float], scale: float
) -> tuple[np.ndarray, np.ndarray]:
    """Rotate and zoom about the volume centre; output voxel ``o`` samples
    input position ``c + R^T (o - c) / scale``."""
    matrix = rotation_matrix(angles_deg).T / scale
    center = (np.array(image.shape) - 1) / 2.0
    offset = center - matrix @ center
    img = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    lbl = ndimage.affine_transform(label, matrix, offset=offset, order=0, mode="constant", cval=0)
    return img.astype(image.dtype), lbl.astype(label.dtype)


def mirror(image: np.ndarray, label: np.ndarray, axes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    if not axes:
        return image, label
    return np.flip(image, axis=tuple(axes)).copy(), np.flip(label, axis=tuple(axes)).copy()


def resize(vol: np.ndarray, shape: Sequence[int], order: int) -> np.ndarray:
    coords = np.meshgrid(
        *[np.linspace(0, s_in - 1, s_out) for s_in, s_out in zip(vol.shape, shape)], indexing="ij"
    )
    return ndimage.map_coordinates(vol, coords, order=order, mode="nearest")


def simulate_low_resolution(image: np.ndarray, zoom: float) -> np.ndarray:
    small = tuple(max(1, int(round(s * zoom))) for s in image.shape)
    return resize(resize(image, small, order=0), image.shape, order=3).astype(image.dtype)


def augment(sample: VolumeSample, cfg: AugmentationConfig, rng: np.random.Generator) -> VolumeSample:
    """Apply the augmentation chain; each step fires with its own probability."""
    image = sample.image.astype(np.float32, copy=True)
    label = sample.label.astype(np.uint8, copy=True)
    changed = False

    if rng.random() < cfg.p_spatial:
        angles = rng.uniform(*_clamp_range(cfg.rotation_deg, -180, 180), size=3)
        scale = rng.uniform(*_clamp_range(cfg.scale, 0.1, 10.0))
        image, label = rotate_scale(image, label, angles, scale)
        changed = True
    if rng.random() < cfg.p_noise:
        var = rng.uniform(*_clamp_range(cfg.noise_variance, 0.0, 1.0))
        image = image + rng.normal(0.0, np.sqrt(var), size=image.shape).astype(np.float32)
        changed = True
    if rng.random() < cfg.p_blur:
        sigma = rng.uniform(*_clamp_range(cfg.blur_sigma, 0.0, 5.0))
        image = ndimage.gaussian_filter(image, sigma)
        changed = True
    if rng.random() < cfg.p_brightness:
        image = image * rng.uniform(*_clamp_range(cfg.brightness, 0.0, 10.0))
        changed = True
    if rng.random() < cfg.p_contrast:
        factor = rng.uniform(*_clamp_range(cfg.contrast, 0.0, 10.0))
        mean, lo, hi = image.mean(), image.min(), image.max()
        image = np.clip((image - mean) * factor + mean, lo, hi)
        changed = True
    if rng.random() < cfg.p_gamma:
        g = rng.uniform(*_clamp_range(cfg.gamma, 0.05, 10.0))
        lo, hi = image.min(), image.max()
        if hi > lo:
            image = ((image - lo) / (hi - lo)) ** g * (hi - lo) + lo
        changed = True
    if rng.random() < cfg.p_lowres:
        image = simulate_low_resolution(image, rng.uniform(*_clamp_range(cfg.lowres_zoom, 0.1, 1.0)))
        changed = True
    flip_axes = [ax for ax in range(3) if rng.random() < cfg.p_mirror]
    if flip_axes:
        image, label = mirror(image, label, flip_axes)
        changed = True

    if not changed:
        return replace(sample, image=image, label=label)
    return replace(sample, image=np.clip(image, 0.0, 1.0).astype(np.float32), label=label)
