"""Synthetic ultrasound-like images with paired lesion masks.

Each sample is a dark speckled background with one brighter lesion whose
boundary is a lobed ellipse r(theta) = r0 * (1 + a * cos(lobes * theta + phase)).
Multiplicative gamma speckle and a gaussian blur give the grainy texture; a
mild vertical gain ramp mimics depth-dependent brightness. The mask is the
generating shape itself, so it is exact rather than estimated from intensity.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def synth_sample(
    size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair: float32 in [0, 1] and bool, both (size, size)."""
    if size < 8:
        raise ValueError(f"image side must be at least 8, got {size}")

    cy = rng.uniform(0.35, 0.65) * size
    cx = rng.uniform(0.35, 0.65) * size
    r0 = max(rng.uniform(0.18, 0.32) * size, 3.0)
    lobes = int(rng.integers(2, 5))
    amp = rng.uniform(0.0, 0.25)
    phase = rng.uniform(0.0, 2.0 * np.pi)

    ys, xs = np.mgrid[0:size, 0:size]
    dy = ys - cy
    dx = xs - cx
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    boundary = r0 * (1.0 + amp * np.cos(lobes * theta + phase))
    mask = dist < boundary

    background = rng.uniform(0.15, 0.30)
    lesion = rng.uniform(0.55, 0.80)
    image = np.where(mask, lesion, background)

    shape_k = rng.uniform(4.0, 8.0)
    speckle = rng.gamma(shape_k, 1.0 / shape_k, size=(size, size))
    image = image * speckle

    ramp = np.linspace(rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1), size)
    image = image * ramp[:, None]

    image = ndimage.gaussian_filter(image, sigma=rng.uniform(1.0, 1.5))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, mask


def synth_dataset(
    n: int, size: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """n deterministic samples; the same seed always yields the same list."""
    rng = np.random.default_rng(seed)
    return [synth_sample(size, rng) for _ in range(n)]
