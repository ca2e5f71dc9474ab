"""Domain-shift transforms for preprocessed (ROI, [0, 1]) phantom volumes."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .grid import LabelMap, Volume, resample

NOISE_LEVELS = (0.01, 1.0, 2.0, 4.0, 6.0, 8.0)
GRAY_LEVELS = 255

_AXES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


def poisson_sample(intensity, n: float, rng: np.random.Generator) -> np.ndarray:
    """``n * Poisson(I / n)`` in gray-level units: mean ``I``, variance ``n * I``."""
    if not np.isfinite(n) or n <= 0:
        raise ValidationError(f"noise level must be positive, got {n}")
    lam = np.asarray(intensity, dtype=np.float64) / n
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValidationError("intensities must be finite and nonnegative")
    return rng.poisson(lam) * float(n)


def add_poisson_noise(vol: Volume, n: float, seed: int) -> Volume:
    """Photon-count style noise at level ``n``.

    Intensities are quantised to integers in [0, 255]; each voxel is replaced
    by ``n * Poisson(I / n)`` and the result mapped back to [0, 1] (clamped).
    Mean is preserved and the variance is ``n * I`` in gray-level units.
    """
    if not np.isfinite(n) or n <= 0:
        raise ValidationError(f"noise level must be positive, got {n}")
    data = vol.data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ValidationError("volume has non-finite intensities")
    levels = np.rint(np.clip(data, 0.0, 1.0) * GRAY_LEVELS)
    out = poisson_sample(levels, n, np.random.default_rng(seed)) / GRAY_LEVELS
    return vol.with_data(np.clip(out, 0.0, 1.0).astype(np.float32))


def contrast_enhance(vol: Volume, heart_mask: np.ndarray, delta: float) -> Volume:
    """Raise intensities inside ``heart_mask`` by ``delta``.

    The full offset applies on the mask; a 1-voxel Gaussian falloff spills
    just outside it.  Output is clamped to [0, 1].
    """
    mask = np.asarray(heart_mask, dtype=bool)
    if mask.shape != vol.dims:
        raise ValidationError(f"mask shape {mask.shape} != volume dims {vol.dims}")
    if not mask.any():
        raise ValidationError("contrast mask is empty")
    if delta == 0:
        return vol
    m = mask.astype(np.float64)
    weight = np.maximum(m, ndimage.gaussian_filter(m, sigma=1.0, mode="nearest"))
    out = vol.data.astype(np.float64) + delta * weight
    return vol.with_data(np.clip(out, 0.0, 1.0).astype(np.float32))


def flip_axis(vol: Volume, labels: LabelMap, axis) -> tuple[Volume, LabelMap]:
    if axis not in _AXES:
        raise ValidationError(f"axis must be one of x, y, z (got {axis!r})")
    ax = _AXES[axis]
    return (vol.with_data(np.flip(vol.data, axis=ax)),
            labels.with_labels(np.flip(labels.labels, axis=ax)))


def _fit_dims(arr: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    out = arr[tuple(slice(0, d) for d in dims)]
    pad = [(0, d - s) for d, s in zip(dims, out.shape)]
    if any(p[1] for p in pad):
        out = np.pad(out, pad, mode="edge")
    return out


def resample_degrade(vol: Volume, labels: LabelMap, factor: float) -> tuple[Volume, LabelMap]:
    """Thick-slice emulation: downsample along z by ``factor`` then restore.

    The label map is returned unchanged; slice thickness alters the image, not
    the anatomy.
    """
    if not np.isfinite(factor) or factor < 1:
        raise ValidationError(f"degrade factor must be >= 1, got {factor}")
    if factor == 1:
        return vol, labels
    sx, sy, sz = vol.spacing
    coarse = resample(vol, (sx, sy, sz * factor))
    restored = resample(coarse, vol.spacing)
    data = _fit_dims(restored.data, vol.dims)
    return vol.with_data(data), labels


def insert_artifact(vol: Volume, seed: int, center: Sequence[float] | None = None) -> Volume:
    """Metal-implant analog: a saturated ellipsoid plus 4-8 in-plane streaks."""
    rng = np.random.default_rng(seed)
    dims = np.asarray(vol.dims)
    if center is None:
        center = dims / 2.0 + rng.uniform(-0.2, 0.2, size=3) * dims
    center = np.asarray(center, dtype=np.float64)
    radii = rng.uniform(1.5, 3.0, size=3) * max(1.0, dims.min() / 32.0)
    x, y, z = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    rel = [(x - center[0]), (y - center[1]), (z - center[2])]
    blob = sum((r / a) ** 2 for r, a in zip(rel, radii)) <= 1.0
    data = vol.data.astype(np.float64)
    n_streaks = int(rng.integers(4, 9))
    zspan = radii[2] + 2.0
    in_slab = np.abs(rel[2]) <= zspan
    rxy = np.hypot(rel[0], rel[1])
    streaks = np.zeros_like(data)
    for k in range(n_streaks):
        theta = rng.uniform(0.0, np.pi)
        amp = rng.uniform(0.15, 0.35) * (1.0 if k % 2 == 0 else -1.0)
        # perpendicular distance to a line through the blob centre
        dist = np.abs(-np.sin(theta) * rel[0] + np.cos(theta) * rel[1])
        streaks += amp * np.exp(-0.5 * (dist / 0.8) ** 2) * np.exp(-rxy / (dims.min() / 2.0))
    data = data + np.where(in_slab, streaks, 0.0)
    data[blob] = 1.0
    return vol.with_data(np.clip(data, 0.0, 1.0).astype(np.float32))


def displacement_field(dims: Sequence[int], magnitude: float, seed: int,
                       smoothness: float = 4.0) -> np.ndarray:
    """Smooth random field, shape (3, *dims), with peak vector length ``magnitude``."""
    rng = np.random.default_rng(seed)
    field = np.stack([ndimage.gaussian_filter(rng.standard_normal(tuple(dims)), smoothness,
                                              mode="nearest") for _ in range(3)])
    peak = np.sqrt((field ** 2).sum(axis=0)).max()
    if peak == 0:
        return np.zeros_like(field)
    return field * (magnitude / peak)


def deform(vol: Volume, labels: LabelMap, magnitude: float, seed: int) -> tuple[Volume, LabelMap]:
    """Warp both grids with the same smooth random displacement field."""
    if not np.isfinite(magnitude) or magnitude < 0:
        raise ValidationError(f"deformation magnitude must be >= 0, got {magnitude}")
    if vol.dims != labels.dims:
        raise ValidationError("volume and labels must share dims")
    if magnitude == 0:
        return vol, labels
    field = displacement_field(vol.dims, magnitude, seed)
    grid = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in vol.dims), indexing="ij")
    coords = [g + f for g, f in zip(grid, field)]
    warped = ndimage.map_coordinates(vol.data.astype(np.float64), coords, order=1, mode="nearest")
    warped_lab = ndimage.map_coordinates(labels.labels, coords, order=0, mode="nearest")
    return (vol.with_data(np.clip(warped, 0.0, 1.0).astype(np.float32)),
            labels.with_labels(warped_lab.astype(np.uint8)))
