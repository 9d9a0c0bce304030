"""
    Distance transforms, falloff kernels and rigid translations on voxel masks.
"""

import numpy as np
from scipy import ndimage

from rtwin.errors import EmptyMaskError, ValidationError


def distance_to(mask: np.ndarray, voxel_dims) -> np.ndarray:
    """Euclidean distance (mm) from every voxel to the nearest voxel of mask; 0 inside."""
    if not mask.any():
        raise EmptyMaskError("Distance to an empty mask is undefined")
    return ndimage.distance_transform_edt(~mask, sampling=voxel_dims)


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask (or the grid)."""
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def signed_distance(mask: np.ndarray, voxel_dims) -> np.ndarray:
    """
    Distance (mm) to the surface voxels of mask: negative inside, positive
    outside, exactly 0 on the surface.
    """
    shell = surface(mask)
    distance = distance_to(shell, voxel_dims)
    return np.where(mask, -distance, distance)


def gaussian_falloff(mask: np.ndarray, voxel_dims, width: float) -> np.ndarray:
    """exp(-d^2 / (2 width^2)) of the distance d to mask; 1 inside the mask."""
    if width <= 0:
        raise ValidationError(f"Falloff width must be positive, got {width}")
    distance = distance_to(mask, voxel_dims)
    return np.exp(-(distance**2) / (2.0 * width**2))


def dilate(mask: np.ndarray, voxel_dims, margin: float) -> np.ndarray:
    if margin <= 0:
        return mask.copy()
    return distance_to(mask, voxel_dims) <= margin


def smooth(values: np.ndarray, voxel_dims, scale: float) -> np.ndarray:
    """Gaussian smoothing with a physical (mm) standard deviation."""
    sigma = [scale / d for d in voxel_dims]
    return ndimage.gaussian_filter(values.astype(np.float64), sigma=sigma, mode="constant")


def voxel_shift(displacement, voxel_dims) -> tuple[int, int, int]:
    return tuple(int(np.rint(d / v)) for d, v in zip(displacement, voxel_dims, strict=True))


def translate(
    values: np.ndarray, offset: tuple[int, int, int], fill=0, strict: bool = True
) -> np.ndarray:
    """
    Rigidly moves an array by whole voxels; vacated voxels take fill.
    With strict, raises ValidationError when a non-fill voxel would leave
    the grid.
    """
    moved = np.full_like(values, fill)
    source, target = [], []
    for size, step in zip(values.shape, offset, strict=True):
        if abs(step) >= size:
            source.append(slice(0, 0))
            target.append(slice(0, 0))
        elif step >= 0:
            source.append(slice(0, size - step))
            target.append(slice(step, size))
        else:
            source.append(slice(-step, size))
            target.append(slice(0, size + step))
    kept = values[tuple(source)]
    if strict and np.count_nonzero(kept != fill) != np.count_nonzero(values != fill):
        raise ValidationError(f"Shift {offset} moves structures outside the grid")
    moved[tuple(target)] = kept
    return moved


def voxel_centers(shape, voxel_dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Physical coordinates (mm) of voxel centres, voxel (0, 0, 0) at the origin."""
    axes = [np.arange(n) * d for n, d in zip(shape, voxel_dims, strict=True)]
    return np.meshgrid(*axes, indexing="ij")


def sphere(shape, voxel_dims, center, radius: float) -> np.ndarray:
    x, y, z = voxel_centers(shape, voxel_dims)
    squared = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    return squared <= radius**2
