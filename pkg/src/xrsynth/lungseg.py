"""Threshold-and-components lung segmentation in CT, and its 2D projection."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volio import HU_MAX, HU_MIN, CtVolume, GrayImage

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass(frozen=True)
class SegParams:
    hu_threshold: float = -500.0
    connectivity: int = 8
    max_components: int = 2
    exclude_border_components: bool = True

    def __post_init__(self):
        if not HU_MIN <= self.hu_threshold <= HU_MAX:
            raise ValueError(f"hu_threshold must lie in [{HU_MIN}, {HU_MAX}]")
        if self.connectivity not in _STRUCTURES:
            raise ValueError("connectivity must be 4 or 8")
        if self.max_components < 1:
            raise ValueError("max_components must be >= 1")


def binarize(vol: CtVolume, params: SegParams = SegParams()) -> np.ndarray:
    return vol.voxels < params.hu_threshold


def fill_holes_2d(mask: np.ndarray) -> np.ndarray:
    """Fill background regions that do not reach the image border (4-connected)."""
    return ndimage.binary_fill_holes(mask, structure=_STRUCTURES[4])


def select_components(binary: np.ndarray, params: SegParams = SegParams()) -> np.ndarray:
    """Keep the ``max_components`` largest in-slice components of a 2D mask.

    Ties in size go to the component whose first pixel comes earlier in scan
    order; ``ndimage.label`` numbers components in that order.
    """
    labels, count = ndimage.label(binary, structure=_STRUCTURES[params.connectivity])
    if count == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    sizes[0] = 0
    if params.exclude_border_components:
        border = np.concatenate(
            [labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]]
        )
        sizes[np.unique(border)] = 0
    candidates = np.flatnonzero(sizes)
    if candidates.size == 0:
        return np.zeros_like(binary, dtype=bool)
    order = sorted(candidates, key=lambda lab: (-sizes[lab], lab))
    keep = np.zeros(count + 1, dtype=bool)
    keep[order[: params.max_components]] = True
    return keep[labels]


def lung_slice(binary_slice: np.ndarray, params: SegParams = SegParams()) -> np.ndarray:
    return fill_holes_2d(select_components(binary_slice, params))


def lung_mask_3d(vol: CtVolume, params: SegParams = SegParams(), workers: int = 1) -> np.ndarray:
    """3D lung mask built slice by slice along z."""
    binary = binarize(vol, params)
    nz = binary.shape[2]
    out = np.zeros(binary.shape, dtype=bool)

    def run(z):
        out[:, :, z] = lung_slice(binary[:, :, z], params)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(nz)))
    else:
        for z in range(nz):
            run(z)
    return out


def project_mask(mask: np.ndarray) -> np.ndarray:
    """Collapse a 3D mask along y: a pixel is set if any voxel in its column is."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError("project_mask expects a 3D mask")
    return mask.any(axis=1)


def threshold_prediction(img: GrayImage, t: float = 0.95) -> np.ndarray:
    if img.range_tag != "unit":
        raise ValueError(f"threshold_prediction expects a unit image, got {img.range_tag!r}")
    if not 0.0 < t < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return img.pixels >= np.float32(t)
