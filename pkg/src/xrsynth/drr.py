"""Digitally reconstructed radiographs by parallel projection along y.

The exponent is positive, so denser tissue gives a brighter pixel (radiograph
display polarity). This is intentionally not the physical transmission law.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volio import AIR_HU, CtVolume, GrayImage


class DegenerateRangeError(ValueError):
    """Raised when an image has no dynamic range to normalize."""


@dataclass(frozen=True)
class DrrParams:
    mu_water: float = 0.2  # cm^-1
    beta: float = 0.02

    def __post_init__(self):
        if not self.mu_water > 0:
            raise ValueError("mu_water must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")


def attenuation_sum(vol: CtVolume) -> np.ndarray:
    """Per-column sum of ``G + 1000`` over y, float64, ascending-y order."""
    nx, ny, nz = vol.dims
    acc = np.zeros((nx, nz), dtype=np.float64)
    for y in range(ny):
        acc += vol.voxels[:, y, :].astype(np.float64) - AIR_HU
    return acc


def attenuation_map64(vol: CtVolume, params: DrrParams = DrrParams()) -> np.ndarray:
    ny = vol.dims[1]
    return attenuation_sum(vol) * (params.mu_water / (ny * 1000.0))


def attenuation_map(vol: CtVolume, params: DrrParams = DrrParams()) -> GrayImage:
    """Average attenuation map of shape ``(nx, nz)``."""
    return GrayImage(attenuation_map64(vol, params).astype(np.float32), "raw")


def drr(vol: CtVolume, params: DrrParams = DrrParams()) -> GrayImage:
    mu_av = attenuation_map64(vol, params)
    return GrayImage(np.exp(params.beta * mu_av).astype(np.float32), "raw_drr")


def rescale_unit(values: np.ndarray) -> GrayImage:
    """Min-max rescale an array to a unit image, computed in float64."""
    px = np.asarray(values, dtype=np.float64)
    lo, hi = px.min(), px.max()
    if not hi > lo:
        raise DegenerateRangeError("cannot normalize an image with a single pixel value")
    return GrayImage(((px - lo) / (hi - lo)).astype(np.float32), "unit")


def normalize_unit(img: GrayImage) -> GrayImage:
    """Min-max rescale to [0, 1]; raises DegenerateRangeError for a constant image."""
    return rescale_unit(img.pixels)
