"""Radiograph preprocessing and lung-structure fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .drr import DegenerateRangeError, normalize_unit, rescale_unit
from .lungseg import threshold_prediction
from .volio import GrayImage

NBINS = 256


@dataclass(frozen=True)
class EnhanceParams:
    w: float = 1.0
    clahe_window: Tuple[int, int] = (40, 40)
    clahe_clip: float = 0.01
    lung_mean: float = 0.0
    lung_std: float = 0.5
    preprocess: bool = True

    def __post_init__(self):
        if not self.w >= 0:
            raise ValueError("enhancement weight w must be >= 0")
        if len(self.clahe_window) != 2 or min(self.clahe_window) < 2:
            raise ValueError("clahe_window needs two sizes >= 2")
        if not 0 < self.clahe_clip <= 1:
            raise ValueError("clahe_clip must lie in (0, 1]")
        if not self.lung_std > 0:
            raise ValueError("lung_std must be positive")


def _require_unit(img: GrayImage, name: str = "image") -> None:
    if img.range_tag != "unit":
        raise ValueError(f"{name} must be a unit-range image, got {img.range_tag!r}")


def _bins(px: np.ndarray) -> np.ndarray:
    return np.minimum((px.astype(np.float64) * NBINS).astype(np.intp), NBINS - 1)


def hist_equalize(img: GrayImage) -> GrayImage:
    """Global 256-bin histogram equalization; each level maps to its CDF value."""
    _require_unit(img)
    bins = _bins(img.pixels)
    cdf = np.cumsum(np.bincount(bins.ravel(), minlength=NBINS)) / bins.size
    return GrayImage(cdf[bins].astype(np.float32), "unit")


def _tile_edges(n: int, size: int) -> np.ndarray:
    edges = list(range(0, n, size)) + [n]
    return np.asarray(edges)


def _tile_mapping(bins: np.ndarray, clip: float) -> np.ndarray:
    hist = np.bincount(bins.ravel(), minlength=NBINS).astype(np.float64)
    n = bins.size
    limit = clip * n
    excess = np.clip(hist - limit, 0.0, None).sum()
    if excess > 0:
        hist = np.minimum(hist, limit) + excess / NBINS
    return np.cumsum(hist) / n


def _interp_axis(coord: np.ndarray, centers: np.ndarray):
    """Lower tile index, upper tile index and weight of the upper one."""
    lo = np.clip(np.searchsorted(centers, coord, side="right") - 1, 0, len(centers) - 1)
    hi = np.minimum(lo + 1, len(centers) - 1)
    span = centers[hi] - centers[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        wt = np.where(span > 0, (coord - centers[lo]) / np.where(span > 0, span, 1), 0.0)
    return lo, hi, np.clip(wt, 0.0, 1.0)


def clahe(img: GrayImage, window: Tuple[int, int] = (40, 40), clip: float = 0.01) -> GrayImage:
    """Contrast-limited adaptive histogram equalization.

    The image is cut into ``window``-sized tiles (the last tile along an axis
    may be smaller). Each tile gets a 256-bin histogram clipped at
    ``clip * tile_pixels`` with the excess spread evenly over all bins, and its
    CDF becomes that tile's mapping. A pixel's value is bilinearly interpolated
    from the mappings of the four nearest tile centres; beyond the outermost
    centres the nearest mapping is used.
    """
    _require_unit(img)
    if not 0 < clip <= 1:
        raise ValueError("clip must lie in (0, 1]")
    wx, wz = int(window[0]), int(window[1])
    nx, nz = img.pixels.shape
    if wx > nx or wz > nz:
        raise ValueError(f"window {window} is larger than the image {img.dims}")
    bins = _bins(img.pixels)
    ex, ez = _tile_edges(nx, wx), _tile_edges(nz, wz)
    maps = np.empty((len(ex) - 1, len(ez) - 1, NBINS))
    for i in range(len(ex) - 1):
        for j in range(len(ez) - 1):
            maps[i, j] = _tile_mapping(bins[ex[i] : ex[i + 1], ez[j] : ez[j + 1]], clip)

    cx = (ex[:-1] + ex[1:] - 1) / 2.0
    cz = (ez[:-1] + ez[1:] - 1) / 2.0
    x0, x1, ax = _interp_axis(np.arange(nx, dtype=np.float64), cx)
    z0, z1, az = _interp_axis(np.arange(nz, dtype=np.float64), cz)
    X0, Z0 = np.meshgrid(x0, z0, indexing="ij")
    X1, Z1 = np.meshgrid(x1, z1, indexing="ij")
    AX, AZ = np.meshgrid(ax, az, indexing="ij")
    out = (
        (1 - AX) * (1 - AZ) * maps[X0, Z0, bins]
        + AX * (1 - AZ) * maps[X1, Z0, bins]
        + (1 - AX) * AZ * maps[X0, Z1, bins]
        + AX * AZ * maps[X1, Z1, bins]
    )
    return GrayImage(np.clip(out, 0.0, 1.0).astype(np.float32), "unit")


def normalize_lung_area(
    img: GrayImage, mask: np.ndarray, mean: float = 0.0, std: float = 0.5
) -> GrayImage:
    """Affine-rescale the whole image so the masked pixels hit ``mean`` and ``std``.

    Uses the population standard deviation.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.pixels.shape:
        raise ValueError(f"mask dims {mask.shape} do not match image dims {img.pixels.shape}")
    if not mask.any():
        raise ValueError("lung mask is empty")
    px = img.pixels.astype(np.float64)
    inside = px[mask]
    m, s = inside.mean(), inside.std()
    if not s > 0:
        raise DegenerateRangeError("masked pixels have zero variance")
    a = std / s
    return GrayImage((a * (px - m) + mean).astype(np.float32), "zero_mean")


def fuse(cxr: GrayImage, lung: GrayImage, w: float) -> GrayImage:
    """``normalize_unit(cxr + w * lung)``."""
    _require_unit(cxr, "cxr")
    _require_unit(lung, "lung image")
    if cxr.dims != lung.dims:
        raise ValueError(f"cxr dims {cxr.dims} do not match lung dims {lung.dims}")
    if w < 0:
        raise ValueError("w must be >= 0")
    total = cxr.pixels.astype(np.float64) + w * lung.pixels.astype(np.float64)
    return rescale_unit(total)


def baseline_extract(cxr: GrayImage, mask: np.ndarray, size: int = 15) -> GrayImage:
    """Model-free stand-in for a lung-extraction network.

    High-pass detail (image minus its ``size`` x ``size`` box blur) inside the
    mask, rescaled to [0, 1]. Returns zeros if the result has no range.
    """
    _require_unit(cxr, "cxr")
    mask = np.asarray(mask, dtype=bool)
    px = cxr.pixels.astype(np.float64)
    detail = (px - ndimage.uniform_filter(px, size=size, mode="reflect")) * mask
    try:
        return rescale_unit(detail)
    except DegenerateRangeError:
        return GrayImage(np.zeros_like(px, dtype=np.float32), "unit")


def fallback_lung_mask(cxr_unit: GrayImage, t: float = 0.5) -> np.ndarray:
    """Crude lung mask for runs without a segmentation: dark pixels of the image."""
    inverted = GrayImage(1.0 - cxr_unit.pixels.astype(np.float64), "unit")
    return threshold_prediction(inverted, t)


def preprocess(cxr: GrayImage, params: EnhanceParams = EnhanceParams()) -> GrayImage:
    """Unit-normalize, equalize, then CLAHE; rescaled so the result spans [0, 1]."""
    img = cxr if _spans_unit(cxr) else normalize_unit(cxr)
    if not params.preprocess:
        return img
    img = clahe(hist_equalize(img), params.clahe_window, params.clahe_clip)
    return normalize_unit(img)


def _spans_unit(img: GrayImage) -> bool:
    return img.range_tag == "unit" and img.pixels.min() == 0.0 and img.pixels.max() == 1.0


@dataclass
class EnhanceResult:
    enhanced: GrayImage
    cxr_pre: GrayImage
    lung_unit: GrayImage
    extraction_input: Optional[GrayImage] = None


def enhance_pipeline(
    cxr: GrayImage,
    lung_pred: Optional[GrayImage],
    lung_mask: Optional[np.ndarray],
    params: EnhanceParams = EnhanceParams(),
) -> EnhanceResult:
    """Preprocess ``cxr`` and fuse it with a lung-structure image at weight ``params.w``.

    With ``lung_pred=None`` the lung image comes from ``baseline_extract``
    (using ``fallback_lung_mask`` if no mask is given either).
    ``extraction_input`` is the lung-normalized image an extraction model
    would consume; it is only produced when a mask is available.
    """
    cxr_pre = preprocess(cxr, params)
    mask = lung_mask
    if lung_pred is None:
        if mask is None:
            mask = fallback_lung_mask(cxr_pre)
        lung_pred = baseline_extract(cxr_pre, mask)
    if lung_pred.dims != cxr_pre.dims:
        raise ValueError(f"lung image dims {lung_pred.dims} do not match cxr dims {cxr_pre.dims}")
    lung_unit = lung_pred if _spans_unit(lung_pred) else normalize_unit(lung_pred)

    extraction_input = None
    if mask is not None and np.any(mask):
        try:
            extraction_input = normalize_lung_area(cxr_pre, mask, params.lung_mean, params.lung_std)
        except DegenerateRangeError:
            extraction_input = None
    enhanced = fuse(cxr_pre, lung_unit, params.w)
    return EnhanceResult(enhanced, cxr_pre, lung_unit, extraction_input)
