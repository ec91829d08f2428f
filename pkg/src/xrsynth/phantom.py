"""Deterministic synthetic CT phantoms with analytic ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volio import AIR_HU, CtVolume, NoduleAnnotation, Rating

KINDS = ("air", "water", "single-voxel", "two-ellipsoid")

DEFAULT_RATINGS = ((5, 5), (5, 5), (4, 5))


@dataclass
class Phantom:
    volume: CtVolume
    lung_mask: np.ndarray
    nodules: list = field(default_factory=list)
    # (center, radii) per lung, voxel units
    ellipsoids: list = field(default_factory=list)


@dataclass(frozen=True)
class EllipsoidSpec:
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]

    def contains(self, grid) -> np.ndarray:
        x, y, z = grid
        (cx, cy, cz), (rx, ry, rz) = self.center, self.radii
        return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def uniform_phantom(kind: str, dims: Sequence[int]) -> Phantom:
    dims = tuple(int(n) for n in dims)
    if kind == "air":
        vox = np.full(dims, AIR_HU, dtype=np.int16)
    elif kind == "water":
        vox = np.zeros(dims, dtype=np.int16)
    elif kind == "single-voxel":
        vox = np.full(dims, AIR_HU, dtype=np.int16)
        vox[tuple(n // 2 for n in dims)] = 0
    else:
        raise ValueError(f"unknown uniform phantom kind {kind!r}")
    return Phantom(CtVolume(vox), np.zeros(dims, dtype=bool))


def _sample_lungs(rng: np.random.Generator, dims, min_radius: float):
    nx, ny, nz = dims
    radii = []
    for _ in range(2):
        rx = max(min_radius, rng.uniform(0.12, 0.16) * nx)
        ry = max(min_radius, rng.uniform(0.18, 0.25) * ny)
        rz = max(min_radius, rng.uniform(0.25, 0.35) * nz)
        radii.append((rx, ry, rz))
    cx, cy, cz = (nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2
    lungs = []
    for side, (rx, ry, rz) in zip((-1, 1), radii):
        dx = rx + rng.uniform(2.0, max(2.5, 0.06 * nx))
        center = (
            cx + side * dx,
            cy + rng.uniform(-0.03, 0.03) * ny,
            cz + rng.uniform(-0.05, 0.05) * nz,
        )
        lungs.append(EllipsoidSpec(center, (rx, ry, rz)))
    return lungs


def two_ellipsoid_phantom(
    dims: Sequence[int] = (128, 128, 128),
    seed: int = 0,
    hole: bool = False,
    nodule: bool = False,
    nodule_hu: int = 50,
    ratings: Sequence[Tuple[int, int]] = DEFAULT_RATINGS,
    min_radius: float = 0.0,
    spacing_mm=(1.0, 1.0, 1.0),
) -> Phantom:
    """Water-equivalent torso with two air-filled lung ellipsoids.

    The torso is an elliptic cylinder along z surrounded by air that touches
    the slice borders, with a dense spine column behind the lungs. Lung voxels
    carry seeded texture kept below -600 HU. ``hole`` places a water pocket
    inside the first lung; ``nodule`` places a solid sphere inside the second
    and returns a matching annotation. The returned ``lung_mask`` is the
    union of the filled ellipsoids.
    """
    dims = tuple(int(n) for n in dims)
    nx, ny, nz = dims
    rng = np.random.default_rng(seed)
    grid = _grid(dims)
    x, y, z = grid
    cx, cy = (nx - 1) / 2, (ny - 1) / 2
    bx, by = 0.45 * nx, 0.42 * ny
    body = ((x - cx) / bx) ** 2 + ((y - cy) / by) ** 2 <= 1.0
    spine_r = max(1.5, 0.06 * nx)
    spine = (x - cx) ** 2 + (y - (cy - 0.28 * ny)) ** 2 <= spine_r**2
    inner_body = ndimage.binary_erosion(body, iterations=2)

    for _ in range(100):
        lungs = _sample_lungs(rng, dims, min_radius)
        masks = [e.contains(grid) for e in lungs]
        lung = masks[0] | masks[1]
        disjoint = not np.any(ndimage.binary_dilation(masks[0], iterations=2) & masks[1])
        if disjoint and not np.any(lung & ~inner_body) and not np.any(lung & spine):
            break
    else:
        raise ValueError(f"could not place two lungs in a phantom of dims {dims}")

    vox = np.full(dims, AIR_HU, dtype=np.float64)
    tissue = 40.0 + rng.normal(0.0, 15.0, size=dims)
    vox[body] = tissue[body]
    vox[spine] = 600.0 + rng.normal(0.0, 40.0, size=dims)[spine]
    lung_hu = np.clip(-840.0 + rng.normal(0.0, 50.0, size=dims), -1000.0, -600.0)
    vox[lung] = lung_hu[lung]

    if hole:
        e = lungs[0]
        r = max(1.0, min(e.radii) / 3.0)
        pocket = sum((g - c) ** 2 for g, c in zip(grid, e.center)) <= r**2
        vox[pocket] = 0.0

    nodules = []
    if nodule:
        e = lungs[1]
        rmin = min(e.radii)
        rn = max(1.0, rmin / 4.0)
        c = (e.center[0], e.center[1], e.center[2] + rmin / 4.0)
        sphere = sum((g - cc) ** 2 for g, cc in zip(grid, c)) <= rn**2
        sphere &= masks[1]
        vox[sphere] = float(nodule_hu)
        coords = tuple(tuple(int(v) for v in p) for p in np.argwhere(sphere))
        nodules.append(
            NoduleAnnotation("nodule-1", coords, tuple(Rating(t, s) for t, s in ratings))
        )

    volume = CtVolume(np.clip(np.rint(vox), -1024, 3071).astype(np.int16), spacing_mm)
    return Phantom(volume, lung, nodules, lungs)


def make_phantom(kind: str, dims: Sequence[int], seed: int = 0, **kwargs) -> Phantom:
    if kind == "two-ellipsoid":
        return two_ellipsoid_phantom(dims, seed, **kwargs)
    if kwargs:
        raise ValueError(f"options {sorted(kwargs)} only apply to two-ellipsoid phantoms")
    return uniform_phantom(kind, dims)
