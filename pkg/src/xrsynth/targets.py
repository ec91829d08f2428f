"""Training targets: lung-only DRRs, nodule masks, paired augmentation, datasets."""

from __future__ import annotations

import hashlib
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import volio
from .drr import DrrParams, drr, normalize_unit
from .lungseg import SegParams, lung_mask_3d, project_mask
from .volio import AIR_HU, CtVolume, DatasetManifest, GrayImage, ManifestRecord

log = logging.getLogger(__name__)

CASE_FILES = {
    "source": "source.f32",
    "target": "target.f32",
    "lung_mask": "lung_mask.pgm",
    "nodule_mask": "nodule_mask.pgm",
}


@dataclass(frozen=True)
class NoduleFilter:
    min_median_texture: float = 3.0
    min_median_subtlety: float = 4.0
    min_radiologists: int = 2

    def __post_init__(self):
        for name in ("min_median_texture", "min_median_subtlety"):
            if not 1 <= getattr(self, name) <= 5:
                raise ValueError(f"{name} must lie within the 1-5 rating range")
        if self.min_radiologists < 1:
            raise ValueError("min_radiologists must be >= 1")


@dataclass(frozen=True)
class AugmentParams:
    max_rotation_deg: float = 0.0
    width_shift_frac: float = 0.0
    height_shift_frac: float = 0.0
    zoom_frac: float = 0.0
    horizontal_flip: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.max_rotation_deg < 180:
            raise ValueError("max_rotation_deg must lie in [0, 180)")
        for name in ("width_shift_frac", "height_shift_frac", "zoom_frac"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")


# augmentation ranges used for the extraction and segmentation networks
EXTRACTION_AUGMENT = AugmentParams(4.0, 0.1, 0.1, 0.2, True)
SEGMENTATION_AUGMENT = AugmentParams(2.0, 0.1, 0.2, 0.3, False)


def lung_volume(vol: CtVolume, mask: np.ndarray) -> CtVolume:
    """Replace every non-lung voxel with air so it adds no attenuation."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != vol.voxels.shape:
        raise ValueError(f"mask dims {mask.shape} do not match volume dims {vol.dims}")
    return CtVolume(np.where(mask, vol.voxels, np.int16(AIR_HU)), vol.spacing_mm)


def lung_xray(vol: CtVolume, mask: np.ndarray, params: DrrParams = DrrParams()) -> GrayImage:
    return drr(lung_volume(vol, mask), params)


def _median(values) -> float:
    return float(statistics.median(values))


def filter_nodules(nodules, f: NoduleFilter = NoduleFilter()) -> list:
    kept = []
    for n in nodules:
        if len(n.ratings) < f.min_radiologists:
            continue
        if _median([r.texture for r in n.ratings]) <= f.min_median_texture:
            continue
        if _median([r.subtlety for r in n.ratings]) <= f.min_median_subtlety:
            continue
        kept.append(n)
    return kept


def nodule_mask(nodules, dims: Sequence[int]) -> np.ndarray:
    """Project nodule voxels along y onto a ``(nx, nz)`` mask."""
    out = np.zeros(tuple(dims), dtype=bool)
    for n in nodules:
        if n.voxels:
            v = np.asarray(n.voxels, dtype=np.intp)
            out[v[:, 0], v[:, 2]] = True
    return out


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentSample:
    rotation_deg: float
    shift_x: float
    shift_z: float
    zoom: float
    flip: bool

    @property
    def is_identity_affine(self) -> bool:
        return self.rotation_deg == 0 and self.shift_x == 0 and self.shift_z == 0 and self.zoom == 1


def sample_augment(p: AugmentParams, dims: Sequence[int], rng: np.random.Generator) -> AugmentSample:
    """Draw one transform; the draw order is fixed so a seed reproduces it."""
    width, height = dims
    theta = rng.uniform(-p.max_rotation_deg, p.max_rotation_deg) if p.max_rotation_deg else 0.0
    sx = rng.uniform(-p.width_shift_frac, p.width_shift_frac) * width if p.width_shift_frac else 0.0
    sz = rng.uniform(-p.height_shift_frac, p.height_shift_frac) * height if p.height_shift_frac else 0.0
    zoom = rng.uniform(1 - p.zoom_frac, 1 + p.zoom_frac) if p.zoom_frac else 1.0
    flip = bool(rng.random() < 0.5) if p.horizontal_flip else False
    return AugmentSample(float(theta), float(sx), float(sz), float(zoom), flip)


def _apply(arr: np.ndarray, s: AugmentSample, order: int) -> np.ndarray:
    if not s.is_identity_affine:
        t = np.deg2rad(s.rotation_deg)
        forward = s.zoom * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        inverse = np.linalg.inv(forward)
        center = (np.array(arr.shape, dtype=np.float64) - 1) / 2
        shift = np.array([s.shift_x, s.shift_z])
        # output o samples input at center + inverse @ (o - center - shift)
        offset = center - inverse @ (center + shift)
        arr = ndimage.affine_transform(
            arr, inverse, offset=offset, order=order, mode="constant", cval=0.0
        )
    if s.flip:
        arr = arr[::-1, :]
    return np.ascontiguousarray(arr)


def augment_pair(images: Sequence, p: AugmentParams, rng: Optional[np.random.Generator] = None):
    """Apply one randomly drawn transform identically to every image in ``images``.

    Gray images are resampled bilinearly, boolean masks by nearest neighbour;
    out-of-frame pixels become 0. ``rng`` defaults to a generator seeded
    from ``p.seed``.
    """
    if not images:
        return []
    shapes = {img.pixels.shape if isinstance(img, GrayImage) else np.shape(img) for img in images}
    if len(shapes) != 1:
        raise ValueError(f"augment_pair inputs have different dims: {sorted(shapes)}")
    rng = rng if rng is not None else np.random.default_rng(p.seed)
    sample = sample_augment(p, next(iter(shapes)), rng)
    out = []
    for img in images:
        if isinstance(img, GrayImage):
            px = _apply(img.pixels.astype(np.float64), sample, order=1)
            if img.range_tag == "unit":
                px = np.clip(px, 0.0, 1.0)
            out.append(GrayImage(px.astype(np.float32), img.range_tag))
        else:
            mask = np.asarray(img, dtype=bool)
            out.append(_apply(mask.astype(np.uint8), sample, order=0).astype(bool))
    return out


def case_rng(seed: int, case_index: int) -> np.random.Generator:
    """Independent generator per case so results do not depend on scheduling."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(case_index)]))


# --------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class Case:
    case_id: str
    volume_path: Path
    nodule_path: Optional[Path]


@dataclass(frozen=True)
class DatasetParams:
    drr: DrrParams = field(default_factory=DrrParams)
    seg: SegParams = field(default_factory=SegParams)
    nodule_filter: NoduleFilter = field(default_factory=NoduleFilter)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _is_complete(rec: Optional[ManifestRecord], out_dir: Path) -> bool:
    if rec is None or rec.error is not None:
        return False
    for key, rel in rec.paths.items():
        if rel is None or key not in rec.sha256:
            return False
        path = out_dir / rel
        if not path.is_file() or _sha256(path) != rec.sha256[key]:
            return False
    return True


def process_case(case: Case, out_dir: Path, params: DatasetParams) -> ManifestRecord:
    """Generate the four training files for one case. Errors are recorded, not raised."""
    try:
        vol = volio.read_volume(case.volume_path)
        if case.nodule_path is None:
            raise FileNotFoundError(f"no nodule file for case {case.case_id!r}")
        nodules = volio.read_nodules(case.nodule_path, vol.dims)
        mask3d = lung_mask_3d(vol, params.seg)
        source = normalize_unit(drr(vol, params.drr))
        target = normalize_unit(lung_xray(vol, mask3d, params.drr))
        kept = filter_nodules(nodules, params.nodule_filter)
        nx, _, nz = vol.dims

        case_dir = out_dir / case.case_id
        case_dir.mkdir(parents=True, exist_ok=True)
        volio.write_image(source, case_dir / CASE_FILES["source"], "f32raw")
        volio.write_image(target, case_dir / CASE_FILES["target"], "f32raw")
        volio.write_mask(project_mask(mask3d), case_dir / CASE_FILES["lung_mask"])
        volio.write_mask(nodule_mask(kept, (nx, nz)), case_dir / CASE_FILES["nodule_mask"])
    except Exception as exc:  # per-case failures go into the manifest
        log.warning("case %s failed: %s", case.case_id, exc)
        return ManifestRecord(case.case_id, error=f"{type(exc).__name__}: {exc}")

    rel = {key: f"{case.case_id}/{name}" for key, name in CASE_FILES.items()}
    return ManifestRecord(
        case.case_id,
        source_path=rel["source"],
        target_path=rel["target"],
        lung_mask_path=rel["lung_mask"],
        nodule_mask_path=rel["nodule_mask"],
        nodule_count=len(kept),
        sha256={key: _sha256(out_dir / path) for key, path in rel.items()},
    )


def _process(args):
    return process_case(*args)


def build_dataset(
    cases: Sequence[Case],
    out_dir,
    params: DatasetParams = DatasetParams(),
    workers: int = 1,
    manifest_name: str = "manifest.jsonl",
) -> DatasetManifest:
    """Write source/target/mask files for every case plus a JSON-lines manifest.

    Cases whose outputs already exist with matching checksums are skipped.
    The manifest lists cases in input order whatever the worker count.
    """
    out_dir = Path(out_dir)
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / manifest_name

    previous = DatasetManifest()
    if manifest_path.is_file():
        try:
            previous = volio.read_manifest(manifest_path)
        except volio.FormatError:
            log.warning("ignoring unreadable manifest %s", manifest_path)

    results: dict = {}
    todo = []
    for case in cases:
        old = previous.get(case.case_id)
        if _is_complete(old, out_dir):
            results[case.case_id] = old
        else:
            todo.append(case)
    log.info("%d cases up to date, %d to process", len(results), len(todo))

    jobs = [(case, out_dir, params) for case in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_process, jobs))
    else:
        records = [_process(job) for job in jobs]
    for rec in records:
        results[rec.case_id] = rec

    manifest = DatasetManifest([results[i] for i in ids])
    volio.write_manifest(manifest, manifest_path)
    return manifest


def discover_cases(source) -> list:
    """Cases from a directory of ``<id>.hdr`` files or a case-list text file.

    A case list has one ``case_id volume_header nodule_json`` entry per line;
    relative paths resolve against the list's directory. In a directory the
    nodule file for ``<id>.hdr`` is ``<id>.nodules.json``.
    """
    source = Path(source)
    if source.is_dir():
        cases = []
        for hdr in sorted(source.glob("*.hdr")):
            nod = hdr.with_name(hdr.stem + ".nodules.json")
            cases.append(Case(hdr.stem, hdr, nod if nod.is_file() else None))
        return cases
    if not source.is_file():
        raise FileNotFoundError(f"case source not found: {source}")
    cases = []
    for lineno, line in enumerate(source.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) not in (2, 3):
            raise volio.FormatError(f"{source}:{lineno}: expected 'case_id volume [nodules]'")
        vol = source.parent / parts[1]
        nod = source.parent / parts[2] if len(parts) == 3 else None
        cases.append(Case(parts[0], vol, nod))
    return cases
