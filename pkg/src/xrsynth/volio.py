"""Core data types and on-disk formats for CT volumes, masks and images.

Array conventions used throughout the package:

* ``CtVolume.voxels`` is an ``int16`` array of shape ``(nx, ny, nz)`` indexed
  ``[x, y, z]``; x is left-right, y is posterior-anterior (the projection
  axis) and z is inferior-superior (axial slices are fixed-z planes).
* 3D masks are boolean arrays with the same shape as their volume.
* 2D images and masks are indexed ``[x, z]``, i.e. shape ``(width, height)``.
  On disk they are stored row-major with ``height`` rows of ``width`` samples.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

HU_MIN = -1024
HU_MAX = 3071
AIR_HU = -1000

IMAGE_MAGIC = b"F32XIMG\0"
VOLUME_MAGIC = b"F32XVOL\0"

RANGE_TAGS = ("raw_drr", "unit", "zero_mean", "raw")
_TAG_CODES = {tag: code for code, tag in enumerate(RANGE_TAGS)}


class FormatError(ValueError):
    """Base class for malformed input files."""


class HeaderError(FormatError):
    pass


class SizeMismatchError(FormatError):
    pass


class UnknownFormatError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class AnnotationError(FormatError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class CtVolume:
    """Hounsfield-unit CT grid.

    ``clamped`` counts voxels that were clipped into ``[HU_MIN, HU_MAX]`` when
    the volume was read from disk.
    """

    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    clamped: int = 0

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {vox.shape}")
        if vox.size and (vox.min() < HU_MIN or vox.max() > HU_MAX):
            raise ValueError(f"voxel values must lie in [{HU_MIN}, {HU_MAX}]")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        object.__setattr__(self, "voxels", _frozen(vox.astype(np.int16, copy=False)))
        object.__setattr__(self, "spacing_mm", spacing)

    @classmethod
    def from_hu(cls, values, spacing_mm=(1.0, 1.0, 1.0)) -> "CtVolume":
        """Build a volume from arbitrary numeric HU values, clamping out-of-range ones."""
        arr = np.rint(np.asarray(values, dtype=np.float64))
        clamped = int(np.count_nonzero((arr < HU_MIN) | (arr > HU_MAX)))
        arr = np.clip(arr, HU_MIN, HU_MAX).astype(np.int16)
        return cls(arr, spacing_mm, clamped)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def __eq__(self, other):
        if not isinstance(other, CtVolume):
            return NotImplemented
        return (
            self.spacing_mm == other.spacing_mm
            and self.voxels.shape == other.voxels.shape
            and bool(np.array_equal(self.voxels, other.voxels))
        )


@dataclass(frozen=True, eq=False)
class GrayImage:
    """2D float32 image indexed ``[x, z]`` with a value-range tag."""

    pixels: np.ndarray
    range_tag: str = "unit"

    def __post_init__(self):
        if self.range_tag not in _TAG_CODES:
            raise ValueError(f"unknown range tag {self.range_tag!r}")
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or min(px.shape) < 1:
            raise ValueError(f"image must be a non-empty 2D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite pixels")
        if self.range_tag == "unit" and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("unit image has pixels outside [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def width(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def dims(self) -> Tuple[int, int]:
        return self.width, self.height

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.range_tag == other.range_tag and bool(
            np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class Rating:
    texture: int
    subtlety: int


@dataclass(frozen=True)
class NoduleAnnotation:
    nodule_id: str
    voxels: Tuple[Tuple[int, int, int], ...]
    ratings: Tuple[Rating, ...]

    def __post_init__(self):
        if not self.ratings:
            raise AnnotationError(f"nodule {self.nodule_id!r} has no ratings")
        for r in self.ratings:
            for name in ("texture", "subtlety"):
                v = getattr(r, name)
                if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or not 1 <= v <= 5:
                    raise AnnotationError(
                        f"nodule {self.nodule_id!r}: {name} rating {v!r} outside 1-5"
                    )

    def check_bounds(self, dims: Sequence[int]) -> None:
        for v in self.voxels:
            if len(v) != 3 or any(not 0 <= c < n for c, n in zip(v, dims)):
                raise AnnotationError(
                    f"nodule {self.nodule_id!r}: voxel {tuple(v)} outside volume dims {tuple(dims)}"
                )


@dataclass
class ManifestRecord:
    case_id: str
    source_path: Optional[str] = None
    target_path: Optional[str] = None
    lung_mask_path: Optional[str] = None
    nodule_mask_path: Optional[str] = None
    nodule_count: int = 0
    normalization: str = "unit"
    sha256: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def paths(self) -> dict:
        return {
            "source": self.source_path,
            "target": self.target_path,
            "lung_mask": self.lung_mask_path,
            "nodule_mask": self.nodule_mask_path,
        }


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.case_id in seen:
                raise ValueError(f"duplicate case_id {rec.case_id!r} in manifest")
            seen.add(rec.case_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, case_id: str) -> Optional[ManifestRecord]:
        for rec in self.records:
            if rec.case_id == case_id:
                return rec
        return None


# --------------------------------------------------------------------------
# volumes


def _parse_header(path: Path) -> dict:
    entries = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise HeaderError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    missing = [k for k in ("dims", "spacing_mm", "data") if k not in entries]
    if missing:
        raise HeaderError(f"{path}: missing header keys {missing}")
    return entries


def _parse_triple(text: str, kind, key: str, path: Path):
    parts = text.replace(",", " ").replace("(", " ").replace(")", " ").split()
    try:
        values = tuple(kind(p) for p in parts)
    except ValueError:
        raise HeaderError(f"{path}: cannot parse {key} = {text!r}") from None
    if len(values) != 3:
        raise HeaderError(f"{path}: {key} needs three values, got {text!r}")
    return values


def read_volume(header_path: PathLike) -> CtVolume:
    """Read a ``.hdr`` + raw int16 volume, clamping out-of-range HU values."""
    header_path = Path(header_path)
    if not header_path.is_file():
        raise FileNotFoundError(f"volume header not found: {header_path}")
    header = _parse_header(header_path)
    dims = _parse_triple(header["dims"], int, "dims", header_path)
    spacing = _parse_triple(header["spacing_mm"], float, "spacing_mm", header_path)
    if any(n < 1 for n in dims):
        raise HeaderError(f"{header_path}: dims must be positive, got {dims}")
    if any(not s > 0 for s in spacing):
        raise HeaderError(f"{header_path}: spacing must be positive, got {spacing}")

    raw_path = Path(header["data"])
    if not raw_path.is_absolute():
        raw_path = header_path.parent / raw_path
    if not raw_path.is_file():
        raise FileNotFoundError(f"volume data file not found: {raw_path}")
    payload = raw_path.read_bytes()
    nx, ny, nz = dims
    expected = 2 * nx * ny * nz
    if len(payload) != expected:
        raise SizeMismatchError(
            f"{raw_path}: expected {expected} bytes for dims {dims}, found {len(payload)}"
        )
    # x varies fastest on disk
    vox = np.frombuffer(payload, dtype="<i2").reshape(nz, ny, nx).transpose(2, 1, 0)
    clamped = int(np.count_nonzero((vox < HU_MIN) | (vox > HU_MAX)))
    vox = np.clip(vox, HU_MIN, HU_MAX)
    return CtVolume(vox, spacing, clamped)


def write_volume(vol: CtVolume, header_path: PathLike, data_name: Optional[str] = None) -> Path:
    """Write ``vol`` as a text header plus little-endian int16 raw file.

    Returns the path of the raw data file.
    """
    header_path = Path(header_path)
    data_name = data_name or header_path.with_suffix(".raw").name
    raw_path = header_path.parent / data_name
    raw_path.write_bytes(np.ascontiguousarray(vol.voxels.transpose(2, 1, 0)).astype("<i2").tobytes())
    sx, sy, sz = vol.spacing_mm
    nx, ny, nz = vol.dims
    header_path.write_text(
        f"dims = {nx} {ny} {nz}\n"
        f"spacing_mm = {sx!r} {sy!r} {sz!r}\n"
        f"data = {data_name}\n",
        encoding="utf-8",
    )
    return raw_path


# --------------------------------------------------------------------------
# 2D images


def _pgm_header(width: int, height: int) -> bytes:
    return f"P5\n{width} {height}\n65535\n".encode("ascii")


def write_image(img: GrayImage, path: PathLike, format: str = "f32raw") -> None:
    path = Path(path)
    if format == "pgm16":
        if img.range_tag != "unit":
            raise ValueError(f"pgm16 requires a unit-range image, got {img.range_tag!r}")
        samples = np.floor(img.pixels.astype(np.float64) * 65535.0 + 0.5)
        samples = np.clip(samples, 0, 65535).astype(">u2")
        path.write_bytes(_pgm_header(img.width, img.height) + samples.T.tobytes())
    elif format == "f32raw":
        head = IMAGE_MAGIC + struct.pack("<IIB", img.width, img.height, _TAG_CODES[img.range_tag])
        path.write_bytes(head + img.pixels.T.astype("<f4").tobytes())
    else:
        raise ValueError(f"unknown image format {format!r}")


def write_mask(mask: np.ndarray, path: PathLike) -> None:
    """Store a 2D mask as pgm16 with samples {0, 65535}."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("write_mask expects a 2D mask")
    write_image(GrayImage(mask.astype(np.float32), "unit"), path, "pgm16")


def _read_pgm(path: Path, data: bytes) -> GrayImage:
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise TruncatedFileError(f"{path}: truncated PGM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise UnknownFormatError(f"{path}: malformed PGM header") from None
    if maxval != 65535:
        raise UnknownFormatError(f"{path}: only 16-bit PGM (maxval 65535) is supported")
    payload = data[pos:]
    if len(payload) < 2 * width * height:
        raise TruncatedFileError(f"{path}: PGM payload shorter than {width}x{height}")
    samples = np.frombuffer(payload[: 2 * width * height], dtype=">u2").reshape(height, width)
    return GrayImage((samples.T.astype(np.float64) / 65535.0).astype(np.float32), "unit")


def read_image(path: PathLike) -> GrayImage:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    data = path.read_bytes()
    if data.startswith(IMAGE_MAGIC):
        head = len(IMAGE_MAGIC) + 9
        if len(data) < head:
            raise TruncatedFileError(f"{path}: truncated f32raw header")
        width, height, code = struct.unpack("<IIB", data[len(IMAGE_MAGIC) : head])
        if code >= len(RANGE_TAGS):
            raise UnknownFormatError(f"{path}: unknown range tag code {code}")
        if len(data) != head + 4 * width * height:
            raise TruncatedFileError(
                f"{path}: expected {4 * width * height} payload bytes, found {len(data) - head}"
            )
        px = np.frombuffer(data[head:], dtype="<f4").reshape(height, width).T
        return GrayImage(px, RANGE_TAGS[code])
    if data[:2] == b"P5":
        return _read_pgm(path, data)
    raise UnknownFormatError(f"{path}: unrecognized image magic {data[:8]!r}")


def read_mask(path: PathLike) -> np.ndarray:
    """Read a 2D mask stored as an image; any pixel >= 0.5 is set."""
    return read_image(path).pixels >= 0.5


# --------------------------------------------------------------------------
# 3D float stacks (used for 3D masks)


def write_stack(values: np.ndarray, path: PathLike) -> None:
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError("write_stack expects a 3D array")
    nx, ny, nz = values.shape
    body = np.ascontiguousarray(values.transpose(2, 1, 0)).astype("<f4").tobytes()
    Path(path).write_bytes(VOLUME_MAGIC + struct.pack("<III", nx, ny, nz) + body)


def read_stack(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"stack not found: {path}")
    data = path.read_bytes()
    if not data.startswith(VOLUME_MAGIC):
        raise UnknownFormatError(f"{path}: not an F32XVOL file")
    head = len(VOLUME_MAGIC) + 12
    if len(data) < head:
        raise TruncatedFileError(f"{path}: truncated header")
    nx, ny, nz = struct.unpack("<III", data[len(VOLUME_MAGIC) : head])
    if len(data) != head + 4 * nx * ny * nz:
        raise TruncatedFileError(f"{path}: payload does not match dims {(nx, ny, nz)}")
    return np.frombuffer(data[head:], dtype="<f4").reshape(nz, ny, nx).transpose(2, 1, 0).copy()


def write_mask3d(mask: np.ndarray, path: PathLike) -> None:
    write_stack(np.asarray(mask, dtype=np.float32), path)


def read_mask3d(path: PathLike) -> np.ndarray:
    return read_stack(path) >= 0.5


# --------------------------------------------------------------------------
# nodules and manifests


def read_nodules(path: PathLike, dims: Optional[Sequence[int]] = None) -> list:
    """Parse a nodule JSON file; with ``dims`` every voxel is bounds-checked."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"nodule file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    try:
        entries = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(entries, list):
        raise AnnotationError(f"{path}: expected a JSON array of nodules")
    nodules = []
    for i, entry in enumerate(entries):
        try:
            voxels = tuple(tuple(int(c) for c in v) for v in entry["voxels"])
            ratings = tuple(Rating(r["texture"], r["subtlety"]) for r in entry["ratings"])
            nodule = NoduleAnnotation(str(entry.get("id", i)), voxels, ratings)
        except (KeyError, TypeError) as exc:
            raise AnnotationError(f"{path}: nodule #{i} is malformed ({exc!r})") from None
        if dims is not None:
            nodule.check_bounds(dims)
        nodules.append(nodule)
    return nodules


def write_nodules(nodules: Iterable[NoduleAnnotation], path: PathLike) -> None:
    payload = [
        {
            "id": n.nodule_id,
            "voxels": [list(v) for v in n.voxels],
            "ratings": [{"texture": r.texture, "subtlety": r.subtlety} for r in n.ratings],
        }
        for n in nodules
    ]
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def manifest_lines(manifest: DatasetManifest) -> bytes:
    lines = [
        json.dumps(
            {
                "case_id": r.case_id,
                "source_path": r.source_path,
                "target_path": r.target_path,
                "lung_mask_path": r.lung_mask_path,
                "nodule_mask_path": r.nodule_mask_path,
                "nodule_count": r.nodule_count,
                "normalization": r.normalization,
                "sha256": dict(sorted(r.sha256.items())),
                "error": r.error,
            },
            sort_keys=False,
        )
        for r in manifest.records
    ]
    return "".join(line + "\n" for line in lines).encode("utf-8")


def write_manifest(manifest: DatasetManifest, path: PathLike) -> bool:
    """Write the manifest as JSON lines. Returns False if the file already had that content."""
    path = Path(path)
    data = manifest_lines(manifest)
    if path.is_file() and path.read_bytes() == data:
        return False
    path.write_bytes(data)
    return True


def read_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(ManifestRecord(**obj))
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad manifest record ({exc})") from None
    return DatasetManifest(records)
