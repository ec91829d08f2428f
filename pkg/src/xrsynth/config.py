"""``key = value`` pipeline configuration, overridable from the command line."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .drr import DrrParams
from .enhance import EnhanceParams
from .lungseg import SegParams
from .targets import AugmentParams, NoduleFilter
from .volio import HeaderError

_SECTIONS = {
    "drr": DrrParams,
    "seg": SegParams,
    "nodule_filter": NoduleFilter,
    "augment": AugmentParams,
    "enhance": EnhanceParams,
}

_TOP_LEVEL = {"workers": int, "seed": int}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(kind, text: str):
    if kind is bool or kind == "bool":
        return _parse_bool(text)
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    if "Tuple" in str(kind) or kind is tuple:
        return tuple(int(p) for p in text.replace(",", " ").split())
    return text


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("XRSYNTH_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass
class PipelineConfig:
    drr: DrrParams = field(default_factory=DrrParams)
    seg: SegParams = field(default_factory=SegParams)
    nodule_filter: NoduleFilter = field(default_factory=NoduleFilter)
    augment: AugmentParams = field(default_factory=AugmentParams)
    enhance: EnhanceParams = field(default_factory=EnhanceParams)
    workers: int = field(default_factory=default_workers)
    seed: Optional[int] = None

    def updated(self, values: dict) -> "PipelineConfig":
        """Return a copy with flat ``field -> value`` overrides applied; ``None`` values are ignored.

        ``seed`` is pipeline-wide: it also seeds augmentation.
        """
        values = {k: v for k, v in values.items() if v is not None}
        out = {key: values.pop(key, getattr(self, key)) for key in _TOP_LEVEL}
        if out["seed"] is not None:
            values["seed"] = out["seed"]
        for section, cls in _SECTIONS.items():
            names = {f.name for f in dataclasses.fields(cls)}
            own = {k: values.pop(k) for k in list(values) if k in names}
            out[section] = dataclasses.replace(getattr(self, section), **own)
        if values:
            raise ValueError(f"unknown configuration keys: {sorted(values)}")
        return PipelineConfig(**out)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls().updated(read_config(path))


def _field_types() -> dict:
    types = dict(_TOP_LEVEL)
    for cls in _SECTIONS.values():
        for f in dataclasses.fields(cls):
            types[f.name] = f.type
    return types


def read_config(path) -> dict:
    """Parse a UTF-8 ``key = value`` file into typed values (``#`` starts a comment)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    types = _field_types()
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise HeaderError(f"{path}:{lineno}: expected 'key = value'")
        key, text = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise HeaderError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(types[key], text)
        except ValueError as exc:
            raise HeaderError(f"{path}:{lineno}: {exc}") from None
    return values
