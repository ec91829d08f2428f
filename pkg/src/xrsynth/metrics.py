"""Losses and evaluation metrics over images, masks and score lists."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import volio
from .drr import normalize_unit
from .volio import GrayImage

BCE_EPS = 1e-7


def _arr(img) -> np.ndarray:
    px = img.pixels if isinstance(img, GrayImage) else img
    return np.asarray(px, dtype=np.float64)


def _pair(pred, target):
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ValueError(f"dims differ: {p.shape} vs {t.shape}")
    return p, t


def weighted_l1(pred, target, nodule_mask, w_nodule: float = 30.0) -> float:
    """Mean of ``|pred - target| * (1 + w_nodule * nodule_mask)``."""
    p, t = _pair(pred, target)
    mask = np.asarray(nodule_mask, dtype=np.float64)
    if mask.shape != p.shape:
        raise ValueError(f"nodule mask dims {mask.shape} do not match image dims {p.shape}")
    return float(np.mean(np.abs(p - t) * (1.0 + w_nodule * mask)))


def weighted_bce(pred, target, pos_weight: Optional[float] = None) -> float:
    """Class-weighted binary cross entropy.

    ``pos_weight`` defaults to the negative/positive pixel ratio of ``target``;
    that default is undefined for single-class targets, which raise.
    """
    p, t = _pair(pred, np.asarray(target, dtype=np.float64))
    if pos_weight is None:
        npos = np.count_nonzero(t)
        nneg = t.size - npos
        if npos == 0 or nneg == 0:
            raise ValueError("target has a single class; pass pos_weight explicitly")
        pos_weight = nneg / npos
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(pos_weight * t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    return float(np.mean(loss))


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def mse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean((p - t) ** 2))


def psnr_from_mse(mse_value: float, peak: float = 1.0) -> float:
    """PSNR in dB; identical images give ``math.inf``."""
    if mse_value == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse_value)


def psnr(pred, target, peak: float = 1.0) -> float:
    return psnr_from_mse(mse(pred, target), peak)


def _box_mean(x: np.ndarray, k: int) -> np.ndarray:
    """Mean over every fully contained k x k window (stride 1)."""
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    c[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    s = c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
    return s / (k * k)


def ssim(pred, target, window: int = 8, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all uniform ``window`` x ``window`` windows, population moments."""
    a, b = _pair(pred, target)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} SSIM window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _box_mean(a, window), _box_mean(b, window)
    var_a = _box_mean(a * a, window) - mu_a * mu_a
    var_b = _box_mean(b * b, window) - mu_b * mu_b
    cov = _box_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


# --------------------------------------------------------------------------
# average precision


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-wise AP: sum of recall increments times precision at each distinct score.

    Tied scores enter together, as a single threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1D sequences of equal length")
    y = y.astype(bool)
    npos = np.count_nonzero(y)
    if npos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of every group of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1)
    recall = tp / npos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass(frozen=True)
class BootstrapAP:
    ap_mean: float
    ap_std: float
    replicates: int
    seed: int
    skipped: int = 0
    std_defined: bool = True


def bootstrap_ap(scores, labels, replicates: int = 5000, seed: int = 0) -> BootstrapAP:
    """Bootstrap AP: resample cases with replacement, report mean and sample std.

    Replicates that draw no positive case are skipped and counted. Each
    replicate uses its own child seed, so results do not depend on how the
    work is split.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    average_precision(s, y)  # validates input
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    n = s.size
    children = np.random.SeedSequence(seed).spawn(replicates)
    values = []
    skipped = 0
    for child in children:
        idx = np.random.default_rng(child).integers(0, n, size=n)
        if not y[idx].any():
            skipped += 1
            continue
        values.append(average_precision(s[idx], y[idx]))
    if not values:
        raise ValueError("every bootstrap replicate lacked a positive label")
    values = np.asarray(values)
    if values.size > 1:
        return BootstrapAP(float(values.mean()), float(values.std(ddof=1)), replicates, seed, skipped)
    return BootstrapAP(float(values.mean()), 0.0, replicates, seed, skipped, std_defined=False)


# --------------------------------------------------------------------------
# dataset evaluation


@dataclass
class CaseMetrics:
    case_id: str
    mae: float = math.nan
    mse: float = math.nan
    psnr_db: float = math.nan
    ssim: float = math.nan
    error: Optional[str] = None


@dataclass
class MetricReport:
    cases: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    COLUMNS = ("mae", "mse", "psnr_db", "ssim")

    @classmethod
    def from_cases(cls, cases) -> "MetricReport":
        ok = [c for c in cases if c.error is None]
        mean, std = {}, {}
        for col in cls.COLUMNS:
            vals = np.array([getattr(c, col) for c in ok], dtype=np.float64)
            if vals.size == 0:
                mean[col] = std[col] = math.nan
            elif np.isinf(vals).any():
                mean[col], std[col] = float(vals.mean()), math.nan
            else:
                mean[col], std[col] = float(vals.mean()), float(vals.std())
        return cls(list(cases), mean, std)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("case_id",) + self.COLUMNS)
        for c in self.cases:
            if c.error is not None:
                w.writerow((c.case_id,) + ("NA",) * len(self.COLUMNS))
            else:
                w.writerow((c.case_id,) + tuple(_fmt(getattr(c, k)) for k in self.COLUMNS))
        w.writerow(("MEAN",) + tuple(_fmt(self.mean[k]) for k in self.COLUMNS))
        w.writerow(("STD",) + tuple(_fmt(self.std[k]) for k in self.COLUMNS))
        return buf.getvalue()


def _fmt(v: float) -> str:
    if math.isnan(v):
        return "NA"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _as_unit(img: GrayImage) -> GrayImage:
    return img if img.range_tag == "unit" else normalize_unit(img)


def find_prediction(pred_dir: Path, case_id: str, name: str = "target.f32") -> Optional[Path]:
    for candidate in (pred_dir / f"{case_id}.f32", pred_dir / case_id / name):
        if candidate.is_file():
            return candidate
    return None


def evaluate_pairs(manifest: volio.DatasetManifest, dataset_dir, pred_dir, peak: float = 1.0) -> MetricReport:
    """Compare each case's prediction with its target.

    A prediction is read from ``<pred_dir>/<case_id>.f32`` or
    ``<pred_dir>/<case_id>/target.f32``. Non-unit images are min-max
    normalized first. Missing predictions are reported per case and left out
    of the aggregates.
    """
    dataset_dir, pred_dir = Path(dataset_dir), Path(pred_dir)
    rows = []
    for rec in manifest:
        if rec.error is not None or rec.target_path is None:
            rows.append(CaseMetrics(rec.case_id, error=rec.error or "no target"))
            continue
        pred_path = find_prediction(pred_dir, rec.case_id)
        if pred_path is None:
            rows.append(CaseMetrics(rec.case_id, error="missing prediction"))
            continue
        try:
            target = _as_unit(volio.read_image(dataset_dir / rec.target_path))
            pred = _as_unit(volio.read_image(pred_path))
            err = mse(pred, target)
            rows.append(
                CaseMetrics(rec.case_id, mae(pred, target), err, psnr_from_mse(err, peak), ssim(pred, target))
            )
        except (OSError, ValueError) as exc:
            rows.append(CaseMetrics(rec.case_id, error=f"{type(exc).__name__}: {exc}"))
    return MetricReport.from_cases(rows)


def read_scores(path) -> tuple:
    """Read a ``score,label`` CSV (header required; extra columns ignored)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"score file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"score", "label"} <= set(reader.fieldnames):
            raise volio.FormatError(f"{path}: header must contain 'score' and 'label'")
        scores, labels = [], []
        for lineno, row in enumerate(reader, 2):
            try:
                score = float(row["score"])
                label = int(row["label"])
            except (TypeError, ValueError):
                raise volio.FormatError(f"{path}:{lineno}: bad score/label row") from None
            if label not in (0, 1) or not math.isfinite(score):
                raise volio.FormatError(f"{path}:{lineno}: label must be 0/1 and score finite")
            scores.append(score)
            labels.append(label)
    if not scores:
        raise volio.FormatError(f"{path}: no rows")
    return scores, labels
