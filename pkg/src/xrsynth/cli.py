"""Command-line entry point: ``xrsynth <command> ...``.

Exit codes: 0 success, 2 usage or input error, 3 data-integrity error.
Errors are reported on stderr as a single line ``xrsynth: <CODE>: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import volio
from .config import PipelineConfig, read_config
from .drr import DegenerateRangeError, drr, normalize_unit
from .enhance import enhance_pipeline
from .lungseg import lung_mask_3d, project_mask
from .metrics import average_precision, bootstrap_ap, evaluate_pairs, read_scores
from .phantom import KINDS, make_phantom
from .targets import DatasetParams, build_dataset, discover_cases
from .volio import GrayImage

log = logging.getLogger("xrsynth")

EXIT_OK, EXIT_INPUT, EXIT_INTEGRITY = 0, 2, 3


class UsageError(Exception):
    pass


def _config(args, overrides: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = cfg.updated(read_config(args.config))
    return cfg.updated(overrides)


def _stem(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _with_suffix(stem: Path, suffix: str) -> Path:
    return stem.with_name(stem.name + suffix)


def _preview(img: GrayImage) -> GrayImage:
    try:
        return normalize_unit(img)
    except DegenerateRangeError:
        return GrayImage(np.zeros(img.pixels.shape, dtype=np.float32), "unit")


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or args.kind
    kwargs = {}
    if args.kind == "two-ellipsoid":
        kwargs = dict(
            hole=args.hole,
            nodule=args.nodule,
            nodule_hu=args.nodule_hu,
            min_radius=args.min_radius,
        )
        if args.ratings:
            kwargs["ratings"] = _parse_ratings(args.ratings)
    elif args.hole or args.nodule:
        raise UsageError("--hole and --nodule only apply to two-ellipsoid phantoms")
    ph = make_phantom(args.kind, args.dims, args.seed, **kwargs)
    volio.write_volume(ph.volume, out / f"{name}.hdr")
    volio.write_mask3d(ph.lung_mask, out / f"{name}.lung3d.f32v")
    volio.write_mask(project_mask(ph.lung_mask), out / f"{name}.lung2d.pgm")
    volio.write_nodules(ph.nodules, out / f"{name}.nodules.json")
    print(out / f"{name}.hdr")
    return EXIT_OK


def _parse_ratings(text: str):
    try:
        pairs = [tuple(int(v) for v in item.split(",")) for item in text.split(";") if item.strip()]
    except ValueError:
        raise UsageError(f"bad --ratings {text!r}; expected 'texture,subtlety;...'") from None
    if not pairs or any(len(p) != 2 for p in pairs):
        raise UsageError(f"bad --ratings {text!r}; expected 'texture,subtlety;...'")
    return pairs


def cmd_drr(args) -> int:
    cfg = _config(args, {"mu_water": args.mu_water, "beta": args.beta})
    vol = volio.read_volume(args.volume)
    if vol.clamped:
        log.warning("%d voxels clamped into the HU range", vol.clamped)
    img = drr(vol, cfg.drr)
    stem = _stem(args.out)
    volio.write_image(img, _with_suffix(stem, ".f32"), "f32raw")
    volio.write_image(_preview(img), _with_suffix(stem, ".pgm"), "pgm16")
    sidecar = {
        "volume": str(args.volume),
        "dims": list(vol.dims),
        "mu_water": cfg.drr.mu_water,
        "beta": cfg.drr.beta,
        "clamped_voxels": vol.clamped,
    }
    _with_suffix(stem, ".params.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_lungseg(args) -> int:
    cfg = _config(
        args,
        {
            "hu_threshold": args.threshold,
            "connectivity": args.connectivity,
            "max_components": args.max_components,
            "exclude_border_components": False if args.keep_border else None,
            "workers": args.workers,
        },
    )
    vol = volio.read_volume(args.volume)
    mask = lung_mask_3d(vol, cfg.seg, workers=cfg.workers)
    stem = _stem(args.out)
    volio.write_mask3d(mask, _with_suffix(stem, ".mask3d.f32v"))
    volio.write_mask(project_mask(mask), _with_suffix(stem, ".mask2d.pgm"))
    return EXIT_OK


def cmd_dataset(args) -> int:
    cfg = _config(
        args,
        {
            "mu_water": args.mu_water,
            "beta": args.beta,
            "hu_threshold": args.threshold,
            "workers": args.workers,
        },
    )
    cases = discover_cases(args.cases)
    params = DatasetParams(cfg.drr, cfg.seg, cfg.nodule_filter)
    manifest = build_dataset(cases, args.out, params, workers=cfg.workers)
    failed = [r for r in manifest if r.error is not None]
    for rec in failed:
        print(f"xrsynth: E_CASE: {rec.case_id}: {rec.error}", file=sys.stderr)
    log.info("%d cases, %d failed", len(manifest), len(failed))
    if failed and args.strict:
        return EXIT_INTEGRITY
    return EXIT_OK


def _weight_name(w: float) -> str:
    return f"{w:g}"


def cmd_enhance(args) -> int:
    cfg = _config(
        args,
        {
            "clahe_window": tuple(args.clahe_window) if args.clahe_window else None,
            "clahe_clip": args.clahe_clip,
            "preprocess": False if args.no_preprocess else None,
        },
    )
    weights = args.w or [cfg.enhance.w]
    cxr = volio.read_image(args.cxr)
    lung_pred = None if args.baseline else volio.read_image(args.lung_pred)
    mask = volio.read_mask(args.lung_mask) if args.lung_mask else None
    if mask is not None and mask.shape != cxr.pixels.shape:
        raise ValueError(f"lung mask dims {mask.shape} do not match image dims {cxr.pixels.shape}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = None
    for w in weights:
        params = dataclasses.replace(cfg.enhance, w=w)
        result = enhance_pipeline(cxr, lung_pred, mask, params)
        volio.write_image(result.enhanced, out / f"enhanced_w{_weight_name(w)}.pgm", "pgm16")
    if args.intermediates and result is not None:
        volio.write_image(result.cxr_pre, out / "cxr_pre.pgm", "pgm16")
        volio.write_image(result.lung_unit, out / "lung.pgm", "pgm16")
        if result.extraction_input is not None:
            volio.write_image(result.extraction_input, out / "extraction_input.f32", "f32raw")
    return EXIT_OK


def cmd_metrics(args) -> int:
    if args.scores:
        cfg = _config(args, {"seed": args.seed})
        if cfg.seed is None:
            raise UsageError("--seed is required for bootstrap evaluation")
        scores, labels = read_scores(args.scores)
        boot = bootstrap_ap(scores, labels, args.replicates, cfg.seed)
        payload = {"ap": average_precision(scores, labels), **dataclasses.asdict(boot)}
        text = json.dumps(payload, indent=2) + "\n"
    else:
        if not args.pred_dir:
            raise UsageError("--manifest needs --pred-dir")
        manifest = volio.read_manifest(args.manifest)
        report = evaluate_pairs(manifest, Path(args.manifest).parent, args.pred_dir)
        text = report.to_csv()
    if args.out:
        _stem(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xrsynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value configuration file")
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "generate a synthetic CT phantom with ground truth")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--dims", type=int, nargs=3, default=[128, 128, 128], metavar=("NX", "NY", "NZ"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", help="file name stem (default: the kind)")
    p.add_argument("--hole", action="store_true", help="water pocket inside one lung")
    p.add_argument("--nodule", action="store_true", help="solid nodule inside one lung")
    p.add_argument("--nodule-hu", type=int, default=50)
    p.add_argument("--ratings", help="nodule ratings 'texture,subtlety;...' (default 5,5;5,5;4,5)")
    p.add_argument("--min-radius", type=float, default=0.0)

    p = add("drr", cmd_drr, "compute a DRR from a CT volume")
    p.add_argument("volume")
    p.add_argument("--out", required=True, help="output stem; writes .f32, .pgm and .params.json")
    p.add_argument("--mu-water", type=float)
    p.add_argument("--beta", type=float)

    p = add("lungseg", cmd_lungseg, "3D lung mask and its 2D projection")
    p.add_argument("volume")
    p.add_argument("--out", required=True, help="output stem; writes .mask3d.f32v and .mask2d.pgm")
    p.add_argument("--threshold", type=float, help="HU threshold (default -500)")
    p.add_argument("--connectivity", type=int, choices=(4, 8))
    p.add_argument("--max-components", type=int)
    p.add_argument("--keep-border", action="store_true", help="keep components touching the slice border")
    p.add_argument("--workers", type=int)

    p = add("dataset", cmd_dataset, "build source/target training pairs")
    p.add_argument("cases", help="directory of <id>.hdr volumes or a case-list file")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--strict", action="store_true", help="exit 3 if any case failed")
    p.add_argument("--mu-water", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--threshold", type=float)

    p = add("enhance", cmd_enhance, "fuse a radiograph with a lung-structure image")
    p.add_argument("cxr")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--lung-pred", help="lung-structure image from an extraction model")
    src.add_argument("--baseline", action="store_true", help="use the model-free detail extractor")
    p.add_argument("--lung-mask")
    p.add_argument("-w", type=float, action="append", help="enhancement weight (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clahe-window", type=int, nargs=2)
    p.add_argument("--clahe-clip", type=float)
    p.add_argument("--no-preprocess", action="store_true")
    p.add_argument("--intermediates", action="store_true")

    p = add("metrics", cmd_metrics, "image-pair metrics or bootstrap AP")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--scores", help="CSV with score,label columns")
    p.add_argument("--pred-dir")
    p.add_argument("--replicates", type=int, default=5000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return parser


_INTEGRITY_ERRORS = (volio.SizeMismatchError, volio.TruncatedFileError, DegenerateRangeError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (OSError, ValueError, UsageError) as exc:
        code, kind = _classify(exc)
        message = " ".join(str(exc).split())
        print(f"xrsynth: {kind}: {message}", file=sys.stderr)
        return code


def _classify(exc: Exception):
    if isinstance(exc, FileNotFoundError):
        return EXIT_INPUT, "E_MISSING"
    if isinstance(exc, _INTEGRITY_ERRORS):
        return EXIT_INTEGRITY, "E_INTEGRITY"
    if isinstance(exc, OSError):
        return EXIT_INPUT, "E_IO"
    return EXIT_INPUT, "E_INPUT"

if __name__ == "__main__":
    sys.exit(main())
