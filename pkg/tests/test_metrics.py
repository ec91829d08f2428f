import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrsynth import volio
from xrsynth.metrics import (
    BCE_EPS,
    MetricReport,
    average_precision,
    bootstrap_ap,
    dice,
    evaluate_pairs,
    mae,
    mse,
    psnr,
    psnr_from_mse,
    read_scores,
    ssim,
    weighted_bce,
    weighted_l1,
)
from xrsynth.volio import GrayImage


def sweep_ap(scores, labels):
    """AP from independent threshold evaluations, sorted by recall."""
    npos = sum(labels)
    points = []
    for t in sorted(set(scores), reverse=True):
        pred = [s >= t for s in scores]
        tp = sum(p and l for p, l in zip(pred, labels))
        fp = sum(p and not l for p, l in zip(pred, labels))
        points.append((tp / npos, tp / (tp + fp)))
    ap, prev = 0.0, 0.0
    for recall, precision in points:
        ap += (recall - prev) * precision
        prev = recall
    return ap


def loop_ssim(a, b, k=8, c1=1e-4, c2=9e-4):
    vals = []
    for i in range(a.shape[0] - k + 1):
        for j in range(a.shape[1] - k + 1):
            wa, wb = a[i : i + k, j : j + k].astype(np.float64), b[i : i + k, j : j + k].astype(np.float64)
            ma, mb = wa.mean(), wb.mean()
            va, vb = wa.var(), wb.var()
            cov = ((wa - ma) * (wb - mb)).mean()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# ---------------------------------------------------------------- losses


def test_weighted_l1_cases(rng):
    p = rng.random((10, 10))
    t = rng.random((10, 10))
    empty = np.zeros((10, 10), bool)
    assert weighted_l1(p, p, empty) == 0.0
    assert weighted_l1(p, t, empty) == mae(p, t)
    # dyadic values on 256 pixels keep the arithmetic exact
    pd = np.round(rng.random((16, 16)) * 256) / 256
    td = np.round(rng.random((16, 16)) * 256) / 256
    full = np.ones((16, 16), bool)
    assert weighted_l1(pd, td, full, 30.0) == 31 * weighted_l1(pd, td, ~full)
    assert math.isclose(weighted_l1(p, t, ~empty, 30.0), 31 * mae(p, t), rel_tol=1e-14)
    with pytest.raises(ValueError):
        weighted_l1(p, t, np.zeros((5, 5)))


def test_weighted_l1_loop_oracle(rng):
    p, t = rng.random((6, 7)), rng.random((6, 7))
    m = rng.random((6, 7)) > 0.7
    total = sum(abs(p[i, j] - t[i, j]) * (1 + 30 * m[i, j]) for i in range(6) for j in range(7))
    assert math.isclose(weighted_l1(p, t, m), total / 42, rel_tol=1e-12)


def test_bce_uniform_prediction(rng):
    t = rng.random((8, 8)) > 0.5
    assert math.isclose(weighted_bce(np.full((8, 8), 0.5), t, 1.0), math.log(2), rel_tol=1e-12)


def test_bce_perfect_prediction():
    t = np.array([[1.0, 0.0]])
    assert weighted_bce(t, t, 1.0) <= -math.log(1 - BCE_EPS) + 1e-15


@pytest.mark.parametrize("p,t", list(itertools.product([0.1, 0.8], [0, 1])))
def test_bce_single_pixel(p, t):
    w = 2.5
    direct = -(w * t * math.log(p) + (1 - t) * math.log(1 - p))
    assert math.isclose(weighted_bce(np.array([[p]]), np.array([[t]]), w), direct, rel_tol=1e-12)


def test_bce_default_weight():
    t = np.array([[1, 0, 0, 0]])
    p = np.array([[0.6, 0.2, 0.3, 0.1]])
    w = 3.0
    direct = -(w * math.log(0.6) + math.log(0.8) + math.log(0.7) + math.log(0.9)) / 4
    assert math.isclose(weighted_bce(p, t), direct, rel_tol=1e-12)
    with pytest.raises(ValueError):
        weighted_bce(p, np.ones((1, 4)))
    with pytest.raises(ValueError):
        weighted_bce(p, np.zeros((1, 4)))


# ---------------------------------------------------------------- pixel metrics


def test_mae_mse(rng):
    a = rng.random((9, 11))
    assert mae(a, a) == 0.0 and mse(a, a) == 0.0
    b = np.full((4, 4), 0.5)
    assert math.isclose(mae(b + 0.1, b), 0.1, rel_tol=1e-12)
    assert math.isclose(mse(b + 0.1, b), 0.01, rel_tol=1e-12)
    c = rng.random((9, 11))
    loop_mae = sum(abs(a[i, j] - c[i, j]) for i in range(9) for j in range(11)) / 99
    loop_mse = sum((a[i, j] - c[i, j]) ** 2 for i in range(9) for j in range(11)) / 99
    assert abs(mae(a, c) - loop_mae) <= 1e-12
    assert abs(mse(a, c) - loop_mse) <= 1e-12
    with pytest.raises(ValueError):
        mae(a, c[:, :5])


def test_metrics_accept_images(rng):
    a = GrayImage(rng.random((5, 5)))
    assert mae(a, a) == 0.0


def test_psnr():
    assert math.isclose(psnr_from_mse(0.01), 20.0, abs_tol=1e-9)
    assert psnr_from_mse(1.0) == 0.0
    assert psnr_from_mse(0.0) == math.inf
    a = np.zeros((3, 3))
    assert psnr(a, a) == math.inf
    assert math.isclose(psnr(a + 0.1, a), 20.0, abs_tol=1e-9)
    assert math.isclose(psnr_from_mse(0.01, peak=255.0), 10 * math.log10(255**2 / 0.01))


@settings(max_examples=50)
@given(st.floats(1e-6, 10), st.floats(1e-6, 10))
def test_psnr_decreasing(m1, m2):
    if m1 < m2:
        assert psnr_from_mse(m1) > psnr_from_mse(m2)


def test_ssim_identity_and_symmetry(rng):
    a, b = rng.random((20, 17)), rng.random((20, 17))
    assert abs(ssim(a, a) - 1.0) <= 1e-12
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12


def test_ssim_matches_loop(rng):
    a = rng.random((14, 12))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert math.isclose(ssim(a, b), loop_ssim(a, b), rel_tol=1e-9)


def test_ssim_anticorrelated():
    a = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    assert ssim(a, 1 - a) < 0


def test_ssim_constant_shift():
    c = 0.3
    a, b = np.full((10, 10), c), np.full((10, 10), c + 0.1)
    c1 = 1e-4
    expected = (2 * c * (c + 0.1) + c1) / (c**2 + (c + 0.1) ** 2 + c1)
    assert math.isclose(ssim(a, b), expected, rel_tol=1e-9)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((7, 20)), np.zeros((7, 20)))


def test_dice():
    a = np.zeros((4, 4), bool)
    a[0, :] = True
    b = np.zeros((4, 4), bool)
    b[0, :2] = b[1, :2] = True
    assert dice(a, a) == 1.0
    assert dice(a, np.roll(a, 1, axis=0)) == 0.0
    assert dice(a, b) == 0.5
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    assert dice(a, b) == dice(b, a)


# ---------------------------------------------------------------- average precision


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.9, 0.2], [0, 1]) == 0.5
    with pytest.raises(ValueError):
        average_precision([0.3, 0.2], [0, 0])


def test_ap_ties_grouped():
    # one threshold covers both tied items: precision 1/2 at recall 1
    assert average_precision([0.5, 0.5], [1, 0]) == 0.5


def test_ap_sweep_oracle_small(rng):
    for n in range(1, 7):
        for labels in itertools.product([0, 1], repeat=n):
            if not any(labels):
                continue
            scores = rng.integers(0, 4, size=n).tolist()
            assert math.isclose(average_precision(scores, labels), sweep_ap(scores, labels), abs_tol=1e-12)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(-5, 5), st.integers(0, 1)), min_size=1, max_size=30))
def test_ap_monotone_transform_invariant(rows):
    scores = [s for s, _ in rows]
    labels = [l for _, l in rows]
    if not any(labels):
        return
    transformed = [math.atan(3 * s) + 7 for s in scores]
    # strictly monotone maps preserve ties and order
    if len(set(transformed)) != len(set(scores)):
        return
    assert math.isclose(average_precision(scores, labels), average_precision(transformed, labels), abs_tol=1e-12)


# ---------------------------------------------------------------- bootstrap


def test_bootstrap_constant_dataset():
    res = bootstrap_ap([0.7] * 10, [1] * 10, replicates=50, seed=1)
    assert res.ap_mean == 1.0 and res.ap_std == 0.0


def test_bootstrap_single_replicate():
    res = bootstrap_ap([0.9, 0.1, 0.4], [1, 0, 1], replicates=1, seed=2)
    assert res.ap_std == 0.0 and res.std_defined is False


def test_bootstrap_deterministic(rng):
    s = rng.random(50).tolist()
    y = (rng.random(50) > 0.6).astype(int).tolist()
    assert bootstrap_ap(s, y, 200, 9) == bootstrap_ap(s, y, 200, 9)
    assert bootstrap_ap(s, y, 200, 9) != bootstrap_ap(s, y, 200, 10)


def test_bootstrap_counts_skipped():
    s = [0.1 * i for i in range(10)]
    y = [0] * 9 + [1]
    res = bootstrap_ap(s, y, 300, 4)
    assert res.skipped > 0
    assert 0.0 <= res.ap_mean <= 1.0


# ---------------------------------------------------------------- evaluate_pairs and files


def _dataset(tmp_path, rng, n=3):
    records = []
    for i in range(n):
        d = tmp_path / "ds" / f"c{i}"
        d.mkdir(parents=True)
        px = rng.random((16, 12)).astype(np.float32)
        px.flat[0], px.flat[1] = 0, 1
        volio.write_image(GrayImage(px), d / "target.f32", "f32raw")
        records.append(volio.ManifestRecord(f"c{i}", target_path=f"c{i}/target.f32"))
    return volio.DatasetManifest(records)


def test_evaluate_identical(tmp_path, rng):
    m = _dataset(tmp_path, rng)
    report = evaluate_pairs(m, tmp_path / "ds", tmp_path / "ds")
    assert all(c.mae == 0 and c.ssim == 1.0 and c.psnr_db == math.inf for c in report.cases)
    csv = report.to_csv().splitlines()
    assert csv[0] == "case_id,mae,mse,psnr_db,ssim"
    assert csv[1].startswith("c0,0.0,0.0,inf,1.0")
    assert csv[-2].startswith("MEAN,") and csv[-1].startswith("STD,")


def test_evaluate_missing_and_aggregates(tmp_path, rng):
    m = _dataset(tmp_path, rng)
    pred = tmp_path / "pred"
    pred.mkdir()
    for i in (0, 2):
        img = volio.read_image(tmp_path / "ds" / f"c{i}" / "target.f32")
        noisy = np.clip(img.pixels + rng.normal(0, 0.05, img.pixels.shape), 0, 1)
        volio.write_image(GrayImage(noisy.astype(np.float32)), pred / f"c{i}.f32", "f32raw")
    report = evaluate_pairs(m, tmp_path / "ds", pred)
    assert report.cases[1].error == "missing prediction"
    ok = [report.cases[0], report.cases[2]]
    for col in MetricReport.COLUMNS:
        assert math.isclose(report.mean[col], np.mean([getattr(c, col) for c in ok]), rel_tol=1e-12)
    assert report.to_csv().splitlines()[2] == "c1,NA,NA,NA,NA"


def test_read_scores(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("score,label\n0.9,1\n0.1,0\n")
    assert read_scores(p) == ([0.9, 0.1], [1, 0])
    p.write_text("score,label\n0.9,2\n")
    with pytest.raises(volio.FormatError):
        read_scores(p)
    p.write_text("a,b\n1,2\n")
    with pytest.raises(volio.FormatError):
        read_scores(p)
