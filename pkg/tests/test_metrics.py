import math

import numpy as np
import pytest

from oracles import loop_mae, loop_psnr
from ctinpaint.metrics import evaluate_set, format_table, mae_masked, psnr, psnr_masked, write_report_csv


def _mask(shape, rng):
    m = (rng.uniform(size=shape) > 0.3).astype(float)
    m.flat[0] = 0
    return m


def test_mae_identical_is_zero():
    y = np.ones((4, 4))
    m = np.ones((4, 4))
    m[1, 1] = 0
    assert mae_masked(y, y, m) == 0


def test_mae_uniform_offset():
    rng = np.random.default_rng(0)
    label = rng.uniform(size=(8, 8))
    m = _mask((8, 8), rng)
    pred = np.where(m == 0, label + 0.5, label)
    assert mae_masked(pred, label, m) == pytest.approx(0.5, abs=1e-15)


def test_mae_rejects_no_masked_pixels():
    with pytest.raises(ValueError):
        mae_masked(np.zeros((3, 3)), np.zeros((3, 3)), np.ones((3, 3)))


def test_psnr_closed_form():
    label = np.zeros((10, 10))
    pred = label.copy()
    pred[3, 4] = 1.0  # MSE = 1/100
    assert psnr(pred, label, 1.0) == 20.0


def test_psnr_identical_is_inf():
    assert psnr(np.ones((3, 3)), np.ones((3, 3))) == math.inf


@pytest.mark.parametrize("seed", range(10))
def test_against_loops(seed):
    rng = np.random.default_rng(seed)
    pred, label = rng.uniform(size=(2, 8, 8))
    m = _mask((8, 8), rng)
    peak = rng.uniform(0.5, 2.0)
    assert abs(mae_masked(pred, label, m) - loop_mae(pred, label, m)) < 1e-12
    assert abs(psnr(pred, label, peak) - loop_psnr(pred, label, peak)) < 1e-9


def test_psnr_decreases_with_error():
    label = np.zeros((8, 8))
    m = np.ones((8, 8))
    m[2:5, 2:5] = 0
    values = [psnr(np.where(m == 0, e, 0.0), label) for e in (0.01, 0.02, 0.05, 0.1)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_permutation_invariance():
    rng = np.random.default_rng(4)
    pred, label = rng.uniform(size=(2, 6, 6))
    m = _mask((6, 6), rng)
    perm = rng.permutation(36)
    p2, l2, m2 = (a.ravel()[perm].reshape(6, 6) for a in (pred, label, m))
    assert mae_masked(pred, label, m) == pytest.approx(mae_masked(p2, l2, m2), rel=1e-14)
    assert psnr(pred, label) == pytest.approx(psnr(p2, l2), rel=1e-14)
    rep = evaluate_set([(pred, label, m), (p2, l2, m2)])
    rev = evaluate_set([(p2, l2, m2), (pred, label, m)])
    assert rep.mean_mae == pytest.approx(rev.mean_mae, rel=1e-14)


def test_evaluate_single_and_pair():
    label = np.zeros((4, 4))
    m = np.ones((4, 4))
    m[0, :2] = 0
    one = evaluate_set([(np.where(m == 0, 0.1, 0.0), label, m)])
    assert one.mean_mae == pytest.approx(0.1) and len(one) == 1
    two = evaluate_set([(np.where(m == 0, 0.1, 0.0), label, m), (np.where(m == 0, 0.3, 0.0), label, m)])
    assert two.mean_mae == pytest.approx(0.2)
    assert two.n_pixels_masked == [2, 2]
    assert two.psnr_masked[0] == pytest.approx(psnr_masked(np.where(m == 0, 0.1, 0.0), label, m))


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate_set([])


def test_table_layout(tmp_path):
    rng = np.random.default_rng(5)
    reports = {}
    for method in ("interpolation", "score"):
        for family in ("metal", "circle", "hrect", "vrect"):
            triples = []
            for _ in range(75):
                label = rng.uniform(size=(8, 8))
                m = _mask((8, 8), rng)
                triples.append((label + rng.normal(0, 0.01, (8, 8)), label, m))
            reports[(method, family)] = evaluate_set(triples)
    table = format_table(reports)
    lines = table.splitlines()
    assert "interpolation" in lines[0] and "score" in lines[0]
    assert lines[1].split() == ["Metric", "|", "MAE", "PSNR", "|", "MAE", "PSNR"]
    assert [l[:22].strip() for l in lines[3:]] == [
        "Metal mask", "Circle", "Horizontal rectangle", "Vertical rectangle"]
    csv_text = write_report_csv(tmp_path / "r.csv", reports).read_text().splitlines()
    assert csv_text[0] == "method,family,name,mae,psnr,psnr_masked,n_pixels_masked"
    assert len(csv_text) == 1 + 8 * (75 + 1)
    assert sum(len(r) for r in reports.values()) == 600
