import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from hcseg.metrics import (
    REPORT_COLUMNS,
    EllipseFitError,
    EllipseParams,
    EmptySegmentationError,
    boundary_edge_points,
    boundary_mask,
    directed_hausdorff,
    ellipse_perimeter,
    evaluate_one,
    evaluate_set,
    extract_boundary,
    fit_ellipse,
    hausdorff,
    measure_hc,
    pixel_dice,
    rasterize_ellipse,
)


def ellipse_points(e, n=60, noise=0.0, rng=None):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    c, s = math.cos(e.theta), math.sin(e.theta)
    x = e.cx + e.a * np.cos(t) * c - e.b * np.sin(t) * s
    y = e.cy + e.a * np.cos(t) * s + e.b * np.sin(t) * c
    pts = np.column_stack([x, y])
    if noise:
        pts += rng.normal(scale=noise, size=pts.shape)
    return pts


def test_dice_known_values():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[:2] = True
    b[1:3] = True
    assert pixel_dice(a, b) == 0.5
    assert pixel_dice(a, a) == 1.0
    assert pixel_dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ValueError):
        pixel_dice(a, np.zeros((3, 3)))


def test_boundary_definition():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    b = boundary_mask(m)
    assert b.sum() == 8 and not b[2, 2]
    full = boundary_mask(np.ones((3, 3), bool))
    assert full.sum() == 8 and not full[1, 1]


def test_hausdorff_small_example():
    s = np.array([[0, 0], [0, 1]])
    r = np.array([[0, 0], [3, 4]])
    assert directed_hausdorff(s, r) == 1.0
    assert directed_hausdorff(r, s) == pytest.approx(math.hypot(3, 3))
    assert hausdorff(s, r, pixel_size=0.5) == pytest.approx(0.5 * math.hypot(3, 3))
    with pytest.raises(EmptySegmentationError):
        hausdorff(np.zeros((0, 2)), r)


@settings(max_examples=30, deadline=None)
@given(st.floats(5, 60), st.floats(0.3, 1.0), st.floats(0, math.pi - 1e-6), st.floats(-50, 50), st.floats(-50, 50))
def test_fit_recovers_exact_ellipse(a, ratio, theta, cx, cy):
    e = EllipseParams.make(cx, cy, a, a * ratio, theta)
    f = fit_ellipse(ellipse_points(e))
    assert f.a == pytest.approx(e.a, rel=1e-6)
    assert f.b == pytest.approx(e.b, rel=1e-6)
    assert (f.cx, f.cy) == pytest.approx((e.cx, e.cy), abs=1e-6)
    if ratio < 0.99:
        d = abs(f.theta - e.theta) % math.pi
        assert min(d, math.pi - d) < 1e-5


def test_fit_is_translation_equivariant():
    rng = np.random.default_rng(0)
    pts = ellipse_points(EllipseParams.make(0, 0, 30, 18, 0.7), noise=0.3, rng=rng)
    f1, f2 = fit_ellipse(pts), fit_ellipse(pts + [1000.0, -250.0])
    assert f2.a == pytest.approx(f1.a, rel=1e-9)
    assert (f2.cx - 1000.0, f2.cy + 250.0) == pytest.approx((f1.cx, f1.cy), abs=1e-7)


def test_fit_rejects_degenerate_input():
    with pytest.raises(EllipseFitError):
        fit_ellipse(np.zeros((3, 2)))
    with pytest.raises(EllipseFitError):
        fit_ellipse(np.column_stack([np.arange(10.0), 2 * np.arange(10.0)]))


def test_perimeter_against_integral():
    for a, b in [(10, 10), (50, 20), (100, 5), (30, 29)]:
        val, _ = integrate.quad(lambda t: math.hypot(a * math.sin(t), b * math.cos(t)), 0, math.pi / 2)
        e = EllipseParams(0, 0, a, b, 0)
        assert ellipse_perimeter(e) == pytest.approx(4 * val, rel=5e-4)
    assert ellipse_perimeter(EllipseParams(0, 0, 10, 10, 0), 0.1) == pytest.approx(2 * math.pi)


def test_edge_points_lie_on_pixel_edges():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    pts = boundary_edge_points(m)
    assert len(pts) == 8
    assert set(map(tuple, pts)) == {(1.0, 0.5), (2.0, 0.5), (1.0, 2.5), (2.0, 2.5), (0.5, 1.0), (0.5, 2.0), (2.5, 1.0), (2.5, 2.0)}


def test_measure_hc_on_rasterized_ellipse():
    e = EllipseParams.make(60.3, 50.7, 45, 30, 0.3)
    m = rasterize_ellipse((100, 120), e)
    hc, df, adf = measure_hc(m, ellipse_perimeter(e, 0.2), 0.2)
    assert abs(df) / hc < 0.005
    assert adf == abs(df)
    with pytest.raises(EmptySegmentationError):
        measure_hc(np.zeros((5, 5)), 10.0, 0.1)


def test_evaluate_set_reports_failures_and_aggregates(tmp_path):
    e = EllipseParams.make(20, 20, 12, 8, 0.0)
    gt = rasterize_ellipse((40, 40), e)
    hc = ellipse_perimeter(e, 0.1)
    pairs = [(gt, gt, hc, 0.1), (np.zeros_like(gt), gt, hc, 0.1)]
    rep = evaluate_set(pairs, ids=["good", "empty"])
    assert rep.failed == 1 and rep.warning
    assert rep.mean("Dice") == 1.0
    assert rep.aggregates["HD(mm)"]["mean"] == 0.0
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader((tmp_path / "r.csv").open()))
    assert tuple(rows[0][1:5]) == REPORT_COLUMNS
    assert rows[2][-1].startswith("failed")
    rep.write_summary_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "statistic,Dice,DF(mm),ADF(mm),HD(mm)"
    summary = json.loads(rep.write_json(tmp_path / "s.json").read_text())
    assert summary["failures"] == {"empty": rep.rows[1].error}


def test_evaluate_one_hd_in_mm():
    a = np.zeros((10, 10), bool)
    a[2:5, 2:5] = True
    b = np.zeros((10, 10), bool)
    b[2:5, 5:8] = True
    row = evaluate_one(a, b, 50.0, 0.5)
    assert row.dice == 0.0
    assert row.hd_mm == pytest.approx(1.5)
    assert extract_boundary(a).shape == (8, 2)
