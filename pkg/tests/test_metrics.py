import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from airm.errors import ShapeError
from airm.metrics import (EvalReport, aggregate, boundary_band, boundary_pixels, evaluate, iou, mba,
                          mba_radii, write_reports_csv)


def brute_boundary(mask):
    H, W = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(H):
        for x in range(W):
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < H and 0 <= xx < W and mask[yy, xx] != mask[y, x]:
                    out[y, x] = True
    return out


def brute_band(mask, r):
    edge = brute_boundary(mask)
    pts = np.argwhere(edge)
    H, W = mask.shape
    band = np.zeros((H, W), dtype=bool)
    for y in range(H):
        for x in range(W):
            band[y, x] = any(max(abs(y - py), abs(x - px)) <= r for py, px in pts)
    return band


def brute_band_accuracy(pred, gt, r):
    band = brute_band(gt, r)
    hits = total = 0
    for y, x in np.argwhere(band):
        total += 1
        hits += int(pred[y, x] == gt[y, x])
    return hits / total


class TestIoU:
    def test_identical(self):
        m = np.zeros((4, 4), bool)
        m[1:3, 1:3] = True
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[3, 3] = True
        assert iou(a, b) == 0.0

    def test_left_half_vs_full(self):
        pred = np.zeros((4, 4), bool)
        pred[:, :2] = True
        gt = np.ones((4, 4), bool)
        assert iou(pred, gt) == 0.5

    def test_both_empty(self):
        z = np.zeros((5, 5), bool)
        assert iou(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            iou(np.zeros((3, 3)), np.zeros((4, 4)))

    def test_soft_inputs_thresholded(self):
        assert iou(np.full((2, 2), 0.6), np.ones((2, 2))) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(bool, (6, 7)), arrays(bool, (6, 7)))
    def test_symmetric(self, a, b):
        assert iou(a, b) == iou(b, a)


class TestBoundaryBand:
    def test_constant_mask_has_no_band(self):
        assert not boundary_band(np.ones((8, 8), bool), 3).any()
        assert not boundary_band(np.zeros((8, 8), bool), 3).any()

    def test_centered_square(self):
        m = np.zeros((8, 8), bool)
        m[3:5, 3:5] = True
        band = boundary_band(m, 1)
        np.testing.assert_array_equal(band, brute_band(m, 1))
        # frozen from the brute-force oracle above
        assert band.sum() == 32

    def test_huge_radius_covers_image(self):
        m = np.zeros((8, 8), bool)
        m[3:5, 3:5] = True
        assert boundary_band(m, 12).all()

    @settings(max_examples=30, deadline=None)
    @given(arrays(bool, (7, 8)), st.integers(0, 4))
    def test_matches_brute_force(self, m, r):
        np.testing.assert_array_equal(boundary_pixels(m), brute_boundary(m))
        np.testing.assert_array_equal(boundary_band(m, r), brute_band(m, r))


class TestMBA:
    def test_perfect(self):
        m = np.zeros((32, 32), bool)
        m[8:20, 5:25] = True
        score, per = mba(m, m)
        assert score == 1.0
        assert all(a == 1.0 for _, a in per)

    def test_complement(self):
        m = np.zeros((32, 32), bool)
        m[8:20, 5:25] = True
        assert mba(~m, m)[0] == 0.0

    def test_shifted_half_plane_against_oracle(self):
        gt = np.zeros((32, 32), bool)
        gt[:, 16:] = True
        pred = np.zeros((32, 32), bool)
        pred[:, 17:] = True
        score, per = mba(pred, gt, radii=[3])
        assert per[0][0] == 3
        assert abs(score - brute_band_accuracy(pred, gt, 3)) <= 1e-12

    def test_per_radius_nondecreasing_for_one_pixel_shift(self):
        gt = np.zeros((48, 48), bool)
        gt[:, 20:] = True
        pred = np.roll(gt, 1, axis=1)
        pred[:, 0] = False
        _, per = mba(pred, gt, radii=[1, 2, 3, 5, 8, 13])
        accs = [a for _, a in per]
        assert all(b >= a for a, b in zip(accs, accs[1:]))

    def test_radii_schedule(self):
        radii = mba_radii((64, 64), 5)
        assert len(radii) == 5 and radii[0] == 1 and radii[-1] == 3
        big = mba_radii((1000, 1000), 5)
        assert big[-1] == round(0.02 * np.hypot(1000, 1000))

    def test_no_boundary_falls_back_to_pixel_accuracy(self):
        gt = np.zeros((4, 4), bool)
        pred = np.zeros((4, 4), bool)
        pred[0, 0] = True
        score, per = mba(pred, gt)
        assert per == [] and score == 15 / 16
        assert evaluate(pred, gt).no_boundary


class TestReports:
    def test_evaluate_identical(self):
        m = np.zeros((16, 16, 1), np.float32)
        m[4:10, 4:12] = 1
        r = evaluate(m, m)
        assert r.iou == 1.0 and r.mba == 1.0
        assert 0 <= r.iou <= 1 and r.mba == pytest.approx(np.mean([a for _, a in r.per_radius_accuracy]))

    def test_json_roundtrip(self):
        r = EvalReport(iou=0.5, mba=0.25, per_radius_accuracy=[(1, 0.25)], name="x")
        d = json.loads(r.to_json())
        assert d["iou"] == 0.5 and d["per_radius_accuracy"] == [[1, 0.25]]

    def test_aggregate_and_csv(self, tmp_path):
        reps = [EvalReport(1.0, 0.5, name="a"), EvalReport(0.5, 0.5, name="b")]
        agg = aggregate(reps)
        assert agg.iou == 0.75
        write_reports_csv(reps, tmp_path / "t.csv", agg)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "name,iou,mba,status" and len(lines) == 4

    def test_empty_aggregate(self):
        assert np.isnan(aggregate([]).iou)
