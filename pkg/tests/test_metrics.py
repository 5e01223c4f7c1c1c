import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdmd.metrics import (
    auc,
    ced_fraction,
    ced_points,
    crop_to_pixels,
    evaluate,
    failure_rate,
    nme,
    normalization_distance,
)
from mdmd.schema import Normalization, bundled_schema, make_schema
from oracles import brute_fr, brute_nme, closed_form_auc, grid_auc


def test_nme_examples():
    gt = np.random.default_rng(0).uniform(0, 200, size=(29, 2))
    assert nme(gt, gt, 100.0) == 0.0
    pred = gt.copy()
    pred[3, 0] += 10.0
    assert nme(pred, gt, 100.0) == pytest.approx(brute_nme(pred, gt, 100.0), abs=1e-12)
    assert nme(pred, gt, 100.0) == pytest.approx(100 * (10 / 29) / 100, abs=1e-12)
    assert nme([[6.0, 8.0]], [[0.0, 0.0]], 100.0) == pytest.approx(10.0)


def test_nme_degenerate():
    with pytest.raises(ValueError):
        nme([[0, 0]], [[1, 1]], 0.0)


def test_failure_rate_examples():
    assert failure_rate([5, 15]) == 50.0
    assert failure_rate([0, 0, 0]) == 0.0
    assert failure_rate([10.0]) == 0.0
    with pytest.raises(ValueError):
        failure_rate([])


def test_auc_examples():
    assert auc([0.0, 0.0]) == 1.0
    assert auc([11.0, 30.0]) == 0.0
    assert auc([5.0]) == pytest.approx(0.5, abs=1e-15)
    assert grid_auc([5.0]) == pytest.approx(0.5, abs=1e-3)
    with pytest.raises(ValueError):
        auc([])


def test_auc_step_vs_grid():
    rng = np.random.default_rng(1)
    for _ in range(20):
        nmes = rng.gamma(2.0, 2.5, size=rng.integers(1, 200))
        a = auc(nmes)
        assert abs(a - grid_auc(nmes)) < 1e-3
        assert abs(a - closed_form_auc(nmes)) < 1e-12


def test_ced_points_monotone_and_endpoint():
    nmes = [0.0, 1.5, 1.5, 4.0, 12.0, 9.99]
    pts = ced_points(nmes)
    ts, fs = zip(*pts)
    assert list(ts) == sorted(ts) and list(fs) == sorted(fs)
    assert pts[-1] == (10.0, ced_fraction(nmes, 10.0))
    assert failure_rate(nmes) == 100.0 * (1.0 - pts[-1][1])


def test_normalization_distance():
    gt = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
    assert normalization_distance(gt, Normalization("pair", (0, 1))) == 5.0
    assert normalization_distance(gt, Normalization("bbox"), (0, 0, 4, 9)) == 6.0


def random_faces(rng, n_faces, n_pts):
    gt = rng.uniform(20, 180, size=(n_faces, n_pts, 2))
    pred = gt + rng.normal(scale=rng.uniform(0.5, 12, size=(n_faces, 1, 1)), size=gt.shape)
    boxes = [(float(g[:, 0].min()), float(g[:, 1].min()), float(np.ptp(g[:, 0])), float(np.ptp(g[:, 1]))) for g in gt]
    return pred, gt, boxes


def test_evaluate_matches_brute_force_500_faces():
    rng = np.random.default_rng(2)
    schema = bundled_schema("300W")
    pred, gt, boxes = random_faces(rng, 500, 68)
    report = evaluate(pred, gt, schema, bboxes=boxes)
    i, j = schema.normalization.pair
    want = [brute_nme(p, g, math.dist(g[i], g[j])) for p, g in zip(pred, gt)]
    assert np.max(np.abs(np.array(report.per_face_nme) - want)) < 1e-10
    assert abs(report.fr - brute_fr(want)) < 1e-10
    assert abs(report.auc - closed_form_auc(want)) < 1e-10
    assert report.fr == 100.0 * (1.0 - report.ced[-1][1])

    bbox_report = evaluate(pred, gt, schema, bboxes=boxes, normalization="bbox")
    want_bbox = [brute_nme(p, g, math.sqrt(b[2] * b[3])) for p, g, b in zip(pred, gt, boxes)]
    assert np.max(np.abs(np.array(bbox_report.per_face_nme) - want_bbox)) < 1e-10


def test_evaluate_perfect():
    rng = np.random.default_rng(3)
    _, gt, boxes = random_faces(rng, 10, 9)
    report = evaluate(gt, gt, bundled_schema("PARE"), bboxes=boxes)
    assert report.per_face_nme == [0.0] * 10
    assert report.fr == 0.0 and report.auc == 1.0


def test_evaluate_count_mismatch():
    with pytest.raises(ValueError):
        evaluate(np.zeros((2, 9, 2)), np.zeros((3, 9, 2)), bundled_schema("PARE"), bboxes=[(0, 0, 1, 1)] * 3)


def test_evaluate_excludes_degenerate_faces():
    schema = bundled_schema("300W")
    rng = np.random.default_rng(4)
    pred, gt, boxes = random_faces(rng, 5, 68)
    gt[2, 45] = gt[2, 36]
    with pytest.warns(UserWarning, match="excluded"):
        report = evaluate(pred, gt, schema)
    assert report.excluded == [2]
    assert len(report.per_face_nme) == 4


def test_evaluate_maps_crop_frame_back():
    schema = bundled_schema("PARE")
    rng = np.random.default_rng(5)
    gt = rng.uniform(30, 70, size=(3, 9, 2))
    transforms = [np.array([[0.5, 0.0, 10.0], [0.0, 0.5, 20.0]])] * 3
    norm = (gt - [10.0, 20.0]) / 0.5 / 64
    assert np.allclose(crop_to_pixels(norm[0], transforms[0], 64), gt[0])
    report = evaluate(norm, gt, schema, bboxes=[(30, 30, 40, 40)] * 3, transforms=transforms, image_size=64)
    assert max(report.per_face_nme) < 1e-10


def test_report_serialization(tmp_path):
    report = evaluate([[[1.0, 1.0]]], [[[0.0, 0.0]]], make_schema("one", 1, [[0]]), bboxes=[(0, 0, 10, 10)])
    report.write(tmp_path / "r.json")
    report.write_ced(tmp_path / "ced.csv")
    lines = (tmp_path / "ced.csv").read_text().splitlines()
    assert lines[0] == "threshold,fraction" and len(lines) == len(report.ced) + 1


nme_lists = st.lists(st.floats(0, 40, allow_nan=False), min_size=1, max_size=60)


@settings(max_examples=200, deadline=None)
@given(nme_lists, st.randoms(use_true_random=False))
def test_order_invariance(nmes, rnd):
    shuffled = list(nmes)
    rnd.shuffle(shuffled)
    assert failure_rate(shuffled) == failure_rate(nmes)
    assert auc(shuffled) == pytest.approx(auc(nmes), abs=1e-12)
    assert ced_points(shuffled) == ced_points(nmes)


@settings(max_examples=200, deadline=None)
@given(nme_lists)
def test_adding_perfect_face_is_monotone(nmes):
    assert auc(nmes + [0.0]) >= auc(nmes) - 1e-12
    assert failure_rate(nmes + [0.0]) <= failure_rate(nmes) + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 100))
def test_scale_invariance(scale):
    rng = np.random.default_rng(6)
    pred, gt, _ = random_faces(rng, 1, 9)
    assert nme(pred[0] * scale, gt[0] * scale, 37.0 * scale) == pytest.approx(nme(pred[0], gt[0], 37.0), rel=1e-9)
