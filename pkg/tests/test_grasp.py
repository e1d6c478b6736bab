import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlgrasp.errors import InputError
from vlgrasp.grasp import (GraspMaps, GraspRectangle, PredictionRecord, RgaPose, angle_difference, extract_top_n,
                           grasp_match, jacquard_at_n, rasterize_rectangle, read_predictions, recover_grasp,
                           rect_iou, rga_select, write_predictions)

from oracles import brute_argmax, raster_iou


def _maps(q, angle=0.3, width=20.0):
    return GraspMaps(q, np.full(q.shape, angle), np.full(q.shape, width))


def _tuple(r):
    return (r.x, r.y, r.theta, r.width, r.h)


rects = st.builds(GraspRectangle, st.floats(0, 60), st.floats(0, 60), st.floats(-math.pi / 2, math.pi / 2),
                  st.floats(2, 40))


def test_recover_planted_argmax():
    q = np.zeros((48, 64))
    ang, wid = np.zeros_like(q), np.zeros_like(q)
    q[20, 30], ang[20, 30], wid[20, 30] = 1.0, 0.7, 25.0
    assert recover_grasp(GraspMaps(q, ang, wid)) == GraspRectangle(30.0, 20.0, 0.7, 25.0)


def test_recover_tie_rules():
    assert recover_grasp(_maps(np.ones((5, 6)))).x == 0
    q = np.zeros((4, 4))
    q.flat[5] = q.flat[9] = 1.0
    g = recover_grasp(_maps(q))
    assert (g.y, g.x) == divmod(5, 4)
    with pytest.raises(InputError):
        recover_grasp(_maps(np.full((3, 3), np.nan)))
    with pytest.raises(InputError):
        GraspMaps(np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 3)))


def test_top_n_single_and_two_peaks():
    yy, xx = np.mgrid[:40, :40]
    bump = lambda r, c, a: a * np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / 8.0)
    one = extract_top_n(_maps(bump(10, 10, 1.0)), 5)
    assert len(one) == 1
    two = extract_top_n(_maps(bump(10, 10, 0.6) + bump(30, 25, 0.9)), 2)
    assert [(r.y, r.x) for r, _ in two] == [(30.0, 25.0), (10.0, 10.0)]
    assert two[0][1] > two[1][1]
    q = np.random.default_rng(0).random((30, 30))
    assert extract_top_n(_maps(q), 1)[0][0] == recover_grasp(_maps(q))
    with pytest.raises(InputError):
        extract_top_n(_maps(q), 0)


def test_top_n_respects_suppression_radius():
    q = np.random.default_rng(1).random((40, 40))
    peaks = extract_top_n(_maps(q), None, radius=5)
    for i, (a, _) in enumerate(peaks):
        for b, _ in peaks[:i]:
            assert (a.x - b.x) ** 2 + (a.y - b.y) ** 2 > 25


def test_rect_iou_trivial_cases():
    a = GraspRectangle(20, 20, 0.4, 16)
    assert rect_iou(a, a) == pytest.approx(1.0)
    assert rect_iou(a, GraspRectangle(60, 60, 0.0, 10)) == 0.0
    # concentric, same orientation, widths in ratio r -> IoU r^2 with the fixed aspect
    assert rect_iou(a, GraspRectangle(20, 20, 0.4, 8)) == pytest.approx(0.25)
    with pytest.raises(InputError):
        rect_iou(a, GraspRectangle(0, 0, 0, 0))


def test_rect_iou_matches_raster_oracle():
    rng = np.random.default_rng(7)
    for _ in range(60):
        a = GraspRectangle(*rng.uniform(10, 30, 2), rng.uniform(-1.5, 1.5), rng.uniform(4, 24))
        b = GraspRectangle(a.x + rng.normal(0, 5), a.y + rng.normal(0, 5), rng.uniform(-1.5, 1.5), rng.uniform(4, 24))
        assert abs(rect_iou(a, b) - raster_iou(_tuple(a), _tuple(b))) < 2e-2


def test_rasterize_rectangle_area():
    r = GraspRectangle(20.0, 20.0, 0.3, 16.0)
    assert rasterize_rectangle(r, (40, 40), supersample=8).sum() == pytest.approx(16 * 8, rel=2e-2)


def test_jacquard_rules():
    gt = GraspRectangle(30, 30, 0.0, 20)
    assert jacquard_at_n([gt], [gt])
    assert not jacquard_at_n([GraspRectangle(30, 30, math.radians(45), 20)], [gt])
    assert not jacquard_at_n([], [gt])
    with pytest.raises(InputError):
        jacquard_at_n([gt], [])
    # J@1 looks only at the first candidate, J@Any at all of them
    bad = GraspRectangle(5, 5, 0.0, 10)
    assert not jacquard_at_n([bad, gt], [gt], n=1)
    assert jacquard_at_n([(bad, 0.9), (gt, 0.8)], [gt], n=None)


def test_jacquard_constructed_pair_near_threshold():
    gt = GraspRectangle(30.0, 30.0, 0.0, 20.0)
    theta = math.radians(10)
    lo, hi = 0.0, 20.0  # slide the prediction along x until the oracle IoU is 0.30
    for _ in range(40):
        mid = (lo + hi) / 2
        iou = raster_iou((30 + mid, 30, theta, 20, 10), _tuple(gt), supersample=10)
        lo, hi = (mid, hi) if iou > 0.30 else (lo, mid)
    pred = GraspRectangle(30 + lo, 30.0, theta, 20.0)
    assert raster_iou(_tuple(pred), _tuple(gt)) == pytest.approx(0.30, abs=1e-2)
    assert jacquard_at_n([pred], [gt])


def test_angle_difference_is_half_turn_periodic():
    assert angle_difference(0.2, 0.2 + math.pi) == pytest.approx(0.0, abs=1e-12)
    assert angle_difference(math.radians(80), math.radians(-80)) == pytest.approx(math.radians(20))
    a = GraspRectangle(10, 10, 0.3, 12)
    assert grasp_match(a, GraspRectangle(10, 10, 0.3 + math.pi, 12))


def test_rga_select_planted_and_uniform():
    q = np.zeros((8, 9, 6))
    q[3, 4, 2] = 1.0
    depth = np.random.default_rng(0).random((8, 9))
    pose = rga_select(q, depth)
    assert (pose.x, pose.y, pose.k, pose.z) == (4, 3, 2, depth[3, 4])
    assert pose.theta == pytest.approx(math.radians(60))
    assert rga_select(np.ones((8, 9, 6)), depth) == RgaPose(0, 0, 0.0, float(depth[0, 0]), 0)
    with pytest.raises(InputError):
        rga_select(np.full((8, 9, 6), np.nan), depth)
    with pytest.raises(InputError):
        rga_select(q, depth[:4])


def test_rga_select_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(30):
        q = rng.integers(0, 5, (6, 7, 6)).astype(float)  # many ties
        depth = rng.random((6, 7))
        row, col, k = brute_argmax(q)
        pose = rga_select(q, depth)
        assert (pose.y, pose.x, pose.k) == (row, col, k)


def test_prediction_file_round_trip(tmp_path):
    recs = [PredictionRecord("a", [(GraspRectangle(1.5, 2.0, 0.25, 10.0), 0.9)]),
            PredictionRecord("b", [], RgaPose(3, 4, math.pi / 3, 0.55, 2))]
    path = write_predictions(tmp_path / "p.jsonl", recs)
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith('{"sample_id": "a", "candidates"')
    back = read_predictions(path)
    assert [r.sample_id for r in back] == ["a", "b"]
    assert back[0].candidates == recs[0].candidates and back[1].rga_pose == recs[1].rga_pose


@settings(max_examples=80, deadline=None)
@given(rects, rects)
def test_rect_iou_symmetric_and_bounded(a, b):
    v = rect_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(rect_iou(b, a), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 100))
def test_selection_is_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    q = rng.random((10, 12))
    assert recover_grasp(_maps(q)) == recover_grasp(_maps(q * scale))
    stack, depth = rng.random((5, 6, 6)), rng.random((5, 6))
    assert rga_select(stack, depth) == rga_select(stack * scale, depth)


@settings(max_examples=60, deadline=None)
@given(st.lists(rects, min_size=1, max_size=4), st.lists(rects, min_size=1, max_size=3))
def test_j_at_1_implies_j_at_any(preds, gts):
    if jacquard_at_n(preds, gts, n=1):
        assert jacquard_at_n(preds, gts, n=None)
