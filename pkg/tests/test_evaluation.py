from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commacloud.detector import Detection
from commacloud.exceptions import PreconditionError
from commacloud.imagery import BBox, Frame, LabeledCloud, StormEvent
from commacloud.evaluation import (
    baseline_intensity,
    baseline_spatial_intensity,
    boxes_from_gmm2d,
    cloud_recall,
    evaluate,
    gaussian_box,
    missing_rate_curve,
    precision_recall,
    run_baselines,
    storm_recall,
    summary_text,
    write_curve,
)

T0 = datetime(2008, 5, 2, 6, 15, tzinfo=timezone.utc)
T1 = T0 + timedelta(minutes=30)


def _det(x, y, s, p=0.9, t=T0):
    return Detection(BBox(x, y, s), p, t)


def _storm(row, col, begin=T0, end=T1):
    return StormEvent(begin, end, row, col)


# --------------------------------------------------------------------------
# recall


def test_cloud_recall_examples():
    labels = [LabeledCloud(T0, BBox(10, 10, 100)), LabeledCloud(T0, BBox(300, 10, 100))]
    assert cloud_recall([_det(10, 10, 100), _det(300, 10, 100)], labels) == 1.0
    assert cloud_recall([], labels) == 0.0
    assert cloud_recall([_det(12, 8, 100)], labels) == 0.5
    # right place, wrong frame
    assert cloud_recall([_det(10, 10, 100, t=T1)], labels) == 0.0
    assert np.isnan(cloud_recall([], labels, timestamps={T1}))


def test_storm_recall_examples():
    storms = [_storm(50, 50)]
    assert storm_recall([_det(0, 0, 101)], storms) == 1.0
    # box covers 0..99 inclusive; the storm sits one pixel outside
    assert storm_recall([_det(0, 0, 50)], [_storm(50, 25)]) == 0.0
    assert storm_recall([_det(0, 0, 51)], [_storm(50, 25)]) == 1.0
    late = T1 + timedelta(minutes=30)
    assert storm_recall([_det(0, 0, 101, t=late)], storms) == 0.0


def test_storm_recall_equals_cloud_match_when_storms_sit_in_labels():
    rng = np.random.default_rng(0)
    labels, storms, dets = [], [], []
    for k in range(40):
        t = T0 + k * timedelta(hours=1)
        box = BBox(int(rng.integers(0, 400)), int(rng.integers(0, 100)), 128)
        labels.append(LabeledCloud(t, box))
        storms.append(StormEvent(t, t, box.y0 + 64, box.x0 + 64))
        if rng.random() < 0.6:
            dets.append(Detection(box, 0.8, t))
    assert storm_recall(dets, storms) == cloud_recall(dets, labels)


def _candidates(seed=1, n_frames=12):
    rng = np.random.default_rng(seed)
    cands, labels, storms = {}, [], []
    for k in range(n_frames):
        t = T0 + k * timedelta(minutes=30)
        truth = BBox(int(rng.integers(0, 300)), int(rng.integers(0, 80)), 128)
        labels.append(LabeledCloud(t, truth))
        storms.append(StormEvent(t, t, truth.y0 + 60, truth.x0 + 60))
        dets = [Detection(truth, float(rng.random()), t)]
        for _ in range(5):
            dets.append(_det(int(rng.integers(0, 500)), int(rng.integers(0, 100)), 128, float(rng.random()), t))
        cands[t] = dets
    return cands, labels, storms


def test_missing_rate_curve_monotone_and_limits():
    cands, labels, storms = _candidates()
    grid = np.linspace(0.01, 0.99, 25)
    curve = missing_rate_curve(cands, labels, storms, grid)
    per_frame = [c.detections_per_frame for c in curve]
    cloud = [c.cloud_missing for c in curve]
    assert all(a >= b for a, b in zip(per_frame, per_frame[1:]))
    assert all(a <= b for a, b in zip(cloud, cloud[1:]))
    top = missing_rate_curve(cands, labels, storms, [0.999999])[0]
    assert top.detections_per_frame == 0 and top.cloud_missing == 1.0 and top.storm_missing == 1.0
    with pytest.raises(PreconditionError):
        missing_rate_curve(cands, labels, storms, [0.0])


def test_evaluate_report(tmp_path):
    cands, labels, storms = _candidates(2)
    dets = {t: [d for d in v if d.p >= 0.5] for t, v in cands.items()}
    report = evaluate(dets, labels, storms, cands, [0.3, 0.5])
    assert report.n_frames == 12
    assert 0 <= report.cloud_recall <= 1 and 0 <= report.storm_recall <= 1
    assert len(report.curve) == 2
    text = summary_text(report)
    assert "cloud recall" in text and "storm recall" in text
    write_curve(tmp_path / "c.csv", report.curve)
    assert (tmp_path / "c.csv").read_text().startswith("p0,detections_per_frame")


# --------------------------------------------------------------------------
# box fitting


def _square_points(top, left, side):
    rr, cc = np.mgrid[top : top + side, left : left + side]
    return np.column_stack([rr.ravel(), cc.ravel()])


@pytest.mark.parametrize("side", [20, 40, 64])
def test_uniform_square_side(side):
    boxes = boxes_from_gmm2d(_square_points(30, 50, side))
    assert len(boxes) == 1
    assert boxes[0].side == pytest.approx(side * 4 / np.sqrt(12), rel=0.15)


def test_two_far_blobs_give_two_boxes():
    pts = np.vstack([_square_points(10, 10, 15), _square_points(200, 300, 15)])
    assert len(boxes_from_gmm2d(pts)) == 2


def test_degenerate_point_sets():
    assert boxes_from_gmm2d(np.zeros((0, 2))) == []
    assert boxes_from_gmm2d([[5, 7]])[0].side == 8
    line = np.column_stack([np.zeros(50), np.arange(50)])
    box = gaussian_box(line)
    assert 0 < box.side < 100


@given(st.integers(-50, 50), st.integers(-50, 50))
@settings(max_examples=15, deadline=None)
def test_boxes_translation_equivariant(dr, dc):
    rng = np.random.default_rng(3)
    pts = np.vstack([rng.normal((100, 100), 8, (150, 2)), rng.normal((100, 220), 8, (150, 2))]).round()
    a = sorted((b.x0, b.y0, b.side) for b in boxes_from_gmm2d(pts))
    b = sorted((b.x0 - dc, b.y0 - dr, b.side) for b in boxes_from_gmm2d(pts + [dr, dc]))
    assert a == b


# --------------------------------------------------------------------------
# baselines


def _canvas(shape=(200, 300)):
    return np.full(shape, 100.0)


def test_intensity_baseline_examples():
    img = _canvas()
    assert baseline_intensity(img, 210) == []
    img[40:80, 60:100] = 240
    boxes = baseline_intensity(img, 210)
    assert len(boxes) == 1
    b = boxes[0]
    centre_r, centre_c = b.y0 + (b.side - 1) / 2, b.x0 + (b.side - 1) / 2
    assert abs(centre_r - 59.5) <= 1 and abs(centre_c - 79.5) <= 1
    img[120:160, 200:240] = 240
    assert len(baseline_intensity(img, 210)) == 2


def test_spatial_intensity_baseline_separates_squares():
    img = _canvas()
    img[20:50, 20:50] = 230
    img[120:150, 200:230] = 250
    boxes = baseline_spatial_intensity(img, 0.7, 225)
    assert len(boxes) == 2
    centres = sorted((b.y0 + b.side // 2, b.x0 + b.side // 2) for b in boxes)
    assert abs(centres[0][0] - 35) <= 2 and abs(centres[1][1] - 215) <= 2
    # intensity alone also splits two brightness levels
    assert len(baseline_spatial_intensity(img, 0.0, 225)) == 2
    assert baseline_spatial_intensity(_canvas(), 0.5) == []


def test_precision_recall_conventions():
    storms = [_storm(50, 50)]
    pts = precision_recall({1.0: {T0: []}, 2.0: {T0: [BBox(0, 0, 101), BBox(200, 0, 10)]}}, storms)
    assert (pts[0].precision, pts[0].recall) == (1.0, 0.0)
    assert (pts[1].precision, pts[1].recall) == (0.5, 1.0)
    with pytest.raises(PreconditionError):
        precision_recall({}, storms)


def test_run_baselines_shapes():
    rng = np.random.default_rng(4)
    frames = []
    for k in range(3):
        px = rng.integers(0, 150, (64, 96)).astype(np.uint8)
        px[10:30, 10:30] = 250
        frames.append(Frame(px, T0 + k * timedelta(minutes=30)))
    storms = [_storm(20, 20, T0, T0 + timedelta(hours=2))]
    out = run_baselines(frames, storms)
    assert [p.parameter for p in out["intensity"]] == [210.0, 215.0, 220.0, 225.0, 230.0]
    assert [p.parameter for p in out["spatial-intensity"]] == [0.0, 0.3, 0.7, 1.0]
    for pts in out.values():
        assert all(0 <= p.recall <= 1 and 0 <= p.precision <= 1 for p in pts)
