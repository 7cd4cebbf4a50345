import json
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commacloud.detector import (
    CommaDetector,
    Detection,
    ModelBundle,
    detect_frame,
    draw_overlay,
    nms,
    read_detections,
    score_window,
    write_detections,
)
from commacloud.exceptions import FormatError, InsufficientHistoryError, PreconditionError
from commacloud.imagery import BBox, Frame, iou, read_pgm

T0 = datetime(2008, 2, 3, 4, 15, tzinfo=timezone.utc)


def _d(x, y, s, p):
    return Detection(BBox(x, y, s), p, T0)


# --------------------------------------------------------------------------
# suppression


def test_nms_examples():
    a, b = _d(0, 0, 100, 0.9), _d(0, 0, 100, 0.8)
    assert nms([b, a]) == [a]
    far = [_d(0, 0, 50, 0.5), _d(100, 0, 50, 0.6), _d(0, 100, 50, 0.7)]
    assert len(nms(far)) == 3
    assert nms([]) == []


def test_nms_chain_keeps_ends():
    A, B, C = _d(0, 0, 100, 0.9), _d(40, 0, 100, 0.8), _d(80, 0, 100, 0.7)
    assert iou(A.box, B.box) >= 0.3 and iou(B.box, C.box) >= 0.3 and iou(A.box, C.box) < 0.3
    assert nms([C, B, A]) == [A, C]


def test_nms_tie_break_top_left_then_smaller():
    left, right = _d(0, 0, 100, 0.5), _d(10, 0, 100, 0.5)
    assert nms([right, left]) == [left]
    small, big = _d(0, 0, 100, 0.5), _d(0, 0, 110, 0.5)
    assert nms([big, small]) == [small]


@given(st.lists(st.tuples(st.integers(0, 200), st.integers(0, 200), st.integers(8, 120), st.floats(0, 1)), max_size=40))
@settings(deadline=None)
def test_nms_output_properties(raw):
    dets = [_d(*r) for r in raw]
    kept = nms(dets)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert iou(kept[i].box, kept[j].box) < 0.3
    assert [d.p for d in kept] == sorted((d.p for d in kept), reverse=True)
    # every suppressed box overlaps some kept box with higher or equal p
    for d in dets:
        if d not in kept:
            assert any(iou(d.box, k.box) >= 0.3 and k.p >= d.p for k in kept)
    assert nms(list(reversed(dets))) == kept


# --------------------------------------------------------------------------
# detection files


def test_detection_csv_round_trip(tmp_path):
    dets = [_d(1, 2, 130, 0.75), Detection(BBox(7, 8, 256), 0.5123456789, T0.replace(hour=9))]
    path = tmp_path / "d.csv"
    write_detections(path, dets)
    assert path.read_text().splitlines()[0] == "timestamp,x0,y0,side,p"
    assert sorted(read_detections(path), key=lambda d: d.timestamp) == dets
    (tmp_path / "bad.csv").write_text("when,x,y\n")
    with pytest.raises(FormatError):
        read_detections(tmp_path / "bad.csv")


def test_overlay_burns_outline(tmp_path):
    frame = Frame(np.full((50, 60), 10, np.uint8), T0)
    img = draw_overlay(frame, [_d(5, 6, 20, 0.9)], tmp_path / "o.pgm")
    assert img[6, 5] == 255 and img[25, 24] == 255 and img[15, 15] == 10
    assert np.array_equal(read_pgm(tmp_path / "o.pgm"), img)


# --------------------------------------------------------------------------
# trained pipeline on a small corpus


def test_bundle_round_trip(small_fit, tmp_path):
    det, _ = small_fit
    path = tmp_path / "m.json"
    det.bundle_.save(path)
    back = ModelBundle.load(path)
    assert back.to_json() == det.bundle_.to_json()
    data = json.loads(path.read_text())
    data["format"] = "other"
    with pytest.raises(FormatError):
        ModelBundle.from_dict(data)
    (tmp_path / "junk.json").write_text("{")
    with pytest.raises(FormatError):
        ModelBundle.load(tmp_path / "junk.json")


def test_predict_invariants(small_fit):
    det, corpus = small_fit
    out = det.predict(corpus.frames, p0=0.5)
    assert out
    for t, dets in out.items():
        assert all(d.p >= 0.5 and d.timestamp == t for d in dets)
        assert [d.p for d in dets] == sorted((d.p for d in dets), reverse=True)
        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                assert iou(dets[i].box, dets[j].box) < 0.3


def test_lower_p0_is_superset(small_fit):
    det, corpus = small_fit
    cands = det.candidates(corpus.frames)
    from commacloud.detector import _threshold_and_suppress

    for t, (props, probs) in cands.items():
        prev = None
        for p0 in (0.8, 0.6, 0.5, 0.3):
            pre = {tuple(b) for b, p in zip(props.boxes, probs) if p >= p0}
            if prev is not None:
                assert prev <= pre
            prev = pre
        assert len(_threshold_and_suppress(props, probs, 0.3, 0.3)) >= 0


def test_reloaded_bundle_predicts_identically(small_fit, tmp_path):
    det, corpus = small_fit
    det.bundle_.save(tmp_path / "m.json")
    clone = CommaDetector.from_bundle(ModelBundle.load(tmp_path / "m.json"))
    a = det.predict(corpus.frames[-12:])
    b = clone.predict(corpus.frames[-12:])
    assert a == b


def test_detect_frame_and_score_window(small_fit):
    det, corpus = small_fit
    frames = corpus.frames
    i = len(frames) - 1
    assert detect_frame(frames, i, det.bundle_) == det.predict(frames, only={frames[i].timestamp})[frames[i].timestamp]
    assert detect_frame(frames, 0, det.bundle_) is None
    box = BBox(0, 0, 128)
    assert score_window(frames, i, box, det.bundle_) == score_window(frames, i, box, det.bundle_)
    with pytest.raises(InsufficientHistoryError):
        score_window(frames, 0, box, det.bundle_)


def test_blank_frame_has_no_detections(small_fit):
    det, corpus = small_fit
    frames = list(corpus.frames)
    last = frames[-1]
    # cloud-free noise, above the contrast floor so the frame stays usable
    ground = np.random.default_rng(0).integers(40, 140, last.shape).astype(np.uint8)
    frames[-1] = Frame(ground, last.timestamp)
    assert det.predict(frames, only={last.timestamp}) == {last.timestamp: []}


def test_unfitted_and_bad_p0(small_fit):
    _, corpus = small_fit
    with pytest.raises(PreconditionError):
        CommaDetector().predict(corpus.frames)
    with pytest.raises(PreconditionError):
        small_fit[0].predict(corpus.frames, p0=1.0)
