import numpy as np
import pytest

from commacloud.exceptions import PreconditionError
from commacloud.imagery import BBox, iou, load_frames, read_labels, read_storms
from commacloud.synth import BODY_RANGE, SLOT_LEVEL, SynthConfig, generate_corpus, render_comma, write_corpus

SMALL = dict(height=192, width=384, duration_hours=24, side_range=(96.0, 140.0), seed=3)


@pytest.fixture(scope="module")
def small():
    return generate_corpus(SynthConfig(**SMALL, max_cirrus=0))


def _tight(rc):
    r0, r1, c0, c1 = rc.support()
    sq = max(r1 - r0, c1 - c0) + 1
    y0 = int(round((r0 + r1) / 2 - (sq - 1) / 2))
    x0 = int(round((c0 + c1) / 2 - (sq - 1) / 2))
    return np.s_[y0 : y0 + sq, x0 : x0 + sq]


@pytest.mark.parametrize("side", [32, 128, 200, 512])
def test_mask_area_fraction_all_phases(side):
    for phase in range(0, 360, 10):
        rc = render_comma(side, phase)
        frac = rc.cloud[_tight(rc)].mean()
        assert 0.25 <= frac <= 0.6


def test_tight_box_mean_on_segmented_ground():
    for side in (128, 256):
        for phase in range(0, 360, 30):
            rc = render_comma(side, phase, texture_amplitude=4.0)
            seg = np.where(rc.cloud, rc.intensity, 0.0)
            assert 50 <= seg[_tight(rc)].mean() <= 200


def test_intensity_ranges():
    rc = render_comma(150, 37, texture_amplitude=20.0)
    body = rc.intensity[rc.cloud]
    assert body.min() >= BODY_RANGE[0] and body.max() <= BODY_RANGE[1]
    assert np.all(rc.intensity[rc.slot] <= 60) and SLOT_LEVEL <= 60
    assert not np.any(rc.slot & rc.cloud)
    assert rc.head.any() and (rc.cloud & ~rc.head).any()
    with pytest.raises(PreconditionError):
        render_comma(20, 0)


def test_half_turn_is_point_reflection():
    a = render_comma(140, 25).cloud
    b = render_comma(140, 205).cloud
    assert np.mean(a != np.rot90(b, 2)) < 0.005


def test_head_sits_northwest():
    rc = render_comma(160, 0)
    rr, cc = np.nonzero(rc.head)
    assert rr.mean() < rc.half and cc.mean() < rc.half


def test_deterministic(small):
    again = generate_corpus(SynthConfig(**SMALL, max_cirrus=0))
    assert all(a.pixels.tobytes() == b.pixels.tobytes() for a, b in zip(small.frames, again.frames))
    assert small.labels == again.labels and small.storms == again.storms
    other = generate_corpus(SynthConfig(**{**SMALL, "seed": 4}, max_cirrus=0))
    assert any(a.pixels.tobytes() != b.pixels.tobytes() for a, b in zip(small.frames, other.frames))


def test_no_commas_no_labels():
    corpus = generate_corpus(SynthConfig(**SMALL, max_commas=0, max_cirrus=0))
    assert corpus.labels == [] and corpus.storms == []
    assert max(int(f.pixels.max()) for f in corpus.frames) < 200


def test_cadence_and_diurnal_cycle(small):
    times = [f.timestamp for f in small.frames]
    assert len(times) == 48 and {t.minute for t in times} == {15, 45}
    means = {}
    for f in small.frames:
        means.setdefault(f.timestamp.hour, []).append(np.median(f.pixels))
    assert max(np.mean(v) for v in means.values()) - min(np.mean(v) for v in means.values()) > 30


def test_labels_hug_the_bright_support(small):
    assert len(small.labels) > 20
    by_time = {f.timestamp: f for f in small.frames}
    for lab in small.labels:
        px = by_time[lab.timestamp].pixels
        b = lab.box
        r0, c0 = max(0, b.y0 - 10), max(0, b.x0 - 10)
        window = px[r0 : b.y1 + 11, c0 : b.x1 + 11] >= BODY_RANGE[0]
        rr, cc = np.nonzero(window)
        rr, cc = rr + r0, cc + c0
        sq = max(rr.max() - rr.min(), cc.max() - cc.min()) + 1
        cy, cx = (rr.min() + rr.max()) / 2, (cc.min() + cc.max()) / 2
        ref = BBox.clamped(round(cx - (sq - 1) / 2), round(cy - (sq - 1) / 2), int(sq), px.shape[1], px.shape[0])
        assert iou(b, ref) >= 0.9


def test_storms_inside_heads(small):
    by_time = {f.timestamp: f for f in small.frames}
    boxes = {}
    for lab in small.labels:
        boxes.setdefault(lab.timestamp, []).append(lab.box)
    assert small.storms
    for s in small.storms:
        assert (s.end - s.begin).total_seconds() >= 1800
        assert any(b.contains(s.row, s.col) for b in boxes[s.begin])
        assert by_time[s.begin].pixels[s.row, s.col] >= BODY_RANGE[0]
    assert len(small.storms) <= 3 * small.n_commas


def test_commas_drift_east(small):
    ids = np.array(small.comma_ids)
    for ident in np.unique(ids):
        xs = [small.labels[k].box.x0 + small.labels[k].box.side / 2 for k in np.flatnonzero(ids == ident)]
        if len(xs) >= 4:
            assert xs[-1] > xs[0]


def test_write_corpus_round_trip(tmp_path, small):
    out = write_corpus(small, tmp_path / "c")
    frames = load_frames(out / "frames")
    assert [f.timestamp for f in frames] == [f.timestamp for f in small.frames]
    assert frames[5].pixels.tobytes() == small.frames[5].pixels.tobytes()
    assert read_labels(out / "labels.csv") == small.labels
    assert read_storms(out / "storms.csv") == small.storms


def test_config_validation():
    with pytest.raises(PreconditionError):
        SynthConfig(side_range=(16.0, 64.0))
    with pytest.raises(PreconditionError):
        SynthConfig(storm_minutes=(10, 20))
    with pytest.raises(PreconditionError):
        SynthConfig(height=16)
