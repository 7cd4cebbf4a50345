from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commacloud.exceptions import InsufficientHistoryError, PreconditionError
from commacloud.imagery import Frame
from commacloud.motion import (
    cross_correlation,
    cross_correlation_field,
    frames_in_span,
    has_history,
    motion_correlation,
    motion_field,
    renormalize,
)

T0 = datetime(2008, 1, 1, tzinfo=timezone.utc)
STEP = timedelta(minutes=30)


def _seq(stack, start=T0):
    return [Frame(np.clip(p, 0, 255).astype(np.uint8), start + k * STEP, validity="ok") for k, p in enumerate(stack)]


def _random_seq(n, shape=(12, 20), seed=0):
    rng = np.random.default_rng(seed)
    return _seq(rng.integers(0, 256, (n,) + shape))


def _translating(n_frames=24, shape=(40, 120), speed=1, seed=0):
    """Texture moving ``speed`` px west per frame (10 px per 5 h at 30-min cadence)."""
    rng = np.random.default_rng(seed)
    width = shape[1] + speed * n_frames + 20
    world = rng.integers(30, 226, (shape[0], width))
    stack = [world[:, speed * k : speed * k + shape[1]] for k in range(n_frames)]
    return _seq(stack)


# --------------------------------------------------------------------------
# point correlation


def test_identical_series_correlate_one():
    # constant along rows, so x and x + h see the same history
    rng = np.random.default_rng(0)
    col = rng.integers(0, 256, (12, 8, 1))
    frames = _seq(np.repeat(col, 30, axis=2))
    assert motion_correlation(frames, (4, 20), (0, -10), lag_hours=0) == pytest.approx(1.0)


def test_anticorrelated_series():
    rng = np.random.default_rng(1)
    series = rng.integers(0, 256, 12)
    stack = np.zeros((12, 4, 20))
    stack[:, :, :10] = 255 - series[:, None, None]
    stack[:, :, 10:] = series[:, None, None]
    frames = _seq(stack)
    assert motion_correlation(frames, (1, 12), (0, -10), lag_hours=0) == pytest.approx(-1.0)


def test_translation_gives_full_lagged_correlation():
    frames = _translating()
    inside = [(r, c) for r in range(5, 35, 7) for c in range(25, 110, 13)]
    for x in inside:
        assert motion_correlation(frames, x, (0, -10)) == pytest.approx(1.0, abs=1e-12)


def test_translation_true_displacement_beats_double():
    frames = _translating()
    true = motion_field(frames, (0, -10)).raw
    double = motion_field(frames, (0, -20)).raw
    region = np.s_[:, 25:]
    assert np.all(true[region] >= 0.9)
    assert np.mean(true[region] > double[region]) >= 0.8


def test_x_plus_h_outside_frame_rejected():
    frames = _random_seq(12)
    with pytest.raises(PreconditionError):
        motion_correlation(frames, (0, 3), (0, -10), lag_hours=0)


def test_insufficient_history():
    frames = _random_seq(2)
    with pytest.raises(InsufficientHistoryError):
        motion_correlation(frames, (2, 15), (0, -10), lag_hours=0)
    assert not has_history(frames, frames[-1].timestamp, lag_hours=0)
    # lagged pairs need a full extra span of frames
    long = _random_seq(14)
    assert not has_history(long, long[11].timestamp)
    assert has_history(long, long[12].timestamp)
    assert has_history(long, long[2].timestamp, lag_hours=0)


def test_missing_frame_inside_span_tolerated():
    frames = _random_seq(10)
    frames[-3] = Frame(np.zeros(frames[-3].shape, np.uint8), frames[-3].timestamp)
    assert len(frames_in_span(frames)) == 9
    assert np.isfinite(motion_correlation(frames, (2, 15), (0, -10), lag_hours=0))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_swap_symmetry_without_lag(seed):
    frames = _random_seq(10, seed=seed)
    a = motion_correlation(frames, (3, 14), (1, -10), lag_hours=0)
    b = motion_correlation(frames, (4, 4), (-1, 10), lag_hours=0)
    assert a == pytest.approx(b, abs=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(1, 2), st.integers(0, 50))
@settings(max_examples=30, deadline=None)
def test_positive_affine_invariance(seed, gain, shift):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 100, (24, 6, 20))
    a = motion_correlation(_seq(raw), (3, 14), (0, -10))
    b = motion_correlation(_seq(raw * gain + shift), (3, 14), (0, -10))
    assert a == pytest.approx(b, abs=1e-9)
    assert -1.0 <= a <= 1.0


# --------------------------------------------------------------------------
# fields and renormalization


def test_field_matches_pointwise():
    frames = _random_seq(24, seed=4)
    field = motion_field(frames, (1, -3)).raw
    for x in [(0, 5), (3, 10), (10, 19), (5, 3)]:
        assert field[x] == pytest.approx(motion_correlation(frames, x, (1, -3)), abs=1e-12)
    assert np.all(np.isnan(field[:, :3])) and np.all(np.isnan(field[-1]))


def test_constant_frames_undefined_everywhere():
    frames = _seq(np.full((24, 8, 16), 90))
    field = motion_field(frames)
    assert np.all(np.isnan(field.raw))
    assert np.all(field.renormalized() == 128)


def test_renormalize_endpoints():
    assert renormalize(np.array([-1.0, 0.0, 1.0, np.nan])).tolist() == [0, 128, 255, 128]


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=50))
def test_renormalize_monotone(values):
    v = np.sort(np.array(values))
    assert np.all(np.diff(renormalize(v).astype(int)) >= 0)


# --------------------------------------------------------------------------
# cross-correlation baseline


def test_cross_correlation_exact_shift():
    rng = np.random.default_rng(2)
    prev = rng.integers(0, 256, (40, 60))
    now = np.zeros_like(prev)
    now[:, :-10] = prev[:, 10:]  # now(x + h) = prev(x) for h = (0, -10)
    fp, fn = Frame(prev.astype(np.uint8), T0), Frame(now.astype(np.uint8), T0 + STEP)
    assert cross_correlation(fp, fn, (20, 30), (0, -10), radius=5) == pytest.approx(1.0)
    inv = Frame((255 - now).astype(np.uint8), T0 + STEP)
    assert cross_correlation(fp, inv, (20, 30), (0, -10), radius=5) == pytest.approx(-1.0)


def test_cross_correlation_noise_is_small():
    rng = np.random.default_rng(3)
    fp = Frame(rng.integers(0, 256, (96, 160), dtype=np.uint8), T0)
    fn = Frame(rng.integers(0, 256, (96, 160), dtype=np.uint8), T0 + STEP)
    field = cross_correlation_field(fp, fn, (0, -10), radius=128)
    assert np.mean(np.abs(field) < 0.1) >= 0.95


def test_cross_correlation_field_matches_pointwise():
    rng = np.random.default_rng(6)
    fp = Frame(rng.integers(0, 256, (20, 30), dtype=np.uint8), T0)
    fn = Frame(rng.integers(0, 256, (20, 30), dtype=np.uint8), T0 + STEP)
    field = cross_correlation_field(fp, fn, (2, -4), radius=3)
    for x in [(0, 4), (5, 7), (19, 29), (10, 2)]:
        assert field[x] == pytest.approx(cross_correlation(fp, fn, x, (2, -4), radius=3), abs=1e-9)
    assert np.isnan(field[0, 0])


def test_cross_correlation_empty_neighbourhood():
    f = Frame(np.random.default_rng(0).integers(0, 256, (10, 10), dtype=np.uint8), T0)
    with pytest.raises(PreconditionError):
        cross_correlation(f, f, (5, 5), (0, -40), radius=2)
