"""Motion-prior correlation fields and the two-frame cross-correlation baseline.

The motion correlation at pixel ``x`` is the Pearson correlation between
two intensity time series: the one at ``x`` taken one lag earlier, and the
one at the displaced pixel ``x + h`` over the span ``(t - T, t]``.  With the
default lag equal to ``T``, a cloud moving by exactly ``h`` per span yields
a correlation of one.  ``lag_hours=0`` correlates both series over the same
span.  The cross-correlation baseline correlates a spatial neighbourhood of
the previous frame with the displaced neighbourhood of the current frame.

Displacements are ``(d_row, d_col)`` pixel offsets; the default ``(0, -10)``
points ten pixels due west.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Sequence

import numpy as np

from .exceptions import InsufficientHistoryError, PreconditionError
from .imagery import Frame

__all__ = [
    "DEFAULT_DISPLACEMENT",
    "DEFAULT_SPAN_HOURS",
    "MIN_FRAMES",
    "MotionField",
    "frames_in_span",
    "motion_correlation",
    "has_history",
    "cross_correlation",
    "cross_correlation_field",
    "motion_field",
    "renormalize",
]

DEFAULT_DISPLACEMENT = (0, -10)
DEFAULT_SPAN_HOURS = 5.0
MIN_FRAMES = 3
UNDEFINED_LEVEL = 128


@dataclass(frozen=True, eq=False)
class MotionField:
    """Raw correlation grid (NaN where undefined) for one anchor frame."""

    raw: np.ndarray
    timestamp: datetime
    displacement: tuple[int, int] = DEFAULT_DISPLACEMENT
    span_hours: float = DEFAULT_SPAN_HOURS

    def renormalized(self) -> np.ndarray:
        return renormalize(self.raw)


def renormalize(raw) -> np.ndarray:
    """Map ``[-1, 1]`` onto ``[0, 255]`` (round half up); NaN becomes 128."""
    raw = np.asarray(raw, dtype=np.float64)
    scaled = np.floor((np.clip(raw, -1.0, 1.0) + 1.0) * 127.5 + 0.5)
    out = np.where(np.isnan(raw), UNDEFINED_LEVEL, scaled)
    return out.astype(np.uint8)


def frames_in_span(frames: Sequence[Frame], span_hours: float = DEFAULT_SPAN_HOURS, anchor: datetime | None = None) -> list[Frame]:
    """Usable frames with timestamps in ``(anchor - T, anchor]``.

    The anchor defaults to the latest timestamp in ``frames``.
    """
    if not frames:
        raise InsufficientHistoryError("no frames supplied")
    if anchor is None:
        anchor = max(f.timestamp for f in frames)
    start = anchor - timedelta(hours=span_hours)
    picked = [f for f in frames if start < f.timestamp <= anchor and f.ok]
    picked.sort(key=lambda f: f.timestamp)
    return picked


def _stack(frames: Sequence[Frame]) -> np.ndarray:
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise PreconditionError("frames in one span must share a shape")
    return np.stack([f.pixels.astype(np.float64) for f in frames])


def _pearson(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    da = a - a.mean(axis=axis, keepdims=True)
    db = b - b.mean(axis=axis, keepdims=True)
    num = (da * db).sum(axis=axis)
    den = np.sqrt((da * da).sum(axis=axis) * (db * db).sum(axis=axis))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = num / den
    # relative guard: series that are constant up to rounding count as constant
    scale = np.maximum(np.abs(a).max(axis=axis), np.abs(b).max(axis=axis)) + 1.0
    r = np.where(den > 1e-9 * scale * scale * a.shape[axis], r, np.nan)
    return np.clip(r, -1.0, 1.0)


def _shifted(grid: np.ndarray, d_row: int, d_col: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``grid`` at ``x + (d_row, d_col)``; returns the shifted grid and its validity mask."""
    height, width = grid.shape[-2:]
    out = np.full(grid.shape, np.nan)
    valid = np.zeros((height, width), dtype=bool)
    r0, r1 = max(0, -d_row), min(height, height - d_row)
    c0, c1 = max(0, -d_col), min(width, width - d_col)
    if r0 < r1 and c0 < c1:
        out[..., r0:r1, c0:c1] = grid[..., r0 + d_row : r1 + d_row, c0 + d_col : c1 + d_col]
        valid[r0:r1, c0:c1] = True
    return out, valid


def _paired_series(frames: Sequence[Frame], span_hours: float, lag_hours: float | None, anchor=None):
    """Frames ``(earlier, current)`` paired one lag apart across the span."""
    lag = timedelta(hours=span_hours if lag_hours is None else lag_hours)
    current = frames_in_span(frames, span_hours, anchor)
    by_time = {f.timestamp: f for f in frames if f.ok}
    pairs = [(by_time[f.timestamp - lag], f) for f in current if f.timestamp - lag in by_time]
    if len(pairs) < MIN_FRAMES:
        raise InsufficientHistoryError(f"{len(pairs)} usable frame pairs in span, need {MIN_FRAMES}")
    return [p[0] for p in pairs], [p[1] for p in pairs]


def motion_correlation(
    frames: Sequence[Frame],
    x: tuple[int, int],
    h: tuple[int, int] = DEFAULT_DISPLACEMENT,
    span_hours: float = DEFAULT_SPAN_HOURS,
    lag_hours: float | None = None,
) -> float:
    """Motion correlation at one pixel ``x = (row, col)``; NaN when undefined.

    ``lag_hours`` defaults to ``span_hours``.
    """
    earlier, current = _paired_series(frames, span_hours, lag_hours)
    height, width = current[0].shape
    row, col = x
    r2, c2 = row + h[0], col + h[1]
    if not (0 <= row < height and 0 <= col < width and 0 <= r2 < height and 0 <= c2 < width):
        raise PreconditionError("x and x + h must both lie inside the frame")
    a = np.array([f.pixels[row, col] for f in earlier], dtype=np.float64)
    b = np.array([f.pixels[r2, c2] for f in current], dtype=np.float64)
    return float(_pearson(a, b))


def motion_field(
    frames: Sequence[Frame],
    h: tuple[int, int] = DEFAULT_DISPLACEMENT,
    span_hours: float = DEFAULT_SPAN_HOURS,
    anchor: datetime | None = None,
    lag_hours: float | None = None,
) -> MotionField:
    """Per-pixel motion correlation for the frame at ``anchor`` (default: last).

    Pixels whose displaced partner falls outside the frame are undefined.
    """
    earlier, current = _paired_series(frames, span_hours, lag_hours, anchor)
    if len({f.shape for f in earlier + current}) != 1:
        raise PreconditionError("frames in one span must share a shape")
    before = _stack(earlier)
    displaced, valid = _shifted(_stack(current), h[0], h[1])
    filled = np.where(valid, displaced, before)
    raw = _pearson(before, filled, axis=0)
    raw[~valid] = np.nan
    return MotionField(raw, current[-1].timestamp, tuple(h), span_hours)


def has_history(frames: Sequence[Frame], anchor: datetime, span_hours: float = DEFAULT_SPAN_HOURS, lag_hours: float | None = None) -> bool:
    """True when enough lagged frame pairs exist to define the field at ``anchor``."""
    try:
        _paired_series(frames, span_hours, lag_hours, anchor)
    except InsufficientHistoryError:
        return False
    return True


def cross_correlation(
    frame_prev: Frame,
    frame_now: Frame,
    x: tuple[int, int],
    h: tuple[int, int] = DEFAULT_DISPLACEMENT,
    radius: int = 128,
) -> float:
    """Correlate ``prev`` over the Chebyshev ball around ``x`` with ``now`` shifted by ``h``."""
    prev = frame_prev.pixels.astype(np.float64)
    now = frame_now.pixels.astype(np.float64)
    height, width = prev.shape
    row, col = x
    rows = np.arange(max(0, row - radius), min(height, row + radius + 1))
    cols = np.arange(max(0, col - radius), min(width, col + radius + 1))
    rows = rows[(rows + h[0] >= 0) & (rows + h[0] < height)]
    cols = cols[(cols + h[1] >= 0) & (cols + h[1] < width)]
    if rows.size == 0 or cols.size == 0:
        raise PreconditionError("empty correlation neighbourhood")
    a = prev[np.ix_(rows, cols)].ravel()
    b = now[np.ix_(rows + h[0], cols + h[1])].ravel()
    return float(_pearson(a, b))


def _box_sum(integral: np.ndarray, r0, r1, c0, c1) -> np.ndarray:
    return integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    out[1:, 1:] = a.cumsum(0).cumsum(1)
    return out


def cross_correlation_field(
    frame_prev: Frame,
    frame_now: Frame,
    h: tuple[int, int] = DEFAULT_DISPLACEMENT,
    radius: int = 128,
) -> np.ndarray:
    """Dense version of :func:`cross_correlation` using integral images."""
    prev = frame_prev.pixels.astype(np.float64)
    now = frame_now.pixels.astype(np.float64)
    height, width = prev.shape
    displaced, valid = _shifted(now, h[0], h[1])
    validf = valid.astype(np.float64)
    a = np.where(valid, prev, 0.0)
    b = np.where(valid, displaced, 0.0)
    sums = [_integral(v) for v in (validf, a, b, a * a, b * b, a * b)]
    rr = np.arange(height)
    cc = np.arange(width)
    r0 = np.clip(rr - radius, 0, height)[:, None]
    r1 = np.clip(rr + radius + 1, 0, height)[:, None]
    c0 = np.clip(cc - radius, 0, width)[None, :]
    c1 = np.clip(cc + radius + 1, 0, width)[None, :]
    n, sa, sb, saa, sbb, sab = (_box_sum(s, r0, r1, c0, c1) for s in sums)
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = sab - sa * sb / n
        va = saa - sa * sa / n
        vb = sbb - sb * sb / n
        r = cov / np.sqrt(va * vb)
    bad = (n < 2) | (va <= 1e-9 * np.maximum(n, 1)) | (vb <= 1e-9 * np.maximum(n, 1))
    r = np.where(bad, np.nan, r)
    return np.clip(r, -1.0, 1.0)
