"""Window descriptors: gradient-orientation histograms on segmented patches and
histograms of renormalized motion correlation.

HOG layout: 9 unsigned orientation bins centred at 0, 20, ..., 160 degrees,
64x64 cells on the 256x256 patch (a 4x4 grid), 2x2-cell blocks stepping by one
cell (a 3x3 grid), each block L2 normalised, giving 3*3*2*2*9 = 324 values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

import numpy as np

from ._validation import check_boxes
from .exceptions import FormatError, PreconditionError
from .imagery import BBox

__all__ = [
    "HOG_DIM",
    "MOTION_DIM",
    "SEGMENTED_HOG",
    "MOTION_HISTOGRAM",
    "FeatureVector",
    "segmented_hog",
    "segmented_hog_batch",
    "motion_histogram",
    "MotionHistogramIndex",
    "write_features",
    "read_features",
]

PATCH_SIDE = 256
N_BINS = 9
CELL = 64
BLOCK = 2
EPS = 1e-6
HOG_DIM = 324
MOTION_DIM = 27
SEGMENTED_HOG = "segmented-hog"
MOTION_HISTOGRAM = "motion-histogram"
_KIND_CODES = {SEGMENTED_HOG: 0, MOTION_HISTOGRAM: 1}


@dataclass(frozen=True, eq=False)
class FeatureVector:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        expected = {SEGMENTED_HOG: HOG_DIM, MOTION_HISTOGRAM: MOTION_DIM}.get(self.kind)
        if expected is None:
            raise PreconditionError(f"unknown feature kind {self.kind!r}")
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if vals.size != expected:
            raise PreconditionError(f"{self.kind} needs {expected} values, got {vals.size}")
        object.__setattr__(self, "values", vals)


_CELLS = PATCH_SIDE // CELL
_CELL_ROWS = np.arange(PATCH_SIDE) // CELL
# histogram offset of every pixel's cell
_CELL_BASE = ((_CELL_ROWS[:, None] * _CELLS + _CELL_ROWS[None, :]) * N_BINS).astype(np.intp)
_PI32 = np.float32(np.pi)
_BIN_SCALE = np.float32(N_BINS / np.pi)


def segmented_hog_batch(patches) -> np.ndarray:
    """HOG descriptors for an ``(n, 256, 256)`` stack; returns ``(n, 324)``."""
    stack = np.asarray(patches)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.shape[1:] != (PATCH_SIDE, PATCH_SIDE):
        raise PreconditionError(f"HOG expects {PATCH_SIDE}x{PATCH_SIDE} patches, got {stack.shape[1:]}")
    out = np.zeros((len(stack), HOG_DIM))
    for k in range(len(stack)):
        out[k] = _hog_one(stack[k])
    return out


def _hog_one(patch: np.ndarray) -> np.ndarray:
    # float32 gradients; votes accumulate in float64 inside bincount
    p = np.asarray(patch, dtype=np.float32)
    gx = np.zeros((PATCH_SIDE, PATCH_SIDE), np.float32)
    gy = np.zeros_like(gx)
    np.subtract(p[:, 2:], p[:, :-2], out=gx[:, 1:-1])
    np.subtract(p[2:], p[:-2], out=gy[1:-1])
    mag = np.sqrt(gx * gx + gy * gy)
    # segmented patches are mostly flat zero, only voting pixels matter
    nz = mag > 0
    m = mag[nz]
    ang = np.arctan2(gy[nz], gx[nz])
    ang[ang < 0] += _PI32
    pos = ang * _BIN_SCALE
    lo = pos.astype(np.intp)
    frac = pos - lo
    lo[lo >= N_BINS] -= N_BINS
    hi = lo + 1
    hi[hi >= N_BINS] = 0
    base = _CELL_BASE[nz]
    size = _CELLS * _CELLS * N_BINS
    upper = m * frac
    hist = np.bincount(base + lo, weights=m - upper, minlength=size)
    hist += np.bincount(base + hi, weights=upper, minlength=size)
    hist = hist.reshape(_CELLS, _CELLS, N_BINS)

    nb = _CELLS - BLOCK + 1
    blocks = np.empty((nb, nb, BLOCK * BLOCK * N_BINS))
    for i in range(nb):
        for j in range(nb):
            blocks[i, j] = hist[i : i + BLOCK, j : j + BLOCK].ravel()
    blocks /= np.sqrt((blocks * blocks).sum(axis=2, keepdims=True) + EPS * EPS)
    return blocks.ravel()


def segmented_hog(patch) -> np.ndarray:
    """324-value HOG descriptor of one 256x256 segmented patch."""
    patch = np.asarray(patch)
    if patch.shape != (PATCH_SIDE, PATCH_SIDE):
        raise PreconditionError(f"HOG expects a {PATCH_SIDE}x{PATCH_SIDE} patch, got {patch.shape}")
    return segmented_hog_batch(patch[None])[0]


def _motion_bins(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.minimum(np.floor(v * MOTION_DIM / 255.0), MOTION_DIM - 1).astype(np.int64)


def motion_histogram(values) -> np.ndarray:
    """L1-normalised 27-bin histogram of renormalized motion values in ``[0, 255]``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise PreconditionError("motion histogram of an empty box")
    if v.min() < 0 or v.max() > 255:
        raise PreconditionError("motion values must lie in [0, 255]")
    counts = np.bincount(_motion_bins(v), minlength=MOTION_DIM).astype(np.float64)
    return counts / counts.sum()


class MotionHistogramIndex:
    """Per-bin integral images of one renormalized motion field.

    Histograms of arbitrary boxes then cost 27 lookups each.
    """

    def __init__(self, field: np.ndarray):
        field = np.asarray(field)
        if field.ndim != 2:
            raise PreconditionError("motion field must be 2-D")
        bins = _motion_bins(field)
        h, w = field.shape
        self._ii = np.zeros((MOTION_DIM, h + 1, w + 1), dtype=np.int64)
        for b in range(MOTION_DIM):
            self._ii[b, 1:, 1:] = (bins == b).astype(np.int64).cumsum(0).cumsum(1)
        self.shape = (h, w)

    def histograms(self, boxes) -> np.ndarray:
        boxes = check_boxes(boxes)
        if len(boxes) == 0:
            return np.zeros((0, MOTION_DIM))
        x0, y0, s = boxes[:, 0], boxes[:, 1], boxes[:, 2]
        ii = self._ii
        counts = ii[:, y0 + s, x0 + s] - ii[:, y0, x0 + s] - ii[:, y0 + s, x0] + ii[:, y0, x0]
        counts = counts.T.astype(np.float64)
        return counts / counts.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# Binary feature dumps

_MAGIC = b"CCFEAT"
_VERSION = 1
_HEADER = struct.Struct("<6sHI")
_RECORD = struct.Struct("<qiiiBI")


def write_features(path: str | Path, records: Iterable[tuple[datetime, BBox, str, np.ndarray]]) -> int:
    """Write ``(timestamp, box, kind, values)`` records; returns the count.

    Layout (little-endian): header ``magic, version:u16, count:u32``; then per
    record ``epoch_minutes:i64, x0:i32, y0:i32, side:i32, kind:u8, n:u32``
    followed by ``n`` float32 values.
    """
    body = bytearray()
    count = 0
    for when, box, kind, values in records:
        if kind not in _KIND_CODES:
            raise PreconditionError(f"unknown feature kind {kind!r}")
        vals = np.asarray(values, dtype="<f4").ravel()
        minutes = int(when.astimezone(timezone.utc).timestamp() // 60)
        body += _RECORD.pack(minutes, box.x0, box.y0, box.side, _KIND_CODES[kind], vals.size)
        body += vals.tobytes()
        count += 1
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, count))
        fh.write(bytes(body))
    return count


def read_features(path: str | Path) -> list[tuple[datetime, BBox, str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("feature file truncated")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise FormatError("not a feature dump")
    if version != _VERSION:
        raise FormatError(f"unsupported feature dump version {version}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    pos = _HEADER.size
    out = []
    for _ in range(count):
        if pos + _RECORD.size > len(data):
            raise FormatError("feature file truncated")
        minutes, x0, y0, side, code, n = _RECORD.unpack_from(data, pos)
        pos += _RECORD.size
        end = pos + 4 * n
        if end > len(data) or code not in kinds:
            raise FormatError("corrupt feature record")
        vals = np.frombuffer(data[pos:end], dtype="<f4").astype(np.float32)
        pos = end
        when = datetime.fromtimestamp(minutes * 60, tz=timezone.utc)
        out.append((when, BBox(x0, y0, side), kinds[code], vals))
    if pos != len(data):
        raise FormatError("trailing bytes in feature file")
    return out
