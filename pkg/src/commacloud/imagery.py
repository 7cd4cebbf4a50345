"""Frames, boxes, annotations, file I/O and basic image operations.

Pixel coordinates follow the array convention: ``row`` grows southward and
``col`` grows eastward.  A :class:`BBox` stores its top-left corner as
``(x0, y0)`` = ``(col, row)`` and covers the inclusive pixel lattice
``x0 .. x0 + side - 1`` by ``y0 .. y0 + side - 1``.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import FormatError, FrameNameError, PreconditionError

__all__ = [
    "CONTRAST_FLOOR",
    "VALIDITY_OK",
    "VALIDITY_MISSING",
    "VALIDITY_LOW_CONTRAST",
    "STORM_KINDS",
    "Frame",
    "BBox",
    "StormEvent",
    "LabeledCloud",
    "frame_validity",
    "parse_frame_name",
    "frame_name",
    "read_pgm",
    "write_pgm",
    "load_frame",
    "save_frame",
    "load_frames",
    "iou",
    "iou_matrix",
    "boxes_to_array",
    "interpolation_matrix",
    "resize_bilinear",
    "resize_patches",
    "equalize_histogram",
    "pixel_to_geo",
    "read_labels",
    "write_labels",
    "read_storms",
    "write_storms",
    "format_instant",
    "parse_instant",
]

CONTRAST_FLOOR = 8.0

VALIDITY_OK = "ok"
VALIDITY_MISSING = "missing"
VALIDITY_LOW_CONTRAST = "corrupt-low-contrast"
_VALIDITIES = (VALIDITY_OK, VALIDITY_MISSING, VALIDITY_LOW_CONTRAST)

STORM_KINDS = (
    "Thunderstorm Wind",
    "Hail",
    "Heavy Rain",
    "Lightning",
    "Marine Thunderstorm Wind",
    "Marine High Wind",
    "Marine Strong Wind",
    "Funnel Cloud",
)

_NAME_RE = re.compile(r"^(\d{4})(\d{2})(\d{2})_(\d{2})(\d{2})\.pgm$")


def parse_instant(text: str) -> datetime:
    """Parse an ISO-8601 instant, treating naive values as UTC."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        value = datetime.fromisoformat(text)
    except ValueError as exc:
        raise FormatError(f"bad ISO-8601 instant {text!r}") from exc
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc)


def format_instant(value: datetime) -> str:
    return value.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%MZ")


def _as_utc_minute(value: datetime) -> datetime:
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    value = value.astimezone(timezone.utc)
    return value.replace(second=0, microsecond=0)


def frame_validity(pixels: np.ndarray, contrast_floor: float = CONTRAST_FLOOR) -> str:
    if float(np.std(pixels)) < contrast_floor:
        return VALIDITY_LOW_CONTRAST
    return VALIDITY_OK


@dataclass(frozen=True, eq=False)
class Frame:
    """One grayscale satellite image with its acquisition time.

    ``pixels`` is stored read-only.  Raw frames hold ``uint8`` data; derived
    frames (segmented imagery) may hold ``float32`` values in ``[0, 255]``.
    """

    pixels: np.ndarray
    timestamp: datetime
    validity: str | None = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2 or pixels.size == 0:
            raise PreconditionError("frame pixels must be a non-empty 2-D grid")
        if pixels.dtype != np.uint8:
            pixels = pixels.astype(np.float32)
            if not np.all(np.isfinite(pixels)) or pixels.min() < 0 or pixels.max() > 255:
                raise PreconditionError("pixel intensities must lie in [0, 255]")
        pixels = pixels.copy()
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "timestamp", _as_utc_minute(self.timestamp))
        validity = self.validity
        if validity is None:
            validity = frame_validity(pixels)
        elif validity not in _VALIDITIES:
            raise PreconditionError(f"unknown validity flag {validity!r}")
        object.__setattr__(self, "validity", validity)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def ok(self) -> bool:
        return self.validity == VALIDITY_OK

    def with_pixels(self, pixels: np.ndarray, validity: str | None = None) -> "Frame":
        return Frame(pixels, self.timestamp, validity if validity is not None else self.validity)


@dataclass(frozen=True, order=True)
class BBox:
    x0: int
    y0: int
    side: int

    def __post_init__(self):
        if self.side <= 0:
            raise PreconditionError(f"box side must be positive, got {self.side}")

    @classmethod
    def clamped(cls, x0: float, y0: float, side: float, width: int, height: int) -> "BBox":
        """Build a box shifted (and, if needed, shrunk) to lie inside the frame."""
        side = int(max(1, min(round(side), width, height)))
        x0 = int(min(max(round(x0), 0), width - side))
        y0 = int(min(max(round(y0), 0), height - side))
        return cls(x0, y0, side)

    @property
    def x1(self) -> int:
        return self.x0 + self.side

    @property
    def y1(self) -> int:
        return self.y0 + self.side

    @property
    def area(self) -> int:
        return self.side * self.side

    @property
    def center(self) -> tuple[float, float]:
        """Center as ``(row, col)``."""
        half = (self.side - 1) / 2.0
        return self.y0 + half, self.x0 + half

    def contains(self, row: float, col: float) -> bool:
        return self.x0 <= col <= self.x1 - 1 and self.y0 <= row <= self.y1 - 1

    def inside(self, width: int, height: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


@dataclass(frozen=True)
class StormEvent:
    begin: datetime
    end: datetime
    row: float
    col: float
    kind: str = STORM_KINDS[0]

    def __post_init__(self):
        object.__setattr__(self, "begin", _as_utc_minute(self.begin))
        object.__setattr__(self, "end", _as_utc_minute(self.end))
        if self.end < self.begin:
            raise PreconditionError("storm event ends before it begins")

    @property
    def duration(self) -> timedelta:
        return self.end - self.begin

    def active_at(self, when: datetime) -> bool:
        return self.begin <= when <= self.end


@dataclass(frozen=True)
class LabeledCloud:
    timestamp: datetime
    box: BBox

    def __post_init__(self):
        object.__setattr__(self, "timestamp", _as_utc_minute(self.timestamp))


# --------------------------------------------------------------------------
# Portable graymap I/O


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated graymap header")
    return data[start:pos], pos


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary 8-bit graymap (``P5``, maxval 255)."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: expected magic P5, got {data[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_token(data, pos)
        if not token.isdigit():
            raise FormatError(f"{path}: non-numeric header field {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: non-positive dimensions")
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header")
    pos += 1
    body = data[pos:]
    if len(body) != width * height:
        raise FormatError(f"{path}: expected {width * height} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.floor(pixels.astype(np.float64) + 0.5), 0, 255).astype(np.uint8)
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())


def parse_frame_name(name: str) -> datetime:
    match = _NAME_RE.match(Path(name).name)
    if match is None:
        raise FrameNameError(f"{name!r} does not match YYYYMMDD_HHMM.pgm")
    year, month, day, hour, minute = (int(g) for g in match.groups())
    try:
        return datetime(year, month, day, hour, minute, tzinfo=timezone.utc)
    except ValueError as exc:
        raise FrameNameError(f"{name!r} encodes an invalid date") from exc


def frame_name(timestamp: datetime) -> str:
    return _as_utc_minute(timestamp).strftime("%Y%m%d_%H%M.pgm")


def load_frame(path: str | Path) -> Frame:
    timestamp = parse_frame_name(Path(path).name)
    return Frame(read_pgm(path), timestamp)


def save_frame(frame: Frame, directory: str | Path) -> Path:
    path = Path(directory) / frame_name(frame.timestamp)
    write_pgm(path, frame.pixels)
    return path


def load_frames(directory: str | Path) -> list[Frame]:
    """Load every ``*.pgm`` frame in ``directory`` sorted by timestamp."""
    paths = sorted(Path(directory).glob("*.pgm"))
    frames = [load_frame(p) for p in paths]
    frames.sort(key=lambda f: f.timestamp)
    return frames


# --------------------------------------------------------------------------
# Box geometry


def iou(a: BBox, b: BBox) -> float:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    """Stack boxes into an ``(n, 3)`` integer array of ``(x0, y0, side)``."""
    arr = np.array([(b.x0, b.y0, b.side) for b in boxes], dtype=np.int64)
    return arr.reshape(-1, 3)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 3)`` / ``(m, 3)`` box arrays."""
    a = np.asarray(a, dtype=np.int64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.int64).reshape(-1, 3)
    ax0, ay0, asd = a[:, 0:1], a[:, 1:2], a[:, 2:3]
    bx0, by0, bsd = b[:, 0], b[:, 1], b[:, 2]
    w = np.minimum(ax0 + asd, bx0 + bsd) - np.maximum(ax0, bx0)
    h = np.minimum(ay0 + asd, by0 + bsd) - np.maximum(ay0, by0)
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    union = asd * asd + bsd * bsd - inter
    return inter / union


# --------------------------------------------------------------------------
# Resampling and photometric preprocessing


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights of shape ``(n_out, n_in)``.

    Output sample ``i`` reads the source coordinate ``i * (n_in - 1) / (n_out - 1)``
    so the first and last samples coincide with the source's end pixels.
    """
    if n_in <= 0 or n_out <= 0:
        raise PreconditionError("interpolation sizes must be positive")
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1:
        coords = np.array([(n_in - 1) / 2.0])
    else:
        coords = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(coords).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def _box_patch(pixels: np.ndarray, box: BBox) -> np.ndarray:
    height, width = pixels.shape
    if box.side < 1 or not box.inside(width, height):
        raise PreconditionError(f"box {box} is degenerate or outside the {width}x{height} frame")
    return pixels[box.slices()]


def resize_bilinear(frame: Frame | np.ndarray, box: BBox, out_side: int) -> np.ndarray:
    """Bilinearly resample ``box`` of ``frame`` onto an ``out_side`` square grid."""
    if out_side <= 0:
        raise PreconditionError("out_side must be positive")
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    patch = _box_patch(pixels, box).astype(np.float64)
    mat = interpolation_matrix(box.side, out_side)
    return np.clip(mat @ patch @ mat.T, 0.0, 255.0)


def resize_patches(pixels: np.ndarray, boxes: np.ndarray, out_side: int) -> np.ndarray:
    """Resize many same-frame boxes; returns ``(n, out_side, out_side)`` float32.

    Boxes sharing a side length are batched through one pair of matrix
    products, which is where nearly all the proposal-stage time goes.
    """
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 3)
    out = np.empty((len(boxes), out_side, out_side), dtype=np.float32)
    if len(boxes) == 0:
        return out
    height, width = pixels.shape
    src = np.asarray(pixels, dtype=np.float32)
    for side in np.unique(boxes[:, 2]):
        idx = np.flatnonzero(boxes[:, 2] == side)
        mat = interpolation_matrix(int(side), out_side).astype(np.float32)
        stack = np.empty((len(idx), side, side), dtype=np.float32)
        for j, i in enumerate(idx):
            x0, y0, _ = boxes[i]
            if x0 < 0 or y0 < 0 or x0 + side > width or y0 + side > height:
                raise PreconditionError(f"box {tuple(boxes[i])} outside frame")
            stack[j] = src[y0 : y0 + side, x0 : x0 + side]
        res = np.matmul(np.matmul(mat, stack), mat.T)
        out[idx] = np.clip(res, 0.0, 255.0)
    return out


def equalize_histogram(frame: Frame) -> Frame:
    """Classic cumulative-histogram equalization onto ``[0, 255]``."""
    pixels = np.asarray(frame.pixels)
    levels = np.clip(np.floor(pixels.astype(np.float64) + 0.5), 0, 255).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    cdf_min = cdf[np.flatnonzero(hist)[0]]
    total = levels.size
    if total == cdf_min:
        return Frame(levels.astype(np.uint8), frame.timestamp, frame.validity)
    lut = np.floor((cdf - cdf_min) / (total - cdf_min) * 255.0 + 0.5)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    out = lut[levels]
    return Frame(out, frame.timestamp, frame_validity(out))


def pixel_to_geo(row: float, col: float, height: int, width: int) -> tuple[float, float]:
    """Map a pixel onto CONUS (50N..20N, 120W..60W) with an affine grid.

    Returns ``(latitude, longitude)`` in degrees, west longitudes negative.
    """
    if not (0 <= row <= height - 1 and 0 <= col <= width - 1):
        raise PreconditionError(f"pixel ({row}, {col}) outside {height}x{width} frame")
    lat = 50.0 - 30.0 * (row / (height - 1) if height > 1 else 0.0)
    lon = -120.0 + 60.0 * (col / (width - 1) if width > 1 else 0.0)
    return lat, lon


# --------------------------------------------------------------------------
# Annotation CSVs

_LABEL_HEADER = ["timestamp", "x0", "y0", "side"]
_STORM_HEADER = ["begin", "end", "row", "col", "kind"]


def _check_header(reader, expected: list[str], path) -> None:
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != expected:
        raise FormatError(f"{path}: header must be {','.join(expected)}")


def read_labels(path: str | Path) -> list[LabeledCloud]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(reader, _LABEL_HEADER, path)
        out = []
        for row in reader:
            if not row:
                continue
            ts, x0, y0, side = row
            out.append(LabeledCloud(parse_instant(ts), BBox(int(x0), int(y0), int(side))))
    return out


def write_labels(path: str | Path, labels: Sequence[LabeledCloud]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_LABEL_HEADER)
        for lab in labels:
            writer.writerow([format_instant(lab.timestamp), lab.box.x0, lab.box.y0, lab.box.side])


def read_storms(path: str | Path) -> list[StormEvent]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(reader, _STORM_HEADER, path)
        out = []
        for row in reader:
            if not row:
                continue
            begin, end, r, c, kind = row
            out.append(StormEvent(parse_instant(begin), parse_instant(end), float(r), float(c), kind))
    return out


def write_storms(path: str | Path, storms: Sequence[StormEvent]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_STORM_HEADER)
        for ev in storms:
            writer.writerow(
                [format_instant(ev.begin), format_instant(ev.end), f"{ev.row:g}", f"{ev.col:g}", ev.kind]
            )
