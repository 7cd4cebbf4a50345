"""Detection scoring and the two intensity-threshold storm baselines.

Cloud recall matches labels by IoU; storm recall asks whether a storm's
location falls inside some output box on a frame during the storm.  The
baselines turn bright pixels into boxes through a clustering step followed
by a Gaussian box: centre at the mean, side ``4 * sqrt(largest eigenvalue)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from sklearn.metrics import silhouette_score

from ._kmeans import weighted_kmeans
from ._validation import check_range
from .detector import Detection, nms
from .exceptions import PreconditionError
from .imagery import BBox, Frame, LabeledCloud, StormEvent, equalize_histogram, iou_matrix

__all__ = [
    "cloud_recall",
    "storm_recall",
    "CurvePoint",
    "missing_rate_curve",
    "EvalReport",
    "evaluate",
    "BaselineConfig",
    "gaussian_box",
    "boxes_from_gmm2d",
    "baseline_intensity",
    "baseline_spatial_intensity",
    "PRPoint",
    "precision_recall",
    "run_baselines",
    "write_curve",
    "write_pr_curve",
    "summary_text",
]

MIN_SIDE = 8
MAX_COMPONENTS = 5
SILHOUETTE_SPLIT = 0.5
SILHOUETTE_POINTS = 1000  # silhouette is quadratic in the point count
MIN_COMPONENT_PIXELS = 20
MAX_CLUSTER_POINTS = 4000
INTENSITY_GRID = (210.0, 215.0, 220.0, 225.0, 230.0)
LAMBDA_GRID = (0.0, 0.3, 0.7, 1.0)
SPATIAL_I0 = 225.0


def _by_time(items) -> dict:
    out: dict = {}
    if isinstance(items, Mapping):
        for t, dets in items.items():
            out.setdefault(t, []).extend(getattr(d, "box", d) for d in dets)
        return out
    for d in items:
        out.setdefault(d.timestamp, []).append(d.box)
    return out


def _arr(boxes) -> np.ndarray:
    return np.array([(b.x0, b.y0, b.side) for b in boxes], dtype=np.int64).reshape(-1, 3)


def cloud_recall(detections, labels: Sequence[LabeledCloud], iou_min: float = 0.5, timestamps=None) -> float:
    """Fraction of labels hit by a same-frame detection with IoU >= ``iou_min``.

    ``detections`` is a list of :class:`Detection` or a ``{timestamp: boxes}``
    map.  Labels outside ``timestamps`` (when given) are ignored; with no
    labels left the result is NaN.
    """
    dets = _by_time(detections)
    labs = [lab for lab in labels if timestamps is None or lab.timestamp in timestamps]
    if not labs:
        return float("nan")
    hit = 0
    for lab in labs:
        boxes = dets.get(lab.timestamp)
        if boxes and iou_matrix(_arr([lab.box]), _arr(boxes)).max() >= iou_min:
            hit += 1
    return hit / len(labs)


def _storm_pool(storms: Sequence[StormEvent], timestamps) -> list[StormEvent]:
    if timestamps is None:
        return list(storms)
    times = sorted(timestamps)
    pool = []
    for s in storms:
        if any(s.begin <= t <= s.end for t in times):
            pool.append(s)
    return pool


def _storm_hits(boxes_by_time: dict, storms: Sequence[StormEvent]) -> int:
    hit = 0
    for s in storms:
        for t, boxes in boxes_by_time.items():
            if s.begin <= t <= s.end and any(b.contains(s.row, s.col) for b in boxes):
                hit += 1
                break
    return hit


def storm_recall(detections, storms: Sequence[StormEvent], timestamps=None) -> float:
    """Fraction of storms inside some output box on a frame during the storm.

    With ``timestamps`` only storms active at one of those frames count.
    """
    pool = _storm_pool(storms, timestamps)
    if not pool:
        return float("nan")
    return _storm_hits(_by_time(detections), pool) / len(pool)


@dataclass(frozen=True)
class CurvePoint:
    p0: float
    detections_per_frame: float
    cloud_missing: float
    storm_missing: float


def _threshold(candidates: Mapping, p0: float, iou_max: float) -> dict:
    out = {}
    for t, dets in candidates.items():
        out[t] = nms([d for d in dets if d.p >= p0], iou_max)
    return out


def missing_rate_curve(candidates: Mapping[datetime, Sequence[Detection]], labels, storms, grid, iou_max: float = 0.3) -> list[CurvePoint]:
    """Detections per frame and missing rates for each cut-off ``p0``.

    ``candidates`` maps every evaluated frame (even those without
    candidates) to its scored, not yet thresholded detections.
    """
    grid = [float(g) for g in grid]
    if any(not 0.0 < g < 1.0 for g in grid):
        raise PreconditionError("p0 grid must lie inside (0, 1)")
    times = set(candidates)
    n_frames = max(len(times), 1)
    points = []
    for p0 in grid:
        kept = _threshold(candidates, p0, iou_max)
        per_frame = sum(len(v) for v in kept.values()) / n_frames
        cr = cloud_recall(kept, labels, timestamps=times)
        sr = storm_recall(kept, storms, timestamps=times)
        points.append(CurvePoint(p0, per_frame, 1.0 - cr if cr == cr else float("nan"), 1.0 - sr if sr == sr else float("nan")))
    return points


@dataclass
class EvalReport:
    cloud_recall: float
    storm_recall: float
    detections_per_frame: float
    n_frames: int
    curve: list[CurvePoint] = field(default_factory=list)


def evaluate(detections: Mapping[datetime, Sequence[Detection]], labels, storms, candidates=None, grid=None, iou_max=0.3) -> EvalReport:
    """Report on a ``{timestamp: detections}`` map covering every evaluated frame."""
    times = set(detections)
    n = max(len(times), 1)
    report = EvalReport(
        cloud_recall(detections, labels, timestamps=times),
        storm_recall(detections, storms, timestamps=times),
        sum(len(v) for v in detections.values()) / n,
        len(times),
    )
    if candidates is not None and grid is not None:
        report.curve = missing_rate_curve(candidates, labels, storms, grid, iou_max)
    return report


# --------------------------------------------------------------------------
# Baselines


@dataclass(frozen=True)
class BaselineConfig:
    method: str  # "intensity" or "spatial-intensity"
    threshold: float = SPATIAL_I0
    lam: float = 0.5

    def __post_init__(self):
        if self.method not in ("intensity", "spatial-intensity"):
            raise PreconditionError(f"unknown baseline method {self.method!r}")
        check_range(self.threshold, "threshold", 0.0, 255.0)
        check_range(self.lam, "lambda", 0.0, 1.0)


def gaussian_box(points: np.ndarray, shape: tuple[int, int] | None = None) -> BBox:
    """Square centred on the mean with side ``4 sqrt(largest covariance eigenvalue)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    centre = pts.mean(axis=0)
    if len(pts) < 2:
        side = MIN_SIDE
    else:
        cov = np.cov(pts.T, bias=True)
        lam = float(np.linalg.eigvalsh(cov)[-1])
        side = max(1, int(round(4.0 * np.sqrt(max(lam, 0.0)))))
    x0 = centre[1] - (side - 1) / 2.0
    y0 = centre[0] - (side - 1) / 2.0
    if shape is None:
        return BBox(int(np.floor(x0 + 0.5)), int(np.floor(y0 + 0.5)), side)
    return BBox.clamped(x0, y0, side, shape[1], shape[0])


def _choose_clusters(features: np.ndarray, seed: int, max_k: int, max_points: int):
    """k-means++ assignments for the silhouette-selected k (1 unless some k>=2 scores >= 0.5)."""
    n = len(features)
    rng = np.random.default_rng(seed)
    sub = np.sort(rng.choice(n, max_points, replace=False)) if n > max_points else np.arange(n)
    fit_pts = features[sub]
    best_k, best_s, best_c = 1, -np.inf, None
    n_distinct = len(np.unique(fit_pts, axis=0))
    for k in range(2, min(max_k, n_distinct) + 1):
        centers, assign = weighted_kmeans(fit_pts, k, seed=seed)
        if len(np.unique(assign)) < 2:
            continue
        s = float(silhouette_score(fit_pts, assign, sample_size=min(len(fit_pts), SILHOUETTE_POINTS), random_state=seed))
        if s > best_s:
            best_k, best_s, best_c = k, s, centers
    if best_c is None or best_s < SILHOUETTE_SPLIT:
        return np.zeros(n, dtype=np.int64), 1
    d2 = ((features[:, None, :] - best_c[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1), best_k


def _cluster_boxes(points: np.ndarray, assign: np.ndarray, shape) -> list[BBox]:
    boxes = []
    for c in np.unique(assign):
        pts = points[assign == c]
        if len(pts):
            boxes.append(gaussian_box(pts, shape))
    return boxes


def boxes_from_gmm2d(points, seed: int = 0, shape: tuple[int, int] | None = None, max_k: int = MAX_COMPONENTS, max_points: int = MAX_CLUSTER_POINTS) -> list[BBox]:
    """Split ``(row, col)`` points into 1..``max_k`` groups by silhouette and box each group.

    Fewer than two points yield one box of side 8.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return []
    if len(pts) < 2:
        return [gaussian_box(pts, shape)]
    assign, _ = _choose_clusters(pts, seed, max_k, max_points)
    return _cluster_boxes(pts, assign, shape)


def _pixels(frame) -> np.ndarray:
    return np.asarray(frame.pixels if isinstance(frame, Frame) else frame, dtype=np.float64)


def baseline_intensity(frame, threshold: float, seed: int = 0, min_pixels: int = MIN_COMPONENT_PIXELS) -> list[BBox]:
    """4-connected regions at or above ``threshold``, each boxed via :func:`boxes_from_gmm2d`."""
    check_range(threshold, "threshold", 0.0, 255.0)
    img = _pixels(frame)
    mask = img >= threshold
    lab, n = ndimage.label(mask)
    boxes: list[BBox] = []
    if n == 0:
        return boxes
    objects = ndimage.find_objects(lab)
    for idx, sl in enumerate(objects, start=1):
        rr, cc = np.nonzero(lab[sl] == idx)
        if len(rr) < min_pixels:
            continue
        pts = np.column_stack([rr + sl[0].start, cc + sl[1].start])
        boxes.extend(boxes_from_gmm2d(pts, seed, img.shape))
    return boxes


def baseline_spatial_intensity(frame, lam: float, threshold: float = SPATIAL_I0, seed: int = 0, max_points: int = MAX_CLUSTER_POINTS) -> list[BBox]:
    """Cluster bright pixels under ``lam * d_space^2 + (1 - lam) * d_intensity^2``.

    Scaling the coordinates by ``sqrt(lam)`` and the intensity by
    ``sqrt(1 - lam)`` turns the weighted cost into plain k-means.
    """
    check_range(lam, "lambda", 0.0, 1.0)
    check_range(threshold, "threshold", 0.0, 255.0)
    img = _pixels(frame)
    rr, cc = np.nonzero(img >= threshold)
    if len(rr) == 0:
        return []
    pts = np.column_stack([rr, cc]).astype(np.float64)
    if len(pts) < 2:
        return [gaussian_box(pts, img.shape)]
    feats = np.column_stack([np.sqrt(lam) * pts, np.sqrt(1.0 - lam) * img[rr, cc]])
    assign, _ = _choose_clusters(feats, seed, MAX_COMPONENTS, max_points)
    return _cluster_boxes(pts, assign, img.shape)


# --------------------------------------------------------------------------
# Precision / recall over a parameter grid


@dataclass(frozen=True)
class PRPoint:
    method: str
    parameter: float
    recall: float
    precision: float
    n_boxes: int


def precision_recall(outputs: Mapping[float, Mapping[datetime, Sequence]], storms: Sequence[StormEvent], method: str = "detector") -> list[PRPoint]:
    """Storm recall and box precision for each parameter value.

    ``outputs[param]`` maps every evaluated frame to its boxes (or
    detections).  Precision is the fraction of boxes containing a storm
    active at that frame; with no boxes it is reported as 1.0.
    """
    if not outputs:
        raise PreconditionError("parameter grid is empty")
    points = []
    for param in outputs:
        by_time = _by_time(outputs[param])
        times = set(outputs[param])
        pool = _storm_pool(storms, times)
        recall = _storm_hits(by_time, pool) / len(pool) if pool else float("nan")
        n_boxes = sum(len(v) for v in by_time.values())
        good = 0
        for t, boxes in by_time.items():
            active = [s for s in storms if s.active_at(t)]
            good += sum(1 for b in boxes if any(b.contains(s.row, s.col) for s in active))
        precision = good / n_boxes if n_boxes else 1.0
        if n_boxes == 0:
            recall = 0.0
        points.append(PRPoint(method, float(param), recall, precision, n_boxes))
    return points


def run_baselines(frames: Iterable[Frame], storms, intensity_grid=INTENSITY_GRID, lambda_grid=LAMBDA_GRID, spatial_threshold=SPATIAL_I0, equalize: bool = True, seed: int = 0) -> dict[str, list[PRPoint]]:
    """Both baselines over their grids on histogram-equalized frames."""
    prepared = []
    for f in frames:
        if not f.ok:
            continue
        prepared.append((f.timestamp, equalize_histogram(f) if equalize else f))
    intensity = {float(i0): {t: baseline_intensity(g, i0, seed) for t, g in prepared} for i0 in intensity_grid}
    spatial = {float(lam): {t: baseline_spatial_intensity(g, lam, spatial_threshold, seed) for t, g in prepared} for lam in lambda_grid}
    return {
        "intensity": precision_recall(intensity, storms, "intensity"),
        "spatial-intensity": precision_recall(spatial, storms, "spatial-intensity"),
    }


# --------------------------------------------------------------------------
# Reports


def write_curve(path: str | Path, points: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p0", "detections_per_frame", "cloud_missing_rate", "storm_missing_rate"])
        for p in points:
            w.writerow([repr(p.p0), repr(p.detections_per_frame), repr(p.cloud_missing), repr(p.storm_missing)])


def write_pr_curve(path: str | Path, points: Sequence[PRPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "parameter", "storm_recall", "precision", "n_boxes"])
        for p in points:
            w.writerow([p.method, repr(p.parameter), repr(p.recall), repr(p.precision), p.n_boxes])


def summary_text(report: EvalReport) -> str:
    lines = [
        "comma-cloud detection report",
        f"  frames evaluated      {report.n_frames}",
        f"  cloud recall (IoU>=0.5) {report.cloud_recall:.4f}",
        f"  storm recall          {report.storm_recall:.4f}",
        f"  detections per frame  {report.detections_per_frame:.3f}",
    ]
    if report.curve:
        lines.append("  p0      det/frame  cloud-miss  storm-miss")
        for p in report.curve:
            lines.append(f"  {p.p0:.3f}  {p.detections_per_frame:9.3f}  {p.cloud_missing:10.4f}  {p.storm_missing:10.4f}")
    return "\n".join(lines) + "\n"
