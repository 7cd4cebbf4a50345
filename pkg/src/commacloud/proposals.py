"""Sliding-window pyramid, window labeling, temporal partition and the proposal cascade.

The cascade applies three cheap filters in a fixed order:

1. mean segmented intensity inside the window lies in ``[50, 200]``;
2. a logistic model on the window resized to 256x256 gives ``p >= 0.2``;
3. the cosine similarity ``gamma`` with the average comma template is ``>= 0.15``.

Filter 2 never materialises the resized patch: because bilinear resizing is
linear, ``<R P R^T, W> = <P, R^T W R>``, so the weight image is pulled back to
each window scale once and applied to the raw window pixels.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from ._validation import check_binary_labels, check_boxes, check_matrix
from .exceptions import PreconditionError, TrainingError
from .imagery import BBox, format_instant, interpolation_matrix, iou_matrix, resize_patches

__all__ = [
    "PATCH_SIDE",
    "N_SCALES",
    "WindowPyramid",
    "generate_windows",
    "window_array",
    "label_windows",
    "label_samples",
    "Sample",
    "DataPartition",
    "box_means",
    "filter_intensity",
    "PatchClassifier",
    "train_patch_classifier",
    "filter_linear",
    "average_template",
    "template_correlation",
    "template_correlations",
    "ProposalCascade",
    "CascadeResult",
    "write_proposals",
]

PATCH_SIDE = 256
N_SCALES = 21
BASE_SCALE = 128
POSITIVE, NEGATIVE, IGNORED = 1, 0, -1
INTENSITY_RANGE = (50.0, 200.0)
LINEAR_THRESHOLD = 0.2
GAMMA_THRESHOLD = 0.15
POSITIVE_IOU = 0.5
ALPHA_GRID = (1e-2, 1e-1, 1.0, 10.0)


# --------------------------------------------------------------------------
# Window pyramid


@dataclass(frozen=True)
class WindowPyramid:
    """Square window sides ``round(128 * 8**(i/20))`` with stride ``side // 8``."""

    n_scales: int = N_SCALES
    base: int = BASE_SCALE

    @property
    def scales(self) -> tuple[int, ...]:
        last = max(self.n_scales - 1, 1)
        return tuple(int(np.floor(self.base * 8.0 ** (i / last) + 0.5)) for i in range(self.n_scales))

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(max(1, s // 8) for s in self.scales)

    def fitting_scales(self, height: int, width: int) -> list[int]:
        return [s for s in self.scales if s <= height and s <= width]


def _positions(extent: int, side: int, stride: int) -> np.ndarray:
    pos = np.arange(0, extent - side + 1, stride)
    if pos[-1] != extent - side:
        pos = np.append(pos, extent - side)
    return pos


def window_array(height: int, width: int, pyramid: WindowPyramid | None = None) -> np.ndarray:
    """All pyramid windows as an ``(n, 3)`` array of ``(x0, y0, side)``, scale-major."""
    pyramid = pyramid or WindowPyramid()
    chunks = []
    for side, stride in zip(pyramid.scales, pyramid.strides):
        if side > height or side > width:
            continue
        ys = _positions(height, side, stride)
        xs = _positions(width, side, stride)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        chunks.append(np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, side)]))
    if not chunks:
        return np.zeros((0, 3), dtype=np.int64)
    arr = np.concatenate(chunks).astype(np.int64)
    # scales are distinct, so duplicates can only come from rounding collisions
    _, keep = np.unique(arr, axis=0, return_index=True)
    return arr[np.sort(keep)]


def generate_windows(height: int, width: int, pyramid: WindowPyramid | None = None) -> list[BBox]:
    return [BBox(int(x), int(y), int(s)) for x, y, s in window_array(height, width, pyramid)]


# --------------------------------------------------------------------------
# Labels and partition


def label_windows(windows, label_boxes, positive_iou: float = POSITIVE_IOU) -> np.ndarray:
    """``1`` if max IoU >= ``positive_iou``, ``0`` if max IoU is 0, ``-1`` otherwise."""
    windows = check_boxes(windows)
    label_boxes = check_boxes(label_boxes)
    out = np.zeros(len(windows), dtype=np.int64)
    if len(label_boxes) == 0 or len(windows) == 0:
        return out
    best = iou_matrix(windows, label_boxes).max(axis=1)
    out[best >= positive_iou] = POSITIVE
    out[(best > 0) & (best < positive_iou)] = IGNORED
    return out


@dataclass(frozen=True)
class Sample:
    box: BBox
    timestamp: datetime
    label: int
    mean: float = float("nan")
    linear_p: float = float("nan")
    gamma: float = float("nan")

    @property
    def label_name(self) -> str:
        return {POSITIVE: "positive", NEGATIVE: "negative", IGNORED: "ignored"}[self.label]


def label_samples(windows: Sequence[BBox], labels: Iterable, timestamp: datetime | None = None) -> list[Sample]:
    """Label windows of one frame against its labeled clouds (``LabeledCloud`` or ``BBox``)."""
    boxes = [getattr(lab, "box", lab) for lab in labels]
    if timestamp is None:
        stamps = {lab.timestamp for lab in labels if hasattr(lab, "timestamp")}
        timestamp = stamps.pop() if len(stamps) == 1 else None
    arr = np.array([(w.x0, w.y0, w.side) for w in windows], dtype=np.int64).reshape(-1, 3)
    lab_arr = np.array([(b.x0, b.y0, b.side) for b in boxes], dtype=np.int64).reshape(-1, 3)
    flags = label_windows(arr, lab_arr)
    return [Sample(w, timestamp, int(f)) for w, f in zip(windows, flags)]


@dataclass(frozen=True)
class DataPartition:
    """Inclusive, temporally ordered train / cross-validation / test ranges."""

    train: tuple[datetime, datetime]
    cv: tuple[datetime, datetime]
    test: tuple[datetime, datetime]

    def __post_init__(self):
        spans = [self.train, self.cv, self.test]
        for lo, hi in spans:
            if lo > hi:
                raise PreconditionError("partition range ends before it starts")
        if not (self.train[1] < self.cv[0] and self.cv[1] < self.test[0]):
            raise PreconditionError("partition ranges must be disjoint and ordered train < cv < test")

    @classmethod
    def from_timestamps(cls, timestamps: Iterable[datetime], train_fraction: float = 0.6, cv_fraction: float = 0.15) -> "DataPartition":
        times = sorted(set(timestamps))
        n = len(times)
        n_train = int(round(train_fraction * n))
        n_cv = int(round(cv_fraction * n))
        if n_train < 1 or n_cv < 1 or n - n_train - n_cv < 1:
            raise PreconditionError(f"{n} timestamps cannot fill three non-empty splits")
        return cls(
            (times[0], times[n_train - 1]),
            (times[n_train], times[n_train + n_cv - 1]),
            (times[n_train + n_cv], times[-1]),
        )

    def split_of(self, when: datetime) -> str | None:
        for name in ("train", "cv", "test"):
            lo, hi = getattr(self, name)
            if lo <= when <= hi:
                return name
        return None


# --------------------------------------------------------------------------
# Filter 1: mean segmented intensity


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.float64)
    out[1:, 1:] = np.asarray(a, dtype=np.float64).cumsum(0).cumsum(1)
    return out


def box_means(pixels: np.ndarray, windows) -> np.ndarray:
    """Mean of ``pixels`` inside each window, via one integral image."""
    windows = check_boxes(windows)
    ii = _integral(pixels)
    x0, y0, s = windows[:, 0], windows[:, 1], windows[:, 2]
    total = ii[y0 + s, x0 + s] - ii[y0, x0 + s] - ii[y0 + s, x0] + ii[y0, x0]
    return total / (s.astype(np.float64) ** 2)


def filter_intensity(mean, lo: float = INTENSITY_RANGE[0], hi: float = INTENSITY_RANGE[1]):
    mean = np.asarray(mean, dtype=np.float64)
    out = (mean >= lo) & (mean <= hi)
    return bool(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Filter 2: linear patch classifier


def _balanced_accuracy(y, pred) -> float:
    y = np.asarray(y)
    pred = np.asarray(pred)
    rates = [np.mean(pred[y == c] == c) for c in (0, 1) if np.any(y == c)]
    return float(np.mean(rates))


class PatchClassifier(ClassifierMixin, BaseEstimator):
    """L2 logistic regression on 256x256 patches flattened to 65,536 intensities.

    The penalty is ``alpha/2 * |w|^2`` added to the *mean* log-loss, so duplicating
    every sample leaves the optimum unchanged.  With ``alpha=None`` the strength
    is picked from ``alphas`` by balanced accuracy on a validation set.
    """

    def __init__(self, alpha=None, alphas=ALPHA_GRID, max_iter=500, tol=1e-6):
        self.alpha = alpha
        self.alphas = alphas
        self.max_iter = max_iter
        self.tol = tol

    def _fit_one(self, X, y, alpha):
        model = LogisticRegression(C=1.0 / (alpha * len(y)), max_iter=self.max_iter, tol=self.tol)
        # max_iter is a time budget; stopping at it is expected on 65,536 inputs
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            model.fit(X, y)
        return model

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_matrix(X, "X", PATCH_SIDE * PATCH_SIDE) / 255.0
        y = check_binary_labels(y, len(X))
        if len(np.unique(y)) < 2:
            raise TrainingError("patch classifier needs both classes")
        if self.alpha is not None:
            candidates = [float(self.alpha)]
        else:
            if X_val is None or y_val is None:
                raise PreconditionError("alpha=None needs a validation set")
            candidates = [float(a) for a in self.alphas]
        best = None
        scores = {}
        for alpha in candidates:
            model = self._fit_one(X, y, alpha)
            if len(candidates) > 1:
                Xv = check_matrix(X_val, "X_val", PATCH_SIDE * PATCH_SIDE) / 255.0
                score = _balanced_accuracy(y_val, model.predict(Xv))
            else:
                score = 0.0
            scores[alpha] = score
            # ties go to the stronger penalty
            if best is None or score >= best[0]:
                best = (score, alpha, model)
        _, self.alpha_, model = best
        self.coef_ = model.coef_.ravel().copy()
        self.intercept_ = float(model.intercept_[0])
        self.classes_ = np.array([0, 1])
        self.validation_scores_ = scores
        self.train_accuracy_ = float(np.mean(model.predict(X) == y))
        if X_val is not None and y_val is not None:
            self.cv_accuracy_ = float(np.mean(self.predict(X_val) == np.asarray(y_val)))
        return self

    def decision_function(self, X) -> np.ndarray:
        X = check_matrix(X, "X", PATCH_SIDE * PATCH_SIDE)
        return X @ (self.coef_ / 255.0) + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= 0).astype(np.int64)

    def weight_image(self) -> np.ndarray:
        """Weights per raw intensity level, shaped like a patch."""
        return (self.coef_ / 255.0).reshape(PATCH_SIDE, PATCH_SIDE)


def train_patch_classifier(positives, negatives, seed: int = 0, X_val=None, y_val=None, alpha=None) -> PatchClassifier:
    """Fit on all positives plus an equal-size seeded draw of negatives."""
    if len(positives) == 0 or len(negatives) == 0:
        raise TrainingError("patch classifier needs both positives and negatives")
    positives = np.asarray(positives, dtype=np.float64).reshape(len(positives), -1)
    negatives = np.asarray(negatives, dtype=np.float64).reshape(len(negatives), -1)
    rng = np.random.default_rng(seed)
    if len(negatives) > len(positives):
        negatives = negatives[np.sort(rng.choice(len(negatives), len(positives), replace=False))]
    X = np.vstack([positives, negatives])
    y = np.r_[np.ones(len(positives), dtype=np.int64), np.zeros(len(negatives), dtype=np.int64)]
    return PatchClassifier(alpha=alpha).fit(X, y, X_val, y_val)


def filter_linear(probability, threshold: float = LINEAR_THRESHOLD):
    p = np.asarray(probability, dtype=np.float64)
    out = p >= threshold
    return bool(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Filter 3: template correlation


def average_template(patches) -> np.ndarray:
    """Pixelwise mean of segmented 256x256 label patches."""
    stack = np.asarray(patches, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.shape[0] == 0:
        raise TrainingError("template needs at least one labeled cloud")
    if stack.shape[1:] != (PATCH_SIDE, PATCH_SIDE):
        raise PreconditionError(f"template patches must be {PATCH_SIDE}x{PATCH_SIDE}")
    return stack.mean(axis=0)


def template_correlations(patches, template) -> np.ndarray:
    """Cosine similarity of each patch with the template; zero-norm patches give 0."""
    stack = np.asarray(patches, dtype=np.float64).reshape(-1, PATCH_SIDE * PATCH_SIDE)
    t = np.asarray(template, dtype=np.float64).ravel()
    if t.size != PATCH_SIDE * PATCH_SIDE:
        raise PreconditionError("template must be 256x256")
    tn = np.linalg.norm(t)
    norms = np.linalg.norm(stack, axis=1)
    dots = stack @ t
    out = np.zeros(len(stack))
    ok = (norms > 0) & (tn > 0)
    out[ok] = dots[ok] / (norms[ok] * tn)
    return np.clip(out, -1.0, 1.0)


def template_correlation(patch, template) -> float:
    p = np.asarray(patch, dtype=np.float64)
    if p.shape != (PATCH_SIDE, PATCH_SIDE):
        raise PreconditionError("patch must be 256x256")
    return float(template_correlations(p[None], template)[0])


# --------------------------------------------------------------------------
# The cascade


@dataclass(eq=False)
class CascadeResult:
    """Per-window cascade scores for one frame.

    ``linear_p`` is NaN for windows rejected by filter 1 and ``gamma`` is NaN
    for windows rejected before filter 3.  ``patches`` holds the resized
    segmented patches of the final survivors when requested.
    """

    windows: np.ndarray
    mean: np.ndarray
    linear_p: np.ndarray
    gamma: np.ndarray
    passed: np.ndarray  # (n_windows, 3) bool, cumulative per stage
    patches: np.ndarray | None = None

    @property
    def survivors(self) -> np.ndarray:
        return np.flatnonzero(self.passed[:, 2])


class ProposalCascade:
    """Three fixed-order filters sharing one trained patch model and template."""

    def __init__(
        self,
        weight_image: np.ndarray,
        bias: float,
        template: np.ndarray,
        intensity_range=INTENSITY_RANGE,
        linear_threshold: float = LINEAR_THRESHOLD,
        gamma_threshold: float = GAMMA_THRESHOLD,
        chunk: int = 64,
    ):
        self.weight_image = np.asarray(weight_image, dtype=np.float64)
        self.bias = float(bias)
        self.template = np.asarray(template, dtype=np.float64)
        self.intensity_range = tuple(float(v) for v in intensity_range)
        self.linear_threshold = float(linear_threshold)
        self.gamma_threshold = float(gamma_threshold)
        self.chunk = int(chunk)
        self._pulled: dict[int, np.ndarray] = {}

    @classmethod
    def from_classifier(cls, model: PatchClassifier, template, **kw) -> "ProposalCascade":
        return cls(model.weight_image(), model.intercept_, template, **kw)

    def _pulled_weights(self, side: int) -> np.ndarray:
        w = self._pulled.get(side)
        if w is None:
            mat = interpolation_matrix(side, PATCH_SIDE)
            w = (mat.T @ self.weight_image @ mat).astype(np.float32)
            self._pulled[side] = w
        return w

    def linear_scores(self, pixels: np.ndarray, windows) -> np.ndarray:
        """Affine patch-model score for each window, without resizing."""
        windows = check_boxes(windows)
        src = np.asarray(pixels, dtype=np.float32)
        scores = np.empty(len(windows), dtype=np.float64)
        for side in np.unique(windows[:, 2]):
            idx = np.flatnonzero(windows[:, 2] == side)
            w = self._pulled_weights(int(side))
            for start in range(0, len(idx), self.chunk):
                part = idx[start : start + self.chunk]
                stack = np.stack([src[y : y + side, x : x + side] for x, y, _ in windows[part]])
                scores[part] = np.einsum("nij,ij->n", stack, w, dtype=np.float64)
        return scores + self.bias

    def linear_probability(self, pixels: np.ndarray, windows) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.linear_scores(pixels, windows)))

    def run(self, pixels: np.ndarray, windows, keep_patches: bool = False) -> CascadeResult:
        """Score every window of one segmented frame in cascade order."""
        windows = check_boxes(windows)
        n = len(windows)
        mean = box_means(pixels, windows)
        linear_p = np.full(n, np.nan)
        gamma = np.full(n, np.nan)
        passed = np.zeros((n, 3), dtype=bool)
        passed[:, 0] = filter_intensity(mean, *self.intensity_range) if n else np.zeros(0, bool)
        stage1 = np.flatnonzero(passed[:, 0])
        if len(stage1):
            linear_p[stage1] = self.linear_probability(pixels, windows[stage1])
            passed[stage1, 1] = linear_p[stage1] >= self.linear_threshold
        stage2 = np.flatnonzero(passed[:, 1])
        patches = None
        if len(stage2):
            kept_patches = []
            for start in range(0, len(stage2), self.chunk):
                part = stage2[start : start + self.chunk]
                resized = resize_patches(pixels, windows[part], PATCH_SIDE)
                gamma[part] = template_correlations(resized, self.template)
                if keep_patches:
                    ok = gamma[part] >= self.gamma_threshold
                    kept_patches.append(resized[ok])
            passed[stage2, 2] = gamma[stage2] >= self.gamma_threshold
            if keep_patches:
                patches = np.concatenate(kept_patches) if kept_patches else None
        if keep_patches and patches is None:
            patches = np.zeros((0, PATCH_SIDE, PATCH_SIDE), dtype=np.float32)
        return CascadeResult(windows, mean, linear_p, gamma, passed, patches)


_PROPOSAL_HEADER = ["timestamp", "x0", "y0", "side", "mean", "linear_p", "gamma", "label"]


def write_proposals(path: str | Path, rows: Iterable[tuple]) -> None:
    """Write ``(timestamp, x0, y0, side, mean, linear_p, gamma, label)`` rows as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_PROPOSAL_HEADER)
        for when, x0, y0, side, mean, lp, gamma, label in rows:
            writer.writerow([format_instant(when), int(x0), int(y0), int(side), repr(float(mean)), repr(float(lp)), repr(float(gamma)), int(label)])
