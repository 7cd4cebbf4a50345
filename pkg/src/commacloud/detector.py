"""End-to-end comma-cloud detection: segment, propose, describe, stack, threshold, suppress.

:class:`CommaDetector` trains every stage from a labeled frame sequence with
a temporal train / cross-validation / test split:

* the mixture bank, patch classifier and template come from the train split;
* the 200 weak classifiers are fit on train-split proposals;
* AdaBoost is fit on cross-validation proposals scored by those weak
  classifiers (1 positive to 10 negatives), so the stacker never sees its
  inputs' own training data.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_probability
from .exceptions import FormatError, InsufficientHistoryError, PreconditionError, TrainingError
from .features import HOG_DIM, MOTION_DIM, MotionHistogramIndex, segmented_hog_batch
from .imagery import BBox, Frame, format_instant, iou_matrix, parse_instant, resize_patches, write_pgm
from .learning import AdaBoostModel, Stump, WeakClassifier, WeakEnsemble, adaboost_proba, train_adaboost
from .motion import DEFAULT_DISPLACEMENT, DEFAULT_SPAN_HOURS, has_history, motion_field
from .proposals import (
    GAMMA_THRESHOLD,
    INTENSITY_RANGE,
    LINEAR_THRESHOLD,
    PATCH_SIDE,
    POSITIVE_IOU,
    DataPartition,
    ProposalCascade,
    average_template,
    box_means,
    filter_intensity,
    label_windows,
    train_patch_classifier,
    window_array,
)
from .segmentation import DEFAULT_SIGMA, GmmBank, HighCloudSegmenter, segment_frame

__all__ = [
    "Detection",
    "nms",
    "ModelBundle",
    "FrameProposals",
    "propose_frame",
    "score_window",
    "score_proposals",
    "detect_frame",
    "CommaDetector",
    "write_detections",
    "read_detections",
    "draw_overlay",
]

log = logging.getLogger(__name__)

NMS_IOU = 0.3
DEFAULT_P0 = 0.5
BUNDLE_FORMAT = "commacloud-bundle"
BUNDLE_VERSION = 1


@dataclass(frozen=True)
class Detection:
    box: BBox
    p: float
    timestamp: datetime


def _nms_key(d: Detection):
    return (-d.p, d.box.y0, d.box.x0, d.box.side)


def nms(detections: Sequence[Detection], iou_max: float = NMS_IOU) -> list[Detection]:
    """Greedy suppression in descending ``p``; a box is kept iff its IoU with
    every kept box is below ``iou_max``.  Equal ``p`` resolves top-left first,
    then smaller side."""
    ordered = sorted(detections, key=_nms_key)
    if not ordered:
        return []
    arr = np.array([(d.box.x0, d.box.y0, d.box.side) for d in ordered], dtype=np.int64)
    overlap = iou_matrix(arr, arr)
    kept: list[int] = []
    for i in range(len(ordered)):
        if all(overlap[i, j] < iou_max for j in kept):
            kept.append(i)
    return [ordered[i] for i in kept]


# --------------------------------------------------------------------------
# Bundle


def _floats(values) -> list[float]:
    return [float(v) for v in np.asarray(values, dtype=np.float64).ravel()]


@dataclass(eq=False)
class ModelBundle:
    """All trained state plus the thresholds the detector was trained with."""

    bank: GmmBank
    patch_weights: np.ndarray  # 256x256, per raw intensity level
    patch_bias: float
    patch_alpha: float
    template: np.ndarray  # 256x256
    weak: list[WeakClassifier]
    adaboost: AdaBoostModel
    settings: dict = field(default_factory=dict)

    def cascade(self) -> ProposalCascade:
        s = self.settings
        return ProposalCascade(
            self.patch_weights,
            self.patch_bias,
            self.template,
            intensity_range=tuple(s.get("intensity_range", INTENSITY_RANGE)),
            linear_threshold=s.get("linear_threshold", LINEAR_THRESHOLD),
            gamma_threshold=s.get("gamma_threshold", GAMMA_THRESHOLD),
        )

    @property
    def ensemble(self) -> WeakEnsemble:
        return WeakEnsemble.from_classifiers(self.weak)

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "settings": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.settings.items())},
            "bank": self.bank.to_text(),
            "patch": {"alpha": float(self.patch_alpha), "bias": float(self.patch_bias), "weights": _floats(self.patch_weights)},
            "template": _floats(self.template),
            "weak": [
                {"kind": c.kind, "batch": int(c.batch), "bias": float(c.bias), "weights": _floats(c.weights)}
                for c in self.weak
            ],
            "adaboost": {
                "n_features": int(self.adaboost.n_features),
                "rounds": [
                    {"feature": s.feature, "threshold": float(s.threshold), "polarity": int(s.polarity), "alpha": float(s.alpha)}
                    for s in self.adaboost.rounds
                ],
                "train_errors": list(self.adaboost.train_errors),
                "weighted_errors": list(self.adaboost.weighted_errors),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, data: dict) -> "ModelBundle":
        if data.get("format") != BUNDLE_FORMAT:
            raise FormatError("not a commacloud model bundle")
        if data.get("version") != BUNDLE_VERSION:
            raise FormatError(f"unsupported bundle version {data.get('version')}")
        try:
            settings = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data["settings"].items()}
            patch = data["patch"]
            side = PATCH_SIDE
            weights = np.asarray(patch["weights"], dtype=np.float64).reshape(side, side)
            template = np.asarray(data["template"], dtype=np.float64).reshape(side, side)
            weak = [WeakClassifier(w["kind"], w["weights"], w["bias"], w["batch"]) for w in data["weak"]]
            ada = data["adaboost"]
            model = AdaBoostModel(
                tuple(Stump(r["feature"], float(r["threshold"]), r["polarity"], r["alpha"]) for r in ada["rounds"]),
                ada["n_features"],
                tuple(ada.get("train_errors", ())),
                tuple(ada.get("weighted_errors", ())),
            )
            bank = GmmBank.from_text(data["bank"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed model bundle: {exc}") from exc
        return cls(bank, weights, patch["bias"], patch["alpha"], template, weak, model, settings)

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"model bundle is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


# --------------------------------------------------------------------------
# Per-frame proposal extraction


@dataclass(eq=False)
class FrameProposals:
    """Cascade survivors of one frame with their descriptors."""

    timestamp: datetime
    boxes: np.ndarray  # (n, 3)
    hog: np.ndarray  # (n, 324)
    motion: np.ndarray  # (n, 27)
    mean: np.ndarray
    linear_p: np.ndarray
    gamma: np.ndarray
    n_windows: int = 0

    @property
    def features(self) -> np.ndarray:
        return np.hstack([self.hog, self.motion])

    def __len__(self) -> int:
        return len(self.boxes)


def _motion_settings(settings: dict) -> dict:
    return {
        "h": tuple(settings.get("displacement", DEFAULT_DISPLACEMENT)),
        "span_hours": settings.get("span_hours", DEFAULT_SPAN_HOURS),
        "lag_hours": settings.get("lag_hours"),
    }


def _motion_image(frames: Sequence[Frame], anchor: datetime, settings: dict) -> np.ndarray:
    ms = _motion_settings(settings)
    return motion_field(frames, ms["h"], ms["span_hours"], anchor, ms["lag_hours"]).renormalized()


def propose_frame(
    frames: Sequence[Frame],
    index: int,
    segmented: np.ndarray,
    cascade: ProposalCascade,
    windows: np.ndarray,
    settings: dict,
) -> tuple[FrameProposals, np.ndarray]:
    """Run the cascade on frame ``index`` and describe the survivors.

    Returns the proposals and the cascade's per-stage pass matrix.
    """
    frame = frames[index]
    motion = _motion_image(frames, frame.timestamp, settings)
    result = cascade.run(segmented, windows, keep_patches=True)
    keep = result.survivors
    hog = segmented_hog_batch(result.patches) if len(keep) else np.zeros((0, HOG_DIM))
    mot = MotionHistogramIndex(motion).histograms(windows[keep]) if len(keep) else np.zeros((0, MOTION_DIM))
    props = FrameProposals(
        frame.timestamp,
        windows[keep].copy(),
        hog.astype(np.float64),
        mot,
        result.mean[keep],
        result.linear_p[keep],
        result.gamma[keep],
        len(windows),
    )
    return props, result.passed


def score_proposals(features: np.ndarray, bundle: ModelBundle) -> np.ndarray:
    if len(features) == 0:
        return np.zeros(0)
    stacked = bundle.ensemble.transform(features)
    return np.atleast_1d(adaboost_proba(bundle.adaboost, stacked))


def score_window(frames: Sequence[Frame], index: int, box: BBox, bundle: ModelBundle) -> float:
    """Stacked probability for one window, whether or not it survives the cascade."""
    frame = frames[index]
    if not has_history(frames, frame.timestamp, **_history_kw(bundle.settings)):
        raise InsufficientHistoryError(f"frame {format_instant(frame.timestamp)} lacks motion history")
    seg = segment_frame(frame, bundle.bank, bundle.settings.get("sigma", DEFAULT_SIGMA)).pixels
    arr = np.array([[box.x0, box.y0, box.side]], dtype=np.int64)
    patch = resize_patches(seg, arr, PATCH_SIDE)
    motion = _motion_image(frames, frame.timestamp, bundle.settings)
    feats = np.hstack([segmented_hog_batch(patch), MotionHistogramIndex(motion).histograms(arr)])
    return float(score_proposals(feats, bundle)[0])


def _history_kw(settings: dict) -> dict:
    ms = _motion_settings(settings)
    return {"span_hours": ms["span_hours"], "lag_hours": ms["lag_hours"]}


def _usable(frames: Sequence[Frame], index: int, settings: dict) -> bool:
    frame = frames[index]
    if not frame.ok:
        log.warning("skipping %s: validity %s", format_instant(frame.timestamp), frame.validity)
        return False
    if not has_history(frames, frame.timestamp, **_history_kw(settings)):
        log.info("skipping %s: insufficient motion history", format_instant(frame.timestamp))
        return False
    return True


def _threshold_and_suppress(props: FrameProposals, probs: np.ndarray, p0: float, iou_max: float) -> list[Detection]:
    cands = [
        Detection(BBox(int(x), int(y), int(s)), float(p), props.timestamp)
        for (x, y, s), p in zip(props.boxes, probs)
        if p >= p0
    ]
    return nms(cands, iou_max)


def detect_frame(frames: Sequence[Frame], index: int, bundle: ModelBundle, p0: float = DEFAULT_P0) -> list[Detection] | None:
    """Detections on ``frames[index]`` sorted by descending ``p``.

    Returns ``None`` (with a log message) for frames that are corrupt or lack
    motion history.
    """
    p0 = check_probability(p0, "p0", open_interval=True)
    if not _usable(frames, index, bundle.settings):
        return None
    frame = frames[index]
    seg = segment_frame(frame, bundle.bank, bundle.settings.get("sigma", DEFAULT_SIGMA)).pixels
    windows = window_array(*frame.shape)
    props, _ = propose_frame(frames, index, seg, bundle.cascade(), windows, bundle.settings)
    probs = score_proposals(props.features, bundle)
    return _threshold_and_suppress(props, probs, p0, bundle.settings.get("nms_iou", NMS_IOU))


# --------------------------------------------------------------------------
# Estimator


def _labels_by_time(labels) -> dict:
    out: dict = {}
    for lab in labels:
        out.setdefault(lab.timestamp, []).append((lab.box.x0, lab.box.y0, lab.box.side))
    return {k: np.array(v, dtype=np.int64) for k, v in out.items()}


def _cap(idx: np.ndarray, cap: int | None, rng: np.random.Generator) -> np.ndarray:
    if cap is not None and len(idx) > cap:
        return np.sort(rng.choice(idx, cap, replace=False))
    return idx


@dataclass(eq=False)
class ProposalTable:
    """Every cascade survivor across the training sequence."""

    frame_index: np.ndarray
    timestamps: list
    boxes: np.ndarray
    labels: np.ndarray
    splits: np.ndarray  # str
    features: np.ndarray
    per_frame: list[FrameProposals]


class CommaDetector(BaseEstimator):
    """Train the whole pipeline with ``fit(frames, labels)``; detect with ``predict``.

    All tunables are constructor parameters with the published defaults.
    ``max_patch_samples`` caps each class when training the 65,536-input
    patch classifier, which keeps memory bounded.  After fitting,
    ``timings_`` maps each training stage to its wall time in seconds.
    """

    def __init__(
        self,
        sigma=DEFAULT_SIGMA,
        displacement=DEFAULT_DISPLACEMENT,
        span_hours=DEFAULT_SPAN_HOURS,
        lag_hours=None,
        intensity_range=INTENSITY_RANGE,
        linear_threshold=LINEAR_THRESHOLD,
        gamma_threshold=GAMMA_THRESHOLD,
        positive_iou=POSITIVE_IOU,
        nms_iou=NMS_IOU,
        p0=DEFAULT_P0,
        n_rounds=40,
        n_batches=100,
        stack_ratio=10,
        train_fraction=0.6,
        cv_fraction=0.15,
        patch_alpha=None,
        max_patch_samples=500,
        weak_C=1.0,
        seed=0,
        n_jobs=1,
    ):
        self.sigma = sigma
        self.displacement = displacement
        self.span_hours = span_hours
        self.lag_hours = lag_hours
        self.intensity_range = intensity_range
        self.linear_threshold = linear_threshold
        self.gamma_threshold = gamma_threshold
        self.positive_iou = positive_iou
        self.nms_iou = nms_iou
        self.p0 = p0
        self.n_rounds = n_rounds
        self.n_batches = n_batches
        self.stack_ratio = stack_ratio
        self.train_fraction = train_fraction
        self.cv_fraction = cv_fraction
        self.patch_alpha = patch_alpha
        self.max_patch_samples = max_patch_samples
        self.weak_C = weak_C
        self.seed = seed
        self.n_jobs = n_jobs

    def _settings(self) -> dict:
        return {
            "sigma": float(self.sigma),
            "displacement": tuple(int(v) for v in self.displacement),
            "span_hours": float(self.span_hours),
            "lag_hours": None if self.lag_hours is None else float(self.lag_hours),
            "intensity_range": tuple(float(v) for v in self.intensity_range),
            "linear_threshold": float(self.linear_threshold),
            "gamma_threshold": float(self.gamma_threshold),
            "positive_iou": float(self.positive_iou),
            "nms_iou": float(self.nms_iou),
            "p0": float(self.p0),
            "n_rounds": int(self.n_rounds),
        }

    def _segment_all(self, frames, bank) -> list:
        out = []
        for f in frames:
            if f.ok and f.timestamp.hour in bank.hours and f.shape == tuple(bank.shape):
                out.append(segment_frame(f, bank, self.sigma).pixels)
            else:
                out.append(None)
        return out

    def _patch_training(self, frames, segmented, windows, by_time, split_of, rng):
        """Resized filter-1 survivors of the train and CV splits, capped per class."""
        pools = {("train", 1): [], ("train", 0): [], ("cv", 1): [], ("cv", 0): []}
        for i, f in enumerate(frames):
            seg = segmented[i]
            split = split_of[i]
            if seg is None or split not in ("train", "cv"):
                continue
            lab = label_windows(windows, by_time.get(f.timestamp, np.zeros((0, 3), np.int64)), self.positive_iou)
            ok = filter_intensity(box_means(seg, windows), *self.intensity_range)
            for cls in (0, 1):
                for j in np.flatnonzero(ok & (lab == cls)):
                    pools[(split, cls)].append((i, j))
        cap = self.max_patch_samples
        out = {}
        for key, items in pools.items():
            limit = cap if key[0] == "train" else (cap if cap is None else max(1, cap // 2))
            chosen = _cap(np.arange(len(items)), limit, rng)
            picked = [items[c] for c in chosen]
            patches = np.zeros((len(picked), PATCH_SIDE * PATCH_SIDE), dtype=np.float32)
            for n, (i, j) in enumerate(picked):
                patches[n] = resize_patches(segmented[i], windows[j : j + 1], PATCH_SIDE)[0].ravel()
            out[key] = patches
        return out

    def fit(self, frames: Sequence[Frame], labels, bank: GmmBank | None = None):
        frames = sorted(frames, key=lambda f: f.timestamp)
        if not frames:
            raise PreconditionError("no frames to train on")
        check_probability(self.p0, "p0", open_interval=True)
        settings = self._settings()
        rng = np.random.default_rng(self.seed)
        partition = DataPartition.from_timestamps([f.timestamp for f in frames], self.train_fraction, self.cv_fraction)
        split_of = [partition.split_of(f.timestamp) for f in frames]
        clock = time.perf_counter()
        timings = {}
        train_frames = [f for f, s in zip(frames, split_of) if s == "train"]
        if bank is None:
            bank = HighCloudSegmenter(self.sigma, seed=self.seed, n_jobs=self.n_jobs).fit(train_frames).bank_
        segmented = self._segment_all(frames, bank)
        timings["segmentation"] = time.perf_counter() - clock
        shape = frames[0].shape
        windows = window_array(*shape)
        by_time = _labels_by_time(labels)

        # patch classifier and template from the train split
        pools = self._patch_training(frames, segmented, windows, by_time, split_of, rng)
        if len(pools[("train", 1)]) == 0 or len(pools[("train", 0)]) == 0:
            raise TrainingError("train split has no positive or no negative filter-1 windows")
        X_val = np.vstack([pools[("cv", 1)], pools[("cv", 0)]])
        y_val = np.r_[np.ones(len(pools[("cv", 1)])), np.zeros(len(pools[("cv", 0)]))].astype(np.int64)
        if self.patch_alpha is None and len(np.unique(y_val)) < 2:
            raise TrainingError("cross-validation split lacks one class for choosing the patch penalty")
        patch_model = train_patch_classifier(
            pools[("train", 1)], pools[("train", 0)], self.seed, X_val, y_val, alpha=self.patch_alpha
        )
        del pools, X_val
        template_patches = []
        for i, f in enumerate(frames):
            if split_of[i] == "train" and segmented[i] is not None and f.timestamp in by_time:
                template_patches.append(resize_patches(segmented[i], by_time[f.timestamp], PATCH_SIDE))
        if not template_patches:
            raise TrainingError("train split has no labeled clouds for the template")
        template = average_template(np.concatenate(template_patches))
        del template_patches
        cascade = ProposalCascade(
            patch_model.weight_image(),
            patch_model.intercept_,
            template,
            self.intensity_range,
            self.linear_threshold,
            self.gamma_threshold,
        )

        timings["patch"] = time.perf_counter() - clock - sum(timings.values())

        # cascade every usable frame once
        per_frame: list[FrameProposals] = []
        rows_idx, rows_lab, rows_split = [], [], []
        recall = {"labels": 0, "pre": 0, "post": 0, "windows": 0, "survivors": 0}
        recall_by_split: dict = {}
        for i, f in enumerate(frames):
            if segmented[i] is None or not _usable(frames, i, settings):
                continue
            props, passed = propose_frame(frames, i, segmented[i], cascade, windows, settings)
            lab_boxes = by_time.get(f.timestamp, np.zeros((0, 3), np.int64))
            lab = label_windows(props.boxes, lab_boxes, self.positive_iou)
            stats = recall_by_split.setdefault(split_of[i], dict(recall))
            stats["windows"] += len(windows)
            stats["survivors"] += len(props)
            if len(lab_boxes):
                full = iou_matrix(lab_boxes, windows) >= self.positive_iou
                stats["labels"] += len(lab_boxes)
                stats["pre"] += int(full.any(axis=1).sum())
                stats["post"] += int(full[:, passed[:, 2]].any(axis=1).sum())
            per_frame.append(props)
            if len(per_frame) % 25 == 0:
                log.info("cascaded %d frames", len(per_frame))
            rows_idx.append(np.full(len(props), i))
            rows_lab.append(lab)
            rows_split.append(np.full(len(props), split_of[i]))
        frame_index = np.concatenate(rows_idx) if rows_idx else np.zeros(0, np.int64)
        plabels = np.concatenate(rows_lab) if rows_lab else np.zeros(0, np.int64)
        psplits = np.concatenate(rows_split) if rows_split else np.zeros(0, dtype="<U5")
        features = np.vstack([p.features for p in per_frame]) if per_frame else np.zeros((0, HOG_DIM + MOTION_DIM))
        boxes = np.vstack([p.boxes for p in per_frame]) if per_frame else np.zeros((0, 3), np.int64)
        stamps = [frames[i].timestamp for i in frame_index]

        timings["cascade"] = time.perf_counter() - clock - sum(timings.values())

        # weak classifiers on train proposals
        tr = np.flatnonzero((psplits == "train") & (plabels >= 0))
        if not np.any(plabels[tr] == 1) or not np.any(plabels[tr] == 0):
            raise TrainingError("train split proposals lack positives or negatives")
        minutes = np.array([int(stamps[k].timestamp() // 60) for k in tr])
        ensemble = WeakEnsemble(self.n_batches, self.weak_C, self.seed, self.n_jobs)
        ensemble.fit(features[tr], plabels[tr], minutes)

        # AdaBoost on CV proposals, 1:stack_ratio positives to negatives
        cv = np.flatnonzero((psplits == "cv") & (plabels >= 0))
        cv_pos = cv[plabels[cv] == 1]
        cv_neg = cv[plabels[cv] == 0]
        if len(cv_pos) == 0 or len(cv_neg) == 0:
            raise TrainingError("cross-validation proposals lack positives or negatives")
        cv_neg = _cap(cv_neg, self.stack_ratio * len(cv_pos), rng)
        stack_idx = np.concatenate([cv_pos, cv_neg])
        stacked = ensemble.transform(features[stack_idx])
        booster = train_adaboost(stacked, plabels[stack_idx], self.n_rounds, self.seed)
        timings["stacking"] = time.perf_counter() - clock - sum(timings.values())

        self.bundle_ = ModelBundle(
            bank,
            patch_model.weight_image(),
            patch_model.intercept_,
            patch_model.alpha_,
            template,
            ensemble.classifiers_,
            booster,
            settings,
        )
        self.partition_ = partition
        self.patch_model_ = patch_model
        self.ensemble_ = ensemble
        self.cascade_stats_ = recall_by_split
        self.proposals_ = ProposalTable(frame_index, stamps, boxes, plabels, psplits, features, per_frame)
        self.stack_index_ = stack_idx
        self.timings_ = timings
        return self

    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> "CommaDetector":
        s = bundle.settings
        det = cls(
            sigma=s.get("sigma", DEFAULT_SIGMA),
            displacement=tuple(s.get("displacement", DEFAULT_DISPLACEMENT)),
            span_hours=s.get("span_hours", DEFAULT_SPAN_HOURS),
            lag_hours=s.get("lag_hours"),
            intensity_range=tuple(s.get("intensity_range", INTENSITY_RANGE)),
            linear_threshold=s.get("linear_threshold", LINEAR_THRESHOLD),
            gamma_threshold=s.get("gamma_threshold", GAMMA_THRESHOLD),
            nms_iou=s.get("nms_iou", NMS_IOU),
            p0=s.get("p0", DEFAULT_P0),
            n_rounds=s.get("n_rounds", 40),
        )
        det.bundle_ = bundle
        return det

    def _check_fitted(self):
        if not hasattr(self, "bundle_"):
            raise PreconditionError("detector is not fitted")

    def candidates(self, frames: Sequence[Frame], only=None) -> dict:
        """Scored cascade survivors per usable frame, before thresholding.

        ``only`` optionally restricts scoring to a set of timestamps; frames
        outside it still provide motion history.
        """
        self._check_fitted()
        bundle = self.bundle_
        frames = sorted(frames, key=lambda f: f.timestamp)
        cascade = bundle.cascade()
        out = {}
        windows_by_shape: dict = {}
        for i, f in enumerate(frames):
            if only is not None and f.timestamp not in only:
                continue
            if not _usable(frames, i, bundle.settings):
                continue
            if f.timestamp.hour not in bundle.bank.hours or f.shape != tuple(bundle.bank.shape):
                log.warning("skipping %s: not covered by the mixture bank", format_instant(f.timestamp))
                continue
            seg = segment_frame(f, bundle.bank, bundle.settings.get("sigma", DEFAULT_SIGMA)).pixels
            windows = windows_by_shape.setdefault(f.shape, window_array(*f.shape))
            props, _ = propose_frame(frames, i, seg, cascade, windows, bundle.settings)
            out[f.timestamp] = (props, score_proposals(props.features, bundle))
        return out

    def predict(self, frames: Sequence[Frame], p0=None, only=None) -> dict:
        """Map each usable frame's timestamp to its detections (descending ``p``)."""
        p0 = self.p0 if p0 is None else p0
        p0 = check_probability(p0, "p0", open_interval=True)
        iou_max = self.bundle_.settings.get("nms_iou", NMS_IOU) if hasattr(self, "bundle_") else self.nms_iou
        return {
            t: _threshold_and_suppress(props, probs, p0, iou_max)
            for t, (props, probs) in self.candidates(frames, only).items()
        }


# --------------------------------------------------------------------------
# Detection I/O

_DET_HEADER = ["timestamp", "x0", "y0", "side", "p"]


def write_detections(path: str | Path, detections: Sequence[Detection]) -> None:
    rows = sorted(detections, key=lambda d: (d.timestamp, -d.p, d.box.y0, d.box.x0, d.box.side))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_DET_HEADER)
        for d in rows:
            writer.writerow([format_instant(d.timestamp), d.box.x0, d.box.y0, d.box.side, repr(float(d.p))])


def read_detections(path: str | Path) -> list[Detection]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _DET_HEADER:
            raise FormatError(f"{path}: expected header {','.join(_DET_HEADER)}")
        out = []
        for row in reader:
            if not row:
                continue
            if len(row) != 5:
                raise FormatError(f"{path}: malformed row {row!r}")
            out.append(Detection(BBox(int(row[1]), int(row[2]), int(row[3])), float(row[4]), parse_instant(row[0])))
    return out


def draw_overlay(frame: Frame, detections: Sequence[Detection], path: str | Path | None = None) -> np.ndarray:
    """Burn detection outlines into a copy of the frame at intensity 255."""
    img = np.clip(np.rint(np.asarray(frame.pixels, dtype=np.float64)), 0, 255).astype(np.uint8)
    for d in detections:
        b = d.box
        img[b.y0, b.x0 : b.x1] = 255
        img[b.y1 - 1, b.x0 : b.x1] = 255
        img[b.y0 : b.y1, b.x0] = 255
        img[b.y0 : b.y1, b.x1 - 1] = 255
    if path is not None:
        write_pgm(path, img)
    return img
