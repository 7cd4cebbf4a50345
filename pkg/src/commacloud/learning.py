"""Weak logistic classifiers on time-disjoint negative batches, stacked by AdaBoost.

The stacker is discrete AdaBoost over depth-1 stumps.  Its probability is a
sigmoid of the normalised vote margin, ``sigma(2 * sum(a_m h_m) / sum(a_m))``,
which only ever gets thresholded, so any monotone map would behave the same.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from ._validation import check_binary_labels, check_matrix, check_positive_int
from .exceptions import PreconditionError, TrainingError
from .features import HOG_DIM, MOTION_DIM, MOTION_HISTOGRAM, SEGMENTED_HOG

__all__ = [
    "N_BATCHES",
    "DEFAULT_ROUNDS",
    "make_batches",
    "WeakClassifier",
    "train_weak",
    "weak_proba",
    "WeakEnsemble",
    "Stump",
    "AdaBoostModel",
    "train_adaboost",
    "adaboost_proba",
    "AdaBoostStumps",
    "balanced_accuracy",
]

N_BATCHES = 100
DEFAULT_ROUNDS = 40
_DIMS = {SEGMENTED_HOG: HOG_DIM, MOTION_HISTOGRAM: MOTION_DIM}
_MIN_ERROR = 1e-10

log = logging.getLogger(__name__)


def balanced_accuracy(y, pred) -> float:
    """Mean of per-class recalls over the classes present in ``y``."""
    y = np.asarray(y)
    pred = np.asarray(pred)
    rates = [np.mean(pred[y == c] == c) for c in (0, 1) if np.any(y == c)]
    if not rates:
        raise PreconditionError("balanced accuracy of an empty set")
    return float(np.mean(rates))


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --------------------------------------------------------------------------
# Batches


def make_batches(times, n_positive: int, n_batches: int = N_BATCHES, seed: int = 0) -> list[np.ndarray]:
    """Split negatives into ``n_batches`` contiguous, time-disjoint batches.

    ``times`` holds one sortable timestamp per negative.  Distinct timestamps
    are cut into ``n_batches`` consecutive runs; each batch is the negatives of
    one run, randomly reduced to ``n_positive`` when it is larger.  Returns
    index arrays into ``times``, each sorted.
    """
    n_batches = check_positive_int(n_batches, "n_batches")
    n_positive = check_positive_int(n_positive, "n_positive")
    times = np.asarray(times)
    if times.size < n_batches:
        raise TrainingError(f"{times.size} negatives cannot fill {n_batches} batches")
    distinct, inverse = np.unique(times, return_inverse=True)
    if len(distinct) < n_batches:
        raise TrainingError(f"negatives span {len(distinct)} distinct times, need {n_batches}")
    segment_of = np.empty(len(distinct), dtype=np.int64)
    for b, chunk in enumerate(np.array_split(np.arange(len(distinct)), n_batches)):
        segment_of[chunk] = b
    seg = segment_of[inverse.ravel()]
    rng = np.random.default_rng(seed)
    batches = []
    for b in range(n_batches):
        idx = np.flatnonzero(seg == b)
        if len(idx) > n_positive:
            idx = np.sort(rng.choice(idx, n_positive, replace=False))
        batches.append(idx)
    return batches


# --------------------------------------------------------------------------
# Weak classifiers


@dataclass(frozen=True, eq=False)
class WeakClassifier:
    kind: str
    weights: np.ndarray
    bias: float
    batch: int

    def __post_init__(self):
        if self.kind not in _DIMS:
            raise PreconditionError(f"unknown feature kind {self.kind!r}")
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.size != _DIMS[self.kind]:
            raise PreconditionError(f"{self.kind} weights need {_DIMS[self.kind]} values, got {w.size}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    def decision(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.weights.size:
            raise PreconditionError(f"feature dimension {X.shape[-1]} does not match {self.kind} ({self.weights.size})")
        return X @ self.weights + self.bias


def weak_proba(classifier: WeakClassifier, feature) -> np.ndarray | float:
    """Sigmoid of the affine score; scalar for a single feature vector."""
    feature = np.asarray(feature, dtype=np.float64)
    p = _sigmoid(np.atleast_1d(classifier.decision(feature)))
    return float(p[0]) if feature.ndim == 1 else p


def train_weak(X, y, kind: str, batch: int = 0, seed: int = 0, C: float = 1.0, max_iter: int = 1000) -> WeakClassifier:
    """Balanced-weight L2 logistic fit on standardised features.

    Standardisation is folded back into the weights, so the returned model
    acts on raw features.
    """
    if kind not in _DIMS:
        raise PreconditionError(f"unknown feature kind {kind!r}")
    X = check_matrix(X, "X", _DIMS[kind])
    y = check_binary_labels(y, len(X))
    if len(np.unique(y)) < 2:
        raise TrainingError("weak classifier needs both classes")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    model = LogisticRegression(C=C, class_weight="balanced", max_iter=max_iter, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model.fit((X - mu) / sd, y)
    coef = model.coef_.ravel() / sd
    bias = float(model.intercept_[0] - coef @ mu)
    return WeakClassifier(kind, coef, bias, batch)


def _train_pair(hog_pos, hog_neg, mot_pos, mot_neg, batch, seed, C):
    y = np.r_[np.ones(len(hog_pos), dtype=np.int64), np.zeros(len(hog_neg), dtype=np.int64)]
    hog = train_weak(np.vstack([hog_pos, hog_neg]), y, SEGMENTED_HOG, batch, seed, C)
    mot = train_weak(np.vstack([mot_pos, mot_neg]), y, MOTION_HISTOGRAM, batch, seed, C)
    return hog, mot


class WeakEnsemble(TransformerMixin, BaseEstimator):
    """``n_batches`` HOG and ``n_batches`` motion-histogram weak classifiers.

    ``fit(X, y, times)`` takes ``X = [hog | motion]`` (324 + 27 columns).
    ``transform`` returns the stacked probabilities, HOG batches first.
    """

    def __init__(self, n_batches=N_BATCHES, C=1.0, seed=0, n_jobs=1):
        self.n_batches = n_batches
        self.C = C
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y, times=None):
        X = check_matrix(X, "X", HOG_DIM + MOTION_DIM)
        y = check_binary_labels(y, len(X))
        if times is None:
            raise PreconditionError("WeakEnsemble.fit needs per-sample timestamps")
        times = np.asarray(times)
        pos = np.flatnonzero(y == 1)
        neg = np.flatnonzero(y == 0)
        if len(pos) == 0 or len(neg) == 0:
            raise TrainingError("weak ensemble needs both classes")
        n_batches = check_positive_int(self.n_batches, "n_batches")
        distinct = len(np.unique(times[neg]))
        if distinct < n_batches:
            # fewer distinct times than batches: one batch per time keeps them disjoint
            log.warning("negatives span %d distinct times; training %d batches instead of %d", distinct, distinct, n_batches)
            n_batches = distinct
        batches = make_batches(times[neg], len(pos), n_batches, self.seed)
        hog, mot = X[:, :HOG_DIM], X[:, HOG_DIM:]
        jobs = (
            delayed(_train_pair)(hog[pos], hog[neg[b]], mot[pos], mot[neg[b]], i, self.seed + i, self.C)
            for i, b in enumerate(batches)
        )
        pairs = Parallel(n_jobs=self.n_jobs)(jobs)
        self.hog_classifiers_ = [p[0] for p in pairs]
        self.motion_classifiers_ = [p[1] for p in pairs]
        self.batch_sizes_ = [len(b) for b in batches]
        self.n_batches_ = n_batches
        return self

    @property
    def classifiers_(self) -> list[WeakClassifier]:
        return list(self.hog_classifiers_) + list(self.motion_classifiers_)

    @classmethod
    def from_classifiers(cls, classifiers: list[WeakClassifier], **params) -> "WeakEnsemble":
        est = cls(**params)
        est.hog_classifiers_ = [c for c in classifiers if c.kind == SEGMENTED_HOG]
        est.motion_classifiers_ = [c for c in classifiers if c.kind == MOTION_HISTOGRAM]
        return est

    def transform(self, X) -> np.ndarray:
        X = check_matrix(X, "X", HOG_DIM + MOTION_DIM)
        hog, mot = X[:, :HOG_DIM], X[:, HOG_DIM:]
        cols = [weak_proba(c, hog) for c in self.hog_classifiers_]
        cols += [weak_proba(c, mot) for c in self.motion_classifiers_]
        return np.column_stack(cols) if cols else np.zeros((len(X), 0))


# --------------------------------------------------------------------------
# AdaBoost over stumps


@dataclass(frozen=True)
class Stump:
    feature: int
    threshold: float
    polarity: int  # +1: x >= threshold votes positive; -1: x < threshold votes positive
    alpha: float

    def vote(self, X) -> np.ndarray:
        x = np.asarray(X, dtype=np.float64)[:, self.feature]
        above = x >= self.threshold
        positive = above if self.polarity > 0 else ~above
        return np.where(positive, 1.0, -1.0)


@dataclass(frozen=True, eq=False)
class AdaBoostModel:
    rounds: tuple[Stump, ...]
    n_features: int
    train_errors: tuple[float, ...] = field(default=())
    weighted_errors: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if len(self.rounds) < 1:
            raise PreconditionError("AdaBoost model needs at least one round")
        if not all(np.isfinite(s.alpha) for s in self.rounds):
            raise PreconditionError("stage weights must be finite")

    def margin(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise PreconditionError(f"expected {self.n_features} inputs, got {X.shape[1]}")
        total = sum(s.alpha for s in self.rounds)
        votes = sum(s.alpha * s.vote(X) for s in self.rounds)
        return votes / total

    def error_bound(self) -> float:
        """Product of ``2 sqrt(e (1 - e))`` over rounds."""
        e = np.clip(np.asarray(self.weighted_errors, dtype=np.float64), 0.0, 1.0)
        return float(np.prod(2.0 * np.sqrt(e * (1.0 - e))))


def _ranked_stumps(order, xs_sorted, w, y, n_features):
    """Every distinct stump with its weighted error, best first.

    Thresholds sit between distinct sorted values (plus the two open ends).
    Ties resolve to the lowest error, then feature, then threshold position,
    then polarity +1.  Returns parallel arrays ``(err, feature, position, polarity)``.
    """
    wp = np.where(y == 1, w, 0.0)[order]  # (d, n)
    wn = np.where(y == 0, w, 0.0)[order]
    cum_p = np.concatenate([np.zeros((n_features, 1)), np.cumsum(wp, axis=1)], axis=1)
    cum_n = np.concatenate([np.zeros((n_features, 1)), np.cumsum(wn, axis=1)], axis=1)
    total_p, total_n = cum_p[:, -1:], cum_n[:, -1:]
    # threshold before sorted position j: positives below are missed, negatives above are false alarms
    err_plus = cum_p + (total_n - cum_n)
    err_minus = cum_n + (total_p - cum_p)
    n = xs_sorted.shape[1]
    valid = np.ones((n_features, n + 1), dtype=bool)
    valid[:, 1:n] = xs_sorted[:, 1:] != xs_sorted[:, :-1]
    f_idx, j_idx = np.nonzero(valid)
    err = np.concatenate([err_plus[f_idx, j_idx], err_minus[f_idx, j_idx]])
    feat = np.concatenate([f_idx, f_idx])
    pos = np.concatenate([j_idx, j_idx])
    pol = np.concatenate([np.ones(len(f_idx), np.int64), -np.ones(len(f_idx), np.int64)])
    rank = np.lexsort((-pol, pos, feat, err))
    return err[rank], feat[rank], pos[rank], pol[rank]


def _threshold_at(xs_sorted, f: int, j: int) -> float:
    n = xs_sorted.shape[1]
    if j == 0:
        return -np.inf
    if j == n:
        return np.inf
    return float(0.5 * (xs_sorted[f, j - 1] + xs_sorted[f, j]))


def _error_rate(margin, y) -> float:
    return float(np.mean(np.where(margin >= 0, 1, 0) != y))


def train_adaboost(X, y, rounds: int = DEFAULT_ROUNDS, seed: int = 0, chunk: int = 64) -> AdaBoostModel:
    """Discrete AdaBoost with per-round weight renormalisation.

    Each round takes the lowest-weighted-error stump whose vote does not
    raise the ensemble's training error, so the per-round error sequence is
    non-increasing.  The stage weight and the reweighting are the usual
    ones, hence the exponential-loss bound on training error still holds.
    Stops early when no admissible stump beats chance, or after a stump
    with zero weighted error.  ``seed`` is accepted for API symmetry; the
    search is deterministic.
    """
    X = check_matrix(X)
    y = check_binary_labels(y, len(X))
    rounds = check_positive_int(rounds, "rounds")
    if len(np.unique(y)) < 2:
        raise TrainingError("AdaBoost needs both classes")
    n, d = X.shape
    order = np.argsort(X.T, axis=1, kind="stable")
    xs_sorted = np.take_along_axis(X.T, order, axis=1)
    sign = np.where(y == 1, 1.0, -1.0)
    w = np.full(n, 1.0 / n)
    stumps: list[Stump] = []
    train_errors: list[float] = []
    weighted: list[float] = []
    margin = np.zeros(n)
    current = _error_rate(margin, y)
    for _ in range(rounds):
        errs, feats, poss, pols = _ranked_stumps(order, xs_sorted, w, y, d)
        usable = int(np.searchsorted(errs, 0.5 - 1e-12, side="left"))
        chosen = None
        for a in range(0, usable, chunk):
            b = min(usable, a + chunk)
            e = np.maximum(errs[a:b], _MIN_ERROR)
            alphas = 0.5 * np.log((1.0 - e) / e)
            thr = np.array([_threshold_at(xs_sorted, int(f), int(j)) for f, j in zip(feats[a:b], poss[a:b])])
            above = X[:, feats[a:b]] >= thr[None, :]
            votes = np.where(above == (pols[a:b] > 0)[None, :], 1.0, -1.0)
            trial = margin[:, None] + alphas[None, :] * votes
            rates = np.mean(np.where(trial >= 0, 1, 0) != y[:, None], axis=0)
            ok = np.flatnonzero(rates <= current)
            if len(ok):
                k = int(ok[0])
                chosen = (int(feats[a + k]), float(thr[k]), int(pols[a + k]), float(errs[a + k]), float(alphas[k]))
                break
        if chosen is None:
            break
        f, thr_f, pol, err, alpha = chosen
        stump = Stump(f, thr_f, pol, alpha)
        h = stump.vote(X)
        stumps.append(stump)
        weighted.append(err)
        margin += alpha * h
        current = _error_rate(margin, y)
        train_errors.append(current)
        if err <= 0.0:
            break
        w = w * np.exp(-alpha * sign * h)
        w /= w.sum()
    if not stumps:
        raise TrainingError("no stump beats chance on the training data")
    return AdaBoostModel(tuple(stumps), d, tuple(train_errors), tuple(weighted))


def adaboost_proba(model: AdaBoostModel, X) -> np.ndarray | float:
    X = np.asarray(X, dtype=np.float64)
    p = _sigmoid(2.0 * model.margin(X))
    return float(p[0]) if X.ndim == 1 else p


class AdaBoostStumps(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`train_adaboost`; ``threshold`` is ``p0``."""

    def __init__(self, n_rounds=DEFAULT_ROUNDS, threshold=0.5, seed=0):
        self.n_rounds = n_rounds
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, y):
        self.model_ = train_adaboost(X, y, self.n_rounds, self.seed)
        self.classes_ = np.array([0, 1])
        self.train_errors_ = list(self.model_.train_errors)
        return self

    def predict_proba(self, X) -> np.ndarray:
        p = adaboost_proba(self.model_, np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)
