"""High-cloud segmentation with per-(hour, tile) Gaussian mixtures.

Pixels are grouped by the hour of their timestamp and by a non-overlapping
32x32 spatial tile.  Each group gets a 1-D GMM with two or three components
(chosen by AIC).  The component with the largest mean models high cloud;
a pixel keeps ``I * p1(I)`` when that product clears the cut threshold and
is zeroed otherwise.  A spatiotemporal min-max filter lifts isolated low
high-cloud means before the posteriors are re-evaluated.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._kmeans import weighted_kmeans
from .exceptions import CoverageError, EmptyGroupError, FormatError, PreconditionError
from .imagery import Frame

__all__ = [
    "DEFAULT_SIGMA",
    "TILE",
    "VARIANCE_FLOOR",
    "PixelGroupKey",
    "GmmParams",
    "GmmBank",
    "collect_group",
    "fit_gmm",
    "gmm_aic",
    "select_k",
    "fit_selected_gmm",
    "component_posterior",
    "segment_pixel",
    "minmax_filter",
    "train_bank",
    "segment_frame",
    "HighCloudSegmenter",
]

DEFAULT_SIGMA = 120.0
TILE = 32
VARIANCE_FLOOR = 1e-4
_MAX_ITER = 200
_TOL = 1e-6
_LEVELS = np.arange(256, dtype=np.float64)


class PixelGroupKey(NamedTuple):
    hour: int
    tile: tuple[int, int]


@dataclass(frozen=True, eq=False)
class GmmParams:
    """Mixture parameters, component 0 being the largest-mean (high cloud) one."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    loglik: float = float("nan")
    n_samples: int = 0

    def __post_init__(self):
        for name in ("weights", "means", "variances"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.weights) == len(self.means) == len(self.variances)):
            raise PreconditionError("GMM parameter vectors differ in length")

    @property
    def k(self) -> int:
        return len(self.means)

    @property
    def high_mean(self) -> float:
        return float(self.means[0])

    def with_high_mean(self, value: float) -> "GmmParams":
        means = self.means.copy()
        means[0] = value
        return GmmParams(self.weights, means, self.variances, self.loglik, self.n_samples)


def _log_joint(x: np.ndarray, weights, means, variances) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)[..., None]
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw - 0.5 * np.log(2.0 * math.pi * variances) - 0.5 * (x - means) ** 2 / variances


def _ordered(weights, means, variances, loglik, n) -> GmmParams:
    order = np.lexsort((-weights, -means))
    return GmmParams(weights[order], means[order], variances[order], loglik, n)


def _fit_weighted(values: np.ndarray, counts: np.ndarray, k: int, seed: int) -> GmmParams:
    values = np.asarray(values, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n < 10 * k:
        raise PreconditionError(f"need at least {10 * k} samples for k={k}, got {int(n)}")

    centers, assign = weighted_kmeans(values, k, counts, seed=seed)
    centers = centers[:, 0]
    weights = np.zeros(k)
    means = centers.copy()
    variances = np.full(k, VARIANCE_FLOOR)
    for j in range(k):
        sel = assign == j
        mass = counts[sel].sum()
        if mass > 0:
            weights[j] = mass / n
            means[j] = np.dot(counts[sel], values[sel]) / mass
            variances[j] = max(np.dot(counts[sel], (values[sel] - means[j]) ** 2) / mass, VARIANCE_FLOOR)

    prev = -np.inf
    loglik = -np.inf
    for _ in range(_MAX_ITER):
        logp = _log_joint(values, weights, means, variances)
        lse = logsumexp(logp, axis=1)
        loglik = float(np.dot(counts, lse))
        if np.isfinite(prev) and loglik - prev < _TOL * max(1.0, abs(prev)):
            break
        prev = loglik
        resp = np.exp(logp - lse[:, None]) * counts[:, None]
        mass = resp.sum(axis=0)
        live = mass > 0
        weights = mass / n
        means = np.where(live, (resp * values[:, None]).sum(axis=0) / np.where(live, mass, 1.0), means)
        var = (resp * (values[:, None] - means) ** 2).sum(axis=0) / np.where(live, mass, 1.0)
        variances = np.where(live, np.maximum(var, VARIANCE_FLOOR), variances)
    return _ordered(weights, means, variances, loglik, int(n))


def fit_gmm(samples, k: int, seed: int = 0) -> GmmParams:
    """Fit a ``k``-component 1-D GMM by k-means++ seeding followed by EM.

    EM stops when the relative log-likelihood gain drops below 1e-6 or after
    200 iterations.  Variances are floored at 1e-4, so constant data yields
    coincident components with the surplus ones holding zero weight.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    values, counts = np.unique(x, return_counts=True)
    return _fit_weighted(values, counts, k, seed)


def gmm_aic(gmm: GmmParams) -> float:
    return 2.0 * (3 * gmm.k - 1) - 2.0 * gmm.loglik


def _select_weighted(values, counts, seed) -> GmmParams:
    two = _fit_weighted(values, counts, 2, seed)
    three = _fit_weighted(values, counts, 3, seed)
    # ties go to the smaller model
    return three if gmm_aic(three) < gmm_aic(two) else two


def fit_selected_gmm(samples, seed: int = 0) -> GmmParams:
    x = np.asarray(samples, dtype=np.float64).ravel()
    values, counts = np.unique(x, return_counts=True)
    return _select_weighted(values, counts, seed)


def select_k(samples, seed: int = 0) -> int:
    return fit_selected_gmm(samples, seed).k


def component_posterior(gmm: GmmParams, intensity) -> np.ndarray:
    """Posterior responsibilities; the last axis indexes components."""
    logp = _log_joint(intensity, gmm.weights, gmm.means, gmm.variances)
    return np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))


def segment_pixel(gmm: GmmParams, intensity, sigma: float = DEFAULT_SIGMA):
    intensity = np.asarray(intensity, dtype=np.float64)
    value = intensity * component_posterior(gmm, intensity)[..., 0]
    out = np.where(value >= sigma, value, 0.0)
    return float(out) if out.ndim == 0 else out


def _tile_grid(height: int, width: int, tile: int) -> tuple[int, int]:
    return -(-height // tile), -(-width // tile)


def _tile_slices(tr: int, tc: int, tile: int) -> tuple[slice, slice]:
    return slice(tr * tile, (tr + 1) * tile), slice(tc * tile, (tc + 1) * tile)


def collect_group(frames: Sequence[Frame], key: PixelGroupKey, tile: int = TILE) -> np.ndarray:
    """Every usable pixel of ``key.hour`` falling inside ``key.tile``."""
    if not frames:
        raise PreconditionError("frame sequence is empty")
    hour, (tr, tc) = key
    rs, cs = _tile_slices(tr, tc, tile)
    parts = [f.pixels[rs, cs].ravel() for f in frames if f.ok and f.timestamp.hour == hour]
    parts = [p for p in parts if p.size]
    if not parts:
        raise EmptyGroupError(f"no samples for hour {hour}, tile {(tr, tc)}")
    return np.concatenate(parts)


@dataclass
class GmmBank:
    """Trained mixtures for every (hour, tile) group seen in training.

    ``filtered`` holds the min-max filtered high-cloud mean per key; before
    filtering it equals each mixture's own largest mean.
    """

    shape: tuple[int, int]
    tile: int
    params: dict = field(default_factory=dict)
    filtered: dict = field(default_factory=dict)

    FORMAT = "# commacloud gmmbank v1"

    def __post_init__(self):
        for key, gmm in self.params.items():
            self.filtered.setdefault(key, gmm.high_mean)
        self._luts: dict = {}

    @property
    def grid(self) -> tuple[int, int]:
        return _tile_grid(*self.shape, self.tile)

    @property
    def hours(self) -> set[int]:
        return {key.hour for key in self.params}

    def effective(self, key: PixelGroupKey) -> GmmParams:
        return self.params[key].with_high_mean(self.filtered[key])

    def lut(self, hour: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
        """Segmented output for each integer intensity, ``(rows, cols, 256)``."""
        cache_key = (hour, float(sigma))
        if cache_key in self._luts:
            return self._luts[cache_key]
        n_rows, n_cols = self.grid
        table = np.zeros((n_rows, n_cols, 256), dtype=np.float32)
        for tr in range(n_rows):
            for tc in range(n_cols):
                key = PixelGroupKey(hour, (tr, tc))
                if key not in self.params:
                    raise CoverageError(f"bank has no mixture for hour {hour}, tile {(tr, tc)}")
                table[tr, tc] = segment_pixel(self.effective(key), _LEVELS, sigma)
        self._luts[cache_key] = table
        return table

    def to_text(self) -> str:
        lines = [self.FORMAT, f"shape {self.shape[0]} {self.shape[1]} tile {self.tile}"]
        for key in sorted(self.params):
            gmm = self.params[key]
            vals = [key.hour, key.tile[0], key.tile[1], gmm.k, gmm.n_samples]
            vals += [repr(float(v)) for v in gmm.weights]
            vals += [repr(float(v)) for v in gmm.means]
            vals += [repr(float(v)) for v in gmm.variances]
            vals += [repr(float(gmm.loglik)), repr(float(self.filtered[key]))]
            lines.append(" ".join(str(v) for v in vals))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "GmmBank":
        return cls.from_text(Path(path).read_text())

    @classmethod
    def from_text(cls, text: str) -> "GmmBank":
        lines = text.splitlines()
        if not lines or lines[0].strip() != cls.FORMAT:
            raise FormatError("not a commacloud gmmbank v1 file")
        head = lines[1].split()
        if len(head) != 5 or head[0] != "shape" or head[3] != "tile":
            raise FormatError("malformed gmmbank shape line")
        shape = (int(head[1]), int(head[2]))
        params, filtered = {}, {}
        for line in lines[2:]:
            if not line.strip():
                continue
            tok = line.split()
            hour, tr, tc, k, n = (int(t) for t in tok[:5])
            nums = [float(t) for t in tok[5:]]
            if len(nums) != 3 * k + 2:
                raise FormatError(f"malformed gmmbank record: {line!r}")
            key = PixelGroupKey(hour, (tr, tc))
            params[key] = GmmParams(nums[:k], nums[k : 2 * k], nums[2 * k : 3 * k], nums[3 * k], n)
            filtered[key] = nums[3 * k + 1]
        return cls(shape, int(head[4]), params, filtered)


def minmax_filter(bank: GmmBank) -> GmmBank:
    """Raise each high-cloud mean to the minimum over its 26 neighbours.

    The neighbourhood spans hours ``h-1..h+1`` (wrapping at midnight) and
    tiles within Chebyshev distance one (clipped at the grid edge), the key
    itself excluded.  Means only ever move up.
    """
    highs = {key: gmm.high_mean for key, gmm in bank.params.items()}
    filtered = {}
    for key, own in highs.items():
        hour, (tr, tc) = key
        nbr = []
        for dh in (-1, 0, 1):
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dh == dr == dc == 0:
                        continue
                    other = PixelGroupKey((hour + dh) % 24, (tr + dr, tc + dc))
                    if other in highs:
                        nbr.append(highs[other])
        filtered[key] = max(own, min(nbr)) if nbr else own
    return GmmBank(bank.shape, bank.tile, dict(bank.params), filtered)


def _key_seed(seed: int, hour: int, tr: int, tc: int) -> int:
    return int(np.random.SeedSequence([seed, hour, tr, tc]).generate_state(1)[0])


def _fit_hour(stack: np.ndarray, hour: int, tile: int, seed: int) -> dict:
    n_rows, n_cols = _tile_grid(stack.shape[1], stack.shape[2], tile)
    out = {}
    for tr in range(n_rows):
        for tc in range(n_cols):
            rs, cs = _tile_slices(tr, tc, tile)
            hist = np.bincount(stack[:, rs, cs].ravel(), minlength=256)
            levels = np.flatnonzero(hist)
            out[PixelGroupKey(hour, (tr, tc))] = _select_weighted(
                levels.astype(np.float64), hist[levels], _key_seed(seed, hour, tr, tc)
            )
    return out


def train_bank(frames: Sequence[Frame], tile: int = TILE, seed: int = 0, smooth: bool = True, n_jobs: int = 1) -> GmmBank:
    """Fit one AIC-selected mixture per (hour, tile) over the usable frames."""
    usable = [f for f in frames if f.ok]
    if not usable:
        raise EmptyGroupError("no usable frames to train the mixture bank")
    shape = usable[0].shape
    by_hour = defaultdict(list)
    for f in usable:
        if f.shape != shape:
            raise PreconditionError("all training frames must share one shape")
        if f.pixels.dtype != np.uint8:
            raise PreconditionError("bank training expects raw 8-bit frames")
        by_hour[f.timestamp.hour].append(f.pixels)
    hours = sorted(by_hour)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_fit_hour)(np.stack(by_hour[h]), h, tile, seed) for h in hours
    )
    params = {}
    for part in results:
        params.update(part)
    bank = GmmBank(shape, tile, params)
    return minmax_filter(bank) if smooth else bank


def segment_frame(frame: Frame, bank: GmmBank, sigma: float = DEFAULT_SIGMA) -> Frame:
    """Apply the cut rule pixelwise with the (hour, tile) mixture of each pixel."""
    if frame.shape != tuple(bank.shape):
        raise PreconditionError(f"frame shape {frame.shape} differs from bank shape {bank.shape}")
    hour = frame.timestamp.hour
    if hour not in bank.hours:
        raise CoverageError(f"bank has no mixtures for hour {hour}")
    tile = bank.tile
    height, width = frame.shape
    pixels = frame.pixels
    out = np.zeros((height, width), dtype=np.float32)
    if pixels.dtype == np.uint8:
        table = bank.lut(hour, sigma)
        rows = np.minimum(np.arange(height) // tile, table.shape[0] - 1)
        cols = np.minimum(np.arange(width) // tile, table.shape[1] - 1)
        out[:] = table[rows[:, None], cols[None, :], pixels]
    else:
        n_rows, n_cols = bank.grid
        for tr in range(n_rows):
            for tc in range(n_cols):
                key = PixelGroupKey(hour, (tr, tc))
                if key not in bank.params:
                    raise CoverageError(f"bank has no mixture for hour {hour}, tile {(tr, tc)}")
                rs, cs = _tile_slices(tr, tc, tile)
                out[rs, cs] = segment_pixel(bank.effective(key), pixels[rs, cs], sigma)
    return Frame(out, frame.timestamp, frame.validity)


class HighCloudSegmenter(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains the mixture bank, ``transform`` segments.

    Parameters
    ----------
    sigma : float
        Cut threshold on ``I * p1``; the usable range is [100, 130].
    tile : int
        Side of the square spatial tiles that group pixels.
    smooth : bool
        Apply the spatiotemporal min-max filter to the high-cloud means.
    seed : int
        Base seed for the k-means++ initializations.
    n_jobs : int
        Worker count for fitting independent hours.
    """

    def __init__(self, sigma=DEFAULT_SIGMA, tile=TILE, smooth=True, seed=0, n_jobs=1):
        self.sigma = sigma
        self.tile = tile
        self.smooth = smooth
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, frames, y=None):
        if not 100.0 <= self.sigma <= 130.0:
            raise PreconditionError("sigma must lie in [100, 130]")
        self.bank_ = train_bank(frames, self.tile, self.seed, self.smooth, self.n_jobs)
        return self

    @classmethod
    def from_bank(cls, bank: GmmBank, sigma=DEFAULT_SIGMA) -> "HighCloudSegmenter":
        seg = cls(sigma=sigma, tile=bank.tile)
        seg.bank_ = bank
        return seg

    def segment(self, frame: Frame) -> Frame:
        check_is_fitted(self, "bank_")
        return segment_frame(frame, self.bank_, self.sigma)

    def transform(self, frames):
        if isinstance(frames, Frame):
            return self.segment(frames)
        return [self.segment(f) for f in frames]
