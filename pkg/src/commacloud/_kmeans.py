"""Weighted k-means with k-means++ seeding.

Points may carry multiplicities, which lets the 1-D GMM fits run on the
256-bin intensity histogram instead of on every pixel sample.
"""

from __future__ import annotations

import numpy as np


def kmeans_pp_seed(points: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    p = weights / weights.sum()
    first = rng.choice(n, p=p)
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        mass = weights * d2
        total = mass.sum()
        if total <= 0.0:
            # every point already sits on a center
            centers[j] = centers[0]
            continue
        idx = rng.choice(n, p=mass / total)
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def weighted_kmeans(
    points: np.ndarray,
    k: int,
    weights: np.ndarray | None = None,
    seed: int = 0,
    max_iter: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from a k-means++ start.

    Returns ``(centers, assignment)``.  Distance ties go to the lower
    center index so results are reproducible for a fixed seed.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if weights is None:
        weights = np.ones(len(points))
    weights = np.asarray(weights, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_seed(points, weights, k, rng)
    assign = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            sel = assign == j
            mass = weights[sel].sum()
            if mass > 0:
                centers[j] = (weights[sel, None] * points[sel]).sum(axis=0) / mass
    return centers, assign
