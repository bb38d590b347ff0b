"""Gradient compression by 1-D k-means over gradient components.

A raw update of dimension ``d`` is summarised by the ``d'`` centers of a
one-dimensional k-means over its components.  Centers are returned sorted so
compressed features from different clients are directly comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CompressionSpec:
    rate: float = 0.10
    max_iters: int = 100
    seed: int = 0  # unused by the deterministic quantile init; kept for config symmetry

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ValueError(f"compression rate must be in (0, 1], got {self.rate}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def d_prime(self, d: int) -> int:
        # tolerate binary representation error, e.g. 0.1 * 30 = 3.0000000000000004
        return max(1, min(d, math.ceil(self.rate * d - 1e-9)))


@dataclass(eq=False)
class CompressedGradient:
    centers: np.ndarray
    source_norm: float
    n_iter: int = 0

    @property
    def d_prime(self) -> int:
        return self.centers.shape[0]

    @property
    def centers_norm(self) -> float:
        return float(np.linalg.norm(self.centers))


def _assign_sorted(values: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest-center index for each value; centers ascending, ties to the lower index."""
    mids = 0.5 * (centers[1:] + centers[:-1])
    return np.searchsorted(mids, values, side="left")


def within_group_sse(raw, centers) -> float:
    """Sum over components of the squared distance to the nearest center."""
    raw = np.asarray(raw, dtype=np.float64).ravel()
    centers = np.sort(np.asarray(centers, dtype=np.float64).ravel())
    if centers.size == 0:
        raise ValueError("centers must be non-empty")
    labels = _assign_sorted(raw, centers)
    return float(np.sum((raw - centers[labels]) ** 2))


def kmeans_1d(values, k: int, max_iters: int = 100):
    """Lloyd's algorithm on a 1-D sample.

    Returns ``(centers, sse_history, n_iter)``; ``sse_history[i]`` is the SSE
    after the i-th assignment/update pass.  Centers start at ``k`` evenly
    spaced order statistics.  An empty group is reseeded at the component
    farthest from its current center.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    d = x.size
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= {d}, got {k}")
    centers = x[np.round(np.linspace(0, d - 1, k)).astype(np.int64)].copy()
    history = []
    labels = None
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new_labels = _assign_sorted(x, centers)
        counts = np.bincount(new_labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            dist = (x - centers[new_labels]) ** 2
            for j in empty:
                far = int(np.argmax(dist))
                if dist[far] == 0.0:
                    break
                centers[j] = x[far]
                dist[far] = 0.0
            order = np.argsort(centers, kind="stable")
            centers = centers[order]
            new_labels = _assign_sorted(x, centers)
            counts = np.bincount(new_labels, minlength=k)
        sums = np.bincount(new_labels, weights=x, minlength=k)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled]
        history.append(float(np.sum((x - centers[new_labels]) ** 2)))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return np.sort(centers), history, n_iter


def compress(raw, spec: CompressionSpec) -> CompressedGradient:
    raw = np.asarray(raw, dtype=np.float64).ravel()
    if raw.size == 0:
        raise ValueError("cannot compress an empty vector")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw gradient has non-finite components")
    norm = float(np.linalg.norm(raw))
    k = spec.d_prime(raw.size)
    if k == raw.size:
        return CompressedGradient(np.sort(raw), norm, 0)
    centers, _, n_iter = kmeans_1d(raw, k, spec.max_iters)
    return CompressedGradient(centers, norm, n_iter)


def feature_matrix(feats) -> np.ndarray:
    """Stack compressed gradients (or raw arrays) into an ``(N, d')`` matrix."""
    rows = [f.centers if isinstance(f, CompressedGradient) else np.asarray(f, dtype=np.float64) for f in feats]
    widths = {r.shape[0] for r in rows}
    if len(widths) != 1:
        raise ValueError(f"compressed gradients have mixed d': {sorted(widths)}")
    return np.stack(rows)
