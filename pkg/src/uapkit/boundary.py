"""Exact decision-boundary geometry for linear classifiers.

Covers the binary point-to-plane case, the multiclass nearest-boundary
minimal perturbation, and the iterative top-k boundary crossing loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import as_tensor
from .errors import InvalidArgumentError, PreconditionError

DEGENERATE_DENOM = 1e-12


@dataclass(frozen=True)
class LinearClassifier:
    """Score functions f_i(x) = weights[i] . x + offsets[i]."""

    weights: np.ndarray  # (C, n)
    offsets: np.ndarray  # (C,)

    def __post_init__(self):
        w = as_tensor(self.weights)
        b = as_tensor(self.offsets)
        if w.ndim != 2 or w.shape[0] < 2 or w.shape[1] < 1:
            raise InvalidArgumentError("weights must be (C>=2, n>=1)")
        if b.shape != (w.shape[0],):
            raise InvalidArgumentError("offsets must have shape (C,)")
        # reject degenerate (duplicate) boundaries up front
        for i in range(w.shape[0]):
            for j in range(i + 1, w.shape[0]):
                if np.array_equal(w[i], w[j]):
                    raise InvalidArgumentError(f"weight rows {i} and {j} are identical")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "offsets", b)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def scores(self, x: np.ndarray) -> np.ndarray:
        return self.weights @ x + self.offsets

    def predict(self, x: np.ndarray) -> int:
        return int(np.argmax(self.scores(x)))


@dataclass
class CrossingReport:
    perturbation: np.ndarray
    iterations: int
    crossed_indices: set[int] = field(default_factory=set)
    converged: bool = False


def binary_distance(w: np.ndarray, b: float, x: np.ndarray) -> float:
    """Point-to-plane distance |w.x + b| / ||w||."""
    w = as_tensor(w)
    norm = np.linalg.norm(w)
    if norm == 0.0:
        raise InvalidArgumentError("weight vector is zero")
    return float(abs(float(w @ x) + b) / norm)


def binary_min_perturbation(w: np.ndarray, b: float, x: np.ndarray) -> np.ndarray:
    """Shortest r with w.(x+r) + b = 0: the orthogonal drop onto the plane."""
    w = as_tensor(w)
    sq = float(w @ w)
    if sq == 0.0:
        raise InvalidArgumentError("weight vector is zero")
    f = float(w @ x) + b
    return -(f / sq) * w


def _check_correctly_classified(clf: LinearClassifier, x: np.ndarray, y: int) -> np.ndarray:
    if not 0 <= y < clf.n_classes:
        raise InvalidArgumentError(f"class index {y} out of range")
    s = clf.scores(x)
    others = np.delete(s, y)
    if others.size and s[y] <= others.max():
        raise PreconditionError(f"x is not (strictly) classified as class {y}")
    return s


def _boundary_ratios(clf: LinearClassifier, x: np.ndarray, y: int):
    """(f_y - f_i) / ||w_y - w_i|| for every i != y; degenerate rows get +inf."""
    s = clf.scores(x)
    diffs = clf.weights[y][None, :] - clf.weights
    denoms = np.linalg.norm(diffs, axis=1)
    gaps = s[y] - s
    ratios = np.full(clf.n_classes, np.inf)
    ok = denoms >= DEGENERATE_DENOM
    ok[y] = False
    ratios[ok] = gaps[ok] / denoms[ok]
    ratios[y] = np.inf
    return ratios


def nearest_boundary(clf: LinearClassifier, x: np.ndarray, y: int) -> int:
    """Index of the closest decision boundary by gap-over-gradient-norm ratio."""
    x = as_tensor(x)
    _check_correctly_classified(clf, x, y)
    ratios = _boundary_ratios(clf, x, y)
    return int(np.argmin(ratios))  # argmin takes the smallest index on ties


def multiclass_min_perturbation(clf: LinearClassifier, x: np.ndarray, y: int) -> np.ndarray:
    """Minimal r moving x onto its nearest boundary: f_y(x+r) = f_l(x+r)."""
    x = as_tensor(x)
    s = _check_correctly_classified(clf, x, y)
    l = nearest_boundary(clf, x, y)
    w_diff = clf.weights[l] - clf.weights[y]
    sq = float(w_diff @ w_diff)
    if sq < DEGENERATE_DENOM ** 2:
        raise InvalidArgumentError("all boundaries are degenerate")
    gap = float(s[y] - s[l])
    return (gap / sq) * w_diff


def k_nearest_boundaries(clf: LinearClassifier, x: np.ndarray, y: int, k: int) -> list[int]:
    """The k boundary indices with the smallest crossing ratios (ties: lowest index)."""
    ratios = _boundary_ratios(clf, x, y)
    order = np.lexsort((np.arange(clf.n_classes), ratios))
    return [int(i) for i in order[:k]]


def cross_k_boundaries(clf: LinearClassifier, x: np.ndarray, y: int, k: int,
                       eta: float = 0.02, max_iters: int | None = None) -> CrossingReport:
    """Iteratively accumulate r until the true class scores below all k targets.

    The target set L is the k nearest boundaries at the initial point and is
    frozen; each iteration steps toward the not-yet-crossed member of L with
    the smallest remaining crossing distance. The returned perturbation is
    (1 + eta) * r, the overshoot applied exactly once.
    """
    x = as_tensor(x)
    _check_correctly_classified(clf, x, y)
    if not 1 <= k <= clf.n_classes - 1:
        raise InvalidArgumentError(f"k={k} outside [1, C-1]")
    if eta <= 0:
        raise InvalidArgumentError("eta must be positive")
    if max_iters is None:
        max_iters = 50 * k
    if max_iters <= 0:
        raise InvalidArgumentError("max_iters must be positive")

    targets = k_nearest_boundaries(clf, x, y, k)
    r = np.zeros_like(x)
    iterations = 0

    def uncrossed(r_vec):
        s = clf.scores(x + (1.0 + eta) * r_vec)
        return [l for l in targets if s[y] > s[l]]

    remaining = uncrossed(r)
    while remaining and iterations < max_iters:
        x_hat = x + r
        s = clf.scores(x_hat)
        best, best_ratio = None, np.inf
        for l in remaining:
            w_diff = clf.weights[l] - clf.weights[y]
            denom = float(np.linalg.norm(w_diff))
            if denom < DEGENERATE_DENOM:
                continue  # skip this boundary for this iteration
            ratio = float(s[y] - s[l]) / denom
            if ratio < best_ratio:
                best, best_ratio = l, ratio
        if best is None:
            break  # every remaining boundary degenerate
        w_diff = clf.weights[best] - clf.weights[y]
        gap = float(s[y] - s[best])
        r = r + (gap / float(w_diff @ w_diff)) * w_diff
        iterations += 1
        remaining = uncrossed(r)

    s_final = clf.scores(x + (1.0 + eta) * r)
    crossed = {l for l in targets if s_final[y] < s_final[l]}
    return CrossingReport(
        perturbation=(1.0 + eta) * r,
        iterations=iterations,
        crossed_indices=crossed,
        converged=not remaining,
    )
