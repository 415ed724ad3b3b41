"""Reduced-training-set baselines: random real, optimized real, k-means, average real."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .data import DistilledDataset, LabeledData, one_hot
from .knn import Prototypes, knn_accuracy

Provenance = Literal["random-real", "optimized-real", "kmeans", "average-real"]


@dataclass
class ReducedSet:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    provenance: str
    score: float | None = None

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("samples and labels must align")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.y)

    def as_data(self) -> LabeledData:
        return LabeledData(self.x, self.y, self.num_classes)

    def to_distilled(self, lr: float, steps: int = 1, epochs: int = 1, binary: bool = False,
                     seed: int = 0) -> DistilledDataset:
        """One-hot labels in the distilled container, so one evaluation path serves both."""
        if binary:
            y = np.where(self.y == 1, 1.0, -1.0)[:, None]
        else:
            y = one_hot(self.y, self.num_classes)
        return DistilledDataset(self.x.copy(), y, np.full(steps, np.log(lr)), epochs, self.num_classes, seed,
                                {"provenance": self.provenance})


def random_real(data: LabeledData, per_class: int, seed: int) -> ReducedSet:
    """Uniform per-class sample without replacement."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(data.num_classes):
        members = data.class_indices(c)
        if len(members) < per_class:
            raise ValueError(f"class {c} has {len(members)} samples, fewer than {per_class}")
        picks.append(np.sort(rng.choice(members, size=per_class, replace=False)))
    # interleave classes so contiguous step batches stay class-balanced
    idx = np.stack(picks, axis=1).ravel()
    return ReducedSet(data.x[idx], data.y[idx], data.num_classes, "random-real")


def optimized_real(data: LabeledData, per_class: int, draws: int, train_eval: Callable[[ReducedSet], float],
                   seed: int, keep_fraction: float = 0.2) -> list[ReducedSet]:
    """Draw ``draws`` random sets, score each, keep the best ceil(fraction * draws).

    Kept sets are ordered best first (earlier draw wins ties) and carry
    their score.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    keep = math.ceil(round(keep_fraction * draws, 9))
    if keep < 1:
        raise ValueError("too few draws to keep any set")
    rng = np.random.default_rng(seed)
    scored = []
    for _ in range(draws):
        rs = random_real(data, per_class, int(rng.integers(2**32)))
        rs.score = float(train_eval(rs))
        scored.append(rs)
    order = sorted(range(draws), key=lambda i: (-scored[i].score, i))
    out = []
    for i in order[:keep]:
        scored[i].provenance = "optimized-real"
        out.append(scored[i])
    return out


def lloyd(x: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 100):
    """k-means on rows of ``x``; returns (centroids, assignment, inertia per iteration).

    Seeded by k distinct random members.  A cluster that empties is
    re-seeded with the point farthest from its current centroid.
    """
    if len(x) < k:
        raise ValueError(f"{len(x)} points cannot form {k} clusters")
    centroids = x[np.sort(rng.choice(len(x), size=k, replace=False))].astype(np.float64)
    assign = None
    history = []
    for _ in range(iterations):
        d2 = np.sum((x[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(len(x)), assign]))
                centroids[j] = x[far]
                assign[far] = j
    return centroids, assign, history


def kmeans_centroids(data: LabeledData, k: int, seed: int, iterations: int = 100) -> ReducedSet:
    """Per-class k-means centroids labelled with their class."""
    rng = np.random.default_rng(seed)
    flat = data.x.reshape(len(data), -1)
    cents = []
    for c in range(data.num_classes):
        members = data.class_indices(c)
        centroids, _, _ = lloyd(flat[members], k, rng, iterations)
        cents.append(centroids)
    x = np.stack(cents, axis=1).reshape(k * data.num_classes, *data.x.shape[1:])
    y = np.tile(np.arange(data.num_classes), k)
    return ReducedSet(x, y, data.num_classes, "kmeans")


def average_real(data: LabeledData) -> ReducedSet:
    """Mean sample of each class."""
    flat = data.x.reshape(len(data), -1)
    x = np.stack([flat[data.class_indices(c)].mean(axis=0) for c in range(data.num_classes)])
    return ReducedSet(x.reshape(data.num_classes, *data.x.shape[1:]), np.arange(data.num_classes),
                      data.num_classes, "average-real")


def knn_baseline(reduced: ReducedSet | LabeledData, k: int, test: LabeledData) -> float:
    """Hard-label kNN accuracy of ``test`` against the reduced set."""
    protos = Prototypes.hard(reduced.x.reshape(len(reduced.y), -1), reduced.y, reduced.num_classes)
    flat_test = LabeledData(test.x.reshape(len(test), -1), test.y, test.num_classes)
    return knn_accuracy(protos, k, flat_test)


DEFAULT_LR_GRID = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0)


def train_reduced(reduced: ReducedSet, spec, init, train: LabeledData, steps: int = 1, epochs: int = 1,
                  lr_grid=DEFAULT_LR_GRID) -> tuple[DistilledDataset, float]:
    """Pick the GD learning rate (from ``lr_grid``) that maximizes training accuracy.

    Training uses the same number of steps and epochs as the distillation it
    is compared to.  Returns the reduced set in container form with the
    chosen rate, and that rate's training accuracy.
    """
    from .metrics import evaluate_trials

    best, best_acc = None, -1.0
    for lr in lr_grid:
        dd = reduced.to_distilled(lr, steps, epochs, binary=spec.loss == "sigmoid")
        init.reset()
        acc = float(evaluate_trials(dd, spec, init, train, trials=8).mean())
        if acc > best_acc:
            best, best_acc = dd, acc
    init.reset()
    return best, best_acc
