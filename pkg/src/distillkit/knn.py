"""Soft-label k-nearest-neighbour classification over prototype sets.

Covers the four prototype regimes: selection (real points, hard labels),
generation (free locations, hard labels), soft labels (fixed locations,
learned label weights) and the combination of both, plus rasterization of
the resulting decision regions over a 2-D feature space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .data import LabeledData, one_hot, write_pgm

Weights = Literal["uniform", "distance"]
REGIMES = ("generation", "soft-labels", "combined")


@dataclass(frozen=True)
class Prototype:
    location: np.ndarray
    label: np.ndarray


@dataclass
class Prototypes:
    """M prototype locations (M, D) with non-negative label weights (M, C)."""

    locations: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=np.float64))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        if len(self.locations) != len(self.labels):
            raise ValueError("locations and labels must align")
        if np.any(self.labels < 0) or np.any(self.labels.sum(axis=1) <= 0):
            raise ValueError("label weights must be non-negative with a positive sum")

    def __len__(self) -> int:
        return len(self.locations)

    def __getitem__(self, i: int) -> Prototype:
        return Prototype(self.locations[i], self.labels[i])

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def normalized_labels(self) -> np.ndarray:
        return self.labels / self.labels.sum(axis=1, keepdims=True)

    def copy(self) -> "Prototypes":
        return Prototypes(self.locations.copy(), self.labels.copy())

    @classmethod
    def hard(cls, locations, classes, num_classes: int) -> "Prototypes":
        return cls(locations, one_hot(classes, num_classes))


def soft_knn_predict_batch(protos: Prototypes, k: int, queries, weights: Weights = "uniform") -> np.ndarray:
    """Class per query row.

    Sums the normalized labels of the k nearest prototypes (Euclidean,
    distance ties to the lower prototype index) and returns the argmax
    (ties to the lower class).  ``weights="distance"`` scales each
    neighbour by inverse distance; a query sitting exactly on prototypes
    takes only those.
    """
    if len(protos) == 0:
        raise ValueError("empty prototype set")
    if not 1 <= k <= len(protos):
        raise ValueError(f"k must be in [1, {len(protos)}], got {k}")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d2 = np.sum((queries[:, None, :] - protos.locations[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    labels = protos.normalized_labels[order]  # (Q, k, C)
    if weights == "uniform":
        w = np.ones(order.shape)
    elif weights == "distance":
        dist = np.sqrt(np.take_along_axis(d2, order, axis=1))
        exact = dist == 0
        with np.errstate(divide="ignore"):
            w = np.where(exact.any(axis=1, keepdims=True), exact.astype(np.float64), 1.0 / dist)
    else:
        raise ValueError(f"unknown weighting {weights!r}")
    scores = np.einsum("qk,qkc->qc", w, labels)
    return np.argmax(scores, axis=1)


def soft_knn_predict(protos: Prototypes, k: int, query, weights: Weights = "uniform") -> int:
    return int(soft_knn_predict_batch(protos, k, np.asarray(query)[None, :], weights)[0])


def knn_accuracy(protos: Prototypes, k: int, data: LabeledData, weights: Weights = "uniform") -> float:
    return float(np.mean(soft_knn_predict_batch(protos, k, data.x, weights) == data.y))


def select_prototypes(data: LabeledData, per_class: int, seed: int) -> Prototypes:
    """Uniform random subset of each class, hard labels."""
    rng = np.random.default_rng(seed)
    locs, classes = [], []
    for c in range(data.num_classes):
        members = data.class_indices(c)
        if len(members) < per_class:
            raise ValueError(f"class {c} has {len(members)} samples, fewer than {per_class}")
        pick = np.sort(rng.choice(members, size=per_class, replace=False))
        locs.append(data.x[pick])
        classes += [c] * per_class
    return Prototypes.hard(np.concatenate(locs), classes, data.num_classes)


def best_selection(data: LabeledData, per_class: int, budget: int, k: int = 1, seed: int = 0,
                   weights: Weights = "uniform") -> tuple[Prototypes, float]:
    """Best of ``budget`` random selections by training accuracy (first wins ties)."""
    rng = np.random.default_rng(seed)
    best, best_acc = None, -1.0
    for _ in range(budget):
        p = select_prototypes(data, per_class, int(rng.integers(2**32)))
        acc = knn_accuracy(p, k, data, weights)
        if acc > best_acc:
            best, best_acc = p, acc
    return best, best_acc


def _seed_prototypes(data: LabeledData, m: int, rng: np.random.Generator) -> Prototypes:
    # class i % C for prototype i, a distinct random member of that class
    locs, classes, used = [], [], set()
    for i in range(m):
        c = i % data.num_classes
        members = [j for j in data.class_indices(c) if j not in used]
        if not members:
            raise ValueError(f"class {c} has too few samples for {m} prototypes")
        j = int(rng.choice(members))
        used.add(j)
        locs.append(data.x[j])
        classes.append(c)
    return Prototypes.hard(np.array(locs), classes, data.num_classes)


def best_points(data: LabeledData, m: int, budget: int, k: int = 1, seed: int = 0,
                weights: Weights = "uniform") -> tuple[Prototypes, float]:
    """Selection regime for any M: best of ``budget`` draws of M real points
    (classes assigned round-robin), scored by training accuracy."""
    rng = np.random.default_rng(seed)
    best, best_acc = None, -1.0
    for _ in range(budget):
        p = _seed_prototypes(data, m, rng)
        acc = knn_accuracy(p, min(k, m), data, weights)
        if acc > best_acc:
            best, best_acc = p, acc
    return best, best_acc


def optimize_prototypes(data: LabeledData, m: int, regime: str, budget: int, k: int = 1,
                        weights: Weights = "uniform", seed: int = 0, init: Prototypes | None = None,
                        location_step: float = 0.3, label_step: float = 0.3) -> tuple[Prototypes, list[float]]:
    """Derivative-free coordinate search maximizing training accuracy.

    Each evaluation perturbs one prototype (its location, its label weights,
    or alternately either for ``combined``) and keeps the move unless
    accuracy drops.  The returned trace is best-so-far accuracy per
    evaluation, so it never decreases.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if m < 1 or budget < 1:
        raise ValueError("need m >= 1 and budget >= 1")
    rng = np.random.default_rng(seed)
    current = init.copy() if init is not None else _seed_prototypes(data, m, rng)
    k = min(k, len(current))
    scale = location_step * data.x.std(axis=0)
    acc = knn_accuracy(current, k, data, weights)
    best, best_acc = current.copy(), acc
    trace = [best_acc]
    for step in range(1, budget):
        move_location = regime == "generation" or (regime == "combined" and step % 2 == 1)
        cand = current.copy()
        i = int(rng.integers(len(cand)))
        if move_location:
            cand.locations[i] = cand.locations[i] + rng.normal(size=scale.shape) * scale
        else:
            lab = np.clip(cand.labels[i] / cand.labels[i].sum() + rng.normal(size=cand.num_classes) * label_step, 0, None)
            if lab.sum() <= 0:
                trace.append(best_acc)
                continue
            cand.labels[i] = lab / lab.sum()
        cand_acc = knn_accuracy(cand, k, data, weights)
        if cand_acc >= acc:
            current, acc = cand, cand_acc
            if acc > best_acc:
                best, best_acc = current.copy(), acc
        trace.append(best_acc)
    return best, trace


@dataclass
class DecisionRaster:
    bounds: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    resolution: tuple[int, int]  # nx, ny
    classes: np.ndarray  # (ny, nx), row 0 at ymin

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        return cell_centers(self.bounds, self.resolution)

    def distinct(self) -> set[int]:
        return set(int(c) for c in np.unique(self.classes))


def cell_centers(bounds, resolution) -> tuple[np.ndarray, np.ndarray]:
    xmin, xmax, ymin, ymax = bounds
    nx, ny = resolution
    xs = xmin + (np.arange(nx) + 0.5) * (xmax - xmin) / nx
    ys = ymin + (np.arange(ny) + 0.5) * (ymax - ymin) / ny
    return xs, ys


def rasterize(protos: Prototypes, k: int, bounds, resolution=(100, 100), weights: Weights = "uniform") -> DecisionRaster:
    if protos.locations.shape[1] != 2:
        raise ValueError(f"rasterize needs 2-D features, got {protos.locations.shape[1]}-D")
    xs, ys = cell_centers(bounds, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pred = soft_knn_predict_batch(protos, k, np.column_stack([gx.ravel(), gy.ravel()]), weights)
    return DecisionRaster(tuple(float(b) for b in bounds), tuple(int(r) for r in resolution), pred.reshape(gy.shape))


def data_bounds(data: LabeledData, margin: float = 0.1) -> tuple[float, float, float, float]:
    lo, hi = data.x.min(axis=0), data.x.max(axis=0)
    pad = margin * (hi - lo)
    return (lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1])


def write_raster_pgm(path, raster: DecisionRaster, num_classes: int) -> None:
    """Class index as gray level (maxval C-1); the top image row is ymax."""
    write_pgm(path, raster.classes[::-1], maxval=max(num_classes - 1, 1))


def write_raster_csv(path, raster: DecisionRaster) -> None:
    xs, ys = raster.cell_centers()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "class"])
        for j, y in enumerate(ys):
            for i, x in enumerate(xs):
                w.writerow([repr(float(x)), repr(float(y)), int(raster.classes[j, i])])


def write_prototypes_csv(path, protos: Prototypes) -> None:
    d, c = protos.locations.shape[1], protos.num_classes
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"loc{i}" for i in range(d)] + [f"label{i}" for i in range(c)])
        for loc, lab in zip(protos.locations, protos.labels):
            w.writerow([repr(float(v)) for v in loc] + [repr(float(v)) for v in lab])


def read_prototypes_csv(path) -> Prototypes:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader if r]
    d = sum(h.startswith("loc") for h in header)
    arr = np.array(rows)
    return Prototypes(arr[:, :d], arr[:, d:])
