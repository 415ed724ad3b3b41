"""Distillation accuracy, distillation ratio and distillation size."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DistilledDataset, LabeledData
from .distill import inner_unroll
from .models import InitSource, ModelSpec, accuracy
from .tensor import ParamSet

DEFAULT_TRIALS = 200
WORKERS_ENV = "DISTILLKIT_WORKERS"


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


@dataclass
class EvalReport:
    regime: str
    m: int
    mean: float
    std: float
    networks: int
    original_accuracy: float | None = None
    ratio: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        d = self.to_dict()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(list(d))
            w.writerow(["" if v is None else v for v in d.values()])


def distillation_ratio(dist_acc: float, orig_acc: float, m: int | None = None) -> float:
    """100 * distillation accuracy / original accuracy (``m`` only labels the result)."""
    if orig_acc <= 0:
        raise ValueError("original accuracy must be positive")
    return 100.0 * dist_acc / orig_acc


def evaluate_trials(dd: DistilledDataset, spec: ModelSpec, init: InitSource, test: LabeledData,
                    trials: int = DEFAULT_TRIALS, workers: int | None = None) -> np.ndarray:
    """Test accuracy after training each of ``trials`` initializations on ``dd``.

    Initializations are drawn up front in order, so results do not depend
    on ``workers`` (default: the DISTILLKIT_WORKERS environment variable).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if init.regime == "fixed":
        trials = 1
    thetas = [init.draw(spec) for _ in range(trials)]

    def one(theta):
        return accuracy(spec, inner_unroll(spec, theta, dd), test.x, test.y)

    workers = worker_count() if workers is None else max(int(workers), 1)
    if workers == 1 or trials == 1:
        return np.array([one(t) for t in thetas])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.array(list(pool.map(one, thetas)))


def evaluate(dd: DistilledDataset, spec: ModelSpec, init: InitSource, test: LabeledData,
             trials: int = DEFAULT_TRIALS, original_accuracy: float | None = None,
             workers: int | None = None) -> EvalReport:
    accs = evaluate_trials(dd, spec, init, test, trials, workers)
    mean = float(accs.mean())
    ratio = distillation_ratio(mean, original_accuracy) if original_accuracy else None
    return EvalReport(init.regime, dd.m, mean, float(accs.std()), len(accs), original_accuracy, ratio)


@dataclass
class SizeCurve:
    points: list[tuple[int, float]]

    def __post_init__(self):
        ms = [m for m, _ in self.points]
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("M values must be strictly increasing")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["M", "accuracy"])
            for m, acc in self.points:
                w.writerow([m, repr(float(acc))])

    def to_dict(self) -> dict:
        return {"points": [[m, acc] for m, acc in self.points]}


def distillation_size(curve: SizeCurve | Sequence[tuple[int, float]], orig_acc: float, a: float) -> int | None:
    """Smallest measured M whose ratio reaches ``a`` percent, or None."""
    points = curve.points if isinstance(curve, SizeCurve) else list(curve)
    for m, acc in points:
        if distillation_ratio(acc, orig_acc) >= a:
            return m
    return None


def train_conventional(spec: ModelSpec, init: InitSource, train: LabeledData, steps: int = 300,
                       lr: float = 0.5) -> ParamSet:
    """Full-batch GD on the whole training set with hard targets.

    Gives the reference ("original") accuracy that ratios are taken against.
    """
    from . import models
    from .data import one_hot
    from .tensor import Tape, Tensor

    if spec.loss == "sigmoid":
        y = Tensor(train.y.astype(np.float64)[:, None])
    else:
        y = Tensor(one_hot(train.y, spec.num_classes))
    x = Tensor(train.x)
    params = init.draw(spec)
    for _ in range(steps):
        with Tape() as t:
            params.watch(t)
            g = t.grad(models.loss(spec, params, x, y, normalize=False), params.tensors)
        params = ParamSet((n, Tensor(p.data - lr * gi.data)) for (n, p), gi in zip(params, g))
    return params


def original_accuracy(spec: ModelSpec, init: InitSource, train: LabeledData, test: LabeledData,
                      steps: int = 300, lr: float = 0.5) -> float:
    init.reset()
    acc = accuracy(spec, train_conventional(spec, init, train, steps, lr), test.x, test.y)
    init.reset()
    return acc
