"""Soft-label dataset distillation (images/vectors) and its text variant.

The outer loop learns the synthetic samples, their soft labels and the
per-step learning rates by plain gradient descent on the loss that a
freshly initialized network reaches on real data after training on the
synthetic set.  Gradients flow through the whole unrolled inner training
via a higher-order tape.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from . import models
from .data import (DistilledDataset, EmbeddingTable, LabeledData, TextCorpus, decode_sentence,
                   one_hot, pad_embed)
from .models import InitSource, ModelSpec
from .tensor import ParamSet, Tape, Tensor, exp, sgd_step_differentiable

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, message: str):
        self.iteration = iteration
        super().__init__(f"outer iteration {iteration}: {message}")


@dataclass
class DistillConfig:
    m: int = 10
    steps: int = 1
    epochs: int = 1
    outer_lr: float = 0.01
    iterations: int = 100
    batch_size: int = 128
    init_regime: Literal["fixed", "random"] = "fixed"
    nets_per_step: int = 1
    label_init: Literal["one-hot", "random-normal"] = "one-hot"
    learn_labels: bool = True
    init_lr: float = 0.02
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    unknown_token: Literal["error", "zero"] = "error"
    optimizer: Literal["gd", "adam"] = "gd"

    def __post_init__(self):
        for name in ("m", "steps", "epochs", "iterations", "batch_size", "nets_per_step", "divergence_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.outer_lr < 0:
            raise ValueError("outer_lr must be non-negative")
        if self.init_lr < 0:
            raise ValueError("init_lr must be non-negative")
        if self.steps > self.m:
            raise ValueError("steps cannot exceed m: every inner batch needs a sample")
        if self.label_init not in ("one-hot", "random-normal"):
            raise ValueError(f"unknown label_init {self.label_init!r}")
        if self.init_regime not in ("fixed", "random"):
            raise ValueError(f"unknown init_regime {self.init_regime!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed: int, stream: int) -> np.random.Generator:
    # independent of any generator seeded with the bare seed
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def init_distilled(config: DistillConfig, num_classes: int, sample_shape: Sequence[int],
                   label_dim: int | None = None) -> DistilledDataset:
    """Standard-normal samples, one-hot (round-robin) or Gaussian labels, constant rates."""
    rng = _rng(config.seed, 1)
    x = rng.standard_normal((config.m,) + tuple(sample_shape))
    label_dim = num_classes if label_dim is None else label_dim
    if config.label_init == "one-hot":
        classes = np.arange(config.m) % num_classes
        if label_dim == 1:
            # scalar binary labels: class 1 -> +1, class 0 -> -1
            y = np.where(classes == 1, 1.0, -1.0)[:, None]
        else:
            y = one_hot(classes, num_classes)
    else:
        y = rng.standard_normal((config.m, label_dim))
    log_lr = np.full(config.steps, np.log(config.init_lr) if config.init_lr > 0 else -np.inf)
    return DistilledDataset(x, y, log_lr, config.epochs, num_classes, config.seed, config.to_dict())


def unroll(spec: ModelSpec, theta0: ParamSet, xs: Sequence[Tensor], ys: Sequence[Tensor],
           log_lrs: Sequence[Tensor], epochs: int, tape: Tape, create_graph: bool = True) -> ParamSet:
    """Apply ``epochs`` passes of one GD step per (x, y, lr) triple.

    ``theta0`` must already be watched on ``tape``.  With ``create_graph``
    the result stays differentiable with respect to everything on the tape;
    otherwise each step's parameters are fresh constants (cheap evaluation).
    """
    params = theta0
    for _ in range(epochs):
        for x, y, log_lr in zip(xs, ys, log_lrs):
            ell = models.loss(spec, params, x, y)
            g = tape.grad(ell, params.tensors, create_graph=create_graph)
            if create_graph:
                params = sgd_step_differentiable(params, g, exp(log_lr))
            else:
                lr = float(np.exp(log_lr.data))
                params = ParamSet((n, Tensor(p.data - lr * gi.data)) for (n, p), gi in zip(params, g))
                params.watch(tape)
    return params


def _split(dd: DistilledDataset):
    batches = dd.step_batches()
    return [dd.x[b] for b in batches], [dd.y[b] for b in batches], batches


def inner_unroll(spec: ModelSpec, theta0: ParamSet, dd: DistilledDataset, tape: Tape | None = None) -> ParamSet:
    """Train ``theta0`` on the distilled data.

    On a higher-order ``tape`` the returned parameters carry the full
    unrolled graph; without a tape they are plain trained constants.
    """
    xs, ys, _ = _split(dd)
    log_lrs = [Tensor(v) for v in dd.log_lr]
    if tape is not None:
        theta0.watch(tape)
        return unroll(spec, theta0, [Tensor(x) for x in xs], [Tensor(y) for y in ys], log_lrs,
                      dd.epochs, tape, create_graph=tape.higher_order)
    theta0 = theta0.copy()
    with Tape() as t:
        theta0.watch(t)
        out = unroll(spec, theta0, [Tensor(x) for x in xs], [Tensor(y) for y in ys], log_lrs,
                     dd.epochs, t, create_graph=False)
    return out.copy()


def outer_gradients(spec: ModelSpec, dd: DistilledDataset, x_real: np.ndarray, y_real: np.ndarray,
                    thetas: Sequence[ParamSet], learn_labels: bool = True):
    """Per-network outer losses and gradients of their sum.

    ``y_real`` is the one-hot (or 0/1 for the binary loss) target matrix.
    Returns ``(losses, {"x": ..., "y": ... or None, "log_lr": ...})``.
    """
    xs, ys, batches = _split(dd)
    gx = np.zeros_like(dd.x)
    gy = np.zeros_like(dd.y)
    glr = np.zeros_like(dd.log_lr)
    losses = []
    # one tape per network; gradients are reduced in network order
    for theta0 in thetas:
        with Tape(higher_order=True) as tape:
            x_leaves = [tape.variable(x) for x in xs]
            y_leaves = [tape.variable(y) if learn_labels else Tensor(y) for y in ys]
            lr_leaves = [tape.variable(v) for v in dd.log_lr]
            params = theta0.copy().watch(tape)
            final = unroll(spec, params, x_leaves, y_leaves, lr_leaves, dd.epochs, tape)
            outer = models.loss(spec, final, x_real, y_real, normalize=False)
            wrt = x_leaves + lr_leaves + (y_leaves if learn_labels else [])
            grads = tape.grad(outer, wrt, create_graph=False)
        losses.append(outer.item())
        k = len(x_leaves)
        for b, g in zip(batches, grads[:k]):
            gx[b] += g.data
        glr += np.array([g.data for g in grads[k:2 * k]])
        if learn_labels:
            for b, g in zip(batches, grads[2 * k:]):
                gy[b] += g.data
    return losses, {"x": gx, "y": gy if learn_labels else None, "log_lr": glr}


class GradientDescent:
    """Plain constant-step update, as written in the outer loop pseudocode."""

    def __init__(self, lr: float):
        self.lr = lr

    def direction(self, name: str, grad: np.ndarray) -> np.ndarray:
        return grad

    def step(self) -> None:
        pass


class Adam(GradientDescent):
    """Adaptive per-coordinate steps; opt-in via ``DistillConfig.optimizer``."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 1
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def direction(self, name: str, grad: np.ndarray) -> np.ndarray:
        m, v = self.moments.get(name, (np.zeros_like(grad), np.zeros_like(grad)))
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.moments[name] = (m, v)
        m_hat = m / (1 - self.beta1 ** self.t)
        v_hat = v / (1 - self.beta2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self) -> None:
        self.t += 1


def make_optimizer(config: DistillConfig) -> GradientDescent:
    return Adam(config.outer_lr) if config.optimizer == "adam" else GradientDescent(config.outer_lr)


def outer_step(spec: ModelSpec, dd: DistilledDataset, x_real: np.ndarray, y_real: np.ndarray,
               thetas: Sequence[ParamSet], outer_lr: float, learn_labels: bool = True,
               iteration: int = 0, optimizer: GradientDescent | None = None) -> tuple[DistilledDataset, float]:
    """One simultaneous update of samples, labels and learning rates.

    All three gradients are taken at the same pre-update point.  The
    default is the plain step ``v <- v - outer_lr * grad``.
    """
    losses, grads = outer_gradients(spec, dd, x_real, y_real, thetas, learn_labels)
    mean_loss = float(np.mean(losses))
    if not np.isfinite(mean_loss):
        raise DivergenceError(iteration, f"non-finite outer loss {mean_loss}")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(iteration, f"non-finite gradient for {name}")
    opt = optimizer or GradientDescent(outer_lr)
    new = dd.copy()
    if opt.lr != 0:
        new.x = dd.x - opt.lr * opt.direction("x", grads["x"])
        if learn_labels:
            new.y = dd.y - opt.lr * opt.direction("y", grads["y"])
        new.log_lr = dd.log_lr - opt.lr * opt.direction("log_lr", grads["log_lr"])
    # a zero rate (log -inf) is legal; anything else non-finite is not
    if not (np.all(np.isfinite(new.x)) and np.all(np.isfinite(new.y))
            and not np.any(np.isnan(new.log_lr) | (new.log_lr == np.inf))):
        raise DivergenceError(iteration, "update produced non-finite values")
    opt.step()
    return new, mean_loss


def _real_targets(spec: ModelSpec, labels: np.ndarray) -> np.ndarray:
    if spec.loss == "sigmoid":
        return labels.astype(np.float64)[:, None]
    return one_hot(labels, spec.num_classes)


class _DivergenceGuard:
    def __init__(self, factor: float, patience: int):
        self.factor = factor
        self.patience = patience
        self.initial: float | None = None
        self.run = 0

    def check(self, iteration: int, value: float) -> None:
        if self.initial is None:
            self.initial = value
            return
        self.run = self.run + 1 if value > self.factor * self.initial else 0
        if self.run >= self.patience:
            raise DivergenceError(iteration, f"outer loss above {self.factor}x its initial value "
                                             f"for {self.patience} consecutive iterations")


def _distill_loop(config: DistillConfig, spec: ModelSpec, dd: DistilledDataset, n_real: int,
                  fetch: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]], init: InitSource,
                  callback=None) -> tuple[DistilledDataset, list[float]]:
    rng = _rng(config.seed, 2)
    guard = _DivergenceGuard(config.divergence_factor, config.divergence_patience)
    trace = []
    optimizer = make_optimizer(config)
    for it in range(config.iterations):
        # uniform sampling with replacement
        idx = rng.integers(0, n_real, size=config.batch_size)
        x_real, labels = fetch(idx)
        thetas = init.draw_many(spec, config.nets_per_step)
        dd, value = outer_step(spec, dd, x_real, _real_targets(spec, labels), thetas, config.outer_lr,
                               config.learn_labels, it, optimizer)
        trace.append(value)
        guard.check(it, value)
        if callback is not None:
            callback(it, dd, value)
        if it % 100 == 0:
            logger.debug("iteration %d outer loss %.4f", it, value)
    return dd, trace


def sldd(config: DistillConfig, spec: ModelSpec, train: LabeledData, init: InitSource,
         callback=None) -> tuple[DistilledDataset, list[float]]:
    """Learn a distilled dataset; returns it with the per-iteration mean outer loss."""
    if len(train) == 0:
        raise ValueError("training data is empty")
    if train.x.shape[1:] != spec.input_shape:
        raise ValueError(f"data samples {train.x.shape[1:]} do not match model input {spec.input_shape}")
    dd = init_distilled(config, spec.num_classes, spec.input_shape, spec.label_dim)
    return _distill_loop(config, spec, dd, len(train), lambda idx: (train.x[idx], train.y[idx]), init, callback)


def tdd(config: DistillConfig, spec: ModelSpec, corpus: TextCorpus, table: EmbeddingTable, init: InitSource,
        callback=None) -> tuple[DistilledDataset, list[list[str]], list[float]]:
    """Text distillation: distilled sentences are learned directly as s x d matrices."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    s, d = spec.input_shape
    if d != table.dim:
        raise ValueError(f"embedding dimension {table.dim} does not match model input {d}")

    def fetch(idx):
        batch = [corpus.sentences[i] for i in idx]
        return pad_embed(batch, table, s, config.unknown_token), corpus.labels[idx]

    # fail fast on unknown tokens rather than at a random iteration
    pad_embed(corpus, table, s, config.unknown_token)
    dd = init_distilled(config, spec.num_classes, (s, d), spec.label_dim)
    dd, trace = _distill_loop(config, spec, dd, len(corpus), fetch, init, callback)
    return dd, decode_distilled(dd, table), trace


def decode_distilled(dd: DistilledDataset, table: EmbeddingTable) -> list[list[str]]:
    return [decode_sentence(m, table) for m in dd.x]


def soft_to_hard(label) -> int:
    """Class index of a soft label: argmax of softmax (ties -> lowest index).

    A scalar label is a binary logit: class 1 iff it is positive.
    """
    label = np.asarray(label, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(label)):
        raise ValueError("label must be finite")
    if label.size == 1:
        return int(label[0] > 0)
    return int(np.argmax(label))
