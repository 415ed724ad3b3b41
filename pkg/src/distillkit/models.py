"""Twice-differentiable inner models: MLP, small LeNet-style CNN, text CNN."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .tensor import ParamSet, Tensor

KINDS = ("mlp", "small-cnn", "text-cnn")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``input_shape`` excludes the batch axis: ``(features,)`` for an MLP,
    ``(channels, H, W)`` for the CNN and ``(s, d)`` for the text model.
    """

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = (16,)
    activation: Literal["tanh", "relu"] = "tanh"
    channels: tuple[int, int] = (6, 16)
    kernel: int = 5
    padding: Literal["valid", "same"] = "valid"
    fc_hidden: int = 84
    filter_widths: tuple[int, ...] = (3, 4, 5)
    num_filters: int = 8
    loss: Literal["softmax", "sigmoid"] = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "filter_widths", tuple(int(v) for v in self.filter_widths))
        if self.kind not in KINDS:
            raise ValueError(f"unsupported model kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.loss == "sigmoid" and self.num_classes != 2:
            raise ValueError("sigmoid loss requires num_classes == 2")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.kind == "small-cnn" and len(self.input_shape) != 3:
            raise ValueError("small-cnn input_shape must be (channels, H, W)")
        if self.kind == "text-cnn":
            if len(self.input_shape) != 2:
                raise ValueError("text-cnn input_shape must be (s, d)")
            if max(self.filter_widths) > self.input_shape[0]:
                raise ValueError("filter width exceeds sentence length")

    @property
    def output_dim(self) -> int:
        return 1 if self.loss == "sigmoid" else self.num_classes

    @property
    def label_dim(self) -> int:
        """Width of a soft label: C, or 1 for the binary scalar label."""
        return self.output_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _cnn_flat_size(spec: ModelSpec) -> int:
    c, h, w = spec.input_shape
    k = spec.kernel
    for _ in range(2):
        if spec.padding == "valid":
            h, w = h - k + 1, w - k + 1
        if h < 2 or w < 2 or h % 2 or w % 2:
            raise ValueError(f"small-cnn: feature map {h}x{w} cannot be 2x2 pooled")
        h, w = h // 2, w // 2
    return spec.channels[1] * h * w


def param_layout(spec: ModelSpec) -> list[tuple[str, tuple, int, int]]:
    """(name, shape, fan_in, fan_out) for every parameter; fans are 0 for biases."""
    out = []
    if spec.kind == "mlp":
        sizes = (int(np.prod(spec.input_shape)),) + spec.hidden + (spec.output_dim,)
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            out.append((f"w{i}", (a, b), a, b))
            out.append((f"b{i}", (b,), 0, 0))
    elif spec.kind == "small-cnn":
        c = spec.input_shape[0]
        c1, c2 = spec.channels
        k = spec.kernel
        out.append(("conv1_w", (c1, c, k, k), c * k * k, c1 * k * k))
        out.append(("conv1_b", (c1,), 0, 0))
        out.append(("conv2_w", (c2, c1, k, k), c1 * k * k, c2 * k * k))
        out.append(("conv2_b", (c2,), 0, 0))
        flat = _cnn_flat_size(spec)
        out.append(("fc1_w", (flat, spec.fc_hidden), flat, spec.fc_hidden))
        out.append(("fc1_b", (spec.fc_hidden,), 0, 0))
        out.append(("fc2_w", (spec.fc_hidden, spec.output_dim), spec.fc_hidden, spec.output_dim))
        out.append(("fc2_b", (spec.output_dim,), 0, 0))
    else:
        s, d = spec.input_shape
        f = spec.num_filters
        for wd in spec.filter_widths:
            out.append((f"conv{wd}_w", (wd * d, f), wd * d, f * wd))
            out.append((f"conv{wd}_b", (f,), 0, 0))
        # the output layer over the concatenated pooled features, stored per width
        total = f * len(spec.filter_widths)
        for wd in spec.filter_widths:
            out.append((f"fc{wd}_w", (f, spec.output_dim), total, spec.output_dim))
        out.append(("fc_b", (spec.output_dim,), 0, 0))
    return out


def xavier(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def sample_params(spec: ModelSpec, rng: np.random.Generator) -> ParamSet:
    items = []
    for name, shape, fan_in, fan_out in param_layout(spec):
        if fan_in == 0:
            items.append((name, Tensor(np.zeros(shape))))
        else:
            items.append((name, Tensor(xavier(rng, shape, fan_in, fan_out))))
    return ParamSet(items)


@dataclass
class InitSource:
    """Distribution of initial weights.

    ``fixed`` always yields the same snapshot; ``random`` draws a fresh
    Xavier initialization on every call, from a generator seeded once.
    """

    regime: Literal["fixed", "random"] = "fixed"
    seed: int = 0
    snapshot: ParamSet | None = None
    _rng: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.regime not in ("fixed", "random"):
            raise ValueError(f"unknown init regime {self.regime!r}")

    def draw(self, spec: ModelSpec) -> ParamSet:
        if self.regime == "fixed":
            if self.snapshot is None:
                self.snapshot = sample_params(spec, np.random.default_rng(self.seed))
            return self.snapshot.copy()
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)
        return sample_params(spec, self._rng)

    def draw_many(self, spec: ModelSpec, count: int) -> list[ParamSet]:
        if self.regime == "fixed":
            return [self.draw(spec)]
        return [self.draw(spec) for _ in range(count)]

    def reset(self) -> None:
        self._rng = None


def build(spec: ModelSpec, init: InitSource) -> ParamSet:
    return init.draw(spec)


def _act(spec: ModelSpec, x: Tensor) -> Tensor:
    return T.tanh(x) if spec.activation == "tanh" else T.relu(x)


def forward(spec: ModelSpec, params: ParamSet, x) -> Tensor:
    """Logits of shape (N, output_dim)."""
    x = T.as_tensor(x)
    if x.ndim < 1 or x.shape[1:] != spec.input_shape:
        raise T.ShapeError(f"{spec.kind}.forward", x.shape, (None,) + spec.input_shape)
    n = x.shape[0]
    if spec.kind == "mlp":
        h = x.reshape(n, -1)
        layers = len(spec.hidden) + 1
        for i in range(layers):
            h = h @ params[f"w{i}"] + params[f"b{i}"]
            if i < layers - 1:
                h = _act(spec, h)
        return h
    if spec.kind == "small-cnn":
        h = T.conv2d(x, params["conv1_w"], params["conv1_b"], spec.padding)
        h = T.max_pool2d(_act(spec, h))
        h = T.conv2d(h, params["conv2_w"], params["conv2_b"], spec.padding)
        h = T.max_pool2d(_act(spec, h))
        h = h.reshape(n, -1)
        h = _act(spec, h @ params["fc1_w"] + params["fc1_b"])
        return h @ params["fc2_w"] + params["fc2_b"]
    s, d = spec.input_shape
    logits = params["fc_b"]
    for wd in spec.filter_widths:
        cols = T.unfold_sequence(x, wd)
        h = _act(spec, cols @ params[f"conv{wd}_w"] + params[f"conv{wd}_b"])
        pooled = T.max_over_axis1(h.reshape(n, s - wd + 1, spec.num_filters))
        logits = logits + pooled @ params[f"fc{wd}_w"]
    return logits


def loss(spec: ModelSpec, params: ParamSet, x, y, normalize: bool = True) -> Tensor:
    """Cross-entropy between the model's prediction and target ``y``.

    With ``normalize`` the target rows are unrestricted soft labels and are
    passed through softmax (sigmoid for the binary loss) first. Without it
    ``y`` must already be a distribution, e.g. one-hot real labels.
    """
    x, y = T.as_tensor(x), T.as_tensor(y)
    if x.shape[0] == 0:
        raise ValueError("loss: empty batch")
    if y.shape != (x.shape[0], spec.label_dim):
        raise T.ShapeError("loss", y.shape, (x.shape[0], spec.label_dim))
    logits = forward(spec, params, x)
    if spec.loss == "sigmoid":
        target = T.sigmoid(y) if normalize else y
        return T.sigmoid_binary_cross_entropy(logits, target)
    target = T.softmax(y, axis=1) if normalize else y
    return T.softmax_cross_entropy(logits, target)


def predict(spec: ModelSpec, params: ParamSet, x, batch_size: int = 2048) -> np.ndarray:
    x = np.asarray(T.as_tensor(x).data)
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            logits = forward(spec, params, Tensor(x[i:i + batch_size])).data
            if spec.loss == "sigmoid":
                out.append((logits[:, 0] > 0).astype(np.int64))
            else:
                out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(spec: ModelSpec, params: ParamSet, x, y_hard) -> float:
    y_hard = np.asarray(y_hard)
    if len(y_hard) == 0:
        raise ValueError("accuracy: empty evaluation set")
    return float(np.mean(predict(spec, params, x) == y_hard))
