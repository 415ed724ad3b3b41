"""Reverse-mode automatic differentiation with double-backward support.

Operations on tensors that depend on a watched leaf are appended to the
active :class:`Tape`.  Every vector-Jacobian product is itself written in
terms of tape operations, so when the backward pass runs in higher-order
mode the gradients it returns are recorded too and can be differentiated
again.  In first-order mode the same code runs with recording switched off.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    if not stack:
        return None
    top = stack[-1]
    return top if isinstance(top, Tape) else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on the current thread."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Node:
    __slots__ = ("id", "op", "parents", "vjp", "tape")

    def __init__(self, tape, id, op, parents, vjp):
        self.tape = tape
        self.id = id
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, node: Node | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def on(self, tape: "Tape | None") -> bool:
        return tape is not None and self.node is not None and self.node.tape is tape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node.id}" if self.node is not None else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        # small positive integer powers only, as repeated products
        if not isinstance(k, int) or k < 1:
            raise TypeError("Tensor ** k needs a positive integer k")
        out = self
        for _ in range(k - 1):
            out = mul(out, self)
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager.  ``higher_order=True`` makes :meth:`grad`
    record its own computation so returned gradients are differentiable.
    """

    def __init__(self, higher_order: bool = False):
        self.higher_order = higher_order
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, op: str, parents: tuple, vjp) -> Tensor:
        node = Node(self, len(self.nodes), op, parents, vjp)
        self.nodes.append(node)
        out.node = node
        return out

    def watch(self, *tensors: Tensor) -> None:
        """Register tensors as differentiable leaves."""
        for t in tensors:
            if t.node is not None and t.node.tape is self:
                continue
            self._record(t, "leaf", (), None)

    def variable(self, data) -> Tensor:
        t = Tensor(np.array(data, dtype=DTYPE))
        self.watch(t)
        return t

    def grad(self, loss: Tensor, wrt: Sequence[Tensor], create_graph: bool | None = None) -> list[Tensor]:
        """Return d loss / d w for every w in ``wrt``."""
        if create_graph is None:
            create_graph = self.higher_order
        if create_graph and not self.higher_order:
            raise TapeError("create_graph requires a higher-order tape")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise TapeError(f"grad: loss must be scalar, got shape {loss.shape}")
        for w in wrt:
            if not w.on(self):
                raise TapeError(f"grad: tensor of shape {w.shape} is not on this tape")
        if not loss.on(self):
            return [Tensor(np.zeros_like(w.data)) for w in wrt]

        targets: dict[int, int] = {}
        for i, w in enumerate(wrt):
            targets.setdefault(w.node.id, i)
        results: dict[int, Tensor] = {}
        grads: dict[int, Tensor] = {loss.node.id: Tensor(np.ones_like(loss.data))}
        nodes = self.nodes
        min_target = min(targets) if targets else 0

        ctx = _recording_on(self) if create_graph else no_grad()
        with ctx:
            for nid in range(loss.node.id, min_target - 1, -1):
                g = grads.pop(nid, None)
                if g is None:
                    continue
                if nid in targets:
                    results[nid] = g
                node = nodes[nid]
                if node.vjp is None:
                    continue
                needs = tuple(p.on(self) for p in node.parents)
                pgrads = node.vjp(g, needs)
                for p, need, pg in zip(node.parents, needs, pgrads):
                    if not need or pg is None:
                        continue
                    pid = p.node.id
                    if pid < min_target:
                        continue
                    prev = grads.get(pid)
                    grads[pid] = pg if prev is None else prev + pg
        out = []
        for w in wrt:
            g = results.get(w.node.id)
            out.append(g if g is not None else Tensor(np.zeros_like(w.data)))
        return out


@contextmanager
def _recording_on(tape: Tape) -> Iterator[None]:
    stack = _tape_stack()
    stack.append(tape)
    try:
        yield
    finally:
        stack.pop()


def grad(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool | None = None) -> list[Tensor]:
    """Gradient of ``loss`` on the tape that recorded it."""
    tape = loss.node.tape if loss.node is not None else active_tape()
    if tape is None:
        raise TapeError("grad: loss was not recorded on any tape")
    return tape.grad(loss, wrt, create_graph)


def _make(data: np.ndarray, op: str, parents: tuple, vjp) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.on(tape) for p in parents):
        tape._record(out, op, parents, vjp)
    return out


# ---------------------------------------------------------------- primitives


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None, sum_to(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None, sum_to(neg(g), b.shape) if needs[1] else None)

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g, needs):
        return (sum_to(g * b, a.shape) if needs[0] else None, sum_to(g * a, b.shape) if needs[1] else None)

    return _make(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def vjp(g, needs):
        ga = sum_to(g / b, a.shape) if needs[0] else None
        gb = sum_to(neg(g * a / (b * b)), b.shape) if needs[1] else None
        return ga, gb

    return _make(a.data / b.data, "div", (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g, needs: (neg(g),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None, matmul(transpose(a), g) if needs[1] else None)

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make(a.data.T.copy(), "transpose", (a,), lambda g, needs: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    src = a.shape
    return _make(data, "reshape", (a,), lambda g, needs: (reshape(g, src),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    kept = np.sum(a.data, axis=axis, keepdims=True).shape

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    src = a.shape
    return _make(data, "broadcast_to", (a,), lambda g, needs: (sum_to(g, src),))


def _sum_to_array(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1)
    return np.sum(x, axis=axes, keepdims=True).reshape(shape)


def sum_to(a, shape) -> Tensor:
    """Sum out broadcast dimensions so the result has ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _make(_sum_to_array(a.data, shape), "sum_to", (a,), lambda g, needs: (broadcast_to(g, src),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g, needs):
        return (g * out,)

    out = _make(np.exp(a.data), "exp", (a,), vjp)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g, needs: (g / a,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g, needs):
        return (g * (1.0 - out * out),)

    out = _make(np.tanh(a.data), "tanh", (a,), vjp)
    return out


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g, needs):
        return (g * out * (1.0 - out),)

    out = _make(_sigmoid_array(a.data), "sigmoid", (a,), vjp)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed stably."""
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _make(data, "softplus", (a,), lambda g, needs: (g * sigmoid(a),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(DTYPE))
    return _make(a.data * mask.data, "relu", (a,), lambda g, needs: (g * mask,))


def gather(a, index: np.ndarray) -> Tensor:
    """Flat gather: ``out[...] = a.ravel()[index[...]]``; index -1 reads zero."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    flat = np.append(a.data.ravel(), 0.0)
    idx = np.where(index < 0, a.size, index)
    src = a.shape
    return _make(flat[idx], "gather", (a,), lambda g, needs: (scatter_add(g, index, src),))


def scatter_add(a, index: np.ndarray, shape) -> Tensor:
    """Adjoint of :func:`gather`: accumulate ``a`` into a zero tensor of ``shape``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != a.shape:
        raise ShapeError("scatter_add", a.shape, index.shape)
    shape = tuple(shape)
    size = int(np.prod(shape))
    idx = np.where(index < 0, size, index).ravel()
    data = np.bincount(idx, weights=a.data.ravel(), minlength=size + 1)[:size].reshape(shape)
    return _make(data, "scatter_add", (a,), lambda g, needs: (gather(g, index),))


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------- composites


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    return log(tsum(exp(a - shift), axis=axis, keepdims=True)) + shift


def log_softmax(a, axis: int = -1) -> Tensor:
    return a - logsumexp(a, axis)


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def softmax_cross_entropy(logits, target) -> Tensor:
    """Mean over rows of -sum(target * log_softmax(logits))."""
    logits, target = as_tensor(logits), as_tensor(target)
    if logits.ndim != 2 or logits.shape != target.shape:
        raise ShapeError("softmax_cross_entropy", logits.shape, target.shape)
    return neg(tsum(target * log_softmax(logits, axis=1))) * (1.0 / logits.shape[0])


def sigmoid_binary_cross_entropy(logits, target) -> Tensor:
    """Mean of softplus(z) - t*z, i.e. BCE between sigmoid(z) and t."""
    logits, target = as_tensor(logits), as_tensor(target)
    if logits.shape != target.shape:
        raise ShapeError("sigmoid_binary_cross_entropy", logits.shape, target.shape)
    return mean(softplus(logits) - target * logits)


def _unfold_index(n: int, c: int, h: int, w: int, kh: int, kw: int, padding: str) -> tuple[np.ndarray, int, int]:
    if padding == "valid":
        ph = pw = 0
        oh, ow = h - kh + 1, w - kw + 1
    elif padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        oh, ow = h, w
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d", (n, c, h, w), (kh, kw))
    rows = np.arange(oh)[:, None, None, None] + np.arange(kh)[None, None, :, None] - ph
    cols = np.arange(ow)[None, :, None, None] + np.arange(kw)[None, None, None, :] - pw
    rows = np.broadcast_to(rows, (oh, ow, kh, kw))
    cols = np.broadcast_to(cols, (oh, ow, kh, kw))
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    pix = rows * w + cols  # (oh, ow, kh, kw)
    chan = np.arange(c)[:, None, None] * (h * w)
    batch = np.arange(n)[:, None, None, None, None, None] * (c * h * w)
    # (n, oh, ow, c, kh, kw)
    idx = batch + chan[None, None, None] + pix[None, :, :, None]
    mask = np.broadcast_to(valid[None, :, :, None], idx.shape)
    idx = np.where(mask, idx, -1)
    return idx.reshape(n * oh * ow, c * kh * kw), oh, ow


def conv2d(x, weight, bias=None, padding: str = "valid") -> Tensor:
    """Stride-1 2-D convolution. x: (N, C, H, W); weight: (F, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    idx, oh, ow = _unfold_index(n, c, h, w, kh, kw, padding)
    cols = gather(x, idx)
    out = matmul(cols, transpose(reshape(weight, (f, c * kh * kw))))
    if bias is not None:
        out = out + bias
    out = reshape(out, (n, oh * ow, f))
    # (n, oh*ow, f) -> (n, f, oh, ow) via a permutation gather
    perm = (np.arange(n)[:, None, None] * (oh * ow * f) + np.arange(oh * ow)[None, None, :] * f + np.arange(f)[None, :, None])
    return reshape(gather(out, perm), (n, f, oh, ow))


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; the argmax is frozen from the forward pass."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("max_pool2d", x.shape)
    n, c, h, w = x.shape
    base = np.arange(n * c * h * w).reshape(n, c, h // 2, 2, w // 2, 2)
    cand = base.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    vals = x.data.ravel()[cand]
    pick = np.take_along_axis(cand, np.argmax(vals, axis=-1)[..., None], axis=-1)[..., 0]
    return gather(x, pick)


def max_over_axis1(x) -> Tensor:
    """Max over axis 1 of a 3-D tensor (N, T, F) -> (N, F), argmax frozen."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("max_over_axis1", x.shape)
    n, t, f = x.shape
    arg = np.argmax(x.data, axis=1)  # (n, f)
    idx = np.arange(n)[:, None] * (t * f) + arg * f + np.arange(f)[None, :]
    return gather(x, idx)


def unfold_sequence(x, width: int) -> Tensor:
    """Sliding windows over axis 1: (N, S, D) -> (N * (S - width + 1), width * D)."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] < width:
        raise ShapeError("unfold_sequence", x.shape, (width,))
    n, s, d = x.shape
    o = s - width + 1
    idx = (np.arange(n)[:, None, None, None] * (s * d)
           + (np.arange(o)[None, :, None, None] + np.arange(width)[None, None, :, None]) * d
           + np.arange(d)[None, None, None, :])
    return gather(x, idx.reshape(n * o, width * d))


# ---------------------------------------------------------------- parameters


class ParamSet:
    """Named, ordered collection of parameter tensors."""

    def __init__(self, items: Iterable[tuple[str, Tensor]]):
        self._items: dict[str, Tensor] = {}
        for name, t in items:
            if name in self._items:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._items[name] = as_tensor(t)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self):
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    @property
    def names(self) -> list[str]:
        return list(self._items)

    @property
    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    @property
    def count(self) -> int:
        return sum(t.size for t in self._items.values())

    def shapes(self) -> dict[str, tuple]:
        return {k: t.shape for k, t in self._items.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._items.values()])

    def copy(self) -> "ParamSet":
        """Fresh constant copies, detached from any tape."""
        return ParamSet((k, Tensor(t.data.copy())) for k, t in self._items.items())

    def watch(self, tape: Tape) -> "ParamSet":
        tape.watch(*self._items.values())
        return self

    def combine(self, other: Sequence[Tensor], scale) -> "ParamSet":
        """Elementwise self + scale * other."""
        if len(other) != len(self._items):
            raise ShapeError("combine", (len(self._items),), (len(other),))
        out = []
        for (name, t), o in zip(self._items.items(), other):
            if t.shape != o.shape:
                raise ShapeError("combine", t.shape, o.shape)
            out.append((name, t + scale * o))
        return ParamSet(out)


def sgd_step_differentiable(params: ParamSet, grads: Sequence[Tensor], lr) -> ParamSet:
    """theta - lr * g, recorded so it differentiates into g and lr."""
    lr = as_tensor(lr)
    if lr.size != 1:
        raise ShapeError("sgd_step", lr.shape, ())
    return params.combine(grads, neg(reshape(lr, ())))

