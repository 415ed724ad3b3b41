"""Independent reference computations used by the tests."""

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x (x is perturbed in place and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def conv2d_loops(x, w, b=None, padding="valid"):
    """Direct-loop cross-correlation, stride 1."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        xp = np.zeros((n, c, h + kh - 1, wd + kw - 1))
        xp[:, :, ph:ph + h, pw:pw + wd] = x
        oh, ow = h, wd
    else:
        xp, oh, ow = x, h - kh + 1, wd - kw + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i:i + kh, j:j + kw]
            out[:, :, i, j] = np.einsum("nckl,fckl->nf", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out


def nearest_prototype_classes(locs, classes, queries):
    """k=1 hard-label kNN by brute force (first prototype wins distance ties)."""
    out = []
    for q in queries:
        d = [float(np.sum((q - p) ** 2)) for p in locs]
        out.append(classes[int(np.argmin(d))])
    return np.array(out)


def outer_loss_value(spec, theta0, dd, x_real, y_real) -> float:
    """Outer loss after plain (tape-free) unrolled training on ``dd``."""
    from distillkit import models
    from distillkit.distill import inner_unroll

    theta = inner_unroll(spec, theta0.copy(), dd)
    return models.loss(spec, theta, x_real, y_real, normalize=False).item()


def meta_gradient_errors(spec, theta0, dd, x_real, y_real, h=1e-5) -> dict:
    """Max relative error of the analytic outer gradients against central differences."""
    from distillkit.distill import outer_gradients

    _, grads = outer_gradients(spec, dd, x_real, y_real, [theta0])
    probe = dd.copy()
    f = lambda: outer_loss_value(spec, theta0, probe, x_real, y_real)
    return {
        "x": rel_err(grads["x"], central_diff(f, probe.x, h)),
        "y": rel_err(grads["y"], central_diff(f, probe.y, h)),
        "log_lr": rel_err(grads["log_lr"], central_diff(f, probe.log_lr, h)),
    }


def random_meta_problem(seed: int, steps: int, m: int = 4, n_real: int = 12):
    """A random 2-16-3 tanh MLP meta-gradient problem."""
    from distillkit.data import DistilledDataset, one_hot
    from distillkit.models import ModelSpec, InitSource

    rng = np.random.default_rng(seed)
    spec = ModelSpec("mlp", (2,), 3, hidden=(16,))
    theta0 = InitSource("fixed", seed).draw(spec)
    dd = DistilledDataset(rng.normal(size=(m, 2)), rng.normal(size=(m, 3)),
                          np.log(rng.uniform(0.05, 0.5, size=steps)), epochs=1, num_classes=3)
    x_real = rng.normal(size=(n_real, 2))
    y_real = one_hot(rng.integers(0, 3, size=n_real), 3)
    return spec, theta0, dd, x_real, y_real
