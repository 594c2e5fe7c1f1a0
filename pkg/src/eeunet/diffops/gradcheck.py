"""Central finite-difference gradient checking."""
from dataclasses import dataclass, field

import numpy as np

from . import ops


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    tolerance: float
    checked: int
    per_input: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.max_rel_err < self.tolerance)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} "
            f"(abs {self.max_abs_err:.3e}, tol {self.tolerance:.0e}, {self.checked} coords)"
        )


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(fn, arrays, index, coords, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. ``arrays[index]`` at the
    given flat coordinates. The array is perturbed in place and restored."""
    x = arrays[index]
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = fn()
        flat[c] = orig - h
        fm = fn()
        flat[c] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def grad_check(fn, arrays, analytic, name="op", h=1e-5, tol=1e-4, max_coords=None, seed=0, labels=None):
    """Compare ``analytic[i]`` with finite differences of ``fn()`` for every
    array in ``arrays`` (which ``fn`` must read by reference).

    ``max_coords`` limits the number of sampled coordinates per array.
    """
    rng = np.random.default_rng(seed)
    worst_rel = 0.0
    worst_abs = 0.0
    checked = 0
    per_input = {}
    for i, (x, g) in enumerate(zip(arrays, analytic)):
        size = x.size
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        else:
            coords = np.arange(size)
        num = numeric_grad(fn, arrays, i, coords, h)
        ana = np.asarray(g).reshape(-1)[coords]
        rel = float(relative_error(ana, num).max(initial=0.0))
        abs_err = float(np.abs(ana - num).max(initial=0.0))
        per_input[labels[i] if labels else i] = rel
        worst_rel = max(worst_rel, rel)
        worst_abs = max(worst_abs, abs_err)
        checked += len(coords)
    return GradCheckReport(name, worst_rel, worst_abs, tol, checked, per_input)


# ----------------------------------------------------------------------------
# built-in operator checks


def _away_from_zero(rng, shape, margin=1e-3):
    while True:
        x = rng.standard_normal(shape)
        if np.abs(x).min() >= margin:
            return x


def _distinct_windows(rng, shape, margin=1e-3):
    while True:
        x = rng.standard_normal(shape)
        n, c, h, w = shape
        win = np.sort(x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4), axis=1)
        if (win[:, 3] - win[:, 2]).min() >= margin:
            return x


def _projected(forward, backward, inputs, seed, name, tol, h=1e-5):
    """Check op via the scalar loss <r, op(inputs)> with a fixed random r."""
    rng = np.random.default_rng(seed + 1000)
    out = forward(*inputs)[0]
    r = rng.standard_normal(out.shape)

    def fn():
        return float((forward(*inputs)[0] * r).sum())

    _, cache = forward(*inputs)
    grads = backward(r, cache)
    pairs = [(x, g) for x, g in zip(inputs, grads) if g is not None]
    return grad_check(fn, [p[0] for p in pairs], [p[1] for p in pairs], name=name, h=h, tol=tol, seed=seed)


def check_conv2d(seed=0, tol=1e-4, shape=(1, 2, 5, 5), kernel=(3, 2, 3, 3), stride=1, pad=1):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    w = rng.standard_normal(kernel)
    b = rng.standard_normal(kernel[0])
    return _projected(
        lambda x, w, b: ops.conv2d(x, w, b, stride, pad),
        ops.conv2d_backward,
        [x, w, b],
        seed,
        f"conv2d s{stride} p{pad}",
        tol,
    )


def check_conv_transpose2d(seed=0, tol=1e-4, shape=(2, 3, 4, 4), cout=2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((shape[1], cout, 2, 2))
    b = rng.standard_normal(cout)
    return _projected(
        lambda x, w, b: ops.conv_transpose2d(x, w, b, 2),
        ops.conv_transpose2d_backward,
        [x, w, b],
        seed,
        "conv_transpose2d",
        tol,
    )


def check_batch_norm2d(seed=0, tol=1e-4, shape=(2, 3, 4, 4), mode="train"):
    rng = np.random.default_rng(seed)
    c = shape[1]
    x = rng.standard_normal(shape) * 2 + 0.5
    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.standard_normal(c)
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def fwd(x, gamma, beta):
        # running stats are copied so repeated forwards stay identical
        return ops.batch_norm2d(x, gamma, beta, rm.copy(), rv.copy(), mode)

    return _projected(fwd, ops.batch_norm2d_backward, [x, gamma, beta], seed, f"batch_norm2d[{mode}]", tol)


def check_relu(seed=0, tol=1e-4, shape=(2, 3, 4, 4)):
    x = _away_from_zero(np.random.default_rng(seed), shape)
    return _projected(ops.relu, lambda d, m: (ops.relu_backward(d, m),), [x], seed, "relu", tol)


def check_max_pool2d(seed=0, tol=1e-4, shape=(2, 3, 4, 6)):
    x = _distinct_windows(np.random.default_rng(seed), shape)
    return _projected(ops.max_pool2d, lambda d, c: (ops.max_pool2d_backward(d, c),), [x], seed, "max_pool2d", tol)


def check_concat(seed=0, tol=1e-8):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 2, 4, 4))
    return _projected(
        lambda a, b: ops.concat_channels([a, b]),
        ops.concat_channels_backward,
        [a, b],
        seed,
        "concat_channels",
        tol,
        h=1.0,  # linear op: central differences are exact at any step
    )


def check_softmax(seed=0, tol=1e-4, shape=(2, 4, 3, 3)):
    x = np.random.default_rng(seed).standard_normal(shape)

    def fwd(x):
        p = ops.softmax_channels(x)
        return p, p

    return _projected(fwd, lambda d, p: (ops.softmax_channels_backward(d, p),), [x], seed, "softmax_channels", tol)


OP_CHECKS = {
    "conv2d": check_conv2d,
    "conv2d_strided": lambda seed=0, tol=1e-4: check_conv2d(seed, tol, (1, 2, 6, 6), (3, 2, 2, 2), 2, 0),
    "conv_transpose2d": check_conv_transpose2d,
    "batch_norm2d": check_batch_norm2d,
    "batch_norm2d_eval": lambda seed=0, tol=1e-4: check_batch_norm2d(seed, tol, mode="eval"),
    "relu": check_relu,
    "max_pool2d": check_max_pool2d,
    "concat_channels": check_concat,
    "softmax_channels": check_softmax,
}
LINEAR_OPS = {"concat_channels"}


def run_op_suite(seeds=range(5), tol=1e-4, linear_tol=1e-8):
    reports = []
    for name, check in OP_CHECKS.items():
        for s in seeds:
            t = linear_tol if name in LINEAR_OPS else tol
            reports.append(check(seed=s, tol=t))
    return reports
