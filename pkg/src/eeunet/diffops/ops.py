"""Layer primitives as explicit forward/backward pairs on NCHW arrays.

Each ``op(...)`` returns ``(out, cache)`` and ``op_backward(dout, cache)``
returns the gradients of its inputs in argument order. Convolution is
cross-correlation (no kernel flip). Computation follows the dtype of the
inputs, so float64 is used by the gradient checks and float32 for training.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NonFiniteActivation, OddSpatialDim, ShapeMismatch

DEBUG = os.environ.get("EEUNET_DEBUG", "").strip().lower() in ("1", "true", "yes")


def check_finite(x, where):
    if DEBUG and not np.isfinite(x).all():
        raise NonFiniteActivation(f"non-finite activation after {where}")
    return x


def _require4(x, name="x"):
    if x.ndim != 4:
        raise ShapeMismatch(f"{name} must be rank-4 NCHW, got shape {x.shape}")


# ----------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x, w, b=None, stride=1, pad=0):
    _require4(x)
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"kernel {w.shape} does not match input channels {x.shape[1]}")
    cout, cin, kh, kw = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({cout},)")
    n, _, h, wd = x.shape
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride or h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeMismatch(f"input {h}x{wd} with pad {pad} does not tile kernel {kh}x{kw} at stride {stride}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = cols @ w.reshape(cout, -1).T
    if b is not None:
        out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, (x.shape, cols, w, stride, pad, b is not None)


def conv2d_backward(dout, cache):
    xshape, cols, w, stride, pad, has_bias = cache
    n, cin, h, wd = xshape
    cout, _, kh, kw = w.shape
    dm = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dm.T @ cols).reshape(w.shape)
    db = dm.sum(axis=0) if has_bias else None
    if stride == 1 and pad <= kh - 1 and pad <= kw - 1 and kh == kw:
        # input gradient is a full correlation with the flipped, transposed kernel
        w_rot = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        dx, _ = conv2d(dout, w_rot, None, 1, kh - 1 - pad)
        return dx, dw, db
    ho, wo = dout.shape[2], dout.shape[3]
    dcols = (dm @ w.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
    dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def conv_transpose2d(x, w, b=None, stride=2):
    """Transposed convolution without padding; ``w`` is (Cin, Cout, k, k).

    Output spatial size is ``(H - 1) * stride + k``; this is the adjoint of
    ``conv2d`` with the same kernel read as (Cout_conv, Cin_conv, k, k).
    """
    _require4(x)
    if w.ndim != 4 or w.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"kernel {w.shape} does not match input channels {x.shape[1]}")
    cin, cout, kh, kw = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({cout},)")
    n, _, h, wd = x.shape
    # (N*H*W, Cin) @ (Cin, Cout*kh*kw)
    xm = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    patches = (xm @ w.reshape(cin, -1)).reshape(n, h, wd, cout, kh, kw)
    ho, wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    if stride == kh == kw:
        out = patches.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, ho, wo)
    else:
        out = np.zeros((n, cout, ho, wo), dtype=patches.dtype)
        for i in range(kh):
            for j in range(kw):
                out[:, :, i : i + stride * h : stride, j : j + stride * wd : stride] += patches[..., i, j].transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), (xm, x.shape, w, stride, b is not None)


def conv_transpose2d_backward(dout, cache):
    xm, xshape, w, stride, has_bias = cache
    n, cin, h, wd = xshape
    _, cout, kh, kw = w.shape
    if stride == kh == kw:
        dpatch = dout.reshape(n, cout, h, kh, wd, kw).transpose(0, 2, 4, 1, 3, 5)
    else:
        dpatch = np.empty((n, h, wd, cout, kh, kw), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dpatch[..., i, j] = dout[:, :, i : i + stride * h : stride, j : j + stride * wd : stride].transpose(0, 2, 3, 1)
    dpm = dpatch.reshape(n * h * wd, cout * kh * kw)
    dx = (dpm @ w.reshape(cin, -1).T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
    dw = (xm.T @ dpm).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


# ----------------------------------------------------------------------------
# normalisation and pointwise


def batch_norm2d(x, gamma, beta, running_mean, running_var, mode="train", momentum=0.1, eps=1e-5):
    """Per-channel batch norm. In train mode the running statistics are
    updated in place (unbiased variance, as is conventional)."""
    _require4(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match C={c}")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, mode)


def batch_norm2d_backward(dout, cache):
    xhat, inv_std, gamma, mode = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    g = (gamma * inv_std)[None, :, None, None]
    if mode == "eval":
        return dout * g, dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = g / m * (m * dout - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    # gradient at exactly 0 is 0
    return dout * mask


def max_pool2d(x, size=2, stride=2):
    """2x2 stride-2 max pooling. Ties go to the first element of the window
    in row-major order."""
    _require4(x)
    if size != 2 or stride != 2:
        raise ShapeMismatch("only 2x2 stride-2 pooling is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"pooling needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def max_pool2d_backward(dout, cache):
    arg, xshape = cache
    n, c, h, w = xshape
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(xshape)


def concat_channels(xs):
    for x in xs:
        _require4(x)
    ref = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeMismatch(f"cannot concatenate {x.shape} with {ref} along channels")
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def concat_channels_backward(dout, sizes):
    return np.split(dout, np.cumsum(sizes)[:-1], axis=1)


def softmax_channels(x):
    _require4(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(dprobs, probs):
    return probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))
