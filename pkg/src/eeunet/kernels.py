"""Hot inner loops of the edge and metric pipelines.

Every kernel has a numba implementation (``*_numba``) and a pure-numpy
implementation (``*_numpy``) with identical semantics. The public names
dispatch to numba unless it is unavailable or disabled through
``EEUNET_DISABLE_NUMBA``.
"""
import math

import numpy as np
from scipy import ndimage

from ._accel import NUMBA_AVAILABLE, njit

_DEG_PER_RAD = 180.0 / math.pi

# Neighbour offsets (drow, dcol) for the four quantised gradient directions.
# Rows grow downwards while the gradient's y component points up, so a
# 45 degree gradient pairs the upper-right and lower-left neighbours.
_NMS_OFFSETS = np.array(
    [
        [0, -1, 0, 1],  # 0 deg
        [-1, 1, 1, -1],  # 45 deg
        [-1, 0, 1, 0],  # 90 deg
        [-1, -1, 1, 1],  # 135 deg
    ],
    dtype=np.int64,
)


def direction_bin_numpy(theta):
    deg = np.mod(theta * _DEG_PER_RAD, 180.0)
    return (np.floor((deg + 22.5) / 45.0).astype(np.int64)) % 4


# ----------------------------------------------------------------------------
# non-maximum suppression


@njit
def nms_numba(lam, theta):
    h, w = lam.shape
    out = np.zeros_like(lam)
    for i in range(h):
        for j in range(w):
            v = lam[i, j]
            if v <= 0.0:
                continue
            deg = (theta[i, j] * _DEG_PER_RAD) % 180.0
            b = int(math.floor((deg + 22.5) / 45.0)) % 4
            i1 = i + _NMS_OFFSETS[b, 0]
            j1 = j + _NMS_OFFSETS[b, 1]
            i2 = i + _NMS_OFFSETS[b, 2]
            j2 = j + _NMS_OFFSETS[b, 3]
            n1 = lam[i1, j1] if 0 <= i1 < h and 0 <= j1 < w else 0.0
            n2 = lam[i2, j2] if 0 <= i2 < h and 0 <= j2 < w else 0.0
            if v >= n1 and v >= n2:
                out[i, j] = v
    return out


def nms_numpy(lam, theta):
    h, w = lam.shape
    padded = np.pad(lam, 1)
    bins = direction_bin_numpy(theta)
    keep = np.zeros(lam.shape, dtype=bool)
    for b in range(4):
        di1, dj1, di2, dj2 = _NMS_OFFSETS[b]
        n1 = padded[1 + di1 : 1 + di1 + h, 1 + dj1 : 1 + dj1 + w]
        n2 = padded[1 + di2 : 1 + di2 + h, 1 + dj2 : 1 + dj2 + w]
        keep |= (bins == b) & (lam >= n1) & (lam >= n2)
    keep &= lam > 0
    return np.where(keep, lam, 0.0).astype(lam.dtype)


# ----------------------------------------------------------------------------
# hysteresis


@njit
def hysteresis_numba(lam, low, high):
    h, w = lam.shape
    out = np.zeros((h, w), dtype=np.uint8)
    stack = np.empty((h * w, 2), dtype=np.int64)
    top = 0
    for i in range(h):
        for j in range(w):
            if lam[i, j] > 0.0 and lam[i, j] >= high:
                out[i, j] = 1
                stack[top, 0] = i
                stack[top, 1] = j
                top += 1
    while top > 0:
        top -= 1
        i = stack[top, 0]
        j = stack[top, 1]
        for di in range(-1, 2):
            for dj in range(-1, 2):
                ni = i + di
                nj = j + dj
                if ni < 0 or nj < 0 or ni >= h or nj >= w or out[ni, nj]:
                    continue
                v = lam[ni, nj]
                if v > 0.0 and v >= low:
                    out[ni, nj] = 1
                    stack[top, 0] = ni
                    stack[top, 1] = nj
                    top += 1
    return out


def hysteresis_numpy(lam, low, high):
    candidates = (lam > 0) & (lam >= low)
    strong = candidates & (lam >= high)
    if not strong.any():
        return np.zeros(lam.shape, dtype=np.uint8)
    labels, _ = ndimage.label(candidates, structure=np.ones((3, 3), dtype=bool))
    keep = np.unique(labels[strong])
    return np.isin(labels, keep[keep > 0]).astype(np.uint8)


# ----------------------------------------------------------------------------
# contours and Hausdorff distance


@njit
def boundary_numba(region):
    h, w = region.shape
    out = np.zeros((h, w), dtype=np.bool_)
    for i in range(h):
        for j in range(w):
            if not region[i, j]:
                continue
            if (
                i == 0
                or j == 0
                or i == h - 1
                or j == w - 1
                or not region[i - 1, j]
                or not region[i + 1, j]
                or not region[i, j - 1]
                or not region[i, j + 1]
            ):
                out[i, j] = True
    return out


def boundary_numpy(region):
    padded = np.pad(region, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return region & ~interior


@njit
def directed_hausdorff_numba(a, b, sx, sy):
    worst = 0.0
    for k in range(a.shape[0]):
        best = np.inf
        for m in range(b.shape[0]):
            dx = (a[k, 0] - b[m, 0]) * sx
            dy = (a[k, 1] - b[m, 1]) * sy
            d2 = dx * dx + dy * dy
            if d2 < best:
                best = d2
                if best < worst:
                    break  # cannot raise the running maximum
        if best > worst:
            worst = best
    return math.sqrt(worst)


def directed_hausdorff_numpy(a, b, sx, sy, chunk=2048):
    worst = 0.0
    bx = b[:, 0].astype(np.float64) * 1.0
    by = b[:, 1].astype(np.float64) * 1.0
    for start in range(0, a.shape[0], chunk):
        blk = a[start : start + chunk].astype(np.float64)
        dx = (blk[:, 0:1] - bx[None, :]) * sx
        dy = (blk[:, 1:2] - by[None, :]) * sy
        d2 = dx * dx + dy * dy
        worst = max(worst, float(d2.min(axis=1).max()))
    return math.sqrt(worst)


if NUMBA_AVAILABLE:
    nms = nms_numba
    hysteresis_kernel = hysteresis_numba
    boundary = boundary_numba
    directed_hausdorff = directed_hausdorff_numba
else:
    nms = nms_numpy
    hysteresis_kernel = hysteresis_numpy
    boundary = boundary_numpy
    directed_hausdorff = directed_hausdorff_numpy

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"
