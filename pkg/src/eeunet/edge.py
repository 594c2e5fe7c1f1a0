"""Edge extraction from encoder feature maps.

Pipeline per feature map: channel mean, Gaussian smoothing, 2x2 gradient
stencils, magnitude/orientation, non-maximum suppression, then hysteresis.
The resulting maps are packed as constant channels for the decoder.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .dataset import resize
from .errors import BadKernel, GridTooSmall, ShapeMismatch

HIGH_PERCENTILE = 75.0
LOW_RATIO = 0.4
EDGE_LABELS = ("none", "RV_edge", "Myo_edge", "LV_edge")


@dataclass
class EdgeFeatures:
    binary: np.ndarray  # uint8 {0, 1}
    magnitude: np.ndarray  # thinned edge length, >= 0
    orientation: np.ndarray  # radians in (-pi, pi], 0 where magnitude == 0
    label: np.ndarray = None  # index into EDGE_LABELS, only with a mask
    low: float = 0.0
    high: float = 0.0

    @property
    def shape(self):
        return self.binary.shape


class EdgeStack:
    """Last-in-first-out store of per-level edge features: encoder levels push
    top-down, decoder levels pop bottom-up."""

    def __init__(self):
        self._items = []
        self.history = []  # every pushed item, shallowest level first

    def push(self, e):
        self._items.append(e)
        self.history.append(e)

    def pop(self):
        return self._items.pop()

    def peek_all(self):
        return list(self._items)

    def __len__(self):
        return len(self._items)


def gaussian_kernel(r, w):
    if r < 3 or r % 2 == 0:
        raise BadKernel(f"kernel size must be odd and >= 3, got {r}")
    if not w > 0:
        raise BadKernel(f"spatial std must be positive, got {w}")
    x = np.arange(r, dtype=np.float64) - r // 2
    k = np.exp(-(x * x) / (2.0 * w * w))
    return k / k.sum()


def gaussian_smooth(grid, r, w):
    """Separable Gaussian blur with half-sample symmetric (reflect) borders."""
    k = gaussian_kernel(r, w)
    grid = np.asarray(grid, dtype=np.float64)
    half = r // 2
    p = np.pad(grid, half, mode="symmetric")
    h, wd = grid.shape
    rows = np.zeros((h, wd + 2 * half))
    for t in range(r):
        rows += k[t] * p[t : t + h, :]
    out = np.zeros((h, wd))
    for t in range(r):
        out += k[t] * rows[:, t : t + wd]
    return out


def grad_xy(grid):
    """2x2 difference stencils; output is (H-1) x (W-1).

    dx[i, j] = (I[i, j+1] - I[i, j] + I[i+1, j+1] - I[i+1, j]) / 2
    dy[i, j] = (I[i, j] - I[i+1, j] + I[i, j+1] - I[i+1, j+1]) / 2
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 2 or g.shape[1] < 2:
        raise GridTooSmall(f"gradient stencils need at least 2x2, got {g.shape}")
    a, b = g[:-1, :-1], g[:-1, 1:]
    c, d = g[1:, :-1], g[1:, 1:]
    dx = (b - a + d - c) / 2.0
    dy = (a - c + b - d) / 2.0
    return dx, dy


def magnitude_orientation(dx, dy):
    if dx.shape != dy.shape:
        raise ShapeMismatch(f"dx {dx.shape} and dy {dy.shape} differ")
    lam = np.sqrt(dx * dx + dy * dy)
    theta = np.arctan2(dy, dx)
    theta[theta <= -math.pi] = math.pi
    theta[lam == 0] = 0.0
    return lam, theta


def thin_edges(lam, theta):
    """Non-maximum suppression along the quantised gradient direction; ties
    survive (a pixel is kept when it is >= both neighbours)."""
    if lam.shape != theta.shape:
        raise ShapeMismatch(f"lambda {lam.shape} and theta {theta.shape} differ")
    return kernels.nms(np.ascontiguousarray(lam, dtype=np.float64), np.ascontiguousarray(theta, dtype=np.float64))


def default_thresholds(lam_thin):
    nz = lam_thin[lam_thin > 0]
    if nz.size == 0:
        return math.inf, math.inf
    high = float(np.percentile(nz, HIGH_PERCENTILE))
    return LOW_RATIO * high, high


def hysteresis(lam_thin, low=None, high=None):
    """Strong pixels (>= high) plus weak pixels (>= low) 8-connected to them."""
    if low is None or high is None:
        dlow, dhigh = default_thresholds(lam_thin)
        low = dlow if low is None else low
        high = dhigh if high is None else high
    if not 0 <= low <= high:
        raise ValueError(f"need 0 <= low <= high, got {low}, {high}")
    if math.isinf(high):
        return np.zeros(lam_thin.shape, dtype=np.uint8)
    return kernels.hysteresis_kernel(np.ascontiguousarray(lam_thin, dtype=np.float64), float(low), float(high))


def filter_size(h, w):
    """Largest odd integer <= max(3, min(h, w) / 32)."""
    r = int(math.floor(max(3.0, min(h, w) / 32.0)))
    return r if r % 2 else r - 1


def _as_grid(feature):
    f = np.asarray(feature)
    if f.ndim == 4:
        if f.shape[0] != 1:
            raise ShapeMismatch(f"edge_extract takes one sample, got batch {f.shape[0]}")
        f = f[0]
    if f.ndim == 3:
        f = f.mean(axis=0, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeMismatch(f"cannot read a 2D grid from shape {np.shape(feature)}")
    return f.astype(np.float64, copy=False)


def edge_extract(feature, mask=None, r=None, w_scale=1.0, low=None, high=None):
    """Canny-style edge features of one feature map (C, H, W) or grid (H, W).

    The optional label mask is used only for diagnostic edge labels: each
    edge pixel gets the class of the nearest foreground mask pixel within
    2 px (mask is nearest-resized to the feature grid first).
    """
    grid = _as_grid(feature)
    h, w = grid.shape
    if h < 2 or w < 2:
        raise GridTooSmall(f"edge extraction needs at least 2x2, got {grid.shape}")
    r = filter_size(h, w) if r is None else r
    smooth = gaussian_smooth(grid, r, w_scale * r / 2.0)
    dx, dy = grad_xy(smooth)
    lam, theta = magnitude_orientation(dx, dy)
    thin = thin_edges(lam, theta)
    if low is None or high is None:
        dlow, dhigh = default_thresholds(thin)
        low = dlow if low is None else low
        high = dhigh if high is None else high
    binary = hysteresis(thin, low, high)
    theta = np.where(thin > 0, theta, 0.0)

    pad = ((0, 1), (0, 1))
    e = EdgeFeatures(np.pad(binary, pad), np.pad(thin, pad), np.pad(theta, pad), None, float(low), float(high))
    if mask is not None:
        e.label = _edge_labels(e.binary, np.asarray(mask), (h, w))
    return e


def _edge_labels(binary, mask, shape):
    m = resize(mask, shape, "nearest") if mask.shape != shape else mask
    labels = np.zeros(shape, dtype=np.uint8)
    if not (m > 0).any():
        return labels
    dist, (ii, jj) = ndimage.distance_transform_edt(m == 0, return_indices=True)
    near = m[ii, jj]
    hit = (binary > 0) & (dist <= 2.0)
    labels[hit] = near[hit]
    return labels


def edge_channels(e, dtype=np.float32):
    """Pack edge features as a (1, 3, H, W) tensor: binary, magnitude scaled
    to [0, 1] by its maximum, orientation / pi."""
    peak = float(e.magnitude.max(initial=0.0))
    lam = e.magnitude / peak if peak > 0 else np.zeros_like(e.magnitude)
    return np.stack([e.binary.astype(np.float64), lam, e.orientation / math.pi])[None].astype(dtype)
