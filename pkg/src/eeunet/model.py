"""EE-UNet: a 4-level U-Net whose decoder levels also receive edge channels
extracted from the matching encoder level.

Every encoder/decoder/bottleneck block is two (3x3 conv, pad 1 -> batch norm
-> ReLU) stages. The 3x3 convolutions carry no bias because the following
batch norm cancels it. Upsampling is a single 2x2 stride-2 transposed conv.
Edge channels are recomputed on every forward pass and enter the graph as
constants: no gradient flows through the edge path.
"""
import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import edge as edge_mod
from .diffops import ops
from .diffops.checkpoint import read_container, write_container
from .diffops.optim import AdamState, ParamTensor
from .errors import DataError, ShapeMismatch

EDGE_CHANNELS = 3


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 1
    base_width: int = 64
    depth: int = 4
    num_classes: int = 4
    edge_infusion: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.base_width < 1 or self.depth < 1 or self.num_classes < 2:
            raise ValueError(f"invalid architecture {self}")

    @property
    def widths(self):
        return [self.base_width * 2**i for i in range(self.depth)]

    @property
    def bottleneck_width(self):
        return self.base_width * 2**self.depth

    @property
    def edge_width(self):
        return EDGE_CHANNELS if self.edge_infusion else 0

    def decoder_concat_width(self, level):
        """Input channels of decoder ``level`` (1 = full resolution)."""
        w = self.widths[level - 1]
        return 2 * w + self.edge_width


def param_shapes(arch):
    """Ordered (name, shape) list of every learnable array."""
    shapes = []

    def block(prefix, cin, cout):
        shapes.append((f"{prefix}.conv1.w", (cout, cin, 3, 3)))
        shapes.append((f"{prefix}.bn1.gamma", (cout,)))
        shapes.append((f"{prefix}.bn1.beta", (cout,)))
        shapes.append((f"{prefix}.conv2.w", (cout, cout, 3, 3)))
        shapes.append((f"{prefix}.bn2.gamma", (cout,)))
        shapes.append((f"{prefix}.bn2.beta", (cout,)))

    cin = arch.in_channels
    for level, w in enumerate(arch.widths, start=1):
        block(f"enc{level}", cin, w)
        cin = w
    block("bottleneck", cin, arch.bottleneck_width)
    below = arch.bottleneck_width
    for level in range(arch.depth, 0, -1):
        w = arch.widths[level - 1]
        shapes.append((f"dec{level}.up.w", (below, w, 2, 2)))
        shapes.append((f"dec{level}.up.b", (w,)))
        block(f"dec{level}", arch.decoder_concat_width(level), w)
        below = w
    shapes.append(("head.w", (arch.num_classes, arch.base_width, 1, 1)))
    shapes.append(("head.b", (arch.num_classes,)))
    return shapes


@dataclass
class ModelParams:
    arch: ArchSpec
    params: dict  # name -> ParamTensor, creation order
    buffers: dict = field(default_factory=dict)  # batch-norm running stats

    def __getitem__(self, name):
        return self.params[name].value

    def param_list(self):
        return list(self.params.values())

    def count(self):
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self):
        return copy.deepcopy(self)

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype


def build_model(arch, seed=0, dtype=np.float32):
    """Initialise parameters deterministically from ``seed``.

    Conv and transposed-conv weights are drawn from U(-b, b) with
    b = sqrt(6 / fan_in) (fan_in = Cin*kh*kw for convs, Cin for the
    non-overlapping 2x2 stride-2 transposed convs). Biases and BN shifts
    start at 0, BN scales at 1, running statistics at (0, 1).
    """
    rng = np.random.default_rng(seed)
    params = {}
    buffers = {}
    for name, shape in param_shapes(arch):
        if name.endswith(".gamma"):
            value = np.ones(shape)
            bn = name[: -len(".gamma")]
            buffers[f"{bn}.running_mean"] = np.zeros(shape, dtype=dtype)
            buffers[f"{bn}.running_var"] = np.ones(shape, dtype=dtype)
        elif name.endswith((".beta", ".b")):
            value = np.zeros(shape)
        elif ".up." in name:
            bound = math.sqrt(6.0 / shape[0])
            value = rng.uniform(-bound, bound, shape)
        else:
            bound = math.sqrt(6.0 / (shape[1] * shape[2] * shape[3]))
            value = rng.uniform(-bound, bound, shape)
        params[name] = ParamTensor(name, value.astype(dtype))
    return ModelParams(arch, params, buffers)


# ----------------------------------------------------------------------------
# forward / backward


@dataclass
class LevelEdges:
    features: list  # one EdgeFeatures per sample
    channels: np.ndarray  # (N, 3, H, W) constant tensor


@dataclass
class ForwardCache:
    mode: str
    steps: list = field(default_factory=list)
    shapes: dict = field(default_factory=dict)


def extract_level_edges(skip, masks=None):
    feats = []
    for n in range(skip.shape[0]):
        m = None if masks is None else masks[n]
        feats.append(edge_mod.edge_extract(skip[n], m))
    chans = np.concatenate([edge_mod.edge_channels(e, skip.dtype) for e in feats], axis=0)
    return LevelEdges(feats, chans)


def _block_forward(mp, prefix, x, mode, cache):
    for k in (1, 2):
        x, c_conv = ops.conv2d(x, mp[f"{prefix}.conv{k}.w"], None, 1, 1)
        bn = f"{prefix}.bn{k}"
        x, c_bn = ops.batch_norm2d(
            x,
            mp[f"{bn}.gamma"],
            mp[f"{bn}.beta"],
            mp.buffers[f"{bn}.running_mean"],
            mp.buffers[f"{bn}.running_var"],
            mode,
        )
        x, c_relu = ops.relu(x)
        ops.check_finite(x, f"{prefix}.stage{k}")
        cache.append((prefix, k, c_conv, c_bn, c_relu))
    return x


def _block_backward(mp, dout, block_cache):
    for prefix, k, c_conv, c_bn, c_relu in reversed(block_cache):
        dout = ops.relu_backward(dout, c_relu)
        dout, dgamma, dbeta = ops.batch_norm2d_backward(dout, c_bn)
        mp.params[f"{prefix}.bn{k}.gamma"].accumulate(dgamma)
        mp.params[f"{prefix}.bn{k}.beta"].accumulate(dbeta)
        dout, dw, _ = ops.conv2d_backward(dout, c_conv)
        mp.params[f"{prefix}.conv{k}.w"].accumulate(dw)
    return dout


def forward(mp, x, mode="train", edges=None, masks=None, keep_cache=False):
    """Run EE-UNet on a batch ``x`` of shape (N, in_channels, H, W).

    Returns ``(logits, edge_stack)`` or, with ``keep_cache``,
    ``(logits, edge_stack, cache)`` for :func:`backward`. The decoder pops
    the stack deepest level first; ``edge_stack.history`` keeps every
    level's LevelEdges for diagnostics. ``edges`` may supply precomputed
    LevelEdges (shallowest first) to hold the edge channels fixed, e.g.
    during finite-difference checks.
    """
    arch = mp.arch
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ShapeMismatch(f"expected (N, {arch.in_channels}, H, W), got {x.shape}")
    f = 2**arch.depth
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeMismatch(f"spatial dims {x.shape[2:]} must be divisible by {f}")
    x = x.astype(mp.dtype, copy=False)
    cache = ForwardCache(mode)
    stack = edge_mod.EdgeStack()
    skips = []
    h = x
    for level in range(1, arch.depth + 1):
        blk = []
        h = _block_forward(mp, f"enc{level}", h, mode, blk)
        skips.append(h)
        cache.shapes[f"enc{level}"] = h.shape
        if arch.edge_infusion:
            lv = edges[level - 1] if edges is not None else extract_level_edges(h, masks)
            stack.push(lv)
        h, c_pool = ops.max_pool2d(h)
        cache.steps.append(("enc", level, blk, c_pool))
    blk = []
    h = _block_forward(mp, "bottleneck", h, mode, blk)
    cache.shapes["bottleneck"] = h.shape
    cache.steps.append(("bottleneck", 0, blk, None))
    for level in range(arch.depth, 0, -1):
        up, c_up = ops.conv_transpose2d(h, mp[f"dec{level}.up.w"], mp[f"dec{level}.up.b"], 2)
        parts = [up, skips[level - 1]]
        if arch.edge_infusion:
            parts.append(stack.pop().channels.astype(h.dtype, copy=False))
        cat, sizes = ops.concat_channels(parts)
        cache.shapes[f"dec{level}.concat"] = cat.shape
        blk = []
        h = _block_forward(mp, f"dec{level}", cat, mode, blk)
        cache.shapes[f"dec{level}"] = h.shape
        cache.steps.append(("dec", level, blk, (c_up, sizes)))
    logits, c_head = ops.conv2d(h, mp["head.w"], mp["head.b"], 1, 0)
    ops.check_finite(logits, "head")
    cache.shapes["logits"] = logits.shape
    cache.steps.append(("head", 0, None, c_head))
    if keep_cache:
        return logits, stack, cache
    return logits, stack


def backward(mp, cache, dlogits):
    """Accumulate parameter gradients of a scalar loss given d(loss)/d(logits)."""
    steps = list(cache.steps)
    kind, _, _, c_head = steps.pop()
    assert kind == "head"
    dh, dw, db = ops.conv2d_backward(dlogits.astype(mp.dtype, copy=False), c_head)
    mp.params["head.w"].accumulate(dw)
    mp.params["head.b"].accumulate(db)
    dskips = {}
    while steps and steps[-1][0] == "dec":
        _, level, blk, (c_up, sizes) = steps.pop()
        dcat = _block_backward(mp, dh, blk)
        grads = ops.concat_channels_backward(dcat, sizes)
        dup, dskips[level] = grads[0], grads[1]
        dh, dw, db = ops.conv_transpose2d_backward(dup, c_up)
        mp.params[f"dec{level}.up.w"].accumulate(dw)
        mp.params[f"dec{level}.up.b"].accumulate(db)
    _, _, blk, _ = steps.pop()
    dh = _block_backward(mp, dh, blk)
    while steps:
        _, level, blk, c_pool = steps.pop()
        dskip = ops.max_pool2d_backward(dh, c_pool) + dskips[level]
        dh = _block_backward(mp, dskip, blk)
    return dh


def predict_mask(logits):
    """Per-pixel argmax over classes; ties resolve to the lower class index."""
    return np.argmax(logits, axis=1).astype(np.uint8)


def shape_walk(arch, height, width, batch=1):
    """Closed-form intermediate shapes for an input of the given size."""
    shapes = {}
    h, w = height, width
    for level, c in enumerate(arch.widths, start=1):
        shapes[f"enc{level}"] = (batch, c, h, w)
        h, w = h // 2, w // 2
    shapes["bottleneck"] = (batch, arch.bottleneck_width, h, w)
    for level in range(arch.depth, 0, -1):
        h, w = h * 2, w * 2
        c = arch.widths[level - 1]
        shapes[f"dec{level}.concat"] = (batch, arch.decoder_concat_width(level), h, w)
        shapes[f"dec{level}"] = (batch, c, h, w)
    shapes["logits"] = (batch, arch.num_classes, h, w)
    return shapes


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, mp, adam=None, extra=None):
    meta = {"format": "eeunet-checkpoint", "arch": asdict(mp.arch), "extra": extra or {}}
    arrays = {}
    for name, p in mp.params.items():
        arrays[f"param/{name}"] = p.value
    for name, b in mp.buffers.items():
        arrays[f"buffer/{name}"] = b
    if adam is not None:
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t}
        for name in mp.params:
            if name in adam.m:
                arrays[f"adam.m/{name}"] = adam.m[name]
                arrays[f"adam.v/{name}"] = adam.v[name]
    write_container(path, meta, arrays)


def load_checkpoint(path):
    """Return ``(ModelParams, AdamState | None, extra)``."""
    meta, arrays = read_container(path)
    if meta.get("format") != "eeunet-checkpoint":
        raise DataError(f"{path} is not an EE-UNet checkpoint")
    arch = ArchSpec(**meta["arch"])
    params = {}
    for name, shape in param_shapes(arch):
        key = f"param/{name}"
        if key not in arrays or arrays[key].shape != tuple(shape):
            raise DataError(f"checkpoint missing or misshapen parameter {name}")
        params[name] = ParamTensor(name, arrays[key].copy())
    buffers = {k[len("buffer/") :]: v.copy() for k, v in arrays.items() if k.startswith("buffer/")}
    adam = None
    if "adam" in meta:
        adam = AdamState(**meta["adam"])
        for k, v in arrays.items():
            if k.startswith("adam.m/"):
                adam.m[k[len("adam.m/") :]] = v.copy()
            elif k.startswith("adam.v/"):
                adam.v[k[len("adam.v/") :]] = v.copy()
    return ModelParams(arch, params, buffers), adam, meta.get("extra", {})
