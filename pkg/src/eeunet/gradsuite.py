"""Finite-difference verification of the whole network's gradient.

The check point is sampled away from non-differentiable points: batch-norm
scales/shifts are randomised so no ReLU input sits exactly on its kink, and
the input is redrawn while any ReLU input or max-pool winner lies within
``margin`` of a kink. Edge channels are frozen at the unperturbed point,
matching their treatment as constants in the backward pass.
"""
import numpy as np

from .diffops.gradcheck import grad_check, run_op_suite
from .metrics import class_weights, loss_from_logits
from .model import ArchSpec, build_model, forward, backward


def kink_margin(mp, cache):
    """Smallest distance of any ReLU input or max-pool runner-up to a kink."""
    worst = np.inf
    for kind, _level, blk, extra in cache.steps:
        if blk is None:
            continue
        for prefix, k, _c_conv, c_bn, _c_relu in blk:
            xhat = c_bn[0]
            gamma = mp[f"{prefix}.bn{k}.gamma"][None, :, None, None]
            beta = mp[f"{prefix}.bn{k}.beta"][None, :, None, None]
            pre = xhat * gamma + beta
            worst = min(worst, float(np.abs(pre).min()))
        if kind == "enc":
            post = np.maximum(pre, 0)
            n, c, h, w = post.shape
            win = np.sort(post.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4), axis=1)
            live = win[:, 3] > 0
            if live.any():
                worst = min(worst, float((win[live, 3] - win[live, 2]).min()))
    return worst


def activation_pattern(cache):
    """Bytes identifying every ReLU on/off state and max-pool winner."""
    parts = []
    for kind, _level, blk, extra in cache.steps:
        for *_, c_relu in blk or ():
            parts.append(np.packbits(c_relu).tobytes())
        if kind == "enc":
            parts.append(extra[0].astype(np.uint8).tobytes())
    return b"".join(parts)


def end_to_end_check(base_width=2, size=16, batch=1, seed=0, tol=1e-3, max_coords=12, margin=1e-4, max_tries=200):
    """Weighted-Dice loss gradient of every parameter tensor vs central
    differences (h = 1e-5, float64). Returns a GradCheckReport.

    A sampled point is discarded when any finite-difference evaluation
    switches a ReLU or changes a max-pool winner, since the loss is not
    differentiable across those boundaries.
    """
    arch = ArchSpec(base_width=base_width)
    for attempt in range(max_tries):
        rng = np.random.default_rng((seed, attempt))
        mp = build_model(arch, seed, dtype=np.float64)
        for name, p in mp.params.items():
            if name.endswith(".gamma"):
                p.value[...] = rng.uniform(0.5, 1.5, p.value.shape)
            elif name.endswith((".beta", ".b")):
                p.value[...] = rng.uniform(-0.5, 0.5, p.value.shape)
        x = rng.random((batch, 1, size, size))
        masks = rng.integers(0, 4, (batch, size, size))
        buffers = {k: v.copy() for k, v in mp.buffers.items()}
        logits, stack, cache = forward(mp, x, "train", keep_cache=True)
        if kink_margin(mp, cache) < margin:
            continue
        pattern = activation_pattern(cache)
        edges = stack.history
        weights = class_weights(masks)
        _, dlogits, _ = loss_from_logits(logits, masks, weights)
        backward(mp, cache, dlogits)
        crossed = []

        def loss():
            for k, v in buffers.items():
                mp.buffers[k][...] = v
            lg, _, c = forward(mp, x, "train", edges=edges, keep_cache=True)
            if activation_pattern(c) != pattern:
                crossed.append(True)
            return loss_from_logits(lg, masks, weights)[0]

        names = list(mp.params)
        report = grad_check(
            loss,
            [mp.params[n].value for n in names],
            [mp.params[n].grad.copy() for n in names],
            name=f"end-to-end base{base_width} {batch}x1x{size}x{size}",
            tol=tol,
            max_coords=max_coords,
            seed=seed,
            labels=names,
        )
        if not crossed:
            return report
    raise RuntimeError("could not sample a point away from activation kinks")


def full_suite(seeds=range(5)):
    reports = run_op_suite(seeds)
    reports.append(end_to_end_check(batch=1))
    reports.append(end_to_end_check(batch=2))
    return reports
