import numpy as np
import pytest

from eeunet.dataset import gen_phantom
from eeunet.diffops.optim import AdamState
from eeunet.errors import ShapeMismatch
from eeunet.gradsuite import end_to_end_check
from eeunet.metrics import class_weights, loss_from_logits
from eeunet.model import (
    ArchSpec,
    backward,
    build_model,
    forward,
    load_checkpoint,
    param_shapes,
    predict_mask,
    save_checkpoint,
    shape_walk,
)


def closed_form_count(b, n_in=1, classes=4, edges=3):
    """Parameter count written out level by level for a depth-4 network."""
    def block(cin, cout):
        return 9 * cin * cout + 9 * cout * cout + 4 * cout  # two convs + two BN pairs

    total = block(n_in, b) + block(b, 2 * b) + block(2 * b, 4 * b) + block(4 * b, 8 * b)
    total += block(8 * b, 16 * b)
    for w in (8 * b, 4 * b, 2 * b, b):
        total += 4 * (2 * w) * w + w  # up-conv from 2w to w, with bias
        total += block(2 * w + edges, w)
    return total + b * classes + classes


@pytest.mark.parametrize("b", [2, 8, 64])
@pytest.mark.parametrize("edges", [True, False])
def test_param_count_closed_form(b, edges):
    arch = ArchSpec(base_width=b, edge_infusion=edges)
    count = sum(int(np.prod(s)) for _, s in param_shapes(arch))
    assert count == closed_form_count(b, edges=3 if edges else 0)


def test_first_kernel_and_widths():
    arch = ArchSpec()
    shapes = dict(param_shapes(arch))
    assert shapes["enc1.conv1.w"] == (64, 1, 3, 3)
    assert arch.widths == [64, 128, 256, 512] and arch.bottleneck_width == 1024


def test_shape_walk_full_width():
    s = shape_walk(ArchSpec(), 128, 128)
    assert [s[f"enc{l}"][1] for l in range(1, 5)] == [64, 128, 256, 512]
    assert s["bottleneck"] == (1, 1024, 8, 8)
    assert s["logits"] == (1, 4, 128, 128)
    ablated = shape_walk(ArchSpec(edge_infusion=False), 128, 128)
    for l in range(1, 5):
        assert s[f"dec{l}.concat"][1] - ablated[f"dec{l}.concat"][1] == 3


def test_forward_matches_shape_walk(rng):
    for edges in (True, False):
        mp = build_model(ArchSpec(base_width=2, edge_infusion=edges), 0)
        logits, stack, cache = forward(mp, rng.random((2, 1, 32, 32)), "train", keep_cache=True)
        assert logits.shape == (2, 4, 32, 32)
        assert cache.shapes == shape_walk(mp.arch, 32, 32, 2)
        assert len(stack.history) == (4 if edges else 0) and len(stack) == 0


def test_forward_rejects_bad_input(rng):
    mp = build_model(ArchSpec(base_width=2), 0)
    with pytest.raises(ShapeMismatch):
        forward(mp, rng.random((1, 1, 24, 32)))
    with pytest.raises(ShapeMismatch):
        forward(mp, rng.random((1, 2, 32, 32)))


def test_init_deterministic_and_documented():
    a = build_model(ArchSpec(base_width=4), 5)
    b = build_model(ArchSpec(base_width=4), 5)
    c = build_model(ArchSpec(base_width=4), 6)
    for name in a.params:
        assert a[name].tobytes() == b[name].tobytes()
    assert any(a[n].tobytes() != c[n].tobytes() for n in a.params if n.endswith(".w"))
    w = a["enc2.conv1.w"]
    bound = np.sqrt(6 / (4 * 9))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.8 * bound
    assert (a["enc1.bn1.gamma"] == 1).all() and (a["enc1.bn1.beta"] == 0).all()
    assert (a.buffers["enc1.bn1.running_var"] == 1).all()


def test_every_parameter_gets_gradient(rng):
    mp = build_model(ArchSpec(base_width=2), 1)
    x = rng.random((2, 1, 16, 16)).astype(np.float32)
    masks = rng.integers(0, 4, (2, 16, 16))
    logits, _, cache = forward(mp, x, "train", keep_cache=True)
    _, dlogits, _ = loss_from_logits(logits, masks, class_weights(masks))
    backward(mp, cache, dlogits)
    dead = [p.name for p in mp.param_list() if not p.touched or not np.any(p.grad)]
    assert not dead


def test_end_to_end_gradient():
    report = end_to_end_check(base_width=2, size=16, batch=1, seed=0, max_coords=6)
    assert report.passed, str(report)
    assert len(report.per_input) == len(param_shapes(ArchSpec(base_width=2)))


def test_edge_channels_change_output(rng):
    mp = build_model(ArchSpec(base_width=2), 0)
    x = gen_phantom(0, 1, size=32)[0].image[None, None]
    logits, stack = forward(mp, x, "eval")
    frozen = [type(lv)(lv.features, np.zeros_like(lv.channels)) for lv in stack.history]
    logits0, _ = forward(mp, x, "eval", edges=frozen)
    assert not np.array_equal(logits, logits0)


def test_eval_mode_leaves_running_stats(rng):
    mp = build_model(ArchSpec(base_width=2), 0)
    before = {k: v.copy() for k, v in mp.buffers.items()}
    forward(mp, rng.random((1, 1, 16, 16)), "eval")
    for k in before:
        np.testing.assert_array_equal(before[k], mp.buffers[k])
    forward(mp, rng.random((2, 1, 16, 16)), "train")
    assert any(not np.array_equal(before[k], mp.buffers[k]) for k in before)


def test_predict_mask_ties_low_class():
    logits = np.zeros((1, 4, 1, 2))
    logits[0, 2, 0, 1] = 1.0
    logits[0, 3, 0, 1] = 1.0
    np.testing.assert_array_equal(predict_mask(logits), [[[0, 2]]])


def test_checkpoint_roundtrip(tmp_path, rng):
    mp = build_model(ArchSpec(base_width=2), 3)
    adam = AdamState(t=7)
    for p in mp.param_list():
        adam.m[p.name] = rng.standard_normal(p.value.shape).astype(p.value.dtype)
        adam.v[p.name] = rng.random(p.value.shape).astype(p.value.dtype)
    mp.buffers["enc1.bn1.running_mean"][:] = 0.25
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, mp, adam, {"epoch": 3})
    mp2, adam2, extra = load_checkpoint(path)
    assert mp2.arch == mp.arch and extra == {"epoch": 3} and adam2.t == 7
    for n in mp.params:
        assert mp2[n].tobytes() == mp[n].tobytes()
        assert adam2.m[n].tobytes() == adam.m[n].tobytes()
    for n in mp.buffers:
        assert mp2.buffers[n].tobytes() == mp.buffers[n].tobytes()
    save_checkpoint(tmp_path / "again.ckpt", mp2, adam2, extra)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
