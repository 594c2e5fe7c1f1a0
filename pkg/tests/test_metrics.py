import math

import numpy as np
import pytest

from eeunet.dataset import SliceMeta
from eeunet.diffops.gradcheck import grad_check
from eeunet.errors import EmptyRecords, ShapeMismatch
from eeunet.metrics import (
    EvalRecord,
    aggregate,
    class_weights,
    contour_points,
    dsc,
    evaluate_masks,
    hausdorff,
    hausdorff_points,
    loss_from_logits,
    one_hot,
    render_csv,
    render_text,
    soft_dice_class,
    weighted_dice_loss,
)
from oracles import contour_set, dsc_sets, hausdorff_sets


def test_dsc_hand_cases():
    gt = np.zeros((4, 4), int)
    gt[0, :3] = 1
    pred = np.zeros((4, 4), int)
    pred[0, 2:4] = 1
    assert dsc(pred, gt, 1) == pytest.approx(0.4)
    assert dsc(gt, gt, 1) == 1.0
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3)), 2) == 1.0
    assert dsc(np.eye(3), 1 - np.eye(3), 1) == 0.0
    with pytest.raises(ShapeMismatch):
        dsc(np.zeros((2, 2)), np.zeros((2, 3)), 1)


def test_hausdorff_point_case():
    assert hausdorff_points([(0, 0)], [(3, 4)]).hd == 5.0
    a = np.zeros((6, 6), int)
    b = np.zeros((6, 6), int)
    a[0, 0] = 1
    b[3, 4] = 1
    assert hausdorff(a, b, 1).hd == 5.0
    assert hausdorff(a, b, 1, spacing=(2.0, 1.0)).hd == pytest.approx(math.hypot(6, 4))
    assert hausdorff(a, a, 1).hd == 0.0
    assert not hausdorff(a, np.zeros_like(a), 1).defined


def test_metrics_match_brute_force(rng):
    for _ in range(200):
        a = rng.integers(0, 4, (10, 10))
        b = rng.integers(0, 4, (10, 10))
        spacing = tuple(rng.choice([1.0, 1.25, 2.5], 2))
        for p in (1, 2, 3):
            assert dsc(a, b, p) == dsc_sets(a == p, b == p)
            assert dsc(a, b, p) == dsc(b, a, p)
            ca, cb = contour_set(a == p), contour_set(b == p)
            assert sorted(map(tuple, contour_points(a, p))) == sorted(ca)
            h = hausdorff(a, b, p, spacing)
            if not ca or not cb:
                assert not h.defined
                continue
            want = hausdorff_sets(ca, cb, spacing)
            assert (h.hd, h.pred_to_gt, h.gt_to_pred) == want


def test_hausdorff_triangle_and_symmetry(rng):
    for _ in range(60):
        m = [rng.random((10, 10)) < 0.4 for _ in range(3)]
        if not all(x.any() for x in m):
            continue
        d = lambda x, y: hausdorff(x.astype(int), y.astype(int), 1).hd  # noqa: E731
        assert d(m[0], m[1]) == d(m[1], m[0])
        assert d(m[0], m[2]) <= d(m[0], m[1]) + d(m[1], m[2]) + 1e-12


def test_contour_border_counts_as_outside():
    full = np.ones((4, 4), int)
    pts = {tuple(p) for p in contour_points(full, 1)}
    assert (0, 0) in pts and (1, 1) not in pts and len(pts) == 12


def test_soft_dice_cases():
    masks = np.array([[[0, 1], [2, 3]]])
    oh = one_hot(masks)
    assert soft_dice_class(oh, oh, 2) == pytest.approx(1.0, abs=1e-6)
    oh_abs = one_hot(np.zeros((1, 2, 2), int))
    assert soft_dice_class(oh_abs, oh_abs, 3) == 1.0
    gt = np.zeros((1, 5, 5), int)
    gt[0, 0, :3] = 1
    pred = np.zeros((1, 5, 5), int)
    pred[0, 0, 2:4] = 1
    assert soft_dice_class(one_hot(pred), one_hot(gt), 1) == pytest.approx(0.4, abs=1e-6)
    with pytest.raises(ShapeMismatch):
        soft_dice_class(oh, oh[:, :3], 1)


def test_hard_soft_dice_equals_set_dice(rng):
    for _ in range(20):
        a = rng.integers(0, 4, (1, 8, 8))
        b = rng.integers(0, 4, (1, 8, 8))
        for p in range(4):
            assert soft_dice_class(one_hot(a), one_hot(b), p) == pytest.approx(dsc(a[0], b[0], p), abs=1e-5)


def test_weighted_loss_arithmetic():
    # per-class Dice (1, .5, .5, .5): class 0 exact, classes 1..3 predict 1/3 on their one pixel
    t = np.zeros((1, 4, 1, 4))
    p = np.zeros((1, 4, 1, 4))
    t[0, 0, 0, 0] = p[0, 0, 0, 0] = 1
    for c in (1, 2, 3):
        t[0, c, 0, c] = 1
        p[0, c, 0, c] = 1 / 3  # D = (2/3) / (1/3 + 1) = 0.5
    assert weighted_dice_loss(p, t, np.full(4, 0.25), smooth=0.0) == pytest.approx(0.375)


def test_perfect_prediction_loss_small():
    oh = one_hot(np.random.default_rng(0).integers(0, 4, (2, 6, 6)))
    assert weighted_dice_loss(oh, oh, class_weights(np.argmax(oh, 1))) < 1e-5


def test_class_weights():
    masks = [np.array([[0, 0, 0, 1], [0, 0, 2, 2]])]
    w = class_weights(masks)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert w[3] == 0.0
    assert w[0] < w[2] < w[1]
    np.testing.assert_allclose(w[:3], np.array([1 / 5, 1 / 1, 1 / 2]) / (1 / 5 + 1 + 1 / 2), rtol=1e-12)
    np.testing.assert_array_equal(class_weights(masks, "uniform"), np.full(4, 0.25))
    with pytest.raises(ValueError):
        class_weights(masks, "bogus")


def test_loss_gradient_through_softmax(rng):
    logits = rng.standard_normal((1, 4, 6, 6))
    masks = rng.integers(0, 4, (1, 6, 6))
    weights = class_weights(masks)
    _, dlogits, _ = loss_from_logits(logits, masks, weights)
    report = grad_check(lambda: loss_from_logits(logits, masks, weights)[0], [logits], [dlogits], name="dice", tol=1e-4)
    assert report.passed, str(report)


def test_loss_decreases_with_overlap():
    target = np.zeros((1, 2, 1, 4))
    target[0, 1, 0, :2] = 1
    target[0, 0, 0, 2:] = 1
    base = np.full((1, 2, 1, 4), 0.5)
    prev = weighted_dice_loss(base, target, np.ones(2))
    for t in np.linspace(0.05, 0.45, 9):
        # move mass of class 1 onto its target pixels while keeping its column sum fixed
        p = base.copy()
        p[0, 1, 0, :2] += t
        p[0, 1, 0, 2:] -= t
        p[0, 0] = 1 - p[0, 1]
        cur = weighted_dice_loss(p, target, np.ones(2))
        assert cur < prev
        prev = cur


def rec(pid, phase, path, cls, d, hd):
    return EvalRecord(pid, 0, phase, path, cls, d, hd)


def test_aggregate_means_and_undefined():
    records = [
        rec("a", "ED", "NOR", "LV", 0.8, 2.0),
        rec("b", "ED", "NOR", "LV", 1.0, None),
        rec("c", "ES", "NOR", "LV", 0.6, 4.0),
    ]
    r = aggregate(records)
    ed = r.table1[("NOR", "ED", "LV")]
    assert ed.dsc == pytest.approx(0.9) and ed.hd == 2.0 and ed.n_hd_undefined == 1
    avg = r.table1[("NOR", "Average", "LV")]
    assert avg.dsc == pytest.approx((0.9 + 0.6) / 2)
    assert r.n_hd_undefined == 1 and r.n_records == 3
    single = aggregate([records[0]])
    assert single.table2[("All", "LV")].dsc == 0.8
    with pytest.raises(EmptyRecords):
        aggregate([])


def test_report_layout():
    records = []
    for path in ("DCM", "HCM", "MINF", "NOR", "ARV"):
        for phase in ("ED", "ES"):
            for cls in ("LV", "RV", "MYO"):
                records.append(rec(path, phase, path, cls, 0.9, 3.0))
    r = aggregate(records)
    keys = {(p, ph, c) for p, ph, c in r.table1}
    assert keys == {(p, ph, c) for p in ("DCM", "HCM", "MINF", "NOR", "ARV") for ph in ("ED", "ES", "Average") for c in ("LV", "RV", "MYO")}
    text = render_text(r)
    assert "DCM" in text and "Average" in text and "End-systole" in text
    assert render_csv(r).splitlines()[0].startswith("table,")


def test_evaluate_masks_records():
    gt = np.zeros((8, 8), np.uint8)
    gt[2:6, 2:6] = 3
    gt[3:5, 3:5] = 1
    out = evaluate_masks(gt, gt, SliceMeta("p", "ES", 4, "DCM"), (1.0, 1.0))
    assert [r.cls for r in out] == ["LV", "RV", "MYO"]
    assert out[0].dsc == 1.0 and out[0].hd_mm == 0.0
    assert out[2].hd_mm is None and out[2].dsc == 1.0
