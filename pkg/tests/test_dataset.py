import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eeunet.dataset import (
    FoldPlan,
    SliceDataset,
    SliceMeta,
    augment,
    gen_phantom,
    load_dataset,
    make_folds,
    normalize_slice,
    resize,
    save_dataset,
    volume_to_slices,
)
from eeunet.errors import DimMismatch, TooFewPatients, UnknownLabel
from eeunet.nifti import Volume


def percentile_oracle(values, q):
    s = sorted(values)
    return s[int(round(q / 100 * (len(s) - 1)))]


def test_normalize_constant_and_two_value():
    assert not normalize_slice(np.full((5, 5), 7.0)).any()
    two = np.array([[0.0, 100.0]] * 50)
    np.testing.assert_array_equal(np.unique(normalize_slice(two)), [0.0, 1.0])


def test_normalize_ramp_matches_oracle():
    ramp = np.arange(100, dtype=float).reshape(10, 10)
    lo, hi = percentile_oracle(ramp.ravel(), 1), percentile_oracle(ramp.ravel(), 99)
    assert (lo, hi) == (1.0, 98.0)
    out = normalize_slice(ramp)
    assert out[5, 0] == pytest.approx((50 - 1) / (98 - 1), abs=1e-7)
    assert out.min() == 0.0 and out.max() == 1.0


def test_resize_identity_both_modes(rng):
    g = rng.random((128, 128))
    np.testing.assert_array_equal(resize(g, (128, 128), "bilinear"), g)
    np.testing.assert_array_equal(resize(g, (128, 128), "nearest"), g)


def test_resize_nearest_keeps_labels():
    m = np.array([[0, 1], [2, 3]], dtype=np.uint8)
    out = resize(m, (8, 8), "nearest")
    assert set(np.unique(out)) == {0, 1, 2, 3}
    assert (out[:4, :4] == 0).all() and (out[:4, 4:] == 1).all()
    assert (out[4:, :4] == 2).all() and (out[4:, 4:] == 3).all()


def test_resize_bilinear_hand_values():
    # align-corners-false sample rows: src = (i + .5) / 2 - .5, clamped
    out = resize(np.array([[0.0, 0.0], [1.0, 1.0]]), (4, 4), "bilinear")
    expected_rows = [0.0, 0.25, 0.75, 1.0]
    for i, v in enumerate(expected_rows):
        np.testing.assert_allclose(out[i], v)


def test_volume_to_slices_counts_and_spacing():
    vol = Volume(np.random.default_rng(0).random((4, 4, 3)).astype(np.float32), (1, 1, 5))
    mask = Volume(np.zeros((4, 4, 3), np.uint8), (1, 1, 5))
    slices = volume_to_slices(vol, mask, SliceMeta("p1"))
    assert len(slices) == 3
    assert all(s.image.shape == (128, 128) and s.mask.shape == (128, 128) for s in slices)
    assert [s.meta.slice_index for s in slices] == [0, 1, 2]

    big = Volume(np.zeros((256, 256, 1), np.float32), (1.25, 1.25, 8))
    bigm = Volume(np.zeros((256, 256, 1), np.uint8), (1.25, 1.25, 8))
    assert volume_to_slices(big, bigm, SliceMeta("p"))[0].spacing == (2.5, 2.5)


def test_volume_to_slices_errors():
    vol = Volume(np.zeros((4, 4, 2), np.float32), (1, 1, 1))
    bad = np.zeros((4, 4, 2), np.uint8)
    bad[0, 0, 0] = 5
    with pytest.raises(UnknownLabel):
        volume_to_slices(vol, Volume(bad, (1, 1, 1)), SliceMeta("p"))
    with pytest.raises(DimMismatch):
        volume_to_slices(vol, Volume(np.zeros((4, 4, 3), np.uint8), (1, 1, 1)), SliceMeta("p"))


def test_label_remap_table():
    vol = Volume(np.zeros((2, 2, 1), np.float32), (1, 1, 1))
    mask = Volume(np.array([[[0], [10]], [[20], [30]]], np.uint8), (1, 1, 1))
    out = volume_to_slices(vol, mask, SliceMeta("p"), size=2, label_map={0: 0, 10: 3, 20: 2, 30: 1})
    np.testing.assert_array_equal(out[0].mask, [[0, 3], [2, 1]])


@settings(max_examples=25, deadline=None)
@given(
    nx=st.integers(1, 40),
    ny=st.integers(1, 40),
    nz=st.integers(1, 3),
    scale=st.floats(0.1, 1e4),
    seed=st.integers(0, 2**16),
)
def test_slices_always_satisfy_invariants(nx, ny, nz, scale, seed):
    r = np.random.default_rng(seed)
    vol = Volume((r.standard_normal((nx, ny, nz)) * scale).astype(np.float32), (r.uniform(0.5, 3), r.uniform(0.5, 3), 5))
    mask = Volume(r.integers(0, 4, (nx, ny, nz)).astype(np.uint8), vol.spacing)
    for s in volume_to_slices(vol, mask, SliceMeta("p")):
        s.validate()


def patients(n_per_class, classes=("NOR", "MINF", "DCM", "HCM", "ARV")):
    return [(f"{c}{i:03d}", c) for c in classes for i in range(n_per_class)]


def test_folds_acdc_shape():
    plan = make_folds(patients(30), 5, seed=3)
    assert [len(f) for f in plan.folds] == [30] * 5
    for f in plan.folds:
        for c in ("NOR", "MINF", "DCM", "HCM", "ARV"):
            assert sum(p.startswith(c) for p in f) == 6
    assert frozenset().union(*plan.folds) == {p for p, _ in patients(30)}


def test_folds_deterministic_and_forced_sizes():
    assert make_folds(patients(30), 5, 9) == make_folds(patients(30), 5, 9)
    plan = make_folds(patients(10, ("NOR",)), 5, 0)
    assert [len(f) for f in plan.folds] == [2] * 5
    with pytest.raises(TooFewPatients):
        make_folds(patients(1, ("NOR", "DCM")), 5, 0)


@settings(max_examples=30, deadline=None)
@given(counts=st.lists(st.integers(0, 9), min_size=1, max_size=5), k=st.integers(2, 6), seed=st.integers(0, 999))
def test_folds_partition_and_balance(counts, k, seed):
    pts = [(f"c{c}_{i}", f"c{c}") for c, n in enumerate(counts) for i in range(n)]
    if len(pts) < k:
        with pytest.raises(TooFewPatients):
            make_folds(pts, k, seed)
        return
    plan = make_folds(pts, k, seed)
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    assert sum(sizes) == len(pts)
    for c, n in enumerate(counts):
        per = [sum(p.startswith(f"c{c}_") for p in f) for f in plan.folds]
        assert max(per) - min(per) <= 1


def test_fold_split_has_no_leakage():
    samples = gen_phantom(0, 10)
    plan = make_folds([(s.meta.patient_id, s.meta.pathology) for s in samples], 5, 0)
    for k in range(5):
        train, test = plan.split(samples, k)
        assert not {s.meta.patient_id for s in train} & {s.meta.patient_id for s in test}
        assert len(train) + len(test) == 10


def test_phantom_contract():
    samples = gen_phantom(5, 6)
    for s in samples:
        s.validate()
        assert np.bincount(s.mask.ravel(), minlength=4).min() >= 20
    again = gen_phantom(5, 6)
    for a, b in zip(samples, again):
        assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


def test_phantom_class_means_separated():
    for s in gen_phantom(11, 5, noise=0.0):
        means = sorted(s.image[s.mask == c].mean() for c in range(4))
        assert np.diff(means).min() >= 0.15


def test_phantom_myocardium_width():
    # the annulus is at least 4 px thick: eroding it by a 3x3 cross twice leaves pixels on every ray
    from scipy import ndimage

    for s in gen_phantom(2, 4, noise=0.0):
        myo = s.mask == 2
        assert ndimage.binary_erosion(myo, iterations=2).sum() > 0


def test_augment_disabled_and_zero_rotation():
    s = gen_phantom(0, 1)[0]
    assert augment(s, 3, enabled=False) is s
    from eeunet.dataset import rotate_pair

    img, msk = rotate_pair(s.image, s.mask, 0.0)
    np.testing.assert_array_equal(img, s.image)
    np.testing.assert_array_equal(msk, s.mask)


def test_augment_preserves_labels():
    s = gen_phantom(4, 1)[0]
    hist = np.bincount(s.mask.ravel(), minlength=4)
    for seed in range(6):
        out = augment(s, seed, enabled=True)
        out.validate()
        assert set(np.unique(out.mask)) <= set(np.unique(s.mask))
        new = np.bincount(out.mask.ravel(), minlength=4)
        np.testing.assert_allclose(new[1:], hist[1:], rtol=0.10)


def test_double_flip_is_identity():
    s = gen_phantom(4, 1)[0]
    flipped = s.mask[:, ::-1][:, ::-1]
    np.testing.assert_array_equal(np.bincount(flipped.ravel()), np.bincount(s.mask.ravel()))


def test_dataset_roundtrip(tmp_path):
    samples = gen_phantom(3, 6)
    plan = make_folds([(s.meta.patient_id, s.meta.pathology) for s in samples], 3, 0)
    save_dataset(SliceDataset(samples, plan), tmp_path)
    back = load_dataset(tmp_path)
    assert back.plan == FoldPlan(tuple(sorted(plan.folds, key=lambda f: min(f))))  or set(back.plan.folds) == set(plan.folds)
    for a, b in zip(samples, back.samples):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.meta == b.meta and a.spacing == b.spacing
