import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorseg.augment import (
    Op,
    Transform,
    apply,
    apply_spatial,
    sample_train_transform,
    sample_tta_transform,
)
from tumorseg.errors import ShapeError


def _kinds(t):
    return [op.kind for op in t.ops]


def test_flip_frequency():
    rng = np.random.default_rng(0)
    counts = np.zeros(3)
    n = 10_000
    for _ in range(n):
        for op in sample_train_transform(rng).ops:
            if op.kind == "flip":
                counts[op.axis] += 1
    assert np.all((counts / n >= 0.48) & (counts / n <= 0.52))


def test_rotation_frequency_and_ranges():
    rng = np.random.default_rng(1)
    rots, n = 0, 5000
    for _ in range(n):
        t = sample_train_transform(rng)
        rots += "rot90" in _kinds(t)
        scale = next(op for op in t.ops if op.kind == "scale")
        shift = next(op for op in t.ops if op.kind == "shift")
        assert all(0.9 <= s <= 1.1 for s in scale.values)
        assert all(-0.1 <= d <= 0.1 for d in shift.values)
        assert len(scale.values) == 4 and len(shift.values) == 4
    assert 0.47 <= rots / n <= 0.53


def test_identity_bit_identical(rng):
    x = rng.normal(size=(4, 8, 8, 8)).astype(np.float32)
    y = rng.choice([0, 1, 2, 4], size=(8, 8, 8)).astype(np.uint8)
    x2, y2 = apply(Transform(), x, y)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)


def test_flip_involution(rng):
    x = rng.normal(size=(4, 6, 6, 6))
    t = Transform((Op("flip", axis=0), Op("flip", axis=0)))
    assert np.array_equal(apply(t, x)[0], x)


def test_rot90_four_times(rng):
    x = rng.normal(size=(4, 6, 6, 6))
    t = Transform((Op("rot90", k=4),))
    assert np.array_equal(apply(t, x)[0], x)
    t = Transform(tuple(Op("rot90", k=1) for _ in range(4)))
    assert np.array_equal(apply(t, x)[0], x)


def test_labels_only_spatial(rng):
    y = rng.choice([0, 1, 2, 4], size=(6, 6, 6)).astype(np.uint8)
    x = rng.normal(size=(4, 6, 6, 6))
    t = Transform((Op("shift", values=(0.1,) * 4), Op("scale", values=(1.1,) * 4)))
    _, y2 = apply(t, x, y)
    assert np.array_equal(y2, y)


def test_rot90_unequal_axes():
    x = np.zeros((4, 6, 6, 8))
    with pytest.raises(ShapeError):
        apply(Transform((Op("rot90", axes=(1, 2), k=1),)), x)
    # a half turn is fine on unequal axes
    assert apply(Transform((Op("rot90", axes=(1, 2), k=2),)), x)[0].shape == x.shape


def test_intensity_monotone(rng):
    x = rng.normal(size=(4, 5, 5, 5))
    t = Transform((Op("scale", values=(0.9, 1.0, 1.05, 1.1)), Op("shift", values=(-0.1, 0.0, 0.05, 0.1))))
    out, _ = apply(t, x)
    for c in range(4):
        assert np.array_equal(np.argsort(x[c].ravel(), kind="stable"), np.argsort(out[c].ravel(), kind="stable"))


def test_shift_in_std_units():
    x = np.stack([np.arange(8, dtype=np.float64).reshape(2, 2, 2) * (c + 1) for c in range(4)])
    t = Transform((Op("shift", values=(0.1, -0.1, 0.0, 0.05)),))
    out, _ = apply(t, x)
    for c, d in enumerate((0.1, -0.1, 0.0, 0.05)):
        np.testing.assert_allclose(out[c] - x[c], d * x[c].std())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tta_inverse_restores_labels(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 5, size=(6, 6, 6)).astype(np.uint8)
    fwd, inv = sample_tta_transform(rng)
    moved = apply_spatial(fwd, y)
    assert moved.shape == y.shape
    assert np.array_equal(apply_spatial(inv, moved), y)


def test_tta_inverse_channels_first():
    rng = np.random.default_rng(3)
    for _ in range(30):
        fwd, inv = sample_tta_transform(rng)
        v = rng.normal(size=(4, 6, 6, 6))
        assert np.array_equal(apply_spatial(inv, apply_spatial(fwd, v, True), True), v)


def test_tta_zero_sigma_no_spatial():
    rng = np.random.default_rng(0)
    fwd, inv = sample_tta_transform(rng, sigma=0.0, p_flip=0.0, p_rot=0.0)
    assert [op.kind for op in fwd.ops] == ["scale", "shift"]
    assert inv.is_identity


def test_tta_noise_reproducible(rng):
    x = rng.normal(size=(4, 6, 6, 6))
    f1, _ = sample_tta_transform(np.random.default_rng(9), sigma=0.2)
    f2, _ = sample_tta_transform(np.random.default_rng(9), sigma=0.2)
    assert "noise" in _kinds(f1)
    assert np.array_equal(apply(f1, x)[0], apply(f2, x)[0])


def test_tta_noise_scale():
    x = np.random.default_rng(0).normal(0, 3.0, size=(4, 20, 20, 20))
    t = Transform((Op("noise", sigma=0.1, seed=4),))
    out, _ = apply(t, x)
    for c in range(4):
        assert abs((out[c] - x[c]).std() - 0.1 * x[c].std()) < 0.01
