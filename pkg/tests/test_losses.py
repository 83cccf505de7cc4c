import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, dice_loss_loops, gdl_loops
from tumorseg.errors import ShapeError
from tumorseg.losses import class_weights, dice_loss, generalized_dice_loss, one_hot_labels


def t64(a):
    return torch.tensor(np.asarray(a, dtype=np.float64))


def random_instance(rng, shape=(4, 4, 4, 4)):
    logits = rng.normal(size=shape)
    probs = np.exp(logits) / np.exp(logits).sum(axis=0, keepdims=True)
    labels = rng.integers(0, 4, size=shape[1:])
    onehot = np.stack([(labels == c) for c in range(shape[0])]).astype(np.float64)
    return probs, onehot


# -- dice loss ---------------------------------------------------------------


def test_dice_perfect():
    assert float(dice_loss(torch.ones(8), torch.ones(8), eps=0.0)) == 0.0


def test_dice_disjoint():
    p = torch.tensor([1.0, 1.0, 0.0, 0.0])
    g = torch.tensor([0.0, 0.0, 1.0, 1.0])
    assert float(dice_loss(p, g)) == 1.0


def test_dice_hand_value():
    value = float(dice_loss(t64([0.5, 0.5]), t64([1.0, 0.0]), eps=0.0))
    assert value == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert value == pytest.approx(dice_loss_loops([0.5, 0.5], [1, 0], 0.0), abs=1e-15)


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(torch.ones(3), torch.ones(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_range_and_permutation(seed):
    rng = np.random.default_rng(seed)
    p = rng.random(30)
    g = (rng.random(30) < 0.4).astype(float)
    value = float(dice_loss(t64(p), t64(g)))
    assert 0.0 <= value <= 1.0 + 1e-9
    perm = rng.permutation(30)
    assert float(dice_loss(t64(p[perm]), t64(g[perm]))) == pytest.approx(value, abs=1e-12)
    assert value == pytest.approx(dice_loss_loops(p, g, 1e-5), abs=1e-12)


# -- generalized dice loss ---------------------------------------------------


def test_gdl_perfect_prediction():
    rng = np.random.default_rng(0)
    _, onehot = random_instance(rng)
    eps = 1e-5
    value = float(generalized_dice_loss(t64(onehot), t64(onehot), eps=eps))
    w = 1.0 / onehot.reshape(4, -1).sum(1)
    expected = eps / (2 * np.sum(w * onehot.reshape(4, -1).sum(1)) + eps)
    assert value == pytest.approx(expected, rel=1e-9)
    assert value < 1e-5


@pytest.mark.parametrize("power", [1.0, 2.0])
def test_gdl_uniform_prediction(power):
    rng = np.random.default_rng(11)
    _, onehot = random_instance(rng)
    uniform = np.full_like(onehot, 0.25)
    expected = gdl_loops(uniform, onehot, 1e-5, power)
    value = float(generalized_dice_loss(t64(uniform), t64(onehot), eps=1e-5, weight_power=power))
    assert value == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("power", [1.0, 2.0])
def test_gdl_matches_loop_oracle_with_absent_class(power):
    rng = np.random.default_rng(5)
    probs, _ = random_instance(rng)
    labels = rng.integers(0, 3, size=(4, 4, 4))  # class 3 absent
    onehot = np.stack([(labels == c) for c in range(4)]).astype(np.float64)
    value = float(generalized_dice_loss(t64(probs), t64(onehot), weight_power=power))
    assert value == pytest.approx(gdl_loops(probs, onehot, 1e-5, power), abs=1e-12)


def test_absent_class_weight_clamped():
    target = torch.zeros(1, 3, 2, 2, 2)
    target[0, 0, :, :, 0] = 1
    target[0, 1, :, :, 1] = 1
    target[0, 1, 0, 0, 1] = 0
    target[0, 0, 0, 0, 1] = 1
    w = class_weights(target, power=2.0)
    assert torch.isfinite(w).all()
    assert w[2] == w[:2].max()


def _two_class_deficits(power):
    # class A: 1 voxel, class B: 100 voxels, true-class probability 0.8 everywhere
    g = np.zeros((2, 101))
    g[0, 0] = 1
    g[1, 1:] = 1
    p = np.where(g == 1, 0.8, 0.2)
    w = 1.0 / g.sum(axis=1) ** power
    return [w[l] * np.sum(g[l] - p[l] * g[l]) for l in range(2)]


@pytest.mark.parametrize("power", [1.0, 2.0])
def test_small_class_not_outweighed(power):
    small, large = _two_class_deficits(power)
    assert small >= large - 1e-15
    g = np.zeros((2, 101))
    g[0, 0] = 1
    g[1, 1:] = 1
    p = np.where(g == 1, 0.8, 0.2)
    assert float(generalized_dice_loss(t64(p), t64(g), weight_power=power)) == pytest.approx(
        gdl_loops(p, g, 1e-5, power), abs=1e-12)


def test_weight_scale_invariance():
    rng = np.random.default_rng(2)
    probs, onehot = random_instance(rng)
    w = torch.tensor([0.3, 1.7, 2.0, 0.01], dtype=torch.float64)
    a = generalized_dice_loss(t64(probs), t64(onehot), eps=0.0, weights=w)
    b = generalized_dice_loss(t64(probs), t64(onehot), eps=0.0, weights=w * 123.4)
    assert float(a) == pytest.approx(float(b), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gdl_range(seed):
    probs, onehot = random_instance(np.random.default_rng(seed))
    value = float(generalized_dice_loss(t64(probs), t64(onehot)))
    assert 0.0 <= value <= 1.0


def test_batched_equals_summed():
    rng = np.random.default_rng(8)
    p1, g1 = random_instance(rng)
    p2, g2 = random_instance(rng)
    batched = generalized_dice_loss(t64(np.stack([p1, p2])), t64(np.stack([g1, g2])))
    flat = generalized_dice_loss(t64(np.concatenate([p1, p2], axis=1)), t64(np.concatenate([g1, g2], axis=1)))
    assert float(batched) == pytest.approx(float(flat), abs=1e-12)


def test_gdl_shape_mismatch():
    with pytest.raises(ShapeError):
        generalized_dice_loss(torch.ones(4, 8), torch.ones(4, 9))


def test_one_hot_labels():
    labels = torch.tensor([[[[0, 1], [2, 4]]]])  # (1, 1, 2, 2)
    oh = one_hot_labels(labels)
    assert oh.shape == (1, 4, 1, 2, 2)
    assert torch.equal(oh.sum(1), torch.ones(1, 1, 2, 2))
    assert oh[0, 3, 0, 1, 1] == 1


# -- gradients against central differences ------------------------------------


def _max_rel_error(auto, numeric):
    return np.max(np.abs(auto - numeric) / np.maximum(np.abs(numeric), 1e-12))


@pytest.mark.parametrize("seed", range(3))
def test_dice_gradient(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((4, 4, 4, 4))
    g = (rng.random((4, 4, 4, 4)) < 0.3).astype(np.float64)
    pt = t64(p).requires_grad_(True)
    dice_loss(pt, t64(g)).backward()
    numeric = central_difference(lambda x: dice_loss_loops(x, g, 1e-5), p)
    assert _max_rel_error(pt.grad.numpy(), numeric) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_gdl_gradient(seed):
    probs, onehot = random_instance(np.random.default_rng(100 + seed))
    pt = t64(probs).requires_grad_(True)
    generalized_dice_loss(pt, t64(onehot)).backward()
    numeric = central_difference(lambda x: gdl_loops(x, onehot, 1e-5), probs)
    assert _max_rel_error(pt.grad.numpy(), numeric) < 1e-3
