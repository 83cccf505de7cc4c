"""Acceptance criteria, one test each.

Each test prints a single PASS/FAIL line through the terminal summary hook in
``conftest.py``; runtime limits are asserted inside the tests.
"""

import math
import time

import numpy as np
import pytest
import torch

from oracles import central_difference, dice_by_sets, dice_loss_loops, gdl_loops, hd95_brute
from pipeline import output_files, run_pipeline
from tumorseg.cli import main
from tumorseg.inference import component_sizes, postprocess_components, predict_volume
from tumorseg.losses import dice_loss, generalized_dice_loss
from tumorseg.metrics import auc_sweep, dice, evaluate_case, hd95
from tumorseg.nets import NetConfig, build_network
from tumorseg.preprocess import normalize_case
from tumorseg.sampling import sample_center_binary, sample_center_tumor
from tumorseg.trainer import PlateauState, TrainConfig, train, update_lr
from tumorseg.uncertainty import SampleStack, collect_tta, entropy_map, mean_prediction, variance_map
from tumorseg.volume import PhantomSpec, make_phantom, region_mask


def _rel_error(auto, numeric):
    return float(np.max(np.abs(auto - numeric) / np.maximum(np.abs(numeric), 1e-12)))


def test_criterion_01_loss_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        logits = rng.normal(size=(4, 4, 4, 4))
        probs = np.exp(logits) / np.exp(logits).sum(0, keepdims=True)
        labels = rng.integers(0, 4, size=(4, 4, 4))
        onehot = np.stack([labels == c for c in range(4)]).astype(np.float64)

        p = torch.tensor(probs, requires_grad=True)
        dice_loss(p, torch.tensor(onehot)).backward()
        numeric = central_difference(lambda x: dice_loss_loops(x, onehot, 1e-5), probs, h=1e-4)
        worst = max(worst, _rel_error(p.grad.numpy(), numeric))

        p = torch.tensor(probs, requires_grad=True)
        generalized_dice_loss(p, torch.tensor(onehot)).backward()
        numeric = central_difference(lambda x: gdl_loops(x, onehot, 1e-5), probs, h=1e-4)
        worst = max(worst, _rel_error(p.grad.numpy(), numeric))
    elapsed = time.perf_counter() - t0
    print(f"max relative gradient error {worst:.2e} in {elapsed:.1f}s")
    assert worst < 1e-3
    assert elapsed < 30


def test_criterion_02_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(200):
        shape = tuple(rng.integers(1, 13, size=3))
        density = rng.uniform(0.01, 0.5)
        x = rng.random(shape) < density
        y = rng.random(shape) < density
        assert dice(x, y) == dice_by_sets(x, y)
        worst = max(worst, abs(hd95(x, y) - hd95_brute(x, y)))
    elapsed = time.perf_counter() - t0
    print(f"max hd95 deviation {worst:.1e} in {elapsed:.1f}s")
    assert worst <= 1e-9
    assert elapsed < 120


def _stack(columns):
    arr = np.array(columns, dtype=np.uint8).T
    return SampleStack(arr.reshape(arr.shape[0], 1, 1, -1), "test")


def test_criterion_03_uncertainty_hand_values():
    split = _stack([[1] * 15 + [0] * 5])
    assert variance_map(split, "wt").item() == 75
    two = _stack([[1] * 10 + [2] * 10])
    assert entropy_map(two).item() == 50
    unanimous = _stack([[2] * 20])
    assert variance_map(unanimous, "wt").item() == 0
    assert entropy_map(unanimous).item() == 0


@pytest.mark.slow
def test_criterion_04_overfit_single_case():
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    case = normalize_case(make_phantom(PhantomSpec(shape=(64, 64, 64), seed=0, id="overfit")))
    torch.manual_seed(0)
    net = build_network(NetConfig("unet_residual", base_channels=8, levels=3))
    cfg = TrainConfig(lr=1e-4, patch_size=(32, 32, 32), batch_size=2, patches_per_case=100, max_epochs=10,
                      max_steps=500, augment=False, train_dropout_p=0.0, seed=0)
    result = train(net, [case], cfg)
    assert result.trainer.step_count <= 500
    probs = predict_volume(net, case, patch_size=(32, 32, 32), overlap=0.5)
    pred = np.array([0, 1, 2, 4], np.uint8)[probs.argmax(0)]
    wt = dice(region_mask(pred, "wt"), region_mask(case.labels, "wt"))
    elapsed = time.perf_counter() - t0
    print(f"whole-tumor dice {wt:.4f} after {result.trainer.step_count} steps in {elapsed:.0f}s")
    assert wt >= 0.90
    assert elapsed < 15 * 60


def test_criterion_05_plateau_schedule():
    history = [1.0] + [1.0] * 30 + [1.0] * 30
    state = PlateauState(base_lr=1e-4, factor=5.0, patience=30)
    lrs = [update_lr(history[: n + 1], state) for n in range(len(history))]
    assert lrs[29] == 1e-4
    assert lrs[30] == 2e-5
    assert lrs[59] == 2e-5
    assert lrs[60] == 4e-6
    assert sorted(set(lrs), reverse=True) == [1e-4, 2e-5, 4e-6]


def test_criterion_06_sampler_statistics():
    case = make_phantom(PhantomSpec(shape=(32, 32, 32), seed=3))
    rng = np.random.default_rng(6)
    n = 10_000
    binary = sum(case.labels[sample_center_binary(case.labels, rng, case.brain_mask)] != 0 for _ in range(n))
    tumor = sum(case.labels[sample_center_tumor(case.labels, rng)] != 0 for _ in range(n))
    print(f"binary tumor-centred fraction {binary / n:.4f}; random-tumor {tumor / n:.4f}")
    assert 0.48 <= binary / n <= 0.52
    assert tumor == n


def test_criterion_07_postprocessing():
    labels = np.zeros((30, 30, 30), np.uint8)
    labels[0:10, 0:10, 0:10] = 2
    labels[15:25, 15:25, 0:3] = 1
    labels[0:5, 25, 25] = 4
    _, before = component_sizes(labels)
    assert sorted(before.tolist()) == [5, 300, 1000]
    _, after = component_sizes(postprocess_components(labels, 0.1))
    assert sorted(after.tolist()) == [300, 1000]

    rng = np.random.default_rng(7)
    for _ in range(100):
        maps = rng.choice([0, 0, 0, 0, 1, 2, 4], size=tuple(rng.integers(4, 14, size=3))).astype(np.uint8)
        out = postprocess_components(maps, 0.1)
        assert np.all(maps[out != 0] != 0)


def test_criterion_08_filtering_oracle():
    rng = np.random.default_rng(8)
    gt = np.zeros((16, 16, 16), bool)
    gt[4:12, 4:12, 4:12] = True
    pred = gt ^ (rng.random(gt.shape) < 0.05)
    unc = np.where(pred != gt, 100, 0)
    scores, curve = auc_sweep(pred, gt, unc, return_curve=True)
    plain = dice(pred, gt)
    assert all(p.dice == 1.0 for p in curve if p.threshold < 100)
    assert scores.dice_auc > plain
    for a, b in zip(curve, curve[1:]):
        assert b.ftp <= a.ftp and b.ftn <= a.ftn


def test_criterion_09_tta_inversion():
    def equivariant(patch):
        # pointwise map, so it commutes with any flip or rotation
        e = np.exp(3.0 * patch)
        return e / e.sum(axis=0, keepdims=True)

    image = np.random.default_rng(9).normal(size=(4, 12, 12, 12)).astype(np.float32)
    stack = collect_tta(equivariant, image, B=20, sigma=0.0, seed=9, patch_size=(12, 12, 12),
                        shift_range=0.0, scale_range=(1.0, 1.0))
    assert all(np.array_equal(stack.labels[k], stack.labels[0]) for k in range(stack.B))
    assert entropy_map(stack).max() == 0
    assert np.array_equal(mean_prediction(stack), stack.labels[0])


@pytest.mark.slow
def test_criterion_10_rerun_bit_identical(tmp_path):
    first = run_pipeline(tmp_path / "a")
    second_root = tmp_path / "b"
    replace = f"{tmp_path / 'a'}={second_root}"
    second_root.mkdir()
    (second_root / "tiny.cfg").write_bytes((tmp_path / "a" / "tiny.cfg").read_bytes())
    for stage in ("data", "train", "pred", "unc", "eval", "eval_unc"):
        rc = main(["rerun", str(first[stage] / "manifest.json"), "--replace", replace])
        assert rc == 0, stage
    for stage, directory in first.items():
        a = output_files(directory)
        b = output_files(second_root / stage)
        assert a.keys() == b.keys(), stage
        for name in a:
            assert a[name] == b[name], (stage, name)


def test_criterion_11_empty_region_scoring():
    gt = np.zeros((12, 12, 12), np.uint8)
    gt[3:8, 3:8, 3:8] = 2
    gt[5, 5, 5] = 1
    row = evaluate_case(gt, gt)
    assert row["dice_et"] == 1.0
    spurious = gt.copy()
    spurious[4, 4, 4] = 4
    row = evaluate_case(spurious, gt)
    assert row["dice_et"] == 0.0
    assert not math.isnan(row["dice_wt"])
