"""Full-volume prediction, ensembling and connected-component post-processing."""

from __future__ import annotations

import itertools
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from scipy import ndimage

from .errors import ShapeError
from .metrics import dice
from .nets import Network, forward
from .volume import Case, region_mask

CLASS_LABELS = np.array([0, 1, 2, 4], dtype=np.uint8)
DEFAULT_OVERLAP = 0.5
DEFAULT_RATIO_THRESHOLD = 0.1

# a predictor maps a (4, d, h, w) float array to a (4, d, h, w) softmax array
Predictor = Callable[[np.ndarray], np.ndarray]


def as_predictor(net: Union[Network, Predictor], mode: str = "eval", dropout_p: Optional[float] = None) -> Predictor:
    if not isinstance(net, Network):
        return net

    def predict(patch: np.ndarray) -> np.ndarray:
        _, probs = forward(net, torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32)), mode, dropout_p)
        return probs.cpu().numpy()

    return predict


def _starts(length: int, patch: int, overlap: float) -> List[int]:
    if length <= patch:
        return [0]
    step = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, length - patch + 1, step))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def predict_volume(
    net: Union[Network, Predictor],
    case: Union[Case, np.ndarray],
    patch_size=(64, 64, 64),
    overlap: float = DEFAULT_OVERLAP,
    mode: str = "eval",
    dropout_p: Optional[float] = None,
) -> np.ndarray:
    """Sliding-window softmax over a whole case.

    Tiles of ``patch_size`` step by ``patch * (1 - overlap)`` with the last
    tile flush against the far border; overlapping softmaxes are averaged
    uniformly.  A volume smaller than the patch is zero-padded and the output
    cropped back.  Returns a float32 array of shape (4, D, H, W).
    """
    if not 0.0 <= overlap <= 0.9:
        raise ValueError(f"overlap must lie in [0, 0.9], got {overlap}")
    image = case.modalities if isinstance(case, Case) else np.asarray(case, dtype=np.float32)
    shape = image.shape[1:]
    patch = tuple(int(p) for p in patch_size)
    if isinstance(net, Network) and any(p % net.config.multiple for p in patch):
        raise ShapeError(f"patch size {patch} must be a multiple of {net.config.multiple}")
    padded_shape = tuple(max(s, p) for s, p in zip(shape, patch))
    if padded_shape != shape:
        padded = np.zeros((image.shape[0],) + padded_shape, dtype=image.dtype)
        padded[(slice(None),) + tuple(slice(0, s) for s in shape)] = image
        image = padded

    predictor = as_predictor(net, mode, dropout_p)
    acc = None
    count = np.zeros(padded_shape, dtype=np.float32)
    for start in itertools.product(*(_starts(n, p, overlap) for n, p in zip(padded_shape, patch))):
        window = tuple(slice(s, s + p) for s, p in zip(start, patch))
        probs = np.asarray(predictor(image[(slice(None),) + window]), dtype=np.float32)
        if acc is None:
            acc = np.zeros((probs.shape[0],) + padded_shape, dtype=np.float32)
        acc[(slice(None),) + window] += probs
        count[window] += 1.0
    out = acc / count
    return np.ascontiguousarray(out[(slice(None),) + tuple(slice(0, s) for s in shape)])


def ensemble_mean(softmaxes: Sequence[np.ndarray]) -> np.ndarray:
    if not softmaxes:
        raise ValueError("need at least one softmax volume")
    shapes = {np.shape(s) for s in softmaxes}
    if len(shapes) != 1:
        raise ShapeError(f"softmax shapes differ: {sorted(shapes)}")
    return np.mean(np.stack(softmaxes), axis=0)


def labels_from_softmax(softmax: np.ndarray) -> np.ndarray:
    """Per-voxel argmax mapped to labels (0, 1, 2, 4); ties go to the lower label."""
    return CLASS_LABELS[np.argmax(softmax, axis=0)]


_CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


def component_sizes(labels: np.ndarray):
    """Foreground components (26-connectivity) as ``(component_map, sizes)``;
    ``sizes[k - 1]`` is the voxel count of component ``k``."""
    comp, n = ndimage.label(np.asarray(labels) != 0, structure=_CONNECTIVITY_26)
    sizes = np.bincount(comp.ravel(), minlength=n + 1)[1:]
    return comp, sizes


def postprocess_components(labels: np.ndarray, ratio_threshold: float = DEFAULT_RATIO_THRESHOLD) -> np.ndarray:
    """Keep the largest foreground component, and the second largest when
    ``|C2| / |C1| >= ratio_threshold``; everything else becomes background."""
    if not 0.0 < ratio_threshold <= 1.0:
        raise ValueError(f"ratio_threshold must lie in (0, 1], got {ratio_threshold}")
    labels = np.asarray(labels)
    comp, sizes = component_sizes(labels)
    if len(sizes) == 0:
        return labels.copy()
    order = np.argsort(-sizes, kind="stable")
    keep = [order[0] + 1]
    if len(order) > 1 and sizes[order[1]] / sizes[order[0]] >= ratio_threshold:
        keep.append(order[1] + 1)
    return np.where(np.isin(comp, keep), labels, 0).astype(labels.dtype)


def relabel_small_et(labels: np.ndarray, voxel_threshold: int = 0) -> np.ndarray:
    """Turn all enhancing-tumor voxels into necrosis when there are fewer than
    ``voxel_threshold`` of them.  The default threshold 0 disables the rule."""
    if voxel_threshold < 0:
        raise ValueError("voxel_threshold must be >= 0")
    labels = np.array(labels, copy=True)
    et = labels == 4
    if et.sum() < voxel_threshold:
        labels[et] = 1
    return labels


def calibrate_ratio_threshold(
    predictions: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    thresholds: Sequence[float] = tuple(np.round(np.arange(0.05, 1.0001, 0.05), 2)),
    region: str = "wt",
) -> Dict[str, object]:
    """Sweep ``ratio_threshold`` on labelled cases and pick the one with the
    best mean Dice for ``region`` (earliest threshold wins ties)."""
    table = []
    for t in thresholds:
        scores = [
            dice(region_mask(postprocess_components(p, float(t)), region), region_mask(g, region))
            for p, g in zip(predictions, truths)
        ]
        table.append({"threshold": float(t), f"mean_dice_{region}": float(np.mean(scores))})
    baseline = float(np.mean([dice(region_mask(p, region), region_mask(g, region)) for p, g in zip(predictions, truths)]))
    best = max(table, key=lambda r: r[f"mean_dice_{region}"])
    return {"best_threshold": best["threshold"], "table": table, f"no_postprocess_dice_{region}": baseline}
