"""Segmentation and uncertainty evaluation metrics.

Region-level metrics (Dice, 95th-percentile Hausdorff distance, sensitivity,
specificity) and the uncertainty-filtering scores: for a threshold ``T``
voxels with uncertainty above ``T`` are dropped, and we track the Dice on
what remains plus the ratios of filtered true positives / true negatives.
Sweeping ``T`` over [0, 100] and integrating gives the AUCs and the
integrated score ``AUC_dice + (1 - AUC_ftp) + (1 - AUC_ftn)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .volume import REGIONS, region_mask

# worst-case HD95 used when exactly one of the two masks is empty
EMPTY_HD_SENTINEL = 373.13
DEFAULT_THRESHOLDS = tuple(range(0, 101, 5))


def _pair(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ShapeError(f"mask shapes differ: {x.shape} vs {y.shape}")
    return x, y


def dice(x, y) -> float:
    """``2|X & Y| / (|X| + |Y|)``; 1 when both are empty."""
    x, y = _pair(x, y)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance from every voxel of ``src`` to the nearest voxel of ``dst``."""
    dt = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dt[src]


def hd95(x, y, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile Hausdorff distance in spacing units.

    Distances are measured from every voxel of one mask to the nearest voxel
    of the other; percentiles use linear interpolation between order
    statistics.  Returns 0 when both masks are empty and
    :data:`EMPTY_HD_SENTINEL` when exactly one is.
    """
    x, y = _pair(x, y)
    nx, ny = x.any(), y.any()
    if not nx and not ny:
        return 0.0
    if not nx or not ny:
        return EMPTY_HD_SENTINEL
    spacing = tuple(float(s) for s in spacing)
    d_xy = _directed_distances(x, y, spacing)
    d_yx = _directed_distances(y, x, spacing)
    return float(max(np.percentile(d_xy, 95), np.percentile(d_yx, 95)))


def sensitivity_specificity(x, y, domain_mask=None) -> Tuple[float, float]:
    """Sensitivity and specificity of prediction ``x`` against truth ``y``.

    Counts are restricted to ``domain_mask`` when given.  With an empty ground
    truth, sensitivity is 1 if the prediction is also empty and 0 otherwise;
    specificity with no negatives is 1.
    """
    x, y = _pair(x, y)
    if domain_mask is not None:
        dom = np.asarray(domain_mask, dtype=bool)
        x, y = x[dom], y[dom]
    tp = int(np.sum(x & y))
    fn = int(np.sum(~x & y))
    tn = int(np.sum(~x & ~y))
    fp = int(np.sum(x & ~y))
    if tp + fn == 0:
        sens = 1.0 if fp == 0 else 0.0
    else:
        sens = tp / (tp + fn)
    spec = 1.0 if tn + fp == 0 else tn / (tn + fp)
    return sens, spec


@dataclass(frozen=True)
class FilteredPoint:
    threshold: float
    dice: float
    ftp: float
    ftn: float


def filtered_point(pred, gt, unc, threshold: float, domain_mask=None) -> FilteredPoint:
    """Scores after removing voxels whose uncertainty exceeds ``threshold``.

    Filtered voxels are excluded from both prediction and ground truth for
    the Dice.  ``ftp = (TP_100 - TP_T) / TP_100`` and likewise for true
    negatives; true negatives are only counted inside ``domain_mask``.
    """
    pred, gt = _pair(pred, gt)
    unc = np.asarray(unc)
    if unc.shape != pred.shape:
        raise ShapeError(f"uncertainty shape {unc.shape} != mask shape {pred.shape}")
    keep = unc <= threshold
    d = dice(pred & keep, gt & keep)

    tp_all = pred & gt
    tn_all = ~pred & ~gt
    if domain_mask is not None:
        tn_all &= np.asarray(domain_mask, dtype=bool)
    tp100, tn100 = int(tp_all.sum()), int(tn_all.sum())
    tp_t, tn_t = int((tp_all & keep).sum()), int((tn_all & keep).sum())
    ftp = (tp100 - tp_t) / tp100 if tp100 else 0.0
    ftn = (tn100 - tn_t) / tn100 if tn100 else 0.0
    return FilteredPoint(float(threshold), d, ftp, ftn)


@dataclass(frozen=True)
class UncertaintyScores:
    dice_auc: float
    ftp_auc: float
    ftn_auc: float
    integrated: float


def auc_sweep(
    pred,
    gt,
    unc,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    domain_mask=None,
    return_curve: bool = False,
):
    """Trapezoidal AUCs of the filtered scores over ``thresholds / 100``."""
    points = [filtered_point(pred, gt, unc, t, domain_mask) for t in thresholds]
    xs = np.asarray(thresholds, dtype=np.float64) / 100.0
    dice_auc = float(np.trapezoid([p.dice for p in points], xs))
    ftp_auc = float(np.trapezoid([p.ftp for p in points], xs))
    ftn_auc = float(np.trapezoid([p.ftn for p in points], xs))
    scores = UncertaintyScores(dice_auc, ftp_auc, ftn_auc, dice_auc + (1.0 - ftp_auc) + (1.0 - ftn_auc))
    if return_curve:
        return scores, points
    return scores


def evaluate_case(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    uncertainty: Optional[Mapping[str, np.ndarray]] = None,
    spacing=(1.0, 1.0, 1.0),
    brain_mask: Optional[np.ndarray] = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> Dict[str, float]:
    """Flat dict of per-region metrics for one case.

    Keys look like ``dice_wt``, ``hd95_tc``, ``sensitivity_et``; when
    ``uncertainty`` maps regions to maps, ``dice_auc_*``, ``ftp_auc_*``,
    ``ftn_auc_*`` and ``score_*`` are added.
    """
    row: Dict[str, float] = {}
    for region in REGIONS:
        x = region_mask(pred_labels, region)
        y = region_mask(gt_labels, region)
        row[f"dice_{region}"] = dice(x, y)
        row[f"hd95_{region}"] = hd95(x, y, spacing)
        sens, spec = sensitivity_specificity(x, y, brain_mask)
        row[f"sensitivity_{region}"] = sens
        row[f"specificity_{region}"] = spec
        if uncertainty is not None and region in uncertainty:
            s = auc_sweep(x, y, uncertainty[region], thresholds, brain_mask)
            for key, value in asdict(s).items():
                name = "score" if key == "integrated" else key
                row[f"{name}_{region}"] = value
    return row
