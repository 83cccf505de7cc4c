"""Voxel-wise uncertainty from repeated stochastic inference.

Three ways of drawing ``B`` predictions per case:

* ``ttd``: test-time dropout (channel dropout active at inference), epistemic.
* ``tta``: test-time augmentation (training transforms plus Gaussian noise,
  predictions mapped back to the original grid), aleatoric.
* ``hybrid``: both at once.

Each stack reduces to a final prediction (majority vote) and either one
variance map per region (wt, tc, et) or one global entropy map.  Maps are
integers in [0, 100] where 0 is most certain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np
import torch

from .augment import DEFAULT_NOISE_SIGMA, apply, apply_spatial, sample_tta_transform
from .errors import ConfigError, ShapeError
from .inference import CLASS_LABELS, DEFAULT_OVERLAP, Predictor, labels_from_softmax, predict_volume
from .nets import Network
from .volume import REGIONS, Case, region_mask

DEFAULT_B = 20
DEFAULT_DROPOUT_P = 0.5
SOURCES = ("ttd", "tta", "hybrid")
MEASURES = ("variance", "entropy")

# maximum variance of a Bernoulli sample; maximum entropy over the 4 classes
MAX_VARIANCE = 0.25
MAX_ENTROPY = math.log(len(CLASS_LABELS))


@dataclass(frozen=True)
class SampleStack:
    """``labels`` has shape (B, D, H, W); ``softmax`` (B, 4, D, H, W) if kept."""

    labels: np.ndarray
    source: str
    softmax: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.labels.ndim != 4:
            raise ShapeError(f"labels stack must be (B, D, H, W), got {self.labels.shape}")
        if len(self.labels) < 2:
            raise ConfigError("a sample stack needs B >= 2")

    @property
    def B(self) -> int:
        return len(self.labels)


def _check_B(B: int):
    if B < 2:
        raise ConfigError(f"B must be >= 2, got {B}")


def _sample_seeds(seed: int, B: int):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(B)]


def _stack(softmaxes, source, keep_softmax) -> SampleStack:
    labels = np.stack([labels_from_softmax(s) for s in softmaxes])
    return SampleStack(labels, source, np.stack(softmaxes) if keep_softmax else None)


def collect_ttd(
    net: Network,
    case: Union[Case, np.ndarray],
    B: int = DEFAULT_B,
    dropout_p: float = DEFAULT_DROPOUT_P,
    seed: int = 0,
    patch_size=(64, 64, 64),
    overlap: float = DEFAULT_OVERLAP,
    keep_softmax: bool = False,
) -> SampleStack:
    """``B`` full-volume predictions with dropout active, one torch seed each."""
    _check_B(B)
    if dropout_p <= 0:
        raise ConfigError("test-time dropout needs dropout_p > 0")
    softmaxes = []
    for s in _sample_seeds(seed, B):
        torch.manual_seed(s)
        softmaxes.append(predict_volume(net, case, patch_size, overlap, mode="eval_with_dropout", dropout_p=dropout_p))
    return _stack(softmaxes, "ttd", keep_softmax)


def _augmented_prediction(net, image, transform, inverse, patch_size, overlap, mode, dropout_p):
    moved, _ = apply(transform, image)
    probs = predict_volume(net, moved, patch_size, overlap, mode=mode, dropout_p=dropout_p)
    return apply_spatial(inverse, probs, channels_first=True)


def collect_tta(
    net: Union[Network, Predictor],
    case: Union[Case, np.ndarray],
    B: int = DEFAULT_B,
    sigma: float = DEFAULT_NOISE_SIGMA,
    seed: int = 0,
    patch_size=(64, 64, 64),
    overlap: float = DEFAULT_OVERLAP,
    keep_softmax: bool = False,
    **transform_kwargs,
) -> SampleStack:
    """``B`` deterministic predictions of randomly transformed inputs, each
    mapped back to the original grid.  ``transform_kwargs`` go to
    :func:`~tumorseg.augment.sample_train_transform`."""
    _check_B(B)
    image = case.modalities if isinstance(case, Case) else np.asarray(case, dtype=np.float32)
    rng = np.random.default_rng(seed)
    softmaxes = []
    for _ in range(B):
        fwd, inv = sample_tta_transform(rng, sigma=sigma, n_channels=len(image), **transform_kwargs)
        softmaxes.append(_augmented_prediction(net, image, fwd, inv, patch_size, overlap, "eval", None))
    return _stack(softmaxes, "tta", keep_softmax)


def collect_hybrid(
    net: Network,
    case: Union[Case, np.ndarray],
    B: int = DEFAULT_B,
    dropout_p: float = DEFAULT_DROPOUT_P,
    sigma: float = DEFAULT_NOISE_SIGMA,
    seed: int = 0,
    patch_size=(64, 64, 64),
    overlap: float = DEFAULT_OVERLAP,
    keep_softmax: bool = False,
    **transform_kwargs,
) -> SampleStack:
    """TTA transform and dropout-active inference for every sample.

    ``dropout_p=0`` is allowed here and degenerates to plain TTA.
    """
    _check_B(B)
    if dropout_p < 0:
        raise ConfigError("dropout_p must be >= 0")
    image = case.modalities if isinstance(case, Case) else np.asarray(case, dtype=np.float32)
    rng = np.random.default_rng(seed)
    softmaxes = []
    for s in _sample_seeds(seed, B):
        fwd, inv = sample_tta_transform(rng, sigma=sigma, n_channels=len(image), **transform_kwargs)
        torch.manual_seed(s)
        softmaxes.append(_augmented_prediction(net, image, fwd, inv, patch_size, overlap, "eval_with_dropout", dropout_p))
    return _stack(softmaxes, "hybrid", keep_softmax)


def collect(source: str, net, case, B: int = DEFAULT_B, dropout_p: float = DEFAULT_DROPOUT_P,
            sigma: float = DEFAULT_NOISE_SIGMA, seed: int = 0, **kwargs) -> SampleStack:
    if source == "ttd":
        return collect_ttd(net, case, B, dropout_p, seed, **kwargs)
    if source == "tta":
        return collect_tta(net, case, B, sigma, seed, **kwargs)
    if source == "hybrid":
        return collect_hybrid(net, case, B, dropout_p, sigma, seed, **kwargs)
    raise ConfigError(f"unknown uncertainty source {source!r}; expected one of {SOURCES}")


def _label_counts(labels: np.ndarray) -> np.ndarray:
    return np.stack([np.sum(labels == v, axis=0) for v in CLASS_LABELS])


def mean_prediction(stack: SampleStack, space: str = "vote") -> np.ndarray:
    """Final label map of a stack.

    ``space="vote"`` takes the per-voxel majority label (ties toward the lower
    label); ``space="softmax"`` averages the stored softmaxes first.
    """
    if space == "vote":
        return CLASS_LABELS[np.argmax(_label_counts(stack.labels), axis=0)]
    if space == "softmax":
        if stack.softmax is None:
            raise ConfigError("stack was collected without softmax volumes")
        return labels_from_softmax(stack.softmax.mean(axis=0))
    raise ValueError(f"unknown averaging space {space!r}")


def _to_percent(values: np.ndarray, maximum: float) -> np.ndarray:
    scaled = np.floor(values / maximum * 100.0 + 0.5)
    return np.clip(scaled, 0, 100).astype(np.uint8)


def variance_map(stack: SampleStack, region: str) -> np.ndarray:
    """Population variance of the per-sample region membership, scaled so the
    Bernoulli maximum 0.25 maps to 100."""
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}, got {region!r}")
    y = region_mask(stack.labels, region).astype(np.float64)
    var = np.mean((y - y.mean(axis=0)) ** 2, axis=0)
    return _to_percent(var, MAX_VARIANCE)


def entropy_map(stack: SampleStack) -> np.ndarray:
    """Entropy of the empirical label frequencies, scaled so ln 4 maps to 100."""
    p = _label_counts(stack.labels) / stack.B
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return _to_percent(terms.sum(axis=0), MAX_ENTROPY)


def uncertainty_maps(stack: SampleStack, measure: str) -> Dict[str, np.ndarray]:
    """Maps keyed by region.

    ``variance`` gives one map per region.  ``entropy`` gives the ``global``
    map and repeats it under each region key so every region has a map.
    """
    if measure == "variance":
        return {r: variance_map(stack, r) for r in REGIONS}
    if measure == "entropy":
        h = entropy_map(stack)
        maps = {r: h for r in REGIONS}
        maps["global"] = h
        return maps
    raise ConfigError(f"unknown measure {measure!r}; expected one of {MEASURES}")
