"""Patch-center sampling and zero-padded patch extraction.

Two center distributions are supported:

* ``binary``: with probability 0.5 the center is a tumor voxel, otherwise a
  healthy brain voxel (label 0 inside the brain mask).  Intended for patches
  up to 64^3.
* ``random_tumor``: the center is always a tumor voxel.  Intended for large
  patches (96^3 and above) that carry plenty of healthy context anyway.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import SamplingError, SpecError
from .volume import LABEL_VALUES, Case

STRATEGIES = ("binary", "random_tumor")


@dataclass(frozen=True)
class PatchSpec:
    size: Tuple[int, int, int] = (64, 64, 64)
    strategy: str = "binary"
    rng_seed: int = 0

    def __post_init__(self):
        size = tuple(int(s) for s in self.size)
        object.__setattr__(self, "size", size)
        if len(size) != 3 or any(s < 8 or s % 2 for s in size):
            raise SpecError(f"patch size components must be even and >= 8, got {size}")
        if self.strategy not in STRATEGIES:
            raise SpecError(f"unknown strategy {self.strategy!r}")
        check_strategy(size, self.strategy)


def default_strategy(size) -> str:
    return "binary" if max(size) <= 64 else "random_tumor"


def check_strategy(size, strategy: str) -> None:
    """Warn when ``strategy`` is not the one recommended for this patch size."""
    largest = max(size)
    if largest <= 64 and strategy != "binary":
        warnings.warn(f"patch size {tuple(size)} <= 64^3 is normally paired with 'binary' sampling")
    elif largest >= 112 and strategy != "random_tumor":
        warnings.warn(f"patch size {tuple(size)} >= 112^3 is normally paired with 'random_tumor' sampling")


def class_distribution(labels: np.ndarray) -> Dict[int, int]:
    labels = np.asarray(labels)
    return {v: int(np.count_nonzero(labels == v)) for v in LABEL_VALUES}


def _pick(coords: np.ndarray, rng: np.random.Generator) -> Tuple[int, int, int]:
    return tuple(int(c) for c in coords[rng.integers(len(coords))])


def sample_center_tumor(labels: np.ndarray, rng: np.random.Generator) -> Tuple[int, int, int]:
    tumor = np.argwhere(np.asarray(labels) != 0)
    if len(tumor) == 0:
        raise SamplingError("no tumor voxels to centre a patch on")
    return _pick(tumor, rng)


def sample_center_binary(
    labels: np.ndarray,
    rng: np.random.Generator,
    brain_mask: Optional[np.ndarray] = None,
) -> Tuple[int, int, int]:
    """Tumor-centred with probability 0.5, else centred on healthy brain.

    ``brain_mask`` defaults to the whole volume when not given.
    """
    labels = np.asarray(labels)
    tumor = np.argwhere(labels != 0)
    healthy_mask = labels == 0
    if brain_mask is not None:
        healthy_mask &= np.asarray(brain_mask, dtype=bool)
    healthy = np.argwhere(healthy_mask)
    if len(tumor) == 0:
        raise SamplingError("no tumor voxels for the tumor stratum")
    if len(healthy) == 0:
        raise SamplingError("no healthy brain voxels for the healthy stratum")
    if rng.random() < 0.5:
        return _pick(tumor, rng)
    return _pick(healthy, rng)


def sample_center(case: Case, strategy: str, rng: np.random.Generator) -> Tuple[int, int, int]:
    if case.labels is None:
        raise SamplingError(f"case {case.id!r} has no labels to sample from")
    if strategy == "binary":
        return sample_center_binary(case.labels, rng, case.brain_mask)
    if strategy == "random_tumor":
        return sample_center_tumor(case.labels, rng)
    raise SpecError(f"unknown strategy {strategy!r}")


def _window(center, size, shape):
    """Source and destination slices for a patch of ``size`` centred at ``center``."""
    src, dst = [], []
    for c, s, n in zip(center, size, shape):
        start = int(c) - s // 2
        lo, hi = max(start, 0), min(start + s, n)
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    return tuple(src), tuple(dst)


def crop(volume: np.ndarray, center, size) -> np.ndarray:
    """Crop the trailing three axes of ``volume`` around ``center``, zero-padding outside."""
    volume = np.asarray(volume)
    lead = volume.shape[:-3]
    src, dst = _window(center, size, volume.shape[-3:])
    out = np.zeros(lead + tuple(size), dtype=volume.dtype)
    out[(Ellipsis,) + dst] = volume[(Ellipsis,) + src]
    return out


def embed(patch: np.ndarray, center, volume: np.ndarray) -> np.ndarray:
    """Inverse of :func:`crop`: write ``patch`` back into a copy of ``volume``."""
    out = np.array(volume, copy=True)
    src, dst = _window(center, patch.shape[-3:], out.shape[-3:])
    out[(Ellipsis,) + src] = patch[(Ellipsis,) + dst]
    return out


def extract_patch(case: Case, center, size) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if any(not 0 <= c < n for c, n in zip(center, case.shape)):
        raise ValueError(f"center {tuple(center)} outside volume {case.shape}")
    mods = crop(case.modalities, center, size)
    labels = None if case.labels is None else crop(case.labels, center, size)
    return mods, labels
