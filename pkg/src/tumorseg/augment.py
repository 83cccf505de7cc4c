"""Training augmentation and invertible test-time transforms.

A :class:`Transform` is an ordered list of operations.  Spatial operations
(flips and 90-degree rotations) act on the three spatial axes and are applied
to both images and label maps; intensity operations act on image channels
only.  Spatial axes are numbered 0..2 over (D, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ShapeError

SPATIAL_OPS = ("flip", "rot90")

DEFAULT_ROT_AXES = (1, 2)
DEFAULT_NOISE_SIGMA = 0.1


@dataclass(frozen=True)
class Op:
    """One transform step.

    kinds and parameters:
        flip: ``axis``
        rot90: ``axes``, ``k``
        shift: ``values`` (per-channel, in units of channel std)
        scale: ``values`` (per-channel factors)
        noise: ``sigma`` (in units of channel std), ``seed``
    """

    kind: str
    axis: int = 0
    axes: Tuple[int, int] = DEFAULT_ROT_AXES
    k: int = 1
    values: Tuple[float, ...] = ()
    sigma: float = 0.0
    seed: int = 0

    @property
    def spatial(self) -> bool:
        return self.kind in SPATIAL_OPS


@dataclass(frozen=True)
class Transform:
    ops: Tuple[Op, ...] = field(default_factory=tuple)

    def spatial(self) -> "Transform":
        return Transform(tuple(op for op in self.ops if op.spatial))

    def inverse_spatial(self) -> "Transform":
        inv = []
        for op in reversed(self.spatial().ops):
            if op.kind == "rot90":
                inv.append(Op("rot90", axes=op.axes, k=(-op.k) % 4))
            else:
                inv.append(op)
        return Transform(tuple(inv))

    @property
    def is_identity(self) -> bool:
        return not self.ops


def _spatial(op: Op, vol: np.ndarray, offset: int) -> np.ndarray:
    if op.kind == "flip":
        return np.flip(vol, axis=op.axis + offset)
    a, b = (ax + offset for ax in op.axes)
    if op.k % 2 and vol.shape[a] != vol.shape[b]:
        raise ShapeError(f"rot90 over axes {op.axes} needs equal extents, got {vol.shape[a]} and {vol.shape[b]}")
    return np.rot90(vol, k=op.k, axes=(a, b))


def _channel_std(mods: np.ndarray) -> np.ndarray:
    return mods.reshape(len(mods), -1).std(axis=1)


def _intensity(op: Op, mods: np.ndarray) -> np.ndarray:
    n = len(mods)
    bshape = (n,) + (1,) * (mods.ndim - 1)
    if op.kind == "scale":
        return mods * np.asarray(op.values, dtype=mods.dtype).reshape(bshape)
    std = _channel_std(mods).astype(mods.dtype)
    if op.kind == "shift":
        return mods + (np.asarray(op.values, dtype=mods.dtype) * std).reshape(bshape)
    if op.kind == "noise":
        noise = np.random.default_rng(op.seed).normal(0.0, 1.0, size=mods.shape).astype(mods.dtype)
        return mods + noise * (op.sigma * std).reshape(bshape)
    raise ValueError(f"unknown op {op.kind!r}")


def apply_spatial(transform: Transform, volume: np.ndarray, channels_first: bool = False) -> np.ndarray:
    """Apply only the spatial ops of ``transform`` to ``volume``.

    With ``channels_first`` the leading axis is treated as channels (e.g. a
    softmax volume of shape (C, D, H, W)).
    """
    offset = 1 if channels_first else 0
    out = np.asarray(volume)
    for op in transform.ops:
        if op.spatial:
            out = _spatial(op, out, offset)
    return np.ascontiguousarray(out)


def apply(transform: Transform, modalities: np.ndarray, labels: Optional[np.ndarray] = None):
    """Apply ``transform`` to a (C, D, H, W) image and optionally its label map.

    Labels only receive the spatial ops.  Returns ``(modalities, labels)``.
    """
    mods = np.asarray(modalities)
    for op in transform.ops:
        mods = _spatial(op, mods, 1) if op.spatial else _intensity(op, mods)
    mods = np.ascontiguousarray(mods)
    if labels is not None:
        labels = apply_spatial(transform, labels)
    return mods, labels


def sample_train_transform(
    rng: np.random.Generator,
    n_channels: int = 4,
    rot_axes: Tuple[int, int] = DEFAULT_ROT_AXES,
    p_flip: float = 0.5,
    p_rot: float = 0.5,
    shift_range: float = 0.1,
    scale_range: Tuple[float, float] = (0.9, 1.1),
) -> Transform:
    """Random flips per axis, an optional in-plane rot90, per-channel shift and scale."""
    ops: List[Op] = []
    for axis in range(3):
        if rng.random() < p_flip:
            ops.append(Op("flip", axis=axis))
    if rng.random() < p_rot:
        ops.append(Op("rot90", axes=tuple(rot_axes), k=int(rng.integers(1, 4))))
    ops.append(Op("scale", values=tuple(rng.uniform(*scale_range, size=n_channels).tolist())))
    ops.append(Op("shift", values=tuple(rng.uniform(-shift_range, shift_range, size=n_channels).tolist())))
    return Transform(tuple(ops))


def sample_tta_transform(
    rng: np.random.Generator,
    sigma: float = DEFAULT_NOISE_SIGMA,
    **train_kwargs,
) -> Tuple[Transform, Transform]:
    """Training-style transform plus Gaussian noise, and its spatial inverse."""
    base = sample_train_transform(rng, **train_kwargs)
    ops = list(base.ops)
    if sigma > 0:
        ops.append(Op("noise", sigma=float(sigma), seed=int(rng.integers(2**31))))
    forward = Transform(tuple(ops))
    return forward, forward.inverse_spatial()
