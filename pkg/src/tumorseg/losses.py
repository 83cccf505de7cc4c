"""Soft Dice loss and Generalized Dice Loss (GDL).

Both operate on torch tensors and are differentiable in the predictions.
For GDL, predictions and one-hot targets have the class axis at dim 1
(``(N, L, ...)``) or at dim 0 for a single unbatched sample (``(L, ...)``).
"""

from __future__ import annotations

from typing import Optional

import torch

from .errors import ShapeError

DEFAULT_EPS = 1e-5


def dice_loss(p: torch.Tensor, g: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Binary soft Dice loss ``1 - 2 sum(p g) / (sum(p^2) + sum(g^2) + eps)``."""
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {tuple(p.shape)} != target shape {tuple(g.shape)}")
    g = g.to(p.dtype)
    num = 2.0 * torch.sum(p * g)
    den = torch.sum(p * p) + torch.sum(g * g) + eps
    return 1.0 - num / den


def class_weights(target: torch.Tensor, power: float = 1.0, class_dim: int = 1) -> torch.Tensor:
    """Inverse-volume class weights ``1 / |g_l|^power``.

    Classes absent from the target get the largest weight among present
    classes instead of an infinite one.
    """
    dims = [d for d in range(target.dim()) if d != class_dim]
    volume = torch.sum(target, dim=dims)
    present = volume > 0
    w = torch.zeros_like(volume)
    w[present] = 1.0 / volume[present] ** power
    if present.any():
        w[~present] = w[present].max()
    return w


def generalized_dice_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    eps: float = DEFAULT_EPS,
    weight_power: float = 1.0,
    weights: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Generalized Dice Loss summed over the batch.

    ``1 - 2 sum_l w_l sum_i p_li g_li / (sum_l w_l sum_i (p_li + g_li) + eps)``
    with ``w_l = 1 / (sum_i g_li)^weight_power``.  The default weights each
    class by its inverse volume; ``weight_power=2`` gives the squared-volume
    weighting of the original GDL formulation.  Explicit per-class
    ``weights`` override the volume-based ones.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    class_dim = 1 if pred.dim() >= 5 else 0
    target = target.to(pred.dtype)
    if weights is None:
        w = class_weights(target.detach(), weight_power, class_dim)
    else:
        w = torch.as_tensor(weights, dtype=pred.dtype)
    dims = [d for d in range(pred.dim()) if d != class_dim]
    intersect = torch.sum(pred * target, dim=dims)
    total = torch.sum(pred + target, dim=dims)
    return 1.0 - 2.0 * torch.sum(w * intersect) / (torch.sum(w * total) + eps)


def one_hot_labels(labels: torch.Tensor, class_values=(0, 1, 2, 4)) -> torch.Tensor:
    """Map a label tensor of shape (..., D, H, W) to one-hot with the class axis
    inserted before the spatial axes."""
    channels = [(labels == v) for v in class_values]
    return torch.stack(channels, dim=-4).to(torch.float32)
