"""Segmentation, classification and confusion losses on probability tensors.

Every loss is reduced with a mean over batch elements (and voxels, for the
cross entropy), so magnitudes do not depend on batch size.
"""

from __future__ import annotations

import torch

DICE_EPS = 1e-5
LOG_FLOOR = 1e-12


def dice_loss(fg_prob: torch.Tensor, label: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss ``1 - (2TP + eps) / (2TP + FP + FN + eps)``.

    Both tensors are ``(batch, *spatial)``; counts are summed per batch element
    and the per-element losses averaged.
    """
    if fg_prob.shape != label.shape:
        raise ValueError(f"shape mismatch {tuple(fg_prob.shape)} vs {tuple(label.shape)}")
    label = label.to(fg_prob.dtype)
    dims = tuple(range(1, fg_prob.ndim))
    tp = (fg_prob * label).sum(dims)
    fp = (fg_prob * (1 - label)).sum(dims)
    fn = ((1 - fg_prob) * label).sum(dims)
    return (1 - (2 * tp + eps) / (2 * tp + fp + fn + eps)).mean()


def cross_entropy(probs: torch.Tensor, targets: torch.Tensor, floor: float = LOG_FLOOR) -> torch.Tensor:
    """Mean of ``-sum_n t_n log y_n`` with class on dim 1.

    ``targets`` is either integer class indices shaped like ``probs`` without
    dim 1, or a one-hot / soft tensor shaped like ``probs``.
    """
    logp = torch.log(probs.clamp_min(floor))
    if targets.dtype in (torch.int64, torch.int32, torch.uint8, torch.bool):
        picked = logp.gather(1, targets.long().unsqueeze(1))
        return -picked.mean()
    if targets.shape != probs.shape:
        raise ValueError("soft targets must match the probability tensor shape")
    return -(targets.to(probs.dtype) * logp).sum(1).mean()


def segmentation_loss(probs: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Dice on the foreground channel plus voxel cross entropy.

    ``probs`` is ``(batch, 2, *spatial)`` and ``label`` ``(batch, *spatial)``.
    """
    return dice_loss(probs[:, 1], label) + cross_entropy(probs, label.long())


def confusion_loss(posterior: torch.Tensor) -> torch.Tensor:
    """KL divergence of the domain posterior from the uniform distribution.

    Zero for an uninformative posterior, ``log N_d`` for a one-hot one. Input is
    ``(batch, N_d)``; the batch mean is returned.
    """
    n = posterior.shape[-1]
    return torch.xlogy(posterior, posterior * n).sum(-1).mean()
