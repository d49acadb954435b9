"""Training objectives: soft Dice + cross-entropy for position, L1 for slope."""

from __future__ import annotations

import torch

EPS = 1e-7
DICE_SMOOTH = 1e-5


def _check(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def _per_sample(t: torch.Tensor) -> torch.Tensor:
    # (B, ...) for batched input; a bare 3D volume counts as one sample
    return t.reshape(1, -1) if t.dim() <= 3 else t.reshape(t.shape[0], -1)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - (2*sum(Y*P) + s) / (sum(Y^2) + sum(P^2) + s).

    Sums run over every voxel of the batch, so crops without implant voxels
    only add their false positives instead of a constant loss of one.
    """
    _check(pred, target)
    p, y = pred.reshape(-1), target.reshape(-1).to(pred.dtype)
    inter = (p * y).sum()
    denom = (y * y).sum() + (p * p).sum()
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def ce_loss(pred: torch.Tensor, target: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Binary cross-entropy on probabilities clamped to [EPS, 1 - EPS].

    ``normalize=False`` sums over voxels instead of averaging.
    """
    _check(pred, target)
    p = _per_sample(pred).clamp(EPS, 1.0 - EPS)
    y = _per_sample(target).to(pred.dtype)
    ce = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    per_sample = ce.mean(1) if normalize else ce.sum(1)
    return per_sample.mean()


def seg_loss(pred, target, ce_normalize: bool = True) -> torch.Tensor:
    return dice_loss(pred, target) + ce_loss(pred, target, normalize=ce_normalize)


def slope_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """|k1 - k1'| + |k2 - k2'| per implant, averaged over the batch."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    _check(pred, target)
    if not (torch.isfinite(pred).all() and torch.isfinite(target).all()):
        raise ValueError("slope inputs must be finite")
    return (pred - target).abs().reshape(-1, 2).sum(1).mean()


def total_loss(
    seg_pred,
    seg_target,
    slope_pred=None,
    slope_target=None,
    use_spb: bool = True,
    slope_weight: float = 1.0,
    ce_normalize: bool = True,
) -> torch.Tensor:
    loss = seg_loss(seg_pred, seg_target, ce_normalize)
    if use_spb:
        if slope_pred is None or slope_target is None:
            raise ValueError("use_spb=True needs slope prediction and target")
        loss = loss + slope_weight * slope_loss(slope_pred, slope_target)
    return loss
