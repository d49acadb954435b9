"""Dice and IoU on binarized predictions, plus per-directory evaluation."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import BinaryMask, ShapeMismatchError, load_mask, load_volume


def _bool(m) -> np.ndarray:
    return m.as_bool() if isinstance(m, BinaryMask) else np.asarray(m).astype(bool)


def _counts(pred, target) -> tuple[int, int, int]:
    p, t = _bool(pred), _bool(target)
    if p.shape != t.shape:
        raise ShapeMismatchError(f"pred {p.shape} vs target {t.shape}")
    inter = int(np.count_nonzero(p & t))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(t))


def dice_score(pred, target) -> float:
    inter, np_, nt = _counts(pred, target)
    if np_ + nt == 0:
        return 1.0
    return 2.0 * inter / (np_ + nt)


def iou_score(pred, target) -> float:
    inter, np_, nt = _counts(pred, target)
    union = np_ + nt - inter
    if union == 0:
        return 1.0
    return inter / union


def binarize(prob, threshold: float = 0.5) -> BinaryMask:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return BinaryMask(np.asarray(prob) > threshold)


def _stems(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob("*.hdr"))}


def evaluate_dirs(pred_dir, gt_dir, threshold: float = 0.5) -> dict:
    """Score every prediction in ``pred_dir`` against the same-named label in ``gt_dir``.

    Dataset scores are the unweighted mean over scans.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _stems(pred_dir), _stems(gt_dir)
    missing = sorted(set(preds) - set(gts))
    if missing:
        raise FileNotFoundError(f"no ground truth for {missing} in {gt_dir}")
    if not preds:
        raise FileNotFoundError(f"no predictions (*.hdr) in {pred_dir}")
    scans = []
    for stem, path in preds.items():
        pred = binarize(load_volume(path).data, threshold)
        gt = load_mask(gts[stem])
        scans.append({"scan": stem, "dice": dice_score(pred, gt), "iou": iou_score(pred, gt)})
    return {
        "threshold": threshold,
        "n_scans": len(scans),
        "dice": float(np.mean([s["dice"] for s in scans])),
        "iou": float(np.mean([s["iou"] for s in scans])),
        "scans": scans,
    }
