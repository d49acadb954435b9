"""Overlapped sliding-window inference over whole volumes."""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np
import torch

from .core import SlopePair


def axis_origins(length: int, window: int, overlap: float) -> list[int]:
    if window > length:
        raise ValueError(f"window {window} larger than axis length {length}")
    stride = math.ceil(window * (1.0 - overlap))
    origins = list(range(0, length - window + 1, stride))
    if origins[-1] + window < length:
        origins.append(length - window)
    return origins


def tile_plan(
    volume_shape: Sequence[int], window: Sequence[int], overlap: float = 0.25
) -> list[tuple[int, int, int]]:
    """Window origins in (z, y, x) raster order.

    Stride is ``ceil(window * (1 - overlap))``; the last window on each axis is
    pulled back to touch the far boundary.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if len(volume_shape) != len(window):
        raise ValueError("window and volume must have the same rank")
    per_axis = [axis_origins(int(n), int(w), overlap) for n, w in zip(volume_shape, window)]
    return list(itertools.product(*per_axis))


def gaussian_weight(window: Sequence[int], sigma_scale: float = 0.125) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(w) - (w - 1) / 2 for w in window], indexing="ij")
    sq = sum((g / (sigma_scale * w)) ** 2 for g, w in zip(grids, window))
    w = np.exp(-0.5 * sq)
    return np.maximum(w / w.max(), 1e-3)


def _pad_to(volume: np.ndarray, window) -> tuple[np.ndarray, tuple[slice, ...]]:
    pads, crop = [], []
    for n, w in zip(volume.shape, window):
        total = max(w - n, 0)
        lo = total // 2
        pads.append((lo, total - lo))
        crop.append(slice(lo, lo + n))
    if not any(p != (0, 0) for p in pads):
        return volume, tuple(slice(None) for _ in volume.shape)
    return np.pad(volume, pads), tuple(crop)


def _call(model, tile: np.ndarray, dtype):
    x = torch.tensor(tile, dtype=dtype)[None, None]
    with torch.no_grad():
        out = model(x)
    prob, slopes = out if isinstance(out, tuple) else (out, None)
    prob = prob.detach().reshape(tile.shape).double().numpy()
    if slopes is not None:
        slopes = slopes.detach().reshape(-1)[:2].double().numpy()
    return prob, slopes


def _model_dtype(model) -> torch.dtype:
    try:
        return next(model.parameters()).dtype
    except (AttributeError, StopIteration):
        return torch.float32


def _windows(volume, model, window, overlap, blend):
    if blend not in ("uniform", "gaussian"):
        raise ValueError(f"unknown blend mode {blend!r}")
    volume = np.asarray(volume)
    if np.isscalar(window):
        window = (window,) * volume.ndim
    window = tuple(int(w) for w in window)
    padded, unpad = _pad_to(volume, window)
    plan = tile_plan(padded.shape, window, overlap)
    weight = gaussian_weight(window) if blend == "gaussian" else np.ones(window)

    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    dtype = _model_dtype(model)
    acc = np.zeros(padded.shape)
    norm = np.zeros(padded.shape)
    slopes = []
    try:
        # accumulate in plan order so the result does not depend on scheduling
        for origin in plan:
            sl = tuple(slice(o, o + w) for o, w in zip(origin, window))
            prob, k = _call(model, padded[sl], dtype)
            acc[sl] += weight * prob
            norm[sl] += weight
            slopes.append(k)
    finally:
        if was_training:
            model.train()
    return (acc / norm)[unpad], plan, slopes, window, unpad


def sliding_window_infer(
    volume,
    model: Callable,
    window: Sequence[int] | int = 128,
    overlap: float = 0.25,
    blend: str = "uniform",
) -> np.ndarray:
    """Blend window predictions into a whole-volume probability map.

    ``model`` maps a ``(1, 1, d, h, w)`` tensor to a probability tensor of the
    same spatial size, or to a ``(probability, slopes)`` tuple. Volumes smaller
    than the window are zero-padded and cropped back afterwards.
    """
    data = volume.data if hasattr(volume, "data") else volume
    return _windows(data, model, window, overlap, blend)[0].astype(np.float32)


def predict_volume(volume, model, window=128, overlap=0.25, blend="uniform"):
    """Probability map plus a whole-volume slope estimate.

    The slope comes from the window whose centre lies nearest the centroid of
    the predicted implant (probability > 0.5); with no foreground, from the
    window nearest the volume centre.
    """
    data = volume.data if hasattr(volume, "data") else volume
    prob, plan, slopes, window, unpad = _windows(data, model, window, overlap, blend)
    slope = None
    if any(k is not None for k in slopes):
        fg = np.argwhere(prob > 0.5)
        target = fg.mean(0) if len(fg) else (np.array(prob.shape) - 1) / 2.0
        offset = np.array([s.start or 0 for s in unpad])
        centres = np.array(plan) + (np.array(window) - 1) / 2.0 - offset
        best = int(np.argmin(((centres - target) ** 2).sum(1)))
        if slopes[best] is not None:
            slope = SlopePair(*slopes[best])
    return prob.astype(np.float32), slope
