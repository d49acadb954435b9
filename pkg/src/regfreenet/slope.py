"""Ground-truth implant slopes from labelled voxels.

k1 and k2 are the ordinary least-squares slopes of x and y regressed on the
axial coordinate z, computed in closed form from running sums.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import BinaryMask, GeometryError, SlopePair


def implant_coordinates(label: BinaryMask) -> np.ndarray:
    """Return an ``(N, 3)`` float64 array of ``(x, y, z)`` for every set voxel.

    Rows follow (z, y, x) scan order.
    """
    zyx = np.argwhere(label.data)
    if len(zyx) == 0:
        raise ValueError("label is empty")
    return zyx[:, ::-1].astype(np.float64)


def compute_slopes(coords) -> SlopePair:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"expected (N, 3) coordinates, got {coords.shape}")
    n = len(coords)
    if n < 2:
        raise GeometryError("need at least two coordinates")
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    sz = z.sum()
    denom = n * np.dot(z, z) - sz * sz
    # exact zero only when all z agree (integer voxel coords); guard float noise too
    if denom <= 1e-12 * max(1.0, n * np.dot(z, z)):
        raise GeometryError("all coordinates share one axial slice; slope undefined")
    k1 = (n * np.dot(x, z) - x.sum() * sz) / denom
    k2 = (n * np.dot(y, z) - y.sum() * sz) / denom
    return SlopePair(k1, k2)


def slopes_from_label(
    label: BinaryMask, spacing: Sequence[float] | None = None
) -> SlopePair:
    """Slopes of a labelled implant.

    Ground truth uses voxel indices. Passing ``spacing`` (sz, sy, sx) in mm
    gives physical slopes instead.
    """
    coords = implant_coordinates(label)
    if spacing is not None:
        sz, sy, sx = (float(s) for s in spacing)
        coords = coords * np.array([sx, sy, sz])
    return compute_slopes(coords)
