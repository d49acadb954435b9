"""Cylindrical implant labels and implant masking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    BinaryMask,
    GeometryError,
    LandmarkTriple,
    ShapeMismatchError,
    VoxelVolume,
    _as_shape,
)


@dataclass(frozen=True)
class MaskingConfig:
    radius: float = 14
    fill_value: float = 0.0
    max_offset: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")
        if self.max_offset < 0:
            raise ValueError(f"max_offset must be >= 0, got {self.max_offset}")


def axis_center(landmarks: LandmarkTriple, z: int) -> tuple[float, float]:
    """In-plane (y, x) position of the implant axis on slice ``z``.

    Linear interpolation between vertex and base.
    """
    (vz, vy, vx), (bz, by, bx) = landmarks.vertex, landmarks.base
    t = (z - vz) / (bz - vz)
    return vy + t * (by - vy), vx + t * (bx - vx)


def rasterize_implant(
    landmarks: LandmarkTriple, shape: Sequence[int], radius: float = 14
) -> BinaryMask:
    """Sweep a disk of ``radius`` voxels along the implant axis.

    Every axial slice from the vertex slice to the base slice (inclusive) gets
    the voxels whose in-plane distance to the axis is <= radius.
    """
    shape = _as_shape(shape)
    landmarks.check_bounds(shape)
    vz, bz = landmarks.vertex[0], landmarks.base[0]
    if vz == bz:
        raise GeometryError("implant axis has zero axial extent")
    out = np.zeros(shape, dtype=np.uint8)
    yy = np.arange(shape[1], dtype=np.float64)[:, None]
    xx = np.arange(shape[2], dtype=np.float64)[None, :]
    r2 = float(radius) ** 2
    for z in range(min(vz, bz), max(vz, bz) + 1):
        cy, cx = axis_center(landmarks, z)
        out[z] = (yy - cy) ** 2 + (xx - cx) ** 2 <= r2
    return BinaryMask(out)


def rasterize_all(
    landmarks: Sequence[LandmarkTriple], shape: Sequence[int], radius: float = 14
) -> BinaryMask:
    """Union of the cylinders of several implants in one scan."""
    out = np.zeros(_as_shape(shape), dtype=bool)
    for lm in landmarks:
        out |= rasterize_implant(lm, shape, radius).as_bool()
    return BinaryMask(out)


def mask_implant(
    volume: VoxelVolume, implant_mask: BinaryMask, config: MaskingConfig | None = None
) -> VoxelVolume:
    """Replace the implant region with ``config.fill_value``."""
    config = config or MaskingConfig()
    if volume.shape != implant_mask.shape:
        raise ShapeMismatchError(f"volume {volume.shape} vs mask {implant_mask.shape}")
    fill = volume.dtype.type(config.fill_value)
    return volume.with_data(np.where(implant_mask.as_bool(), fill, volume.data))


def shift_mask(mask: BinaryMask, offset: Sequence[int]) -> BinaryMask:
    """Translate by an integer (dz, dy, dx); voxels leaving the grid are dropped."""
    src = mask.data
    out = np.zeros_like(src)
    dst_sl, src_sl = [], []
    for d, n in zip(offset, src.shape):
        d = int(d)
        if abs(d) >= n:
            return BinaryMask(out)
        dst_sl.append(slice(max(d, 0), n + min(d, 0)))
        src_sl.append(slice(max(-d, 0), n - max(d, 0)))
    out[tuple(dst_sl)] = src[tuple(src_sl)]
    return BinaryMask(out)


def draw_offset(max_offset: int, rng: np.random.Generator) -> tuple[int, int, int]:
    if max_offset == 0:
        return (0, 0, 0)
    return tuple(int(v) for v in rng.integers(-max_offset, max_offset + 1, size=3))


def jitter_mask(
    implant_mask: BinaryMask,
    config: MaskingConfig,
    rng: np.random.Generator | None = None,
) -> BinaryMask:
    """Randomly translate the masking region by up to ``max_offset`` per axis.

    Falls back to a generator seeded with ``config.rng_seed`` when no ``rng``
    is given.
    """
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    return shift_mask(implant_mask, draw_offset(config.max_offset, rng))
