"""Deterministic synthetic jaw phantoms for desk-scale training and tests.

A phantom is a curved row of bright cylindrical teeth standing in a bone
plateau. One tooth is replaced by an implant cylinder with known landmarks and
tilt; its label is rasterized with :func:`labelgen.rasterize_implant`, the
same routine used for real annotations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    BinaryMask,
    GeometryError,
    LandmarkTriple,
    SlopePair,
    VoxelVolume,
    _as_shape,
    save_landmarks,
    save_mask,
    save_volume,
)
from .labelgen import rasterize_implant

AIR, BONE, TOOTH, IMPLANT = 0.0, 0.3, 0.8, 1.0


@dataclass
class Phantom:
    volume: VoxelVolume
    landmarks: LandmarkTriple
    label: BinaryMask
    tilt: SlopePair


def random_tilt(rng: np.random.Generator, max_slope: float = 0.4) -> SlopePair:
    """Slope magnitudes uniform in [0, max_slope] with random sign per plane."""
    mag = rng.uniform(0.0, max_slope, size=2)
    sign = rng.choice([-1.0, 1.0], size=2)
    return SlopePair(*(mag * sign))


def arch_centres(shape, n_teeth: int, rng: np.random.Generator) -> np.ndarray:
    """(y, x) tooth centres on a parabolic arch opening towards +y."""
    _, h, w = shape
    xs = np.linspace(0.18 * w, 0.82 * w, n_teeth)
    u = (xs - w / 2) / (w / 2)
    ys = 0.62 * h - 0.3 * h * u**2
    jitter = rng.uniform(-0.5, 0.5, size=(n_teeth, 2))
    return np.stack([ys, xs], 1) + jitter


def generate_phantom(
    seed: int,
    shape: Sequence[int] = (64, 64, 64),
    n_teeth: int = 5,
    gap_index: int = 2,
    tilt: SlopePair | None = None,
    radius: float = 4,
    noise: float = 0.02,
) -> Phantom:
    """Build one phantom. ``tilt=None`` draws a clinical-range tilt from the seed."""
    shape = _as_shape(shape)
    if min(shape) < 32:
        raise GeometryError(f"phantom shape must be at least 32^3, got {shape}")
    if not 0 <= gap_index < n_teeth:
        raise GeometryError(f"gap_index {gap_index} outside [0, {n_teeth})")
    rng = np.random.default_rng(seed)
    if tilt is None:
        tilt = random_tilt(rng, 0.3)
    d, h, w = shape
    centres = arch_centres(shape, n_teeth, rng)

    zz = np.arange(d)[:, None, None]
    yy = np.arange(h)[None, :, None]
    xx = np.arange(w)[None, None, :]

    vol = np.full(shape, AIR, dtype=np.float32)
    # bone: band around the arch curve between the alveolar crest and the jaw floor
    u = (xx - w / 2) / (w / 2)
    arch_y = 0.62 * h - 0.3 * h * u**2
    band = (np.abs(yy - arch_y) <= 0.14 * h) & (np.abs(u) <= 0.95)
    crest, floor = int(0.35 * d), int(0.92 * d)
    vol[(zz >= crest) & (zz < floor) & band] = BONE

    tooth_r = max(2.0, 0.045 * min(h, w))
    tooth_top, tooth_bottom = int(0.12 * d), int(0.75 * d)
    for i, (cy, cx) in enumerate(centres):
        if i == gap_index:
            continue
        r = tooth_r * rng.uniform(0.85, 1.15)
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        vol[(zz >= tooth_top) & (zz <= tooth_bottom) & disk] = TOOTH

    vz = int(round(0.3 * d))
    length = int(round(0.5 * d))
    bz = vz + length
    cy, cx = np.round(centres[gap_index]).astype(int)
    vertex = (vz, int(cy), int(cx))
    base = (bz, int(round(cy + tilt.k2 * length)), int(round(cx + tilt.k1 * length)))
    midpoint = tuple(int(round((a + b) / 2)) for a, b in zip(vertex, base))
    for p in (vertex, base):
        if not (radius <= p[1] < h - radius and radius <= p[2] < w - radius and 0 <= p[0] < d):
            raise GeometryError(f"implant point {p} (radius {radius}) leaves the volume {shape}")
    landmarks = LandmarkTriple(vertex, midpoint, base)
    label = rasterize_implant(landmarks, shape, radius)
    vol[label.as_bool()] = IMPLANT

    if noise > 0:
        vol = vol + rng.normal(0.0, noise, size=shape).astype(np.float32)
        vol[label.as_bool()] = IMPLANT
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    return Phantom(VoxelVolume(vol, (0.2, 0.2, 0.2)), landmarks, label, tilt)


def write_dataset(
    out_dir,
    n: int = 8,
    shape: Sequence[int] = (64, 64, 64),
    seed: int = 0,
    radius: float = 4,
    test_fraction: float = 0.25,
) -> Path:
    """Write ``n`` phantoms (volume, landmarks, label) and a manifest.

    Each phantom is its own patient. The last ``test_fraction`` of them form
    the test split. Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_test = int(round(n * test_fraction))
    rows = ["# volume\tlandmarks\tsplit\tpatient_id"]
    for i in range(n):
        ph = generate_phantom(seed * 1000 + i, shape, radius=radius)
        name = f"phantom_{i:03d}"
        save_volume(ph.volume, out / "volumes" / name)
        save_landmarks([ph.landmarks], out / "landmarks" / f"{name}.txt")
        save_mask(ph.label, out / "labels" / name, ph.volume.spacing)
        split = "test" if i >= n - n_test else "train"
        rows.append(f"volumes/{name}.hdr\tlandmarks/{name}.txt\t{split}\tP{i:03d}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest
