"""Volume and coordinate data model shared by the pipeline.

Arrays are indexed ``(z, y, x)`` with ``z`` the axial slice. Landmarks use the
same order. Volumes are stored on disk as a flat little-endian payload plus a
small text header (``<name>.hdr`` next to ``<name>.raw``).
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Index3 = tuple[int, int, int]


class RegFreeError(Exception):
    """Base class for pipeline errors."""


class BoundsError(RegFreeError, IndexError):
    pass


class ShapeMismatchError(RegFreeError, ValueError):
    pass


class GeometryError(RegFreeError, ValueError):
    pass


class FormatError(RegFreeError, ValueError):
    """Malformed or unsupported file."""


class LeakageError(RegFreeError, ValueError):
    pass


class ConfigError(RegFreeError, ValueError):
    pass


_DTYPES = {"float32": np.float32, "float64": np.float64, "uint8": np.uint8}


def _as_shape(shape: Iterable[int]) -> Index3:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3:
        raise ShapeMismatchError(f"expected a 3D shape, got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeMismatchError(f"shape components must be >= 1, got {shape}")
    return shape  # type: ignore[return-value]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.base is not None or arr.flags.writeable:
        arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """Dense scalar grid with spacing in mm per voxel, ordered (sz, sy, sx).

    ``data`` is read-only; operations return new volumes.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if data.ndim != 3:
            raise ShapeMismatchError(f"volume data must be 3D, got ndim={data.ndim}")
        _as_shape(data.shape)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ShapeMismatchError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> Index3:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def astype(self, dtype) -> "VoxelVolume":
        return VoxelVolume(self.data.astype(dtype), self.spacing)

    def with_data(self, data: np.ndarray) -> "VoxelVolume":
        return VoxelVolume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """3D {0,1} grid stored as uint8. Used for implant labels and masking regions."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatchError(f"mask data must be 3D, got ndim={data.ndim}")
        _as_shape(data.shape)
        if data.dtype == bool:
            data = data.astype(np.uint8)
        elif not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8, copy=False)))

    @property
    def shape(self) -> Index3:
        return self.data.shape  # type: ignore[return-value]

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "BinaryMask":
        return cls(np.zeros(_as_shape(shape), dtype=np.uint8))


@dataclass(frozen=True)
class LandmarkTriple:
    """Implant vertex, midpoint and base in (z, y, x) voxel coordinates.

    The midpoint is carried through I/O but label generation only uses the
    vertex and base.
    """

    vertex: Index3
    midpoint: Index3
    base: Index3

    def __post_init__(self):
        for name in ("vertex", "midpoint", "base"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 3:
                raise GeometryError(f"{name} must have 3 coordinates, got {value}")
            object.__setattr__(self, name, value)
        if self.vertex[0] == self.base[0]:
            raise GeometryError("vertex and base lie on the same axial slice")

    def check_bounds(self, shape: Sequence[int]) -> None:
        shape = _as_shape(shape)
        for name in ("vertex", "midpoint", "base"):
            p = getattr(self, name)
            if not all(0 <= c < s for c, s in zip(p, shape)):
                raise BoundsError(f"{name} {p} outside volume of shape {shape}")

    def to_row(self) -> list[int]:
        return [*self.vertex, *self.midpoint, *self.base]


@dataclass(frozen=True)
class SlopePair:
    """Implant inclination: k1 = dx/dz (x-z plane), k2 = dy/dz (y-z plane)."""

    k1: float
    k2: float

    def __post_init__(self):
        k1, k2 = float(self.k1), float(self.k2)
        if not (np.isfinite(k1) and np.isfinite(k2)):
            raise ValueError(f"slopes must be finite, got ({k1}, {k2})")
        object.__setattr__(self, "k1", k1)
        object.__setattr__(self, "k2", k2)

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2], dtype=np.float64)


def crop(volume, origin: Sequence[int], size: Sequence[int]):
    """Copy the box ``[origin, origin + size)`` out of a volume or mask."""
    origin = tuple(int(o) for o in origin)
    size = _as_shape(size)
    if len(origin) != 3:
        raise BoundsError(f"origin must be 3D, got {origin}")
    for o, s, n in zip(origin, size, volume.shape):
        if o < 0 or o + s > n:
            raise BoundsError(f"crop origin={origin} size={size} exceeds shape {volume.shape}")
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    if isinstance(volume, BinaryMask):
        return BinaryMask(volume.data[sl].copy())
    return VoxelVolume(volume.data[sl].copy(), volume.spacing)


# --- file I/O ---------------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".raw", ".hdr") else path
    return stem.with_suffix(".hdr"), stem.with_suffix(".raw")


def _write_raw(path, arr: np.ndarray, spacing, kind: str) -> Path:
    hdr, raw = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    dtype_name = {np.dtype(v): k for k, v in _DTYPES.items()}[arr.dtype]
    raw.write_bytes(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    lines = [
        "format: regfree-raw 1",
        f"kind: {kind}",
        "shape: " + " ".join(str(s) for s in arr.shape),
        "spacing: " + " ".join(repr(float(s)) for s in spacing),
        f"dtype: {dtype_name}",
        "byteorder: little",
        f"payload: {raw.name}",
    ]
    hdr.write_text("\n".join(lines) + "\n")
    return hdr


def _read_header(hdr: Path) -> dict[str, str]:
    if not hdr.exists():
        raise FileNotFoundError(hdr)
    fields = {}
    for n, line in enumerate(hdr.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise FormatError(f"{hdr}:{n}: expected 'key: value'")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    for key in ("shape", "spacing", "dtype"):
        if key not in fields:
            raise FormatError(f"{hdr}: missing '{key}'")
    return fields


def _read_raw(path) -> tuple[np.ndarray, tuple[float, float, float], str]:
    hdr, raw = _paths(path)
    fields = _read_header(hdr)
    try:
        shape = _as_shape(int(s) for s in fields["shape"].split())
        spacing = tuple(float(s) for s in fields["spacing"].split())
    except ValueError as exc:
        raise FormatError(f"{hdr}: {exc}") from exc
    if len(spacing) != 3:
        raise FormatError(f"{hdr}: spacing needs 3 values")
    if fields["dtype"] not in _DTYPES:
        raise FormatError(f"{hdr}: unsupported dtype {fields['dtype']!r}")
    if fields.get("byteorder", "little") != "little":
        raise FormatError(f"{hdr}: only little-endian payloads are supported")
    if "payload" in fields:
        raw = hdr.parent / fields["payload"]
    dtype = np.dtype(_DTYPES[fields["dtype"]]).newbyteorder("<")
    payload = raw.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{raw}: payload has {len(payload)} bytes, header shape {shape} "
            f"({fields['dtype']}) needs {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return arr, spacing, fields.get("kind", "volume")


def _check_format(fmt: str) -> None:
    if fmt not in ("raw", "npy"):
        raise FormatError(f"unsupported volume format {fmt!r} (expected 'raw' or 'npy')")


def save_volume(volume: VoxelVolume, path, format: str = "raw") -> Path:
    """Write a volume. ``raw`` writes ``.hdr``/``.raw``; ``npy`` writes one ``.npz``."""
    _check_format(format)
    if format == "npy":
        path = Path(path).with_suffix(".npz")
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, data=volume.data, spacing=np.array(volume.spacing))
        return path
    return _write_raw(path, volume.data, volume.spacing, "volume")


def load_volume(path, format: str | None = None) -> VoxelVolume:
    format = format or ("npy" if str(path).endswith(".npz") else "raw")
    _check_format(format)
    if format == "npy":
        with np.load(path) as f:
            return VoxelVolume(f["data"], tuple(f["spacing"]))
    arr, spacing, _ = _read_raw(path)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32)
    return VoxelVolume(arr, spacing)


def save_mask(mask: BinaryMask, path, spacing=(1.0, 1.0, 1.0)) -> Path:
    return _write_raw(path, mask.data, spacing, "mask")


def load_mask(path) -> BinaryMask:
    arr, _, _ = _read_raw(path)
    if arr.dtype != np.uint8:
        arr = (arr > 0.5).astype(np.uint8)
    return BinaryMask(arr)


def load_landmarks(path) -> list[LandmarkTriple]:
    """Read implant landmarks: one implant per line, nine integers
    ``vz vy vx  mz my mx  bz by bx``. Blank lines and ``#`` comments are skipped."""
    records = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = re.split(r"[\s,]+", line)
        if len(parts) != 9:
            raise FormatError(f"{path}:{n}: expected 9 integers, got {len(parts)}")
        try:
            v = [int(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: {exc}") from exc
        records.append(LandmarkTriple(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9])))
    if not records:
        raise FormatError(f"{path}: no landmark records")
    return records


def save_landmarks(landmarks: Sequence[LandmarkTriple], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = ["# vz vy vx mz my mx bz by bx"]
    rows += [" ".join(str(v) for v in lm.to_row()) for lm in landmarks]
    path.write_text("\n".join(rows) + "\n")
    return path


def data_root() -> Path | None:
    root = os.environ.get("REGFREE_DATA_ROOT")
    return Path(root) if root else None
