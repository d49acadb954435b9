import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regfreenet.core import BinaryMask, GeometryError, LandmarkTriple, VoxelVolume
from regfreenet.labelgen import (
    MaskingConfig,
    jitter_mask,
    mask_implant,
    rasterize_all,
    rasterize_implant,
    shift_mask,
)


def scan_oracle(lm, shape, radius):
    """Visit every voxel and test its in-plane distance to the interpolated axis."""
    (vz, vy, vx), (bz, by, bx) = lm.vertex, lm.base
    z0, z1 = min(vz, bz), max(vz, bz)
    out = set()
    for z in range(shape[0]):
        if not z0 <= z <= z1:
            continue
        t = (z - vz) / (bz - vz)
        cy, cx = vy + t * (by - vy), vx + t * (bx - vx)
        for y in range(shape[1]):
            for x in range(shape[2]):
                if (y - cy) ** 2 + (x - cx) ** 2 <= radius**2:
                    out.add((z, y, x))
    return out


def as_set(mask):
    return set(map(tuple, np.argwhere(mask.data).tolist()))


VERTICAL = LandmarkTriple((2, 8, 8), (6, 8, 8), (10, 8, 8))


def test_vertical_cylinder_count():
    m = rasterize_implant(VERTICAL, (16, 16, 16), 2)
    assert m.count() == 117
    assert m.count() == len(scan_oracle(VERTICAL, (16, 16, 16), 2))
    for z in range(16):
        assert m.data[z].sum() == (13 if 2 <= z <= 10 else 0)


def test_half_voxel_radius_single_voxel_per_slice():
    m = rasterize_implant(VERTICAL, (16, 16, 16), 0.5)
    assert m.count() == 9
    assert all(m.data[z, 8, 8] == 1 for z in range(2, 11))


def test_degenerate_axis():
    with pytest.raises(GeometryError):
        rasterize_implant(LandmarkTriple((4, 1, 1), (4, 2, 2), (4, 3, 3)), (8, 8, 8), 2)


def test_base_above_vertex_is_allowed():
    up = rasterize_implant(LandmarkTriple((10, 8, 8), (6, 8, 8), (2, 8, 8)), (16, 16, 16), 2)
    np.testing.assert_array_equal(up.data, rasterize_implant(VERTICAL, (16, 16, 16), 2).data)


def test_random_r14_matches_scan():
    rng = np.random.default_rng(7)
    shape = (24, 40, 40)
    for _ in range(3):
        v = (int(rng.integers(0, 8)), int(rng.integers(0, 40)), int(rng.integers(0, 40)))
        b = (int(rng.integers(12, 24)), int(rng.integers(0, 40)), int(rng.integers(0, 40)))
        lm = LandmarkTriple(v, v, b)
        assert as_set(rasterize_implant(lm, shape, 14)) == scan_oracle(lm, shape, 14)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 11), st.integers(0, 11), st.integers(0, 11),
    st.integers(0, 11), st.integers(0, 11), st.integers(0, 11),
    st.floats(0.5, 5.0),
)
def test_distance_bound_exact(vz, vy, vx, bz, by, bx, radius):
    if vz == bz:
        bz = (vz + 1) % 12
    lm = LandmarkTriple((vz, vy, vx), (vz, vy, vx), (bz, by, bx))
    m = rasterize_implant(lm, (12, 12, 12), radius)
    assert as_set(m) == scan_oracle(lm, (12, 12, 12), radius)


def test_rasterize_all_is_union():
    a = LandmarkTriple((1, 4, 4), (3, 4, 4), (5, 4, 4))
    b = LandmarkTriple((6, 10, 10), (8, 10, 10), (10, 10, 10))
    u = rasterize_all([a, b], (16, 16, 16), 2)
    assert as_set(u) == as_set(rasterize_implant(a, (16, 16, 16), 2)) | as_set(
        rasterize_implant(b, (16, 16, 16), 2)
    )


@pytest.fixture
def volume():
    return VoxelVolume(np.random.default_rng(3).uniform(0.1, 1.0, (16, 16, 16)).astype(np.float32))


def test_mask_zero_mask_identity(volume):
    out = mask_implant(volume, BinaryMask.zeros(volume.shape))
    np.testing.assert_array_equal(out.data, volume.data)


def test_mask_all_ones(volume):
    out = mask_implant(volume, BinaryMask(np.ones(volume.shape, np.uint8)), MaskingConfig(fill_value=-1))
    assert (out.data == -1).all()


def test_mask_changes_exactly_popcount(volume):
    m = rasterize_implant(VERTICAL, volume.shape, 2)
    out = mask_implant(volume, m)
    assert int((out.data != volume.data).sum()) == 117
    assert (out.data[m.as_bool()] == 0).all()
    np.testing.assert_array_equal(out.data[~m.as_bool()], volume.data[~m.as_bool()])


def test_mask_shape_mismatch(volume):
    with pytest.raises(ValueError):
        mask_implant(volume, BinaryMask.zeros((8, 8, 8)))


def test_masking_config_validation():
    with pytest.raises(ValueError):
        MaskingConfig(radius=0.5)
    with pytest.raises(ValueError):
        MaskingConfig(max_offset=-1)


def test_jitter_zero_offset_identity():
    m = rasterize_implant(VERTICAL, (16, 16, 16), 2)
    out = jitter_mask(m, MaskingConfig(max_offset=0), np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, m.data)


def test_shift_translates_interior_cylinder():
    m = rasterize_implant(VERTICAL, (16, 16, 16), 2)
    out = shift_mask(m, (0, 0, 3))
    assert out.count() == 117
    assert as_set(out) == {(z, y, x + 3) for z, y, x in as_set(m)}


def test_shift_drops_voxels_leaving_grid():
    m = rasterize_implant(VERTICAL, (16, 16, 16), 2)
    out = shift_mask(m, (0, 0, 7))  # x in 6..10 -> 13..17, columns 16 and 17 fall off
    expected = {(z, y, x + 7) for z, y, x in as_set(m) if x + 7 < 16}
    assert as_set(out) == expected
    assert shift_mask(m, (20, 0, 0)).count() == 0


def test_jitter_is_a_bounded_translation():
    m = rasterize_implant(VERTICAL, (16, 16, 16), 2)
    cfg = MaskingConfig(max_offset=2)  # keeps the shifted cylinder inside the grid
    src = np.argwhere(m.data).mean(0)
    for seed in range(20):
        out = jitter_mask(m, cfg, np.random.default_rng(seed))
        d = np.argwhere(out.data).mean(0) - src
        assert out.count() == 117
        assert np.allclose(d, np.round(d)) and np.abs(d).max() <= 2


def test_jitter_deterministic():
    m = rasterize_implant(VERTICAL, (16, 16, 16), 2)
    cfg = MaskingConfig(max_offset=5, rng_seed=11)
    a = jitter_mask(m, cfg)
    b = jitter_mask(m, cfg)
    np.testing.assert_array_equal(a.data, b.data)
    c = jitter_mask(m, cfg, np.random.default_rng(4))
    d = jitter_mask(m, cfg, np.random.default_rng(4))
    np.testing.assert_array_equal(c.data, d.data)
