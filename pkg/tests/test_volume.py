import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcad.errors import DegenerateInputError, GeometryError, InputError, ParameterError
from dualcad.volume import (
    AffineTransform3D,
    Grid,
    Volume,
    ball_offsets,
    connected_components,
    dilate,
    regrid_inplane,
    resample,
    zscore_normalize,
)


def brute_dilate(mask, radius):
    """Reference dilation: OR of the mask shifted by every ball offset."""
    out = np.zeros_like(mask, dtype=bool)
    r = int(np.floor(radius))
    nx, ny, nz = mask.shape
    for dx, dy, dz in itertools.product(range(-r, r + 1), repeat=3):
        if dx * dx + dy * dy + dz * dz > radius * radius:
            continue
        src = mask[max(0, -dx) : nx - max(0, dx), max(0, -dy) : ny - max(0, dy), max(0, -dz) : nz - max(0, dz)]
        out[max(0, dx) : nx - max(0, -dx), max(0, dy) : ny - max(0, -dy), max(0, dz) : nz - max(0, -dz)] |= src
    return out


def bfs_labels(mask, connectivity):
    """Reference labelling by breadth-first search in x-fastest raster order."""
    if connectivity == 26:
        nbrs = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    else:
        nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    labels = np.zeros(mask.shape, int)
    k = 0
    nx, ny, nz = mask.shape
    for z, y, x in itertools.product(range(nz), range(ny), range(nx)):
        if mask[x, y, z] and not labels[x, y, z]:
            k += 1
            labels[x, y, z] = k
            stack = [(x, y, z)]
            while stack:
                p = stack.pop()
                for o in nbrs:
                    q = (p[0] + o[0], p[1] + o[1], p[2] + o[2])
                    if 0 <= q[0] < nx and 0 <= q[1] < ny and 0 <= q[2] < nz and mask[q] and not labels[q]:
                        labels[q] = k
                        stack.append(q)
    return labels, k


class TestGeometry:
    def test_invalid_spacing(self):
        with pytest.raises(GeometryError):
            Grid((2, 2, 2), (1, 0, 1))

    def test_direction_must_be_unimodular(self):
        with pytest.raises(GeometryError):
            Grid((2, 2, 2), (1, 1, 1), direction=np.diag([1, 1, 2]))

    def test_nan_rejected(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(InputError):
            Volume.from_array(data)

    def test_identity_transform(self):
        t = AffineTransform3D.identity()
        assert np.array_equal(t.linear, np.eye(3))
        assert np.array_equal(t.translation, np.zeros(3))

    def test_singular_transform(self):
        with pytest.raises(GeometryError):
            AffineTransform3D(np.zeros((3, 3)), np.zeros(3))

    def test_inverse_compose(self):
        t = AffineTransform3D.from_rotation((5, -3, 10), (1, 2, 3), (1.02, 0.97, 1.0), center=(4, 5, 6))
        ident = t.compose(t.inverse())
        assert np.allclose(ident.matrix, np.eye(4))


class TestResample:
    def test_identity_same_grid(self):
        rng = np.random.default_rng(0)
        vol = Volume.from_array(rng.random((6, 5, 4)), spacing=(1.2, 0.8, 3.0), origin=(3, -2, 1))
        for interp in ("nearest", "trilinear", "cubic-bspline"):
            out = resample(vol, vol, AffineTransform3D.identity(), interp)
            assert np.array_equal(out.data, vol.data)
            assert out.grid.same_as(vol.grid)

    def test_one_voxel_shift(self):
        rng = np.random.default_rng(1)
        data = rng.random((5, 4, 3))
        vol = Volume.from_array(data, spacing=(2.0, 1.0, 1.0))
        # output(x) = input(x + 1 voxel)
        out = resample(vol, vol, AffineTransform3D(np.eye(3), (2.0, 0, 0)), "trilinear")
        assert np.allclose(out.data[:-1], data[1:])
        assert np.all(out.data[-1] == 0)

    def test_half_voxel_ramp(self):
        vol = Volume.from_array(np.array([0.0, 2.0, 4.0]).reshape(3, 1, 1))
        out = resample(vol, vol, AffineTransform3D(np.eye(3), (0.5, 0, 0)), "trilinear")
        assert np.allclose(out.data[:2, 0, 0], [1.0, 3.0])

    def test_non_invertible(self):
        vol = Volume.from_array(np.zeros((2, 2, 2)))

        class Bad:
            linear = np.zeros((3, 3))

        with pytest.raises((GeometryError, AttributeError)):
            resample(vol, vol, Bad())

    def test_rotated_target_grid_round_trip(self):
        # smooth field sampled through a rotation and back is recovered in the interior
        grid = Grid((24, 24, 24), (1, 1, 1), (-11.5, -11.5, -11.5))
        pts = grid.world_points()
        field = np.exp(-np.sum(pts**2, axis=-1) / 60.0)
        vol = Volume(field, grid)
        t = AffineTransform3D.from_rotation((0, 0, 10))
        fwd = resample(vol, grid, t, "cubic-bspline")
        back = resample(fwd, grid, t.inverse(), "cubic-bspline")
        core = (slice(6, 18),) * 3
        assert np.max(np.abs(back.data[core] - field[core])) < 5e-3


class TestRegrid:
    def test_already_at_target(self):
        rng = np.random.default_rng(2)
        vol = Volume.from_array(rng.random((8, 8, 3)), spacing=(0.5, 0.5, 4))
        out = regrid_inplane(vol, 0.5)
        assert out.dims == vol.dims
        assert np.allclose(out.data, vol.data, atol=1e-6)
        assert out.grid.same_as(vol.grid)

    def test_factor_two(self):
        vol = Volume.from_array(np.random.default_rng(3).random((10, 10, 2)), spacing=(1.0, 1.0, 5.0))
        out = regrid_inplane(vol, 0.5)
        assert out.dims == (20, 20, 2)
        assert np.allclose(out.grid.extent_mm, vol.grid.extent_mm)
        # outer voxel edges coincide
        assert np.isclose(out.origin[0] - 0.25, vol.origin[0] - 0.5)

    @given(st.floats(0.3, 2.0), st.floats(-5, 5))
    @settings(max_examples=20, deadline=None)
    def test_constant(self, spacing, value):
        vol = Volume.from_array(np.full((6, 7, 2), value), spacing=(spacing, 1.1, 3))
        out = regrid_inplane(vol, 0.5)
        assert np.allclose(out.data, value)
        assert np.all(np.abs(out.grid.extent_mm - vol.grid.extent_mm) <= np.array(out.spacing) + 1e-9)

    def test_degenerate(self):
        with pytest.raises(GeometryError):
            regrid_inplane(Volume.from_array(np.zeros((1, 5, 5))), 0.5)


class TestDilate:
    def test_single_voxel_radius_one(self):
        m = np.zeros((5, 5, 5), np.uint8)
        m[2, 2, 2] = 1
        assert dilate(m, 1).sum() == 7

    def test_empty(self):
        assert dilate(np.zeros((4, 4, 4), np.uint8), 3).sum() == 0

    def test_two_points_fuse(self):
        m = np.zeros((3, 20, 3), np.uint8)
        m[1, 4, 1] = m[1, 14, 1] = 1
        _, k = connected_components(dilate(m, 6))
        assert k == 1

    def test_bad_radius(self):
        with pytest.raises(ParameterError):
            dilate(np.zeros((2, 2, 2), np.uint8), 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for radius in (1, 1.5, 2.3, 6):
            m = rng.random((14, 12, 10)) < 0.01
            assert np.array_equal(dilate(m, radius).astype(bool), brute_dilate(m, radius))

    def test_volume_wrapping(self):
        m = Volume.from_array(np.eye(4, dtype=np.uint8)[:, :, None].repeat(2, axis=2))
        out = dilate(m, 1)
        assert isinstance(out, Volume) and out.grid is m.grid

    def test_composition_rule(self):
        # Discrete balls compose by Minkowski sum, which is contained in the
        # ball of the summed radius; this is the exact rule asserted.
        rng = np.random.default_rng(5)
        for _ in range(50):
            m = rng.random((16, 16, 16)) < 0.005
            a, b = rng.choice([1, 1.5, 2, 2.5]), rng.choice([1, 1.5, 2])
            composed = dilate(dilate(m, a), b).astype(bool)
            ba, bb = ball_offsets(a), ball_offsets(b)
            ra, rb = ba.shape[0] // 2, bb.shape[0] // 2
            mink = np.zeros((2 * (ra + rb) + 1,) * 3, bool)
            for off in np.argwhere(ba):
                mink[off[0] : off[0] + bb.shape[0], off[1] : off[1] + bb.shape[1], off[2] : off[2] + bb.shape[2]] |= bb
            from scipy import ndimage

            expected = ndimage.binary_dilation(m, structure=mink)
            assert np.array_equal(composed, expected)
            assert np.all(composed <= dilate(m, a + b).astype(bool))
            assert np.all(m <= composed)


class TestComponents:
    def test_empty(self):
        assert connected_components(np.zeros((3, 3, 3), np.uint8))[1] == 0

    def test_corner_touching(self):
        m = np.zeros((3, 3, 3), np.uint8)
        m[0, 0, 0] = m[1, 1, 1] = 1
        assert connected_components(m, 26)[1] == 1
        assert connected_components(m, 6)[1] == 2

    def test_against_bfs(self):
        rng = np.random.default_rng(6)
        for conn in (6, 26):
            for _ in range(5):
                m = rng.random((9, 8, 7)) < 0.25
                labels, k = connected_components(m, conn)
                ref, kref = bfs_labels(m, conn)
                assert k == kref
                assert np.array_equal(labels, ref)

    def test_sizes_sum(self):
        m = np.random.default_rng(7).random((10, 10, 10)) < 0.3
        labels, k = connected_components(m)
        sizes = np.bincount(labels.ravel())[1:]
        assert sizes.sum() == m.sum() and len(sizes) == k and np.all(sizes > 0)

    def test_bad_connectivity(self):
        with pytest.raises(ParameterError):
            connected_components(np.zeros((2, 2, 2), np.uint8), 18)


class TestZscore:
    def test_two_values(self):
        out = zscore_normalize(Volume.from_array(np.array([0.0, 2.0, 0.0, 2.0]).reshape(2, 2, 1)))
        assert np.allclose(sorted(set(np.round(out.data.ravel(), 9))), [-1, 1])

    def test_three_values(self):
        out = zscore_normalize(Volume.from_array(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)))
        assert np.allclose(out.data.ravel(), [-1.2247449, 0, 1.2247449], atol=1e-6)

    def test_idempotent(self):
        rng = np.random.default_rng(8)
        once = zscore_normalize(Volume.from_array(rng.normal(5, 3, (5, 5, 5))))
        twice = zscore_normalize(once)
        assert np.allclose(once.data, twice.data, atol=1e-6)

    def test_constant(self):
        with pytest.raises(DegenerateInputError):
            zscore_normalize(Volume.from_array(np.ones((2, 2, 2))))

    def test_random_volumes(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            shape = tuple(rng.integers(2, 9, 3))
            out = zscore_normalize(Volume.from_array(rng.normal(rng.normal(0, 50), rng.uniform(0.1, 20), shape)))
            assert abs(out.data.mean()) < 1e-6 and abs(out.data.std() - 1) < 1e-6
