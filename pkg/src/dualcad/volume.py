"""3D volumes on a physical grid, resampling and binary morphology.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. On disk the buffer
is written x-fastest (Fortran order), which is the same memory layout
NIfTI uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, GeometryError, InputError, ParameterError

INTERPOLATION_ORDERS = {"nearest": 0, "trilinear": 1, "cubic-bspline": 3}


def _as_vec3(values, name):
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise GeometryError(f"{name} must have 3 components, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Grid:
    """Voxel grid geometry: dims, spacing (mm), origin (mm), direction cosines."""

    dims: tuple
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise GeometryError(f"dims must be three positive counts, got {self.dims}")
        spacing = _as_vec3(self.spacing, "spacing")
        if not np.all(spacing > 0) or not np.all(np.isfinite(spacing)):
            raise GeometryError(f"spacing must be positive, got {tuple(spacing)}")
        origin = _as_vec3(self.origin, "origin")
        direction = np.array(self.direction, dtype=float).reshape(3, 3)
        if abs(abs(np.linalg.det(direction)) - 1.0) > 1e-6:
            raise GeometryError("direction matrix must have |det| == 1")
        direction.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in origin))
        object.__setattr__(self, "direction", direction)

    @property
    def voxel_to_world(self):
        m = np.eye(4)
        m[:3, :3] = self.direction @ np.diag(self.spacing)
        m[:3, 3] = self.origin
        return m

    @property
    def world_to_voxel(self):
        return np.linalg.inv(self.voxel_to_world)

    @property
    def extent_mm(self):
        return np.array(self.dims) * np.array(self.spacing)

    @property
    def center(self):
        """World coordinates of the grid centre."""
        idx = (np.array(self.dims) - 1) / 2.0
        return self.voxel_to_world[:3, :3] @ idx + self.voxel_to_world[:3, 3]

    def world_points(self):
        """World coordinates of every voxel centre, shape (nx, ny, nz, 3)."""
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), axis=-1)
        m = self.voxel_to_world
        return idx @ m[:3, :3].T + m[:3, 3]

    def same_as(self, other, atol=1e-5):
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.origin, other.origin, atol=atol)
            and np.allclose(self.direction, other.direction, atol=atol)
        )

    def to_dict(self):
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": list(self.origin),
            "direction": self.direction.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["dims"], d["spacing"], d.get("origin", (0, 0, 0)), d.get("direction", np.eye(3)))


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable scalar image on a :class:`Grid`.

    Binary masks and label maps are plain volumes with integer data.
    """

    data: np.ndarray
    grid: Grid

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InputError(f"volume data must be 3D, got shape {data.shape}")
        if tuple(data.shape) != self.grid.dims:
            raise GeometryError(f"data shape {data.shape} does not match grid dims {self.grid.dims}")
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise InputError("volume contains non-finite intensities")
        if data.dtype.kind not in "fiub":
            raise InputError(f"unsupported voxel dtype {data.dtype}")
        if data.flags.writeable:
            data = data.copy()
            data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), direction=None):
        data = np.asarray(data)
        grid = Grid(data.shape, spacing, origin, np.eye(3) if direction is None else direction)
        return cls(data, grid)

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def origin(self):
        return self.grid.origin

    @property
    def direction(self):
        return self.grid.direction

    def with_data(self, data):
        """New volume on the same grid."""
        return Volume(np.asarray(data), self.grid)

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.spacing}, dtype={self.data.dtype})"


@dataclass(frozen=True, eq=False)
class AffineTransform3D:
    """``y = linear @ x + translation``, mapping fixed-space to moving-space world points."""

    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        linear = np.array(self.linear, dtype=float).reshape(3, 3)
        translation = _as_vec3(self.translation, "translation")
        if not np.all(np.isfinite(linear)) or not np.all(np.isfinite(translation)):
            raise GeometryError("transform has non-finite entries")
        if abs(np.linalg.det(linear)) < 1e-12:
            raise GeometryError("transform linear part is singular")
        linear.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotation(cls, angles_deg=(0, 0, 0), translation=(0, 0, 0), scale=(1, 1, 1), center=(0, 0, 0)):
        """Rotation about x, then y, then z (degrees), with scaling about ``center``."""
        ax, ay, az = np.deg2rad(angles_deg)
        rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
        ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
        rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
        linear = rz @ ry @ rx @ np.diag(np.broadcast_to(np.asarray(scale, float), 3))
        c = _as_vec3(center, "center")
        return cls(linear, c + _as_vec3(translation, "translation") - linear @ c)

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.linear.T + self.translation

    def inverse(self):
        return AffineTransform3D.from_matrix(np.linalg.inv(self.matrix))

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return AffineTransform3D.from_matrix(self.matrix @ other.matrix)

    def to_dict(self):
        return {"linear": self.linear.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["linear"], d["translation"])


def _grid_of(target):
    if isinstance(target, Volume):
        return target.grid
    if isinstance(target, Grid):
        return target
    raise GeometryError(f"expected a Grid or Volume as target, got {type(target).__name__}")


def _index_map(source_grid, target_grid, xform):
    """Matrix/offset taking target voxel indices to source voxel indices."""
    m = source_grid.world_to_voxel @ xform.matrix @ target_grid.voxel_to_world
    return m[:3, :3], m[:3, 3]


def resample(vol, target, xform=None, interp="trilinear", mode="constant"):
    """Sample ``vol`` at ``xform``-mapped world positions of the target grid.

    Points falling outside ``vol`` are filled with 0 (``mode="constant"``).
    Other scipy boundary modes can be requested for internal use.
    """
    if interp not in INTERPOLATION_ORDERS:
        raise ParameterError(f"unknown interpolation {interp!r}; choose from {sorted(INTERPOLATION_ORDERS)}")
    if not isinstance(vol, Volume):
        raise InputError("resample expects a Volume")
    target_grid = _grid_of(target)
    if xform is None:
        xform = AffineTransform3D.identity()
    if abs(np.linalg.det(xform.linear)) < 1e-12:
        raise GeometryError("transform is not invertible")
    matrix, offset = _index_map(vol.grid, target_grid, xform)
    order = INTERPOLATION_ORDERS[interp]
    src = vol.data
    out_dtype = src.dtype if order == 0 or src.dtype.kind == "f" else np.float64
    work = src.astype(np.float64) if order > 0 else src
    if (
        target_grid.dims == vol.grid.dims
        and np.allclose(matrix, np.eye(3), atol=1e-12)
        and np.allclose(offset, 0, atol=1e-12)
    ):
        return Volume(src.copy(), target_grid)
    out = ndimage.affine_transform(
        work, matrix, offset=offset, output_shape=target_grid.dims, order=order, mode=mode, cval=0.0
    )
    return Volume(out.astype(out_dtype, copy=False), target_grid)


def regrid_inplane(vol, target_inplane_mm):
    """Resample x/y to ``target_inplane_mm`` spacing, keeping z and the field of view."""
    if target_inplane_mm <= 0:
        raise ParameterError("target in-plane spacing must be positive")
    nx, ny, nz = vol.dims
    if nx < 2 or ny < 2:
        raise GeometryError(f"in-plane extent too small to regrid: {nx}x{ny}")
    sx, sy, sz = vol.spacing
    t = float(target_inplane_mm)
    new_dims = (max(1, int(round(nx * sx / t))), max(1, int(round(ny * sy / t))), nz)
    # keep the outer voxel edge fixed: first centre sits half a new voxel inside it
    shift = np.array([(t - sx) / 2.0, (t - sy) / 2.0, 0.0])
    origin = np.asarray(vol.origin) + vol.direction @ shift
    grid = Grid(new_dims, (t, t, sz), origin, vol.direction)
    return resample(vol, grid, interp="trilinear", mode="nearest")


def _raw(mask):
    return mask.data if isinstance(mask, Volume) else np.asarray(mask)


def _wrap(like, arr):
    return Volume(arr, like.grid) if isinstance(like, Volume) else arr


def _check_binary(arr):
    if arr.dtype == bool:
        return arr
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise InputError(f"mask values must be 0/1, found {vals[:5]}")
    return arr.astype(bool)


def ball_offsets(radius):
    """Integer offsets within Euclidean distance ``radius`` of the origin."""
    r = int(np.floor(radius))
    ax = np.arange(-r, r + 1)
    dx, dy, dz = np.meshgrid(ax, ax, ax, indexing="ij")
    inside = dx**2 + dy**2 + dz**2 <= radius**2 + 1e-9
    return inside


def dilate(mask, radius_voxels):
    """Euclidean-ball dilation in voxel units.

    A voxel is set iff some input voxel lies within ``radius_voxels``
    (distance measured between voxel indices, ignoring spacing).
    """
    if not radius_voxels > 0:
        raise ParameterError(f"dilation radius must be positive, got {radius_voxels}")
    arr = _check_binary(_raw(mask))
    if not arr.any():
        return _wrap(mask, np.zeros(arr.shape, np.uint8))
    dist = ndimage.distance_transform_edt(~arr)
    out = (dist <= radius_voxels + 1e-9).astype(np.uint8)
    return _wrap(mask, out)


def _structure(connectivity):
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return np.ones((3, 3, 3), bool)
    raise ParameterError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask, connectivity=26):
    """Label connected components; returns ``(labels, count)``.

    Labels are numbered 1..K in x-fastest raster order of each
    component's first voxel.
    """
    arr = _check_binary(_raw(mask))
    # scipy numbers components in C order; transposing makes x the fastest axis
    labels, count = ndimage.label(arr.transpose(2, 1, 0), structure=_structure(connectivity))
    labels = np.ascontiguousarray(labels.transpose(2, 1, 0)).astype(np.int32)
    return _wrap(mask, labels), int(count)


def zscore_normalize(vol):
    data = vol.data.astype(np.float64)
    sd = data.std()
    if sd == 0 or np.ptp(data) == 0:
        raise DegenerateInputError("cannot z-score a constant volume")
    out = (data - data.mean()) / sd
    return vol.with_data(out)
