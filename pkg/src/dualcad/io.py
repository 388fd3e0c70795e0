"""Volume persistence.

Two formats are supported:

* native: ``<name>.vol.raw`` (little-endian, x-fastest voxel buffer) next to
  ``<name>.vol.json`` holding the grid and dtype. Round trips are bit exact.
* NIfTI-1 single file (``.nii``), float32 data only.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .volume import Grid, Volume

NATIVE_SUFFIX = ".vol.json"
RAW_SUFFIX = ".vol.raw"

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC_OFFSET = 344
NIFTI_DATA_OFFSET = 352
NIFTI_FLOAT32 = 16
MAX_VOXELS = 2**31


def _native_paths(path):
    path = Path(path)
    name = path.name
    for suffix in (NATIVE_SUFFIX, RAW_SUFFIX):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    stem = path.with_name(name)
    return stem.with_name(name + NATIVE_SUFFIX), stem.with_name(name + RAW_SUFFIX)


def detect_format(path):
    s = str(path)
    if s.endswith(".nii"):
        return "nifti"
    if s.endswith(NATIVE_SUFFIX) or s.endswith(RAW_SUFFIX) or not Path(s).suffix:
        return "native"
    raise FormatError(f"unrecognised volume file extension: {path}")


def save_volume(vol, path):
    """Write ``vol``; the format follows the extension (``.nii`` or native)."""
    if detect_format(path) == "nifti":
        save_nifti(vol, path)
    else:
        save_native(vol, path)


def load_volume(path):
    if detect_format(path) == "nifti":
        return load_nifti(path)
    return load_native(path)


def save_native(vol, path):
    header_path, raw_path = _native_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    dtype = vol.data.dtype.newbyteorder("<")
    header = {"format": "dualcad-volume", "version": 1, "dtype": dtype.str, **vol.grid.to_dict()}
    header_path.write_text(json.dumps(header, indent=1))
    raw_path.write_bytes(vol.data.astype(dtype).tobytes(order="F"))
    return header_path


def load_native(path):
    header_path, raw_path = _native_paths(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad native header {header_path}: {exc.msg}", exc.pos) from exc
    dims = [int(d) for d in header["dims"]]
    if len(dims) != 3 or min(dims) < 1 or np.prod(dims, dtype=object) > MAX_VOXELS:
        raise FormatError(f"invalid dims {dims} in {header_path}")
    dtype = np.dtype(header["dtype"])
    buf = raw_path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"raw buffer holds {len(buf)} bytes, expected {expected}", min(len(buf), expected))
    data = np.frombuffer(buf, dtype=dtype).reshape(dims, order="F")
    data = data.astype(dtype.newbyteorder("="))
    return Volume(data, Grid.from_dict(header))


def _quaternion_from_rotation(r):
    """NIfTI quaternion (b, c, d) and qfac for a direction matrix."""
    r = np.array(r, dtype=float)
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] *= -1
    a = 1.0 + r[0, 0] + r[1, 1] + r[2, 2]
    if a > 0.5:
        a = 0.5 * np.sqrt(a)
        b = 0.25 * (r[2, 1] - r[1, 2]) / a
        c = 0.25 * (r[0, 2] - r[2, 0]) / a
        d = 0.25 * (r[1, 0] - r[0, 1]) / a
    else:
        xd = 1.0 + r[0, 0] - (r[1, 1] + r[2, 2])
        yd = 1.0 + r[1, 1] - (r[0, 0] + r[2, 2])
        zd = 1.0 + r[2, 2] - (r[0, 0] + r[1, 1])
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (r[0, 1] + r[1, 0]) / b
            d = 0.25 * (r[0, 2] + r[2, 0]) / b
            a = 0.25 * (r[2, 1] - r[1, 2]) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (r[0, 1] + r[1, 0]) / c
            d = 0.25 * (r[1, 2] + r[2, 1]) / c
            a = 0.25 * (r[0, 2] - r[2, 0]) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (r[0, 2] + r[2, 0]) / d
            c = 0.25 * (r[1, 2] + r[2, 1]) / d
            a = 0.25 * (r[1, 0] - r[0, 1]) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return (b, c, d), qfac


def _rotation_from_quaternion(b, c, d, qfac):
    a = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a) if a > 1e-7 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    r[:, 2] *= qfac
    return r


def save_nifti(vol, path):
    """Write a single-file NIfTI-1 image (float32, sform and qform set)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hdr = bytearray(NIFTI_DATA_OFFSET)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, NIFTI_FLOAT32, 32)
    (b, c, d), qfac = _quaternion_from_rotation(vol.direction)
    struct.pack_into("<8f", hdr, 76, qfac, *vol.spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_DATA_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # NIFTI_UNITS_MM
    struct.pack_into("<hh", hdr, 252, 1, 1)
    struct.pack_into("<6f", hdr, 256, b, c, d, *vol.origin)
    affine = vol.grid.voxel_to_world
    for row in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * row, *affine[row])
    hdr[NIFTI_MAGIC_OFFSET : NIFTI_MAGIC_OFFSET + 4] = b"n+1\x00"
    data = vol.data.astype("<f4").tobytes(order="F")
    path.write_bytes(bytes(hdr) + data)
    return path


def load_nifti(path):
    raw = Path(path).read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise FormatError(f"truncated NIfTI header: {len(raw)} bytes", len(raw))
    if struct.unpack_from("<i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        e = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        e = ">"
    else:
        raise FormatError("sizeof_hdr is not 348", 0)
    magic = raw[NIFTI_MAGIC_OFFSET : NIFTI_MAGIC_OFFSET + 4]
    if magic != b"n+1\x00":
        raise FormatError(f"bad NIfTI magic {magic!r}, expected b'n+1\\x00'", NIFTI_MAGIC_OFFSET)
    dim = struct.unpack_from(e + "8h", raw, 40)
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise FormatError(f"dim[0] = {ndim} out of range", 40)
    if ndim > 3 and any(n != 1 for n in dim[4 : ndim + 1]):
        raise FormatError("only 3D volumes are supported", 48)
    dims = [dim[i] if i <= ndim else 1 for i in (1, 2, 3)]
    if min(dims) < 1:
        raise FormatError(f"non-positive dimension {dims}", 42)
    n_vox = int(np.prod(dims, dtype=np.int64))
    if n_vox > MAX_VOXELS:
        raise FormatError(f"dimension overflow: {dims}", 42)
    datatype, bitpix = struct.unpack_from(e + "hh", raw, 70)
    if datatype != NIFTI_FLOAT32 or bitpix != 32:
        raise FormatError(f"unsupported datatype {datatype} (only float32)", 70)
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(e + "f", raw, 108)[0])
    if vox_offset < NIFTI_HEADER_SIZE:
        raise FormatError(f"vox_offset {vox_offset} lies inside the header", 108)
    slope, inter = struct.unpack_from(e + "ff", raw, 112)
    qform_code, sform_code = struct.unpack_from(e + "hh", raw, 252)
    end = vox_offset + 4 * n_vox
    if len(raw) < end:
        raise FormatError(f"truncated data: file has {len(raw)} bytes, need {end}", len(raw))

    spacing = np.abs(np.array(pixdim[1:4], dtype=float))
    spacing[spacing == 0] = 1.0
    if sform_code > 0:
        rows = np.array([struct.unpack_from(e + "4f", raw, 280 + 16 * r) for r in range(3)], dtype=float)
        scaled = rows[:, :3]
        spacing = np.linalg.norm(scaled, axis=0)
        direction = scaled / spacing
        origin = rows[:, 3]
    elif qform_code > 0:
        b, c, d, ox, oy, oz = struct.unpack_from(e + "6f", raw, 256)
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        direction = _rotation_from_quaternion(b, c, d, qfac)
        origin = np.array([ox, oy, oz])
    else:
        direction = np.eye(3)
        origin = np.zeros(3)
    # float32 storage leaves direction slightly non-orthonormal; project back
    u, _, vt = np.linalg.svd(direction)
    direction = u @ vt
    data = np.frombuffer(raw, dtype=e + "f4", count=n_vox, offset=vox_offset).reshape(dims, order="F")
    data = data.astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * np.float32(slope if slope != 0 else 1.0) + np.float32(inter)
    return Volume(data, Grid(dims, spacing, origin, direction))
