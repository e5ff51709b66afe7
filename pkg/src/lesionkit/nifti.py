"""Minimal NIfTI-1 single-file (.nii) reader/writer.

Supports uncompressed little-endian single-file volumes only: 348-byte
header, 4-byte extension flag (zero), voxel data at offset 352. Datatypes:
uint8 (Mask), int16 (LabelVolume), float32 (ScalarVolume). Write then read
is bit-lossless for data stored in the matching on-disk datatype.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .volume import GridGeometry, LabelVolume, Mask, ScalarVolume, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16

_DTYPES = {
    DT_UINT8: np.dtype("<u1"),
    DT_INT16: np.dtype("<i2"),
    DT_FLOAT32: np.dtype("<f4"),
}
_BITPIX = {DT_UINT8: 8, DT_INT16: 16, DT_FLOAT32: 32}


class NiftiError(IOError):
    """Raised on malformed or unsupported NIfTI input."""


def _datatype_for(vol: Volume) -> int:
    if isinstance(vol, Mask):
        return DT_UINT8
    if isinstance(vol, LabelVolume):
        return DT_INT16
    return DT_FLOAT32


def write_nifti(vol: Volume, path) -> None:
    """Write a volume as an uncompressed NIfTI-1 single file."""
    geom = vol.geometry
    code = _datatype_for(vol)
    dtype = _DTYPES[code]
    if isinstance(vol, LabelVolume) and vol.data.max(initial=0) > np.iinfo(np.int16).max:
        raise NiftiError("label values exceed the int16 on-disk range")

    hdr = bytearray(VOX_OFFSET)  # header + zero extension flag
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *geom.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, _BITPIX[code])
    struct.pack_into("<8f", hdr, 76, 0.0, *geom.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<h", hdr, 254, 1)    # sform_code
    sx, sy, sz = geom.spacing
    ox, oy, oz = geom.origin
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = MAGIC

    payload = np.asarray(vol.data).astype(dtype).tobytes(order="F")
    Path(path).write_bytes(bytes(hdr) + payload)


def read_nifti(path) -> Volume:
    """Read a NIfTI-1 single file written by :func:`write_nifti`.

    The volume class is chosen by on-disk datatype: uint8 -> Mask,
    int16 -> LabelVolume, float32 -> ScalarVolume.
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"truncated header: {len(raw)} bytes < {HEADER_SIZE}")
    if raw[344:348] != MAGIC:
        raise NiftiError("not NIfTI-1 single-file (magic != 'n+1')")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError(f"not NIfTI-1 single-file (sizeof_hdr = {sizeof_hdr})")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiError(f"only 3D volumes supported, got dim[0] = {dim[0]}")
    (code,) = struct.unpack_from("<h", raw, 70)
    if code not in _DTYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset_f,) = struct.unpack_from("<f", raw, 108)
    (scl_slope,) = struct.unpack_from("<f", raw, 112)
    (scl_inter,) = struct.unpack_from("<f", raw, 116)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        raise NiftiError(
            f"intensity rescaling not supported (slope={scl_slope}, inter={scl_inter})"
        )
    srow_x = struct.unpack_from("<4f", raw, 280)
    srow_y = struct.unpack_from("<4f", raw, 296)
    srow_z = struct.unpack_from("<4f", raw, 312)

    dims = (int(dim[1]), int(dim[2]), int(dim[3]))
    geom = GridGeometry(
        dims=dims,
        spacing=(float(pixdim[1]), float(pixdim[2]), float(pixdim[3])),
        origin=(float(srow_x[3]), float(srow_y[3]), float(srow_z[3])),
    )

    offset = int(vox_offset_f)
    dtype = _DTYPES[code]
    nbytes = geom.voxel_count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiError(
            f"truncated payload: need {nbytes} bytes at offset {offset}, "
            f"file has {len(raw) - offset}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=geom.voxel_count, offset=offset)
    data = flat.reshape(dims, order="F")

    if code == DT_UINT8:
        return Mask(geom, data != 0)
    if code == DT_INT16:
        return LabelVolume(geom, data)
    return ScalarVolume(geom, data.astype(np.float64))
