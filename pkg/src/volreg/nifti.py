"""Single-file NIfTI-1 reader/writer for the subset this package needs.

Supported: magic "n+1\\0", 348-byte little-endian header, payload at offset
352, scalar 3D images in uint8/int16/uint16/float32/float64.  scl_slope and
scl_inter are applied on load when slope is nonzero.  Orientation transforms
(qform/sform) are ignored; spacing comes from pixdim, the origin is carried
through qoffset_x/y/z, and a scale-percentage annotation rides in descrip.
Writes are always float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .volume import Volume3

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
FLOAT32_CODE = 16

_DTYPES = {2: "u1", 4: "i2", 16: "f4", 64: "f8", 512: "u2"}
_BITPIX = {2: 8, 4: 16, 16: 32, 64: 64, 512: 16}

_HDR = struct.Struct(
    "<i10s18sihcc8h3fhhhh8ffffhcc4f2i80s24shh3f3f4f4f4f16s4s"
)
assert _HDR.size == HEADER_SIZE


class NiftiFormatError(ValueError):
    """Raised for files this NIfTI-1 subset cannot represent or parse."""


@dataclass
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    datatype: int
    scale_pct: int | None = None

    def __post_init__(self) -> None:
        if self.datatype not in _DTYPES:
            raise NiftiFormatError(f"unsupported NIfTI datatype code {self.datatype}")


def _parse_descrip(descrip: bytes) -> int | None:
    text = descrip.split(b"\x00", 1)[0].decode("ascii", "replace")
    for token in text.split():
        if token.startswith("scale="):
            try:
                return int(token[6:])
            except ValueError:
                return None
    return None


def _unpack_header(raw: bytes) -> tuple[VolumeHeader, float, float, float]:
    fields = _HDR.unpack(raw)
    sizeof_hdr = fields[0]
    dim = fields[7:15]
    datatype = fields[19]
    pixdim = fields[22:30]
    vox_offset = fields[30]
    scl_slope = fields[31]
    scl_inter = fields[32]
    descrip = fields[42]
    qoffset = fields[49:52]
    magic = fields[-1]

    if magic == MAGIC_PAIR:
        raise NiftiFormatError(
            "two-file NIfTI ('ni1') is not supported; need single-file 'n+1'")
    if magic != MAGIC_SINGLE:
        raise NiftiFormatError(f"bad NIfTI magic {magic!r}")
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiFormatError(
            f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE} "
            "(big-endian files are not supported)")
    if dim[0] != 3:
        raise NiftiFormatError(f"expected a 3D image, got dim[0]={dim[0]}")
    if datatype not in _DTYPES:
        raise NiftiFormatError(f"unsupported NIfTI datatype code {datatype}")
    dims = (int(dim[1]), int(dim[2]), int(dim[3]))
    if min(dims) < 1:
        raise NiftiFormatError(f"non-positive dims {dims}")
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise NiftiFormatError(f"non-positive pixdim spacing {spacing}")
    header = VolumeHeader(dims, spacing, tuple(float(q) for q in qoffset),
                          int(datatype), _parse_descrip(descrip))
    return header, float(vox_offset), float(scl_slope), float(scl_inter)


def load_header(path) -> VolumeHeader:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"file shorter than a NIfTI-1 header: {path}")
    return _unpack_header(raw)[0]


def load_volume(path) -> Volume3:
    """Read a single-file NIfTI-1 volume into a float32 Volume3."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_SIZE:
        raise NiftiFormatError(f"file shorter than a NIfTI-1 header: {path}")
    header, vox_offset, scl_slope, scl_inter = _unpack_header(blob[:HEADER_SIZE])
    offset = int(round(vox_offset))
    if offset < HEADER_SIZE:
        raise NiftiFormatError(f"vox_offset {vox_offset} overlaps the header")
    nx, ny, nz = header.dims
    dtype = np.dtype("<" + _DTYPES[header.datatype])
    need = nx * ny * nz * dtype.itemsize
    payload = blob[offset:offset + need]
    if len(payload) < need:
        raise NiftiFormatError(
            f"payload truncated: need {need} bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    if scl_slope != 0.0 and (scl_slope, scl_inter) != (1.0, 0.0):
        values = values * scl_slope + scl_inter
    if not np.isfinite(values).all():
        raise NiftiFormatError("payload contains non-finite intensities")
    data = values.astype(np.float32).reshape((nx, ny, nz), order="F")
    return Volume3(np.ascontiguousarray(data), header.spacing, header.origin)


def save_volume(vol: Volume3, path, scale_pct: int | None = None) -> None:
    """Write a float32 single-file NIfTI-1; load_volume round-trips bitwise."""
    nx, ny, nz = vol.dims
    descrip = "volreg" + (f" scale={scale_pct}" if scale_pct is not None else "")
    header = _HDR.pack(
        HEADER_SIZE,                  # sizeof_hdr
        b"", b"",                     # data_type, db_name (unused)
        0, 0, b"r", b"\x00",          # extents, session_error, regular, dim_info
        3, nx, ny, nz, 1, 1, 1, 1,    # dim
        0.0, 0.0, 0.0,                # intent_p1..p3
        0,                            # intent_code
        FLOAT32_CODE, _BITPIX[FLOAT32_CODE], 0,   # datatype, bitpix, slice_start
        1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0,    # pixdim (qfac first)
        float(VOX_OFFSET), 1.0, 0.0,  # vox_offset, scl_slope, scl_inter
        0, b"\x00", b"\x03",          # slice_end, slice_code, xyzt_units (micron)
        0.0, 0.0, 0.0, 0.0,           # cal_max, cal_min, slice_duration, toffset
        0, 0,                         # glmax, glmin
        descrip.encode("ascii")[:80], b"",        # descrip, aux_file
        0, 0,                         # qform_code, sform_code
        0.0, 0.0, 0.0,                # quatern_b/c/d
        *vol.origin,                  # qoffset_x/y/z
        vol.spacing[0], 0.0, 0.0, 0.0,
        0.0, vol.spacing[1], 0.0, 0.0,
        0.0, 0.0, vol.spacing[2], 0.0,
        b"", MAGIC_SINGLE,
    )
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)
