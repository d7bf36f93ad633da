"""NIfTI-1 ingestion: fixed 348-byte header, both byte orders.

Only the fields this pipeline needs are read (dims, datatype, pixdim,
vox_offset, scl_slope/inter, magic).  Byte order is resolved through the
sizeof_hdr sentinel: the int32 at offset 0 must equal 348 under exactly one
of the two byte orders.  Gzip-compressed payloads are rejected up front;
callers are expected to decompress first.

For 'n+1' single-file streams the voxel payload starts at vox_offset
(clamped to >= 352).  A 'ni1' header is accepted when its .img payload is
concatenated after the header in the same byte stream.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagic, TruncatedPayload, UnsupportedDatatype

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# NIfTI datatype code -> numpy kind
DATATYPES = {2: "u1", 4: "i2", 16: "f4", 512: "u2"}
BITPIX = {2: 8, 4: 16, 16: 32, 512: 16}


def parse_nifti(data: bytes):
    """Parse a NIfTI-1 byte stream into (volume (D,H,W) float32, spacing (mm)).

    Spacing is returned as (slice, row, col).  scl_slope/scl_inter scaling
    is applied when present.
    """
    if data[:2] == GZIP_MAGIC:
        raise UnsupportedDatatype("gzip-compressed stream; decompress before parsing")
    if len(data) < HEADER_SIZE:
        raise TruncatedPayload(f"need {HEADER_SIZE} header bytes, got {len(data)}")
    magic = data[344:348]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise BadMagic(f"magic {magic!r} is neither 'n+1' nor 'ni1'")
    (sizeof_le,) = struct.unpack_from("<i", data, 0)
    (sizeof_be,) = struct.unpack_from(">i", data, 0)
    if sizeof_le == HEADER_SIZE:
        order = "<"
    elif sizeof_be == HEADER_SIZE:
        order = ">"
    else:
        raise BadMagic(f"sizeof_hdr is {sizeof_le} under either byte order, expected 348")

    dim = struct.unpack_from(order + "8h", data, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise UnsupportedDatatype(f"dim[0]={ndim} outside 1..7")
    sizes = list(dim[1 : 1 + ndim])
    if any(s <= 0 for s in sizes):
        raise UnsupportedDatatype(f"nonpositive dimension in {sizes}")
    if any(s != 1 for s in sizes[3:]):
        raise UnsupportedDatatype(f"volume has >3 non-trivial dimensions: {sizes}")
    nx, ny, nz = (sizes + [1, 1, 1])[:3]

    (datatype,) = struct.unpack_from(order + "h", data, 70)
    (bitpix,) = struct.unpack_from(order + "h", data, 72)
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} not supported")
    if bitpix != BITPIX[datatype]:
        raise UnsupportedDatatype(f"bitpix {bitpix} inconsistent with datatype {datatype}")

    pixdim = struct.unpack_from(order + "8f", data, 76)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in (pixdim[3], pixdim[2], pixdim[1]))
    (vox_offset,) = struct.unpack_from(order + "f", data, 108)
    (scl_slope,) = struct.unpack_from(order + "f", data, 112)
    (scl_inter,) = struct.unpack_from(order + "f", data, 116)

    offset = int(vox_offset)
    floor = 352 if magic == MAGIC_SINGLE else HEADER_SIZE
    offset = max(offset, floor)

    dtype = np.dtype(order + DATATYPES[datatype])
    count = nx * ny * nz
    need = offset + count * dtype.itemsize
    if len(data) < need:
        raise TruncatedPayload(f"payload needs {need} bytes, stream has {len(data)}")
    flat = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    # on-disk order is x fastest, so C-order reshape to (z, y, x)
    vol = flat.reshape(nz, ny, nx).astype(np.float32)
    if (scl_slope not in (0.0, 1.0)) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        vol = vol * np.float32(slope) + np.float32(scl_inter)
    return vol, spacing
