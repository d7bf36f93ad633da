import struct

import numpy as np
import pytest

from cardseg import errors
from cardseg.nifti import parse_nifti


def make_nifti_bytes(volume, spacing, order="<", dtype_code=16, magic=b"n+1\x00",
                     vox_offset=352.0, scl=(1.0, 0.0), bitpix=None):
    """Independent NIfTI-1 writer used only by tests (header via struct.pack)."""
    codes = {2: ("u1", 8), 4: ("i2", 16), 16: ("f4", 32), 512: ("u2", 16)}
    np_kind, bits = codes[dtype_code]
    if bitpix is None:
        bitpix = bits
    nz, ny, nx = volume.shape
    hdr = bytearray(348)
    struct.pack_into(order + "i", hdr, 0, 348)
    struct.pack_into(order + "8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into(order + "h", hdr, 70, dtype_code)
    struct.pack_into(order + "h", hdr, 72, bitpix)
    struct.pack_into(order + "8f", hdr, 76, 1.0, spacing[2], spacing[1], spacing[0], 0, 0, 0, 0)
    struct.pack_into(order + "f", hdr, 108, vox_offset)
    struct.pack_into(order + "f", hdr, 112, scl[0])
    struct.pack_into(order + "f", hdr, 116, scl[1])
    hdr[344:348] = magic
    pad = b"\x00" * (int(vox_offset) - 348)
    payload = np.ascontiguousarray(volume, dtype=order + np_kind).tobytes()
    return bytes(hdr) + pad + payload


def test_round_trip_float32(rng):
    vol = rng.normal(size=(4, 6, 5)).astype(np.float32)
    spacing = (8.0, 1.5, 1.25)
    out, sp = parse_nifti(make_nifti_bytes(vol, spacing))
    np.testing.assert_array_equal(out, vol)
    assert sp == pytest.approx(spacing)


def test_round_trip_big_endian(rng):
    vol = (rng.integers(0, 1000, size=(3, 4, 4))).astype(np.int16)
    spacing = (5.0, 2.5, 2.5)
    out, sp = parse_nifti(make_nifti_bytes(vol, spacing, order=">", dtype_code=4))
    np.testing.assert_array_equal(out, vol.astype(np.float32))
    assert sp == pytest.approx(spacing)


@pytest.mark.parametrize("code,npdtype", [(2, np.uint8), (4, np.int16), (512, np.uint16)])
def test_integer_datatypes(code, npdtype, rng):
    vol = rng.integers(0, 200, size=(2, 3, 3)).astype(npdtype)
    out, _ = parse_nifti(make_nifti_bytes(vol, (1, 1, 1), dtype_code=code))
    np.testing.assert_array_equal(out, vol.astype(np.float32))


def test_scl_slope_inter(rng):
    vol = rng.integers(0, 100, size=(2, 3, 3)).astype(np.int16)
    out, _ = parse_nifti(make_nifti_bytes(vol, (1, 1, 1), dtype_code=4, scl=(2.0, -3.0)))
    np.testing.assert_allclose(out, vol * 2.0 - 3.0)


def test_axis_order_is_zyx():
    # single voxel at (z=1, y=0, x=2) in a 2x3x4 volume
    vol = np.zeros((2, 3, 4), dtype=np.float32)
    vol[1, 0, 2] = 7.0
    out, _ = parse_nifti(make_nifti_bytes(vol, (1, 1, 1)))
    assert out[1, 0, 2] == 7.0
    assert out.sum() == 7.0


def test_ni1_magic_with_inline_payload(rng):
    vol = rng.normal(size=(2, 2, 2)).astype(np.float32)
    blob = make_nifti_bytes(vol, (1, 1, 1), magic=b"ni1\x00", vox_offset=0.0)
    # writer appends the payload right after the header when vox_offset < 352
    out, _ = parse_nifti(blob)
    np.testing.assert_array_equal(out, vol)


def test_bad_magic():
    vol = np.zeros((2, 2, 2), dtype=np.float32)
    blob = bytearray(make_nifti_bytes(vol, (1, 1, 1)))
    blob[344:348] = b"abcd"
    with pytest.raises(errors.BadMagic):
        parse_nifti(bytes(blob))


def test_bad_sizeof_hdr():
    vol = np.zeros((2, 2, 2), dtype=np.float32)
    blob = bytearray(make_nifti_bytes(vol, (1, 1, 1)))
    struct.pack_into("<i", blob, 0, 1234)
    with pytest.raises(errors.BadMagic):
        parse_nifti(bytes(blob))


def test_unsupported_datatype():
    vol = np.zeros((2, 2, 2), dtype=np.float32)
    blob = bytearray(make_nifti_bytes(vol, (1, 1, 1)))
    struct.pack_into("<h", blob, 70, 64)  # float64 code, unsupported
    struct.pack_into("<h", blob, 72, 64)
    with pytest.raises(errors.UnsupportedDatatype):
        parse_nifti(bytes(blob))


def test_bitpix_mismatch():
    vol = np.zeros((2, 2, 2), dtype=np.float32)
    with pytest.raises(errors.UnsupportedDatatype):
        parse_nifti(make_nifti_bytes(vol, (1, 1, 1), bitpix=8))


def test_truncated_header():
    with pytest.raises(errors.TruncatedPayload):
        parse_nifti(b"\x00" * 100)


def test_truncated_payload(rng):
    vol = rng.normal(size=(4, 4, 4)).astype(np.float32)
    blob = make_nifti_bytes(vol, (1, 1, 1))
    with pytest.raises(errors.TruncatedPayload):
        parse_nifti(blob[:-8])


def test_gzip_rejected():
    with pytest.raises(errors.UnsupportedDatatype):
        parse_nifti(b"\x1f\x8b" + b"\x00" * 400)


def test_fuzz_never_crashes(rng):
    for _ in range(1000):
        blob = rng.bytes(int(rng.integers(0, 600)))
        with pytest.raises(errors.CardsegError):
            parse_nifti(blob)
