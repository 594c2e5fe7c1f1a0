import gzip
import struct

import numpy as np
import pytest

from eeunet.errors import BadMagic, NonPositiveSpacing, PairedFormatUnsupported, TruncatedData, UnsupportedDtype
from eeunet.nifti import Volume, encode_nifti, parse_nifti, read_nifti, write_nifti


def hand_built_header(dims, spacing, datatype, bitpix, bo="<", magic=b"n+1\x00", vox_offset=352.0, slope=0.0, inter=0.0):
    """Header assembled field by field from the NIfTI-1 offsets."""
    hdr = bytearray(352)
    struct.pack_into(bo + "i", hdr, 0, 348)
    dim = [len(dims), *dims] + [1] * (7 - len(dims))
    struct.pack_into(bo + "8h", hdr, 40, *dim)
    struct.pack_into(bo + "h", hdr, 70, datatype)
    struct.pack_into(bo + "h", hdr, 72, bitpix)
    struct.pack_into(bo + "8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into(bo + "f", hdr, 108, vox_offset)
    struct.pack_into(bo + "2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    return bytes(hdr)


def test_parse_hand_built_float32():
    values = np.arange(32, dtype=np.float32) * 0.5
    raw = hand_built_header((4, 4, 2), (1.5, 1.5, 8.0), 16, 32) + values.astype("<f4").tobytes()
    vol = parse_nifti(raw)
    assert vol.dims == (4, 4, 2)
    assert vol.spacing == (1.5, 1.5, 8.0)
    assert vol.data.size == 32 and np.isfinite(vol.data).all()
    # x varies fastest on disk
    assert vol.data[1, 0, 0] == 0.5
    assert vol.data[0, 1, 0] == 2.0
    assert vol.data[0, 0, 1] == 8.0


def test_truncated_payload():
    raw = hand_built_header((4, 4, 2), (1, 1, 1), 16, 32) + np.zeros(31, "<f4").tobytes()
    with pytest.raises(TruncatedData):
        parse_nifti(raw)


def test_bad_magic_and_paired():
    body = np.zeros(8, "<f4").tobytes()
    with pytest.raises(BadMagic):
        parse_nifti(hand_built_header((2, 2, 2), (1, 1, 1), 16, 32, magic=b"xyz\x00") + body)
    with pytest.raises(PairedFormatUnsupported):
        parse_nifti(hand_built_header((2, 2, 2), (1, 1, 1), 16, 32, magic=b"ni1\x00") + body)
    with pytest.raises(BadMagic):
        parse_nifti(b"\x00" * 400)


def test_unsupported_dtype():
    raw = hand_built_header((2, 2, 2), (1, 1, 1), 32, 64) + bytes(128)  # complex64
    with pytest.raises(UnsupportedDtype):
        parse_nifti(raw)


def test_nonpositive_spacing():
    raw = hand_built_header((2, 2, 2), (1, 0, 1), 2, 8) + bytes(8)
    with pytest.raises(NonPositiveSpacing):
        parse_nifti(raw)


def test_scale_slope_applied_and_zero_slope_ignored():
    data = np.arange(8, dtype="<i2")
    scaled = parse_nifti(hand_built_header((2, 2, 2), (1, 1, 1), 4, 16, slope=2.0, inter=1.0) + data.tobytes())
    np.testing.assert_array_equal(scaled.data.ravel(order="F"), data * 2.0 + 1.0)
    plain = parse_nifti(hand_built_header((2, 2, 2), (1, 1, 1), 4, 16, slope=0.0) + data.tobytes())
    assert plain.data.dtype == np.int16
    np.testing.assert_array_equal(plain.data.ravel(order="F"), data)


def test_big_endian_header_matches_little_endian():
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    vol = Volume(data, (0.7, 0.8, 5.0), 4)
    le = parse_nifti(encode_nifti(vol, "<"))
    be = parse_nifti(encode_nifti(vol, ">"))
    assert be.dims == le.dims and be.spacing == le.spacing
    np.testing.assert_array_equal(be.data, le.data)
    np.testing.assert_array_equal(le.data, data)


def test_gzip_detected():
    vol = Volume(np.ones((3, 2, 2), np.float32), (1, 1, 1))
    assert parse_nifti(gzip.compress(encode_nifti(vol))).dims == (3, 2, 2)


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64, np.int8, np.uint16])
@pytest.mark.parametrize("shape", [(2, 2, 1), (5, 3, 4), (4, 4, 2, 3)])
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_write_parse_roundtrip(tmp_path, rng, dtype, shape, suffix):
    if np.dtype(dtype).kind == "f":
        data = rng.standard_normal(shape).astype(dtype)
    else:
        info = np.iinfo(dtype)
        data = rng.integers(info.min, info.max, shape, endpoint=True).astype(dtype)
    vol = Volume(data, (1.5625, 1.5625, 8.0))
    path = tmp_path / f"v{suffix}"
    write_nifti(vol, path)
    back = read_nifti(path)
    assert back.dims == vol.dims
    assert back.spacing == tuple(float(np.float32(s)) for s in vol.spacing)
    assert back.data.dtype == data.dtype
    np.testing.assert_array_equal(back.data, data)


def test_mask_labels_roundtrip(tmp_path):
    mask = np.array([[[0], [1]], [[2], [3]]], dtype=np.uint8)
    write_nifti(Volume(mask, (1, 1, 1)), tmp_path / "m.nii")
    np.testing.assert_array_equal(read_nifti(tmp_path / "m.nii").data, mask)


def test_empty_dims_rejected():
    with pytest.raises(ValueError):
        Volume(np.zeros((0, 2, 2), np.float32), (1, 1, 1))


def test_paired_extension_rejected(tmp_path):
    with pytest.raises(PairedFormatUnsupported):
        read_nifti(tmp_path / "x.hdr")
