"""Tests for nifti_io: round trips, byte order, gzip and malformed files."""

import gzip
import struct

import numpy as np
import pytest

from mra_errors import (
    NiftiBadMagicError,
    NiftiDimensionError,
    NiftiTruncatedError,
    NiftiTwoFileError,
    NiftiUnsupportedDatatypeError,
)
from nifti_io import BinaryMask3, Volume, read_mask, read_nifti, volume_id, write_mask, write_nifti


def _header(order: str, dims, datatype: int, bitpix: int, pixdim=(1.0, 1.0, 1.0), magic=b"n+1\x00",
            slope=1.0, inter=0.0) -> bytes:
    """348-byte NIfTI-1 header packed field by field"""
    fields = [
        ("i", 348), ("10s", b""), ("18s", b""), ("i", 0), ("h", 0), ("c", b"r"), ("B", 0),
        ("8h", (len(dims), *dims, *([1] * (7 - len(dims))))),
        ("3f", (0.0, 0.0, 0.0)), ("h", 0), ("h", datatype), ("h", bitpix), ("h", 0),
        ("8f", (1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)),
        ("f", 352.0), ("f", slope), ("f", inter), ("h", 0), ("B", 0), ("B", 2),
        ("4f", (0.0, 0.0, 0.0, 0.0)), ("2i", (0, 0)), ("80s", b"fixture"), ("24s", b""),
        ("h", 0), ("h", 0), ("6f", (0.0,) * 6), ("12f", (0.0,) * 12), ("16s", b""), ("4s", magic),
    ]
    out = b""
    for fmt, value in fields:
        values = value if isinstance(value, tuple) else (value,)
        out += struct.pack(order + fmt, *values)
    assert len(out) == 348
    return out


def _file(order: str, data: np.ndarray, datatype: int, **kw) -> bytes:
    np_type = {2: "u1", 4: "i2", 16: "f4"}[datatype]
    voxels = data.astype(np.dtype(np_type).newbyteorder(order)).tobytes(order="F")
    return _header(order, data.shape, datatype, np.dtype(np_type).itemsize * 8, **kw) + b"\x00" * 4 + voxels


@pytest.fixture
def grid():
    return np.arange(4 * 5 * 6, dtype=np.float32).reshape(4, 5, 6)


class TestByteOrder:
    def test_big_endian_matches_little(self, tmp_path, grid):
        (tmp_path / "be.nii").write_bytes(_file(">", grid, 4, pixdim=(0.5, 0.6, 0.7)))
        (tmp_path / "le.nii").write_bytes(_file("<", grid, 4, pixdim=(0.5, 0.6, 0.7)))
        be, le = read_nifti(tmp_path / "be.nii"), read_nifti(tmp_path / "le.nii")
        np.testing.assert_array_equal(be.data, le.data)
        np.testing.assert_array_equal(be.data, grid)
        assert be.spacing == pytest.approx((0.5, 0.6, 0.7))
        assert be.source_dtype == "int16"

    def test_float32_big_endian(self, tmp_path, grid):
        (tmp_path / "f.nii").write_bytes(_file(">", grid / 7.0, 16))
        np.testing.assert_array_equal(read_nifti(tmp_path / "f.nii").data, (grid / 7.0).astype(np.float32))

    def test_scaling_applied(self, tmp_path, grid):
        (tmp_path / "s.nii").write_bytes(_file("<", grid, 2, slope=2.0, inter=1.0))
        np.testing.assert_allclose(read_nifti(tmp_path / "s.nii").data, grid * 2.0 + 1.0)

    def test_zero_slope_ignored(self, tmp_path, grid):
        (tmp_path / "z.nii").write_bytes(_file("<", grid, 2, slope=0.0, inter=5.0))
        np.testing.assert_array_equal(read_nifti(tmp_path / "z.nii").data, grid)


class TestRoundTrip:
    @pytest.mark.parametrize("dtype,values", [
        ("uint8", lambda g: g % 256),
        ("int16", lambda g: g - 50),
        ("float32", lambda g: g / 3.0),
    ])
    @pytest.mark.parametrize("compress", [False, True])
    def test_bit_exact(self, tmp_path, grid, dtype, values, compress):
        vol = Volume(values(grid).astype(np.float32), spacing=(0.9, 1.1, 2.0))
        path = tmp_path / ("v.nii.gz" if compress else "v.nii")
        write_nifti(vol, path, gzip=compress, dtype=dtype)
        back = read_nifti(path)
        np.testing.assert_array_equal(back.data, vol.data)
        assert back.dims == vol.dims
        assert back.spacing == pytest.approx(vol.spacing)
        assert back.source_dtype == dtype

    def test_gzip_is_deterministic(self, tmp_path, grid):
        vol = Volume(grid)
        write_nifti(vol, tmp_path / "a.nii.gz", gzip=True)
        write_nifti(vol, tmp_path / "b.nii.gz", gzip=True)
        assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()

    def test_header_passthrough(self, tmp_path, grid):
        (tmp_path / "in.nii").write_bytes(_file(">", grid, 4))
        src = read_nifti(tmp_path / "in.nii")
        write_nifti(src.with_data(src.data * 0.5), tmp_path / "out.nii")
        back = read_nifti(tmp_path / "out.nii")
        assert back.header["descrip"].item() == b"fixture"
        np.testing.assert_allclose(back.data, grid * 0.5)

    def test_mask(self, tmp_path, grid):
        mask = BinaryMask3(grid > 60)
        write_mask(mask, Volume(grid), tmp_path / "m.nii.gz", gzip=True)
        back = read_mask(tmp_path / "m.nii.gz")
        np.testing.assert_array_equal(back.voxels, mask.voxels)
        assert read_nifti(tmp_path / "m.nii.gz").source_dtype == "uint8"


class TestMalformed:
    def test_bad_magic(self, tmp_path, grid):
        (tmp_path / "x.nii").write_bytes(_file("<", grid, 4, magic=b"abc\x00"))
        with pytest.raises(NiftiBadMagicError):
            read_nifti(tmp_path / "x.nii")

    def test_two_file(self, tmp_path, grid):
        (tmp_path / "x.nii").write_bytes(_file("<", grid, 4, magic=b"ni1\x00"))
        with pytest.raises(NiftiTwoFileError):
            read_nifti(tmp_path / "x.nii")

    def test_bad_sizeof_hdr(self, tmp_path):
        (tmp_path / "x.nii").write_bytes(b"\x01\x02\x03\x04" + b"\x00" * 400)
        with pytest.raises(NiftiBadMagicError):
            read_nifti(tmp_path / "x.nii")

    def test_unsupported_datatype(self, tmp_path, grid):
        raw = _header("<", grid.shape, 64, 64) + b"\x00" * 4 + grid.astype("<f8").tobytes(order="F")
        (tmp_path / "x.nii").write_bytes(raw)
        with pytest.raises(NiftiUnsupportedDatatypeError):
            read_nifti(tmp_path / "x.nii")

    def test_truncated_voxels(self, tmp_path, grid):
        (tmp_path / "x.nii").write_bytes(_file("<", grid, 4)[:-10])
        with pytest.raises(NiftiTruncatedError):
            read_nifti(tmp_path / "x.nii")

    def test_truncated_gzip(self, tmp_path, grid):
        payload = gzip.compress(_file("<", grid, 4))
        (tmp_path / "x.nii.gz").write_bytes(payload[:len(payload) // 2])
        with pytest.raises(NiftiTruncatedError):
            read_nifti(tmp_path / "x.nii.gz")

    def test_four_dimensional(self, tmp_path):
        data = np.zeros((3, 3, 3, 2), dtype=np.float32)
        (tmp_path / "x.nii").write_bytes(_file("<", data, 16))
        with pytest.raises(NiftiDimensionError):
            read_nifti(tmp_path / "x.nii")

    def test_trailing_unit_dims_squeezed(self, tmp_path):
        data = np.ones((3, 4, 5, 1), dtype=np.float32)
        (tmp_path / "x.nii").write_bytes(_file("<", data, 16))
        assert read_nifti(tmp_path / "x.nii").dims == (3, 4, 5)


def test_volume_id():
    assert volume_id("/data/sub-01_angio.nii.gz") == "sub-01_angio"
    assert volume_id("scan.nii") == "scan"
