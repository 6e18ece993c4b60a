import gzip
import struct

import numpy as np
import pytest

from vesselforge import nifti


def _raw(path):
    data = path.read_bytes()
    return gzip.decompress(data) if str(path).endswith(".gz") else data


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_float_roundtrip(suffix, tmp_path, rng):
    v = rng.random((5, 6, 7)).astype(np.float32)
    p = nifti.write_volume(tmp_path / f"img{suffix}", v, (2.0, 0.5, 0.75))
    back, meta = nifti.read_volume(p)
    assert back.dtype == np.float32 and np.array_equal(back, v)
    assert meta["spacing"] == (2.0, 0.5, 0.75) and meta["datatype"] == nifti.DT_FLOAT32


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_mask_roundtrip(suffix, tmp_path, rng):
    m = rng.random((4, 5, 6)) < 0.3
    p = nifti.write_volume(tmp_path / f"lab{suffix}", m)
    back, meta = nifti.read_volume(p)
    assert back.dtype == bool and np.array_equal(back, m)
    raw = _raw(p)
    # datatype and bitpix read straight from the header bytes
    assert struct.unpack_from("<hh", raw, 70) == (2, 8)
    assert len(raw) == 352 + m.size


def test_header_layout(tmp_path, rng):
    v = rng.random((3, 4, 5)).astype(np.float32)
    p = nifti.write_volume(tmp_path / "a.nii", v, (3.0, 2.0, 1.0))
    raw = p.read_bytes()
    assert len(raw) == 352 + 4 * v.size == nifti.expected_size(v.shape, nifti.DT_FLOAT32)
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack_from("<4h", raw, 40) == (3, 5, 4, 3)  # dim: rank, nx, ny, nz
    assert struct.unpack_from("<3f", raw, 80) == (1.0, 2.0, 3.0)  # pixdim x, y, z
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    # voxel (z, y, x) sits at x + nx * (y + ny * z)
    payload = np.frombuffer(raw, "<f4", offset=352)
    assert payload[1 + 5 * (2 + 4 * 1)] == v[1, 2, 1]


def test_writes_are_byte_identical(tmp_path, rng):
    v = rng.random((6, 6, 6)).astype(np.float32)
    for suffix in (".nii", ".nii.gz"):
        a = nifti.write_volume(tmp_path / f"a{suffix}", v).read_bytes()
        b = nifti.write_volume(tmp_path / f"b{suffix}", v).read_bytes()
        assert a == b
    assert not list(tmp_path.glob("*.part"))


def _tamper(raw, offset, data):
    raw = bytearray(raw)
    raw[offset : offset + len(data)] = data
    return bytes(raw)


@pytest.fixture
def good_raw():
    return nifti.encode(np.ones((3, 3, 3), np.float32))


@pytest.mark.parametrize(
    "offset,data,code",
    [
        (344, b"ni1\x00", "unsupported-format"),
        (344, b"xyz\x00", "bad-magic"),
        (70, struct.pack("<h", 4), "unsupported-datatype"),
        (0, struct.pack(">i", 348), "unsupported-format"),
        (40, struct.pack("<h", 5), "unsupported-format"),
    ],
)
def test_error_codes(good_raw, offset, data, code):
    with pytest.raises(nifti.NiftiError) as err:
        nifti.decode(_tamper(good_raw, offset, data))
    assert err.value.code == code


def test_truncated_payload(tmp_path, good_raw):
    with pytest.raises(nifti.NiftiError) as err:
        nifti.decode(good_raw[:-1])
    assert err.value.code == "truncated-payload"
    with pytest.raises(nifti.NiftiError) as err:
        nifti.decode(good_raw[:100])
    assert err.value.code == "truncated-payload"
    p = tmp_path / "cut.nii.gz"
    p.write_bytes(gzip.compress(good_raw)[:-12])
    with pytest.raises(nifti.NiftiError) as err:
        nifti.read_volume(p)
    assert err.value.code == "truncated-payload"


def test_scaling_applied_on_read():
    raw = nifti.encode(np.array([0, 1, 2, 3], np.uint8).reshape(1, 1, 4).repeat(2, 0) * 50)
    raw = _tamper(raw, 112, struct.pack("<ff", 0.5, 10.0))
    arr, _ = nifti.decode(raw)
    assert arr.dtype == np.float32
    assert np.array_equal(arr[0, 0], np.array([10, 35, 60, 85], np.float32))


def test_uint8_above_one_stays_integer(tmp_path):
    v = np.arange(27, dtype=np.uint8).reshape(3, 3, 3)
    back, _ = nifti.read_volume(nifti.write_volume(tmp_path / "u.nii", v))
    assert back.dtype == np.uint8 and np.array_equal(back, v)


def test_rejects_non_3d():
    with pytest.raises(ValueError):
        nifti.encode(np.zeros((2, 2)))
