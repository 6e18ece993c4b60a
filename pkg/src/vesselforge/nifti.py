"""Minimal single-file NIfTI-1 reader/writer: 3D volumes, uint8 masks and float32 images.

Arrays are (z, y, x) in C order, so x varies fastest on disk, which is the
NIfTI voxel order. Spacing is returned and accepted in the same (z, y, x)
order and stored in ``pixdim[1..3]`` as (x, y, z).
"""

import gzip
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
DT_UINT8 = 2
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: (np.dtype("<u1"), 8), DT_FLOAT32: (np.dtype("<f4"), 32)}


class NiftiError(ValueError):
    """Read failure with a stable ``code``: bad-magic, unsupported-format, unsupported-datatype, truncated-payload."""

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass
class NiftiHeader:
    shape: tuple  # (z, y, x)
    datatype: int
    spacing: tuple = (1.0, 1.0, 1.0)  # (z, y, x)
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    vox_offset: int = VOX_OFFSET

    @property
    def bitpix(self):
        return _DTYPES[self.datatype][1]

    @property
    def payload_bytes(self):
        return int(np.prod(self.shape)) * self.bitpix // 8

    def pack(self):
        buf = bytearray(HEADER_SIZE)
        nz, ny, nx = (int(n) for n in self.shape)
        sz, sy, sx = (float(s) for s in self.spacing)
        struct.pack_into("<i", buf, 0, HEADER_SIZE)
        buf[38:39] = b"r"
        struct.pack_into("<8h", buf, 40, 3, nx, ny, nz, 1, 1, 1, 1)
        struct.pack_into("<hh", buf, 70, self.datatype, self.bitpix)
        struct.pack_into("<8f", buf, 76, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
        struct.pack_into("<fff", buf, 108, float(self.vox_offset), self.scl_slope, self.scl_inter)
        buf[123] = 2  # xyzt_units: millimetres
        buf[344:348] = MAGIC_SINGLE
        return bytes(buf)

    @classmethod
    def unpack(cls, raw):
        if len(raw) < HEADER_SIZE:
            raise NiftiError("truncated-payload", f"header is {len(raw)} bytes, need {HEADER_SIZE}")
        magic = bytes(raw[344:348])
        if magic == MAGIC_PAIR:
            raise NiftiError("unsupported-format", "detached header/image pairs (ni1) are not supported")
        if magic != MAGIC_SINGLE:
            raise NiftiError("bad-magic", f"magic {magic!r}")
        (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiError("unsupported-format", f"sizeof_hdr {sizeof_hdr} (big-endian files are not supported)")
        dim = struct.unpack_from("<8h", raw, 40)
        if dim[0] != 3 and not (dim[0] == 4 and dim[4] == 1):
            raise NiftiError("unsupported-format", f"only 3D volumes are supported, dim[0]={dim[0]}")
        datatype, _ = struct.unpack_from("<hh", raw, 70)
        if datatype not in _DTYPES:
            raise NiftiError("unsupported-datatype", f"datatype code {datatype}")
        pixdim = struct.unpack_from("<8f", raw, 76)
        vox_offset, slope, inter = struct.unpack_from("<fff", raw, 108)
        return cls(
            shape=(int(dim[3]), int(dim[2]), int(dim[1])),
            datatype=int(datatype),
            spacing=(float(pixdim[3]), float(pixdim[2]), float(pixdim[1])),
            scl_slope=float(slope),
            scl_inter=float(inter),
            vox_offset=int(vox_offset),
        )


def _is_gz(path):
    return str(path).endswith(".gz")


def encode(v, spacing=(1.0, 1.0, 1.0)):
    """Uncompressed file bytes for ``v``: masks (bool or uint8) as datatype 2, anything else as float32."""
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {v.shape}")
    if v.dtype == bool or v.dtype == np.uint8:
        dt, payload = DT_UINT8, v.astype("<u1")
    else:
        dt, payload = DT_FLOAT32, v.astype("<f4")
    hdr = NiftiHeader(v.shape, dt, tuple(float(s) for s in spacing))
    return hdr.pack() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + np.ascontiguousarray(payload).tobytes()


def expected_size(shape, datatype):
    return VOX_OFFSET + int(np.prod(shape)) * _DTYPES[datatype][1] // 8


def write_volume(path, v, spacing=(1.0, 1.0, 1.0)):
    """Write ``.nii`` or ``.nii.gz`` (gzip with a zeroed timestamp, so bytes are deterministic)."""
    data = encode(v, spacing)
    path = Path(path)
    if _is_gz(path):
        bio = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=bio, mtime=0, compresslevel=6) as gz:
            gz.write(data)
        data = bio.getvalue()
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def decode(raw):
    """``(array, header)`` from uncompressed file bytes."""
    hdr = NiftiHeader.unpack(raw)
    dtype, _ = _DTYPES[hdr.datatype]
    start = max(hdr.vox_offset, HEADER_SIZE)
    end = start + hdr.payload_bytes
    if len(raw) < end:
        raise NiftiError("truncated-payload", f"need {end} bytes, file has {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(hdr.shape)), offset=start).reshape(hdr.shape)
    arr = arr.astype(dtype.newbyteorder("="))
    if hdr.scl_slope != 0 and (hdr.scl_slope != 1.0 or hdr.scl_inter != 0.0):
        arr = (arr.astype(np.float32) * np.float32(hdr.scl_slope) + np.float32(hdr.scl_inter)).astype(np.float32)
    elif hdr.datatype == DT_UINT8 and arr.max(initial=0) <= 1:
        arr = arr.astype(bool)
    return arr, hdr


def read_volume(path):
    """``(array, metadata)``; a uint8 payload in {0, 1} comes back as a boolean mask.

    ``metadata`` holds ``spacing`` (z, y, x), ``datatype`` and ``header``.
    """
    raw = Path(path).read_bytes()
    if _is_gz(path):
        try:
            raw = gzip.decompress(raw)
        except (EOFError, gzip.BadGzipFile) as exc:
            raise NiftiError("truncated-payload", f"gzip stream: {exc}") from exc
    arr, hdr = decode(raw)
    return arr, {"spacing": hdr.spacing, "datatype": hdr.datatype, "header": hdr}
