"""Minimal single-file NIfTI-1 reader/writer.

Supports ``.nii`` (and ``.nii.gz`` through gzip), single-frame 3D images with
datatypes uint8, int16, float32 and float64. Files are written little-endian
with the 348-byte header, a 4-byte empty extension block and the payload at
offset 352.
"""
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import SparseLabelVolume, Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}
_CODES = {v: k for k, v in DATATYPES.items()}


class NiftiError(ValueError):
    """Parse or write failure; ``field`` names the offending header field."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class NiftiHeader:
    datatype: int
    dims: tuple
    pixdim: tuple
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    vox_offset: float = VOX_OFFSET
    magic: bytes = MAGIC
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple = (0.0, 0.0, 0.0)
    qoffset: tuple = (0.0, 0.0, 0.0)
    srow: tuple = ((1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0))
    intent_name: bytes = b""
    descrip: bytes = b""
    endian: str = "<"

    def affine(self):
        if self.sform_code > 0:
            aff = np.eye(4)
            aff[:3] = np.array(self.srow, dtype=np.float64)
            return aff
        sx, sy, sz = self.pixdim[1:4]
        if self.qform_code > 0:
            b, c, d = self.quatern
            a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
            rot = np.array([
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ])
            qfac = -1.0 if self.pixdim[0] < 0 else 1.0
            aff = np.eye(4)
            aff[:3, :3] = rot @ np.diag([sx, sy, sz * qfac])
            aff[:3, 3] = self.qoffset
            return aff
        return np.diag([sx, sy, sz, 1.0])


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def parse_header(raw):
    if len(raw) < HEADER_SIZE:
        raise NiftiError("sizeof_hdr", f"truncated header ({len(raw)} of {HEADER_SIZE} bytes)")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError("sizeof_hdr", f"header size field is not {HEADER_SIZE}")
    e = endian
    magic = bytes(raw[344:348])
    if magic != MAGIC:
        raise NiftiError("magic", f"unsupported magic {magic!r} (only single-file 'n+1' is supported)")
    dim = struct.unpack_from(e + "8h", raw, 40)
    datatype, _bitpix = struct.unpack_from(e + "2h", raw, 70)
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(e + "3f", raw, 108)
    qform_code, sform_code = struct.unpack_from(e + "2h", raw, 252)
    quatern = struct.unpack_from(e + "3f", raw, 256)
    qoffset = struct.unpack_from(e + "3f", raw, 268)
    srow = tuple(struct.unpack_from(e + "4f", raw, 280 + 16 * r) for r in range(3))
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError("dim", f"dim[0]={ndim} out of range")
    if ndim >= 4 and any(d > 1 for d in dim[4:ndim + 1]):
        raise NiftiError("dim", f"only single-frame volumes are supported (dim={dim[:ndim + 1]})")
    if any(d < 1 for d in dim[1:ndim + 1]):
        raise NiftiError("dim", f"non-positive extent in {dim[:ndim + 1]}")
    dims = tuple(d if i <= ndim else 1 for i, d in enumerate(dim[1:4], start=1))
    if datatype not in DATATYPES:
        raise NiftiError("datatype", f"unsupported datatype code {datatype}")
    if vox_offset < VOX_OFFSET:
        raise NiftiError("vox_offset", f"vox_offset {vox_offset} < {VOX_OFFSET}")
    return NiftiHeader(
        datatype=datatype, dims=dims, pixdim=pixdim, scl_slope=scl_slope, scl_inter=scl_inter,
        vox_offset=vox_offset, magic=magic, qform_code=qform_code, sform_code=sform_code,
        quatern=quatern, qoffset=qoffset, srow=srow,
        intent_name=bytes(raw[328:344]).rstrip(b"\x00"),
        descrip=bytes(raw[148:228]).rstrip(b"\x00"), endian=endian,
    )


def read_nifti(path, kind="auto", allow_nonfinite=False):
    """Load a volume. ``kind`` is ``"auto"`` (uint8 -> labels), ``"volume"`` or ``"labels"``."""
    with _open(path, "rb") as fh:
        raw = fh.read()
    hdr = parse_header(raw)
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.endian)
    count = int(np.prod(hdr.dims))
    start = int(hdr.vox_offset)
    need = start + count * dtype.itemsize
    if len(raw) < need:
        raise NiftiError("payload", f"truncated payload: need {need} bytes, file has {len(raw)}")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    arr = flat.reshape(hdr.dims, order="F").astype(dtype.newbyteorder("="))
    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in hdr.pixdim[1:4])
    affine = hdr.affine()

    if kind == "auto":
        kind = "labels" if hdr.datatype == 2 else "volume"
    if kind == "labels":
        if hdr.datatype not in (2, 4):
            raise NiftiError("datatype", f"label volumes must be integer, got code {hdr.datatype}")
        return SparseLabelVolume(arr, spacing, affine)
    if hdr.scl_slope != 0 and not (hdr.scl_slope == 1 and hdr.scl_inter == 0):
        arr = arr.astype(np.float64) * float(hdr.scl_slope) + float(hdr.scl_inter)
    try:
        return Volume3D(arr, spacing, affine, allow_nonfinite=allow_nonfinite)
    except ValueError as exc:
        raise NiftiError("payload", str(exc)) from None


def build_header(dims, spacing, affine, dtype, scl_slope=0.0, scl_inter=0.0, intent_name=b"", descrip=b""):
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise NiftiError("datatype", f"cannot write dtype {dtype}")
    buf = bytearray(HEADER_SIZE)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into("<2h", buf, 70, _CODES[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", buf, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", buf, 108, float(VOX_OFFSET), scl_slope, scl_inter)
    buf[123] = 2  # xyzt_units: mm
    buf[148:148 + len(descrip[:80])] = descrip[:80]
    struct.pack_into("<2h", buf, 252, 0, 2)  # qform unset, sform aligned
    affine = np.asarray(affine, dtype=np.float64)
    for r in range(3):
        struct.pack_into("<4f", buf, 280 + 16 * r, *affine[r])
    buf[328:328 + len(intent_name[:16])] = intent_name[:16]
    buf[344:348] = MAGIC
    return bytes(buf)


def write_nifti(vol, path, dtype=None):
    """Write a Volume3D (float32 by default) or SparseLabelVolume (uint8)."""
    if isinstance(vol, SparseLabelVolume):
        arr = vol.labels
        dtype = np.dtype("u1") if dtype is None else np.dtype(dtype)
    else:
        arr = vol.data
        if not vol.allow_nonfinite and not np.all(np.isfinite(arr)):
            raise NiftiError("payload", "refusing to write non-finite intensities")
        dtype = np.dtype("f4") if dtype is None else np.dtype(dtype)
    if dtype not in _CODES:
        raise NiftiError("datatype", f"cannot write dtype {dtype}")
    hdr = build_header(arr.shape, vol.spacing, vol.affine, dtype)
    payload = np.asarray(arr, dtype=dtype.newbyteorder("<")).tobytes(order="F")
    path = Path(path)
    try:
        with _open(path, "wb") as fh:
            fh.write(hdr)
            fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write NIfTI file {path}: {exc}") from exc
