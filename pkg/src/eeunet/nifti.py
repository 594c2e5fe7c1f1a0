"""Single-file NIfTI-1 reader and writer (``.nii`` and ``.nii.gz``).

Voxel data is returned as a numpy array indexed ``[x, y, z(, t)]`` exactly as
stored on disk (x fastest). No reorientation is performed: axis 2 is taken as
the short-axis stacking direction.
"""
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    IoFailure,
    NonFiniteData,
    NonPositiveSpacing,
    PairedFormatUnsupported,
    TruncatedData,
    UnsupportedDtype,
)

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352

# NIfTI-1 datatype code -> numpy dtype (byte order applied at decode time)
DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
}
_CODES = {dt: code for code, dt in DTYPES.items()}

# field offsets within the 348-byte header
_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL_SLOPE = 112
_OFF_SCL_INTER = 116
_OFF_XYZT_UNITS = 123
_OFF_DESCRIP = 148
_OFF_QFORM_CODE = 252
_OFF_SFORM_CODE = 254
_OFF_SROW_X = 280
_OFF_MAGIC = 344


@dataclass
class Volume:
    """A 3D (or 4D cine) scalar grid with per-axis spacing in mm."""

    data: np.ndarray
    spacing: tuple
    dtype_tag: int = 16

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim not in (3, 4):
            raise ValueError(f"Volume must be 3D or 4D, got shape {self.data.shape}")
        if any(d < 1 for d in self.data.shape):
            raise ValueError(f"Volume dims must be positive, got {self.data.shape}")
        if len(self.spacing) != 3:
            raise ValueError("spacing must have three components")
        if not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise NonPositiveSpacing(f"spacing must be positive and finite, got {self.spacing}")

    @property
    def dims(self):
        return tuple(self.data.shape)


def _maybe_gunzip(raw):
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedData(f"corrupt gzip stream: {exc}") from exc
    return raw


def _byte_order(buf):
    if len(buf) < HEADER_SIZE:
        raise TruncatedData(f"need {HEADER_SIZE} header bytes, got {len(buf)}")
    if struct.unpack_from("<i", buf, 0)[0] == HEADER_SIZE:
        return "<"
    if struct.unpack_from(">i", buf, 0)[0] == HEADER_SIZE:
        return ">"
    raise BadMagic("header-size sentinel is not 348 in either byte order")


def parse_nifti(raw):
    """Decode a NIfTI-1 byte buffer (optionally gzip-compressed) into a Volume."""
    buf = _maybe_gunzip(bytes(raw))
    bo = _byte_order(buf)
    magic = buf[_OFF_MAGIC : _OFF_MAGIC + 4]
    if magic == b"ni1\x00":
        raise PairedFormatUnsupported("paired .hdr/.img NIfTI is not supported; convert to single-file .nii")
    if magic != b"n+1\x00":
        raise BadMagic(f"bad NIfTI-1 magic {magic!r}")

    dim = struct.unpack_from(bo + "8h", buf, _OFF_DIM)
    ndim = dim[0]
    if not 2 <= ndim <= 7:
        raise BadMagic(f"invalid dim[0]={ndim}")
    sizes = [int(d) for d in dim[1 : ndim + 1]]
    if any(d < 1 for d in sizes):
        raise BadMagic(f"non-positive dimension in {dim}")
    if any(d > 1 for d in sizes[4:]):
        raise UnsupportedDtype(f"volumes with more than 4 dimensions are not supported: {dim}")
    shape = (sizes[:3] + [1])[:3]
    if ndim >= 4 and sizes[3] > 1:
        shape.append(sizes[3])

    code = struct.unpack_from(bo + "h", buf, _OFF_DATATYPE)[0]
    if code not in DTYPES:
        raise UnsupportedDtype(f"NIfTI datatype code {code} not supported")
    dtype = DTYPES[code].newbyteorder(bo)

    pixdim = struct.unpack_from(bo + "8f", buf, _OFF_PIXDIM)
    spacing = []
    for axis in range(3):
        s = float(pixdim[axis + 1])
        if axis + 1 > ndim and s <= 0:
            s = 1.0  # missing axis of a 2D image
        if not (np.isfinite(s) and s > 0):
            raise NonPositiveSpacing(f"pixdim[{axis + 1}]={s}")
        spacing.append(s)

    vox_offset = int(struct.unpack_from(bo + "f", buf, _OFF_VOX_OFFSET)[0])
    vox_offset = max(vox_offset, DEFAULT_VOX_OFFSET)
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(buf) < vox_offset + nbytes:
        raise TruncatedData(
            f"payload has {max(len(buf) - vox_offset, 0)} bytes, dims {tuple(shape)} need {nbytes}"
        )
    flat = np.frombuffer(buf, dtype=dtype, count=count, offset=vox_offset)
    data = flat.reshape(shape, order="F").astype(DTYPES[code].newbyteorder("="))

    slope, inter = struct.unpack_from(bo + "2f", buf, _OFF_SCL_SLOPE)
    if not np.isfinite(slope) or slope == 0:
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    if slope != 1.0 or inter != 0.0:
        out_dtype = np.float64 if data.dtype == np.float64 else np.float32
        data = data.astype(out_dtype) * out_dtype(slope) + out_dtype(inter)

    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFiniteData("volume contains NaN or Inf voxels")
    return Volume(np.ascontiguousarray(data), tuple(spacing), code)


def encode_nifti(vol, byteorder="<"):
    """Serialise a Volume to NIfTI-1 bytes (uncompressed)."""
    if byteorder not in ("<", ">"):
        raise ValueError("byteorder must be '<' or '>'")
    data = np.asarray(vol.data)
    if data.ndim not in (3, 4) or any(d < 1 for d in data.shape):
        raise ValueError(f"cannot write volume with dims {data.shape}")
    native = data.dtype.newbyteorder("=")
    if native not in _CODES:
        raise UnsupportedDtype(f"cannot store dtype {data.dtype}")
    code = _CODES[native]

    hdr = bytearray(DEFAULT_VOX_OFFSET)
    struct.pack_into(byteorder + "i", hdr, 0, HEADER_SIZE)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into(byteorder + "8h", hdr, _OFF_DIM, *dim)
    struct.pack_into(byteorder + "h", hdr, _OFF_DATATYPE, code)
    struct.pack_into(byteorder + "h", hdr, _OFF_BITPIX, native.itemsize * 8)
    pixdim = [1.0, *vol.spacing, 1.0, 1.0, 1.0, 1.0]
    struct.pack_into(byteorder + "8f", hdr, _OFF_PIXDIM, *pixdim)
    struct.pack_into(byteorder + "f", hdr, _OFF_VOX_OFFSET, float(DEFAULT_VOX_OFFSET))
    struct.pack_into(byteorder + "2f", hdr, _OFF_SCL_SLOPE, 1.0, 0.0)
    hdr[_OFF_XYZT_UNITS] = 2 | 8  # mm, seconds
    hdr[_OFF_DESCRIP : _OFF_DESCRIP + 6] = b"eeunet"
    # scaled diagonal sform so viewers place voxels sensibly
    struct.pack_into(byteorder + "h", hdr, _OFF_SFORM_CODE, 2)
    for row in range(3):
        srow = [0.0, 0.0, 0.0, 0.0]
        srow[row] = vol.spacing[row]
        struct.pack_into(byteorder + "4f", hdr, _OFF_SROW_X + 16 * row, *srow)
    hdr[_OFF_MAGIC : _OFF_MAGIC + 4] = b"n+1\x00"
    payload = data.astype(native.newbyteorder(byteorder)).tobytes(order="F")
    return bytes(hdr) + payload


def write_nifti(vol, path, byteorder="<"):
    """Write ``vol`` to ``path``; a ``.gz`` suffix selects gzip compression."""
    blob = encode_nifti(vol, byteorder)
    path = Path(path)
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_nifti(path):
    path = Path(path)
    if path.suffix in (".hdr", ".img"):
        raise PairedFormatUnsupported(f"{path.name}: paired .hdr/.img NIfTI is not supported")
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return parse_nifti(raw)
