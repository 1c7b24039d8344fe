"""Reading and writing single-file NIfTI-1 volumes.

Only the 348-byte base header is interpreted.  Extensions are skipped on read
and never written.  Voxel data is always handed out as float64 in a
``Volume4D`` with shape ``(X, Y, Z, T)``; 3D files come back with ``T == 1``.
"""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    BadSize,
    HeaderError,
    IoError,
    RangeError,
    Truncated,
    UnsupportedDatatype,
)

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352

MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

UINT8, INT16, INT32, FLOAT32, FLOAT64, INT8, UINT16 = 2, 4, 8, 16, 64, 256, 512

# datatype code -> (numpy dtype character, bitpix)
DATATYPES: dict[int, tuple[str, int]] = {
    UINT8: ("u1", 8),
    INT16: ("i2", 16),
    INT32: ("i4", 32),
    FLOAT32: ("f4", 32),
    FLOAT64: ("f8", 64),
    INT8: ("i1", 8),
    UINT16: ("u2", 16),
}

FLOAT_CODES = frozenset({FLOAT32, FLOAT64})

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]

HEADER_DTYPE_LE = np.dtype(_HEADER_FIELDS).newbyteorder("<")
HEADER_DTYPE_BE = HEADER_DTYPE_LE.newbyteorder(">")
assert HEADER_DTYPE_LE.itemsize == HEADER_SIZE

# xyzt_units time codes -> seconds per unit
_TIME_UNITS = {8: 1.0, 16: 1e-3, 24: 1e-6}
_UNITS_MM_SEC = 2 | 8


@dataclass(frozen=True, eq=False)
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype_code: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    xyzt_units: int
    qform_code: int
    sform_code: int
    affine: np.ndarray
    magic: bytes
    big_endian: bool

    @property
    def ndim(self) -> int:
        return self.dim[0]

    @property
    def extents(self) -> tuple[int, ...]:
        return tuple(self.dim[1 : self.dim[0] + 1])

    @property
    def is_pair(self) -> bool:
        return self.magic == MAGIC_PAIR

    @property
    def tr_seconds(self) -> float:
        scale = _TIME_UNITS.get(self.xyzt_units & 0x38, 1.0)
        return float(self.pixdim[4]) * scale


@dataclass(frozen=True, eq=False)
class Volume4D:
    """Dense (X, Y, Z, T) float64 voxel grid with its voxel-to-world affine.

    The data array is made read-only on construction so a loaded volume can be
    shared freely.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    tr_seconds: float = 0.0
    source_dtype: int = FLOAT64

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 3:
            data = data[..., np.newaxis]
        if data.ndim != 4 or min(data.shape) < 1:
            raise HeaderError(f"expected a non-empty 4D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise RangeError("volume contains non-finite voxel values")
        affine = np.array(self.affine, dtype=np.float64, copy=True)
        _check_affine(affine)
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "tr_seconds", float(self.tr_seconds))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[3]

    @property
    def voxel_size(self) -> np.ndarray:
        return np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))

    def replace(self, data: np.ndarray) -> "Volume4D":
        """Same geometry and timing, new voxel values."""
        return Volume4D(data, self.affine, self.tr_seconds, self.source_dtype)


def _check_affine(affine: np.ndarray) -> None:
    if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
        raise HeaderError("affine must be a finite 4x4 matrix")
    det = np.linalg.det(affine[:3, :3])
    if not math.isfinite(det) or abs(det) < 1e-12:
        raise HeaderError("affine is not invertible")


def _quaternion_affine(h: np.void, pixdim: np.ndarray) -> np.ndarray:
    b, c, d = (float(h[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < 1e-7:
        # numerically a 180 degree rotation; renormalise b, c, d
        norm = math.sqrt(b * b + c * c + d * d) or 1.0
        a, b, c, d = 0.0, b / norm, c / norm, d / norm
    else:
        a = math.sqrt(a2)
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], qfac * pixdim[3]], dtype=np.float64)
    out = np.eye(4)
    out[:3, :3] = rot * zooms
    out[:3, 3] = [float(h["qoffset_x"]), float(h["qoffset_y"]), float(h["qoffset_z"])]
    return out


def _resolve_affine(h: np.void) -> np.ndarray:
    pixdim = h["pixdim"].astype(np.float64)
    if int(h["sform_code"]) > 0:
        out = np.eye(4)
        out[0] = h["srow_x"]
        out[1] = h["srow_y"]
        out[2] = h["srow_z"]
        return out
    if int(h["qform_code"]) > 0:
        return _quaternion_affine(h, pixdim)
    zooms = np.where(pixdim[1:4] > 0, pixdim[1:4], 1.0)
    return np.diag([*zooms, 1.0])


def parse_header(raw: bytes) -> NiftiHeader:
    """Decode the base NIfTI-1 header from the first 348 bytes of ``raw``.

    Endianness is inferred from ``sizeof_hdr``.  Only ``HeaderError``
    subclasses escape, whatever the input bytes are.
    """
    if len(raw) < HEADER_SIZE:
        raise BadSize(f"header needs {HEADER_SIZE} bytes, got {len(raw)}")
    block = bytes(raw[:HEADER_SIZE])
    h = np.frombuffer(block, dtype=HEADER_DTYPE_LE, count=1)[0]
    big_endian = False
    if int(h["sizeof_hdr"]) != HEADER_SIZE:
        h = np.frombuffer(block, dtype=HEADER_DTYPE_BE, count=1)[0]
        big_endian = True
        if int(h["sizeof_hdr"]) != HEADER_SIZE:
            raise BadSize("sizeof_hdr is not 348 in either byte order")

    magic = block[344:348]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise BadMagic(f"unrecognised magic {magic!r}")

    code = int(h["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code} is not supported")
    bitpix = int(h["bitpix"])
    if bitpix != DATATYPES[code][1]:
        raise HeaderError(f"bitpix {bitpix} inconsistent with datatype {code}")

    dim = tuple(int(d) for d in h["dim"])
    if not 1 <= dim[0] <= 7:
        raise HeaderError(f"dim[0]={dim[0]} outside [1, 7]")
    if any(d < 1 for d in dim[1 : dim[0] + 1]):
        raise HeaderError(f"non-positive extent in dim {dim}")

    vox_offset = float(h["vox_offset"])
    if not math.isfinite(vox_offset) or vox_offset < 0:
        raise HeaderError(f"invalid vox_offset {vox_offset}")
    if magic == MAGIC_SINGLE and vox_offset < SINGLE_FILE_OFFSET:
        raise HeaderError(f"vox_offset {vox_offset} < 352 for single-file NIfTI")

    pixdim = tuple(float(p) for p in h["pixdim"])
    with np.errstate(all="ignore"):
        affine = _resolve_affine(h)
    if not np.all(np.isfinite(affine)):
        raise HeaderError("non-finite values in the spatial transform")

    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        dim=dim,
        datatype_code=code,
        bitpix=bitpix,
        pixdim=pixdim,
        vox_offset=vox_offset,
        scl_slope=float(h["scl_slope"]),
        scl_inter=float(h["scl_inter"]),
        xyzt_units=int(h["xyzt_units"]),
        qform_code=int(h["qform_code"]),
        sform_code=int(h["sform_code"]),
        affine=affine,
        magic=magic,
        big_endian=big_endian,
    )


def _volume_shape(header: NiftiHeader) -> tuple[int, int, int, int]:
    if header.ndim > 4:
        raise HeaderError(f"{header.ndim}D images are not supported")
    ext = list(header.extents) + [1] * (4 - header.ndim)
    return tuple(ext)  # type: ignore[return-value]


def decode_volume(raw: bytes) -> Volume4D:
    """Decode a complete single-file NIfTI-1 image held in memory."""
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IoError(f"corrupt gzip stream: {exc}") from exc
    header = parse_header(raw)
    if header.is_pair:
        raise HeaderError("paired .hdr/.img NIfTI (magic 'ni1') is not supported")

    shape = _volume_shape(header)
    count = math.prod(shape)
    offset = int(header.vox_offset)
    needed = offset + count * header.bitpix // 8
    if len(raw) < needed:
        raise Truncated(f"voxel data needs {needed} bytes, file has {len(raw)}")

    char = DATATYPES[header.datatype_code][0]
    dtype = np.dtype(char).newbyteorder(">" if header.big_endian else "<")
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = values.astype(np.float64).reshape(shape, order="F")

    slope, inter = header.scl_slope, header.scl_inter
    if not math.isfinite(slope) or slope == 0:
        slope = 1.0
    if not math.isfinite(inter):
        inter = 0.0
    if slope != 1.0 or inter != 0.0:
        data = data * slope + inter

    return Volume4D(data, header.affine, header.tr_seconds, header.datatype_code)


def read_volume(path: str | Path) -> Volume4D:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_volume(raw)


def integer_scaling(vmin: float, vmax: float, datatype_code: int) -> tuple[float, float]:
    """Slope and intercept (both float32-exact) mapping [vmin, vmax] into an
    integer type.

    Signed types use the symmetric range [-max, max].  The slope is rounded up
    so that no value is clipped; reconstruction error is at most slope / 2.
    Integer-valued data that already fits keeps slope 1, intercept 0.
    """
    info = np.iinfo(np.dtype(DATATYPES[datatype_code][0]))
    hi = float(info.max)
    signed = info.min < 0
    if vmin == vmax:
        return 1.0, float(np.float32(vmin))
    if signed:
        inter = float(np.float32((vmin + vmax) / 2.0))
        half = max(vmax - inter, inter - vmin)
    else:
        inter32 = np.float32(vmin)
        if float(inter32) > vmin:
            inter32 = np.nextafter(inter32, np.float32(-np.inf))
        inter = float(inter32)
        half = vmax - inter
    slope32 = np.float32(half / hi)
    if float(slope32) < half / hi:
        slope32 = np.nextafter(slope32, np.float32(np.inf))
    return float(slope32), inter


def encode_volume(
    volume,
    datatype_code: int,
    scaling: tuple[float, float] | None = None,
    big_endian: bool = False,
) -> bytes:
    """Serialise ``volume`` (anything with ``data`` and ``affine``) to bytes.

    ``scaling`` fixes (slope, intercept) for integer targets; by default it is
    derived with :func:`integer_scaling`.
    """
    if datatype_code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype_code} is not supported")
    data = np.asarray(volume.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise RangeError("cannot write non-finite voxel values")
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim not in (3, 4):
        raise HeaderError(f"can only write 3D or 4D data, got {data.ndim}D")

    char, bitpix = DATATYPES[datatype_code]
    order = ">" if big_endian else "<"
    if datatype_code in FLOAT_CODES:
        slope, inter = 1.0, 0.0
        stored = data.astype(np.dtype(char))
        if datatype_code == FLOAT32 and not np.all(np.isfinite(stored)):
            raise RangeError("values overflow float32")
    else:
        info = np.iinfo(np.dtype(char))
        if scaling is not None:
            slope, inter = (float(x) for x in scaling)
        elif np.all(data == np.rint(data)) and data.min() >= info.min and data.max() <= info.max:
            slope, inter = 1.0, 0.0
        else:
            slope, inter = integer_scaling(float(data.min()), float(data.max()), datatype_code)
        if slope == 0 or not math.isfinite(slope) or not math.isfinite(inter):
            raise RangeError(f"invalid scaling ({slope}, {inter})")
        codes = np.rint((data - inter) / slope)
        if codes.min() < info.min or codes.max() > info.max:
            raise RangeError("scaled values fall outside the integer datatype range")
        stored = codes.astype(np.dtype(char))

    affine = np.asarray(volume.affine, dtype=np.float64)
    tr = float(getattr(volume, "tr_seconds", 0.0))
    hdr = np.zeros((), dtype=HEADER_DTYPE_BE if big_endian else HEADER_DTYPE_LE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = data.ndim
    dim[1 : data.ndim + 1] = data.shape
    hdr["dim"] = dim
    hdr["datatype"] = datatype_code
    hdr["bitpix"] = bitpix
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[1:4] = np.sqrt((affine[:3, :3] ** 2).sum(axis=0))
    pixdim[4] = tr
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = SINGLE_FILE_OFFSET
    hdr["scl_slope"] = slope
    hdr["scl_inter"] = inter
    hdr["xyzt_units"] = _UNITS_MM_SEC
    hdr["sform_code"] = 1
    hdr["srow_x"] = affine[0]
    hdr["srow_y"] = affine[1]
    hdr["srow_z"] = affine[2]
    hdr["magic"] = MAGIC_SINGLE

    voxels = stored.astype(stored.dtype.newbyteorder(order)).tobytes(order="F")
    return hdr.tobytes() + b"\x00" * (SINGLE_FILE_OFFSET - HEADER_SIZE) + voxels


def write_volume(
    volume,
    datatype_code: int,
    path: str | Path,
    scaling: tuple[float, float] | None = None,
    big_endian: bool = False,
) -> None:
    """Write ``volume`` as ``.nii``, or gzipped when ``path`` ends in ``.gz``."""
    blob = encode_volume(volume, datatype_code, scaling, big_endian)
    path = Path(path)
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
