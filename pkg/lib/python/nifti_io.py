"""
NIfTI-1 volume I/O

Reads and writes single-file NIfTI-1 (".nii", ".nii.gz") volumes and defines
the in-memory Volume and BinaryMask3 types.

Supported on read:
- datatypes uint8 (2), int16 (4), float32 (16)
- either byte order (detected from sizeof_hdr)
- gzip streams (detected from the 0x1F 0x8B lead bytes)
- scl_slope / scl_inter scaling, vox_offset
- trailing size-1 dimensions beyond the third are squeezed

Voxels are always held as float32 in memory. Header fields this module does
not interpret are kept on the Volume and written back unchanged.
"""

import gzip as gzip_lib
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from mra_errors import (
    NiftiBadMagicError,
    NiftiDimensionError,
    NiftiError,
    NiftiTruncatedError,
    NiftiTwoFileError,
    NiftiUnsupportedDatatypeError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
DATA_OFFSET = 352

HEADER_FIELDS = [
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

HEADER_DTYPE = np.dtype(HEADER_FIELDS).newbyteorder("<")

# datatype code -> (name, numpy type)
DATATYPES = {
    2: ("uint8", np.uint8),
    4: ("int16", np.int16),
    16: ("float32", np.float32),
}
DATATYPE_CODES = {name: code for code, (name, _) in DATATYPES.items()}

PathLike = Union[str, Path]


@dataclass
class Volume:
    """3D voxel grid (x, y, z) with geometry"""
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None
    source_dtype: str = "float32"
    header: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.size == 0:
            raise ShapeMismatchError("volume data must be a non-empty 3D array", shape=self.data.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.affine is None:
            self.affine = np.diag(list(self.spacing) + [1.0])
        self.affine = np.asarray(self.affine, dtype=np.float64)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry and header, new voxels"""
        data = np.asarray(data, dtype=np.float32)
        if data.shape != self.data.shape:
            raise ShapeMismatchError("replacement voxels change the volume dims",
                                     expected=self.data.shape, got=data.shape)
        return replace(self, data=data, source_dtype="float32")


@dataclass
class BinaryMask3:
    """Boolean 3D mask matching a Volume's dims"""
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=bool)
        if self.voxels.ndim != 3:
            raise ShapeMismatchError("mask must be 3D", shape=self.voxels.shape)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.voxels.shape

    @property
    def count(self) -> int:
        return int(self.voxels.sum())

    @classmethod
    def empty(cls, dims: Tuple[int, int, int]) -> "BinaryMask3":
        return cls(np.zeros(dims, dtype=bool))

    @classmethod
    def full(cls, dims: Tuple[int, int, int]) -> "BinaryMask3":
        return cls(np.ones(dims, dtype=bool))


def volume_id(path: PathLike) -> str:
    """File name without .nii / .nii.gz"""
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(name).stem


def _quaternion_affine(hdr: np.ndarray) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rotation = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    pixdim = hdr["pixdim"].astype(np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    affine = np.eye(4)
    affine[:3, :3] = rotation * np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def _header_affine(hdr: np.ndarray, spacing: Tuple[float, float, float]) -> np.ndarray:
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
        return affine
    if hdr["qform_code"] > 0:
        return _quaternion_affine(hdr)
    return np.diag(list(spacing) + [1.0])


def read_nifti(path: PathLike) -> Volume:
    """
    Parse a single-file NIfTI-1 volume

    Args:
        path: .nii or .nii.gz file

    Returns:
        Volume with float32 voxels in (x, y, z) order
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip_lib.decompress(raw)
        except (OSError, EOFError, zlib.error) as e:
            raise NiftiTruncatedError(f"gzip stream is damaged: {e}", path=str(path))
    if len(raw) < HEADER_SIZE:
        raise NiftiTruncatedError("file shorter than a NIfTI-1 header", path=str(path), size=len(raw))

    if int.from_bytes(raw[:4], "little") == HEADER_SIZE:
        order = "<"
    elif int.from_bytes(raw[:4], "big") == HEADER_SIZE:
        order = ">"
    else:
        raise NiftiBadMagicError("sizeof_hdr is not 348 in either byte order", path=str(path))
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))
    hdr = hdr.astype(HEADER_DTYPE).reshape(())

    magic = hdr["magic"].item()
    if magic == b"ni1":
        raise NiftiTwoFileError("two-file (.hdr/.img) NIfTI is not supported", path=str(path))
    if magic != b"n+1":
        raise NiftiBadMagicError("bad NIfTI magic", path=str(path), magic=magic)

    dim = [int(v) for v in hdr["dim"]]
    if not 1 <= dim[0] <= 7:
        raise NiftiDimensionError("dim[0] out of range", dim=dim)
    shape = dim[1:dim[0] + 1]
    while len(shape) > 3 and shape[-1] == 1:
        shape.pop()
    if len(shape) != 3 or min(shape) < 1:
        raise NiftiDimensionError("only 3D volumes are supported", dim=dim)

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiUnsupportedDatatypeError("unsupported NIfTI datatype", datatype=code)
    dtype_name, np_type = DATATYPES[code]
    voxel_dtype = np.dtype(np_type).newbyteorder(order)

    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiError("vox_offset points inside the header", vox_offset=offset)
    count = int(np.prod(shape))
    needed = offset + count * voxel_dtype.itemsize
    if len(raw) < needed:
        raise NiftiTruncatedError("voxel data is truncated", path=str(path), expected=needed, size=len(raw))
    data = np.frombuffer(raw, dtype=voxel_dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float32)

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        data = (data.astype(np.float64) * slope + inter).astype(np.float32)

    pixdim = np.abs(hdr["pixdim"][1:4].astype(np.float64))
    if np.any(pixdim == 0):
        logger.warning("%s: zero pixdim replaced by 1.0", path)
        pixdim[pixdim == 0] = 1.0
    spacing = tuple(float(p) for p in pixdim)

    logger.debug("Read %s: dims=%s dtype=%s order=%s", path, tuple(shape), dtype_name, order)
    return Volume(
        data=np.ascontiguousarray(data),
        spacing=spacing,
        affine=_header_affine(hdr, spacing),
        source_dtype=dtype_name,
        header=hdr,
    )


def _encode_voxels(data: np.ndarray, dtype_name: str) -> np.ndarray:
    np_type = DATATYPES[DATATYPE_CODES[dtype_name]][1]
    if np.issubdtype(np_type, np.integer):
        info = np.iinfo(np_type)
        data = np.clip(np.rint(data), info.min, info.max)
    return data.astype(np.dtype(np_type).newbyteorder("<"))


def write_nifti(volume: Volume, path: PathLike, gzip: bool = False, dtype: str = "float32") -> None:
    """
    Write a little-endian single-file NIfTI-1 volume

    Args:
        volume: Volume to store
        path: Destination file
        gzip: Compress the stream
        dtype: "float32" (default), "int16" or "uint8"
    """
    if dtype not in DATATYPE_CODES:
        raise NiftiUnsupportedDatatypeError("cannot write datatype", dtype=dtype)
    if volume.header is not None:
        hdr = np.array(volume.header, dtype=HEADER_DTYPE).reshape(())
    else:
        hdr = np.zeros((), dtype=HEADER_DTYPE)
        hdr["xyzt_units"] = 2  # mm
        hdr["pixdim"][0] = 1.0

    code = DATATYPE_CODES[dtype]
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [3, *volume.dims, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = np.dtype(DATATYPES[code][1]).itemsize * 8
    hdr["pixdim"][1:4] = volume.spacing
    hdr["vox_offset"] = DATA_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    if hdr["sform_code"] <= 0:
        hdr["sform_code"] = 1
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = volume.affine[0], volume.affine[1], volume.affine[2]
    hdr["magic"] = b"n+1"

    payload = b"".join([
        hdr.tobytes(),
        b"\x00" * (DATA_OFFSET - HEADER_SIZE),
        _encode_voxels(volume.data, dtype).tobytes(order="F"),
    ])
    if gzip:
        payload = gzip_lib.compress(payload, mtime=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    logger.debug("Wrote %s (%s, gzip=%s)", path, dtype, gzip)


def write_mask(mask: BinaryMask3, reference: Volume, path: PathLike, gzip: bool = False) -> None:
    """Store a mask as uint8 {0, 1} with the reference volume's geometry"""
    if mask.dims != reference.dims:
        raise ShapeMismatchError("mask dims differ from the reference volume",
                                 mask=mask.dims, volume=reference.dims)
    write_nifti(reference.with_data(mask.voxels.astype(np.float32)), path, gzip=gzip, dtype="uint8")


def read_mask(path: PathLike) -> BinaryMask3:
    return BinaryMask3(read_nifti(path).data > 0)
