"""Volume types, tumor region semantics and NIfTI-1 reading/writing.

Arrays are indexed ``[x, y, z]``.  On disk the payload is written with x
varying fastest, which is the NIfTI convention, so ``order="F"`` is used when
(de)serialising.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (
    BadMagicError,
    CorruptLengthError,
    DimsMismatchError,
    InvalidLabelCodeError,
    IoFailureError,
    UnsupportedDatatypeError,
)

BACKGROUND, NETC, SNFH, ET, RC = 0, 1, 2, 3, 4
LABEL_CODES = (BACKGROUND, NETC, SNFH, ET, RC)
CLASS_NAMES = {NETC: "NETC", SNFH: "SNFH", ET: "ET", RC: "RC"}

MODALITIES = ("t1n", "t1c", "t2w", "t2f")

# BraTS 2025 grid
BRATS_SHAPE = (182, 218, 182)


class Region(str, Enum):
    ET = "ET"
    NETC = "NETC"
    RC = "RC"
    SNFH = "SNFH"
    TC = "TC"
    WT = "WT"

    @property
    def labels(self) -> frozenset[int]:
        return _REGION_LABELS[self]


_REGION_LABELS = {
    Region.ET: frozenset({ET}),
    Region.NETC: frozenset({NETC}),
    Region.SNFH: frozenset({SNFH}),
    Region.RC: frozenset({RC}),
    Region.TC: frozenset({NETC, ET}),
    Region.WT: frozenset({NETC, SNFH, ET}),
}

# column order used in every report
REGIONS = (Region.ET, Region.NETC, Region.RC, Region.SNFH, Region.TC, Region.WT)


class Phase(str, Enum):
    PRE = "pre"
    POST = "post"

    @classmethod
    def parse(cls, value: Union[str, "Phase"]) -> "Phase":
        if isinstance(value, Phase):
            return value
        v = str(value).strip().lower()
        aliases = {"pre": cls.PRE, "pretreatment": cls.PRE, "pre-treatment": cls.PRE,
                   "post": cls.POST, "posttreatment": cls.POST, "post-treatment": cls.POST}
        if v not in aliases:
            raise ValueError(f"unknown phase {value!r}; expected 'pre' or 'post'")
        return aliases[v]


@dataclass(frozen=True)
class Dims:
    nx: int
    ny: int
    nz: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError(f"dims must be positive, got {self.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(s > 0 for s in sp):
        raise ValueError(f"spacing must be 3 positive values, got {spacing}")
    return sp


def _frozen(arr: np.ndarray) -> np.ndarray:
    """Read-only array; arrays that are already read-only are shared, not copied."""
    if isinstance(arr, np.ndarray) and not arr.flags.writeable:
        return arr
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    """One MRI modality. ``header`` keeps the original 348 header bytes, if any."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    header: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {data.shape}")
        data = data.astype(np.float32, copy=False)
        if not np.isfinite(data).all():
            raise ValueError("intensity volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Dims:
        return Dims(*self.data.shape, spacing=self.spacing)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    header: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {data.shape}")
        validate_labels(data)
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8, copy=False)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Dims:
        return Dims(*self.data.shape, spacing=self.spacing)


def validate_labels(data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.size and (data.min() < 0 or data.max() > RC):
        bad = np.unique(data[(data < 0) | (data > RC)])
        raise InvalidLabelCodeError(f"label codes outside 0..4: {bad[:10].tolist()}")
    if np.issubdtype(data.dtype, np.floating) and not np.all(data == np.round(data)):
        raise InvalidLabelCodeError("label volume contains non-integer codes")


def validate_probabilities(prob: np.ndarray, atol: float = 1e-4) -> None:
    """Check a ``(5, nx, ny, nz)`` probability array."""
    prob = np.asarray(prob)
    if prob.ndim != 4 or prob.shape[0] != len(LABEL_CODES):
        raise ValueError(f"expected shape (5, nx, ny, nz), got {prob.shape}")
    if prob.min() < 0 or prob.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.allclose(prob.sum(axis=0, dtype=np.float64), 1.0, atol=atol, rtol=0):
        raise ValueError("per-voxel probabilities must sum to 1")


def _label_array(label) -> np.ndarray:
    return label.data if isinstance(label, LabelVolume) else np.asarray(label)


def region_mask(label, region: Region | str) -> np.ndarray:
    """Boolean mask of voxels whose code belongs to ``region``."""
    region = Region(region)
    arr = _label_array(label)
    return np.isin(arr, tuple(region.labels))


@dataclass(frozen=True, eq=False)
class MultiModalCase:
    id: str
    modalities: dict[str, np.ndarray]
    label: np.ndarray
    phase: Phase = Phase.POST
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if tuple(self.modalities) != MODALITIES:
            missing = set(MODALITIES) ^ set(self.modalities)
            if missing:
                raise ValueError(f"case {self.id}: modalities must be {MODALITIES}")
            object.__setattr__(self, "modalities", {m: self.modalities[m] for m in MODALITIES})
        label = np.asarray(self.label)
        validate_labels(label)
        object.__setattr__(self, "label", _frozen(label.astype(np.uint8, copy=False)))
        mods = {}
        for name, img in self.modalities.items():
            img = np.asarray(img, dtype=np.float32)
            if img.shape != label.shape:
                raise DimsMismatchError(
                    f"case {self.id}: {name} has shape {img.shape}, label {label.shape}")
            mods[name] = _frozen(img)
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "phase", Phase.parse(self.phase))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        if self.phase is Phase.PRE and (self.label == RC).any():
            raise ValueError(f"case {self.id}: pre-treatment label contains RC (code 4)")

    @property
    def dims(self) -> Dims:
        return Dims(*self.label.shape, spacing=self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.label.shape


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

HEADER_SIZE = 348
VOX_OFFSET = 352
DT_UINT8 = 2
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: (np.uint8, 8), DT_FLOAT32: (np.float32, 32)}

# byte offsets in the 348-byte header
_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL = 112
_OFF_XYZT_UNITS = 123
_OFF_QFORM = 252
_OFF_SROW = 280
_OFF_MAGIC = 344


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptLengthError(f"{path}: truncated or corrupt gzip stream") from exc
    return raw


def load_nifti(path, kind: str | None = None) -> IntensityVolume | LabelVolume:
    """Read a single-file NIfTI-1 volume (``.nii`` or ``.nii.gz``).

    Datatype 16 loads as :class:`IntensityVolume`, datatype 2 as
    :class:`LabelVolume`.  ``kind`` ("intensity" or "label") forces the
    result type; a uint8 file requested as intensity is upcast to float32.
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise CorruptLengthError(f"{path}: {len(raw)} bytes, shorter than a NIfTI-1 header")

    magic = raw[_OFF_MAGIC:_OFF_MAGIC + 4]
    if magic == b"ni1\x00":
        raise BadMagicError(f"{path}: paired .hdr/.img NIfTI ('ni1') is not supported; "
                            "convert to single-file .nii")
    if magic != b"n+1\x00":
        raise BadMagicError(f"{path}: bad NIfTI magic {magic!r}")

    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise BadMagicError(f"{path}: sizeof_hdr is not 348")

    dim = struct.unpack_from(endian + "8h", raw, _OFF_DIM)
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise ValueError(f"{path}: only 3D volumes are supported (dim={dim})")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise CorruptLengthError(f"{path}: non-positive dimension {shape}")

    datatype = struct.unpack_from(endian + "h", raw, _OFF_DATATYPE)[0]
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(
            f"{path}: datatype {datatype} unsupported (only 2=uint8 and 16=float32)")
    dtype, _ = _DTYPES[datatype]

    pixdim = struct.unpack_from(endian + "8f", raw, _OFF_PIXDIM)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    offset = int(struct.unpack_from(endian + "f", raw, _OFF_VOX_OFFSET)[0])
    if offset < HEADER_SIZE:
        offset = VOX_OFFSET

    nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) < offset + nbytes:
        raise CorruptLengthError(
            f"{path}: payload has {max(len(raw) - offset, 0)} bytes, dims {shape} need {nbytes}")
    flat = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder(endian), count=int(np.prod(shape)),
                         offset=offset)
    data = flat.reshape(shape, order="F").astype(dtype)

    header = raw[:HEADER_SIZE] if endian == "<" else None
    if kind is None:
        kind = "label" if datatype == DT_UINT8 else "intensity"
    if kind == "label":
        if datatype == DT_FLOAT32:
            if not np.all(data == np.round(data)):
                raise InvalidLabelCodeError(f"{path}: float label file has non-integer codes")
        try:
            validate_labels(data)
        except InvalidLabelCodeError as exc:
            raise InvalidLabelCodeError(f"{path}: {exc}") from None
        return LabelVolume(data.astype(np.uint8), spacing, header)
    if kind == "intensity":
        return IntensityVolume(data.astype(np.float32), spacing, header)
    raise ValueError(f"kind must be 'intensity' or 'label', got {kind!r}")


def _blank_header() -> bytearray:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")  # 'regular'
    struct.pack_into("<ff", hdr, _OFF_SCL, 1.0, 0.0)
    struct.pack_into("<b", hdr, _OFF_XYZT_UNITS, 2 | 8)  # mm, s
    # sform = identity scaled by spacing is filled on encode
    struct.pack_into("<hh", hdr, _OFF_QFORM, 0, 2)
    return hdr


def encode_nifti(volume: IntensityVolume | LabelVolume) -> bytes:
    """Serialise a volume to uncompressed single-file NIfTI-1 bytes."""
    if isinstance(volume, LabelVolume):
        datatype = DT_UINT8
    elif isinstance(volume, IntensityVolume):
        datatype = DT_FLOAT32
    else:
        raise TypeError(f"cannot encode {type(volume).__name__}")
    dtype, bitpix = _DTYPES[datatype]
    fresh = volume.header is None
    hdr = _blank_header() if fresh else bytearray(volume.header)
    nx, ny, nz = volume.data.shape
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, _OFF_DIM, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, _OFF_DATATYPE, datatype, bitpix)
    old_pix = struct.unpack_from("<8f", hdr, _OFF_PIXDIM)
    qfac = old_pix[0] if old_pix[0] in (-1.0, 1.0) else 1.0
    struct.pack_into("<8f", hdr, _OFF_PIXDIM, qfac, *volume.spacing, *old_pix[4:])
    struct.pack_into("<f", hdr, _OFF_VOX_OFFSET, float(VOX_OFFSET))
    struct.pack_into("<ff", hdr, _OFF_SCL, 1.0, 0.0)
    if fresh:
        sx, sy, sz = volume.spacing
        struct.pack_into("<12f", hdr, _OFF_SROW,
                         sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0)
    hdr[_OFF_MAGIC:_OFF_MAGIC + 4] = b"n+1\x00"
    payload = np.ascontiguousarray(volume.data.astype(np.dtype(dtype).newbyteorder("<")).ravel(order="F"))
    return bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload.tobytes()


def save_nifti(volume: IntensityVolume | LabelVolume, path) -> None:
    """Write ``volume``; a ``.gz`` suffix selects gzip compression.

    The gzip stream carries no timestamp so identical volumes give
    byte-identical files.
    """
    path = Path(path)
    blob = encode_nifti(volume)
    if path.suffix == ".gz":
        blob = gzip.compress(blob, compresslevel=6, mtime=0)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def check_same_shape(*arrays: np.ndarray, names: Sequence[str] | None = None) -> None:
    shapes = [np.shape(a) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(f"{n}={s}" for n, s in zip(names or range(len(shapes)), shapes))
        raise DimsMismatchError(f"shape mismatch: {label}")
