"""Volume container, native/NIfTI-1 file formats and HU preprocessing."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

HU_MIN = -1024.0
HU_MAX = 2048.0
HU_RANGE = HU_MAX - HU_MIN

UNITS = ("HU", "normalized")

_MAGIC = b"TVSR"
_VERSION = 1
# magic, version, D, H, W, spacing z/y/x, unit flag, dtype flag
_HEADER = struct.Struct("<4sH3I3fBB")


class FormatError(ValueError):
    """A volume file is malformed; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Volume:
    """A D×H×W voxel grid with slice spacing and intensity unit.

    ``voxels`` is float32, axial slices stacked along axis 0.
    """

    voxels: np.ndarray
    spacing_z: float = 1.0
    spacing_xy: float = 1.0
    unit: str = "HU"

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"volume voxels must be a non-empty 3-D array, got shape {vox.shape}")
        if self.spacing_z <= 0 or self.spacing_xy <= 0:
            raise ValueError(f"spacing must be positive, got z={self.spacing_z} xy={self.spacing_xy}")
        if self.unit not in UNITS:
            raise ValueError(f"unknown unit {self.unit!r}")
        if self.unit == "normalized" and vox.size and (vox.min() < 0.0 or vox.max() > 1.0):
            raise ValueError("normalized volume has voxels outside [0, 1]")
        object.__setattr__(self, "voxels", vox)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    def with_voxels(self, voxels: np.ndarray, **changes) -> "Volume":
        return replace(self, voxels=voxels, **changes)


def write_volume(vol: Volume, path) -> None:
    d, h, w = vol.shape
    header = _HEADER.pack(
        _MAGIC, _VERSION, d, h, w,
        vol.spacing_z, vol.spacing_xy, vol.spacing_xy,
        UNITS.index(vol.unit), 0,
    )
    Path(path).write_bytes(header + vol.voxels.astype("<f4", copy=False).tobytes())


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} of {_HEADER.size} bytes", len(raw))
    magic, version, d, h, w, sz, sy, _sx, unit, dtype = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype != 0:
        raise FormatError(f"unknown payload dtype flag {dtype}", _HEADER.size - 1)
    if unit >= len(UNITS):
        raise FormatError(f"unknown unit flag {unit}", _HEADER.size - 2)
    if min(d, h, w) < 1:
        raise FormatError(f"non-positive dims {(d, h, w)}", 6)
    expected = 4 * d * h * w
    payload = len(raw) - _HEADER.size
    if payload != expected:
        raise FormatError(f"payload is {payload} bytes, expected {expected}", _HEADER.size + min(payload, expected))
    vox = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(d, h, w).astype(np.float32)
    try:
        return Volume(vox, spacing_z=float(sz), spacing_xy=float(sy), unit=UNITS[unit])
    except ValueError as exc:
        raise FormatError(str(exc), 6) from None


# NIfTI-1 datatype codes we accept
_NIFTI_DTYPES = {4: "<i2", 16: "<f4"}


def read_nifti1(path) -> Volume:
    """Read an uncompressed single-file little-endian NIfTI-1 volume in HU.

    Orientation (qform/sform) is ignored; the array is taken as stored with
    x fastest, giving voxels indexed (z, y, x).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 348:
        raise FormatError("truncated NIfTI header", len(raw))
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        raise FormatError(f"sizeof_hdr is {sizeof_hdr}, expected 348 (little-endian)", 0)
    if raw[344:348] != b"n+1\x00":
        raise FormatError(f"bad magic {raw[344:348]!r}", 344)
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not (ndim == 3 or (ndim == 4 and dim[4] == 1)):
        raise FormatError(f"expected a 3-D volume, dim = {dim}", 40)
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise FormatError(f"non-positive dims {dim[1:4]}", 42)
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported datatype code {datatype}", 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from("<3f", raw, 108)
    start = int(vox_offset)
    dt = np.dtype(_NIFTI_DTYPES[datatype])
    n = nx * ny * nz
    if start < 348 or len(raw) < start + n * dt.itemsize:
        raise FormatError(f"payload truncated: need {n * dt.itemsize} bytes from offset {start}", len(raw))
    data = np.frombuffer(raw, dtype=dt, count=n, offset=start).astype(np.float64).reshape(nz, ny, nx)
    if slope != 0.0:
        data = data * slope + inter
    return Volume(
        data.astype(np.float32),
        spacing_z=float(pixdim[3]) if pixdim[3] > 0 else 1.0,
        spacing_xy=float(pixdim[1]) if pixdim[1] > 0 else 1.0,
        unit="HU",
    )


def write_nifti1(vol: Volume, path, datatype: int = 4) -> None:
    """Minimal NIfTI-1 writer (used to build ingestion fixtures)."""
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"unsupported datatype code {datatype}")
    d, h, w = vol.shape
    dt = np.dtype(_NIFTI_DTYPES[datatype])
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, vol.spacing_xy, vol.spacing_xy, vol.spacing_z, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    vox = np.rint(vol.voxels) if dt.kind == "i" else vol.voxels
    Path(path).write_bytes(bytes(hdr) + vox.astype(dt).tobytes())


def normalize_hu(vol: Volume) -> Volume:
    """Map HU in [-1024, 2048] linearly onto [0, 1], clamping outside."""
    if vol.unit != "HU":
        raise ValueError(f"normalize_hu expects an HU volume, got unit {vol.unit!r}")
    v = (vol.voxels.astype(np.float64) - HU_MIN) / HU_RANGE
    return vol.with_voxels(np.clip(v, 0.0, 1.0).astype(np.float32), unit="normalized")


def denormalize(vol: Volume) -> Volume:
    if vol.unit != "normalized":
        raise ValueError(f"denormalize expects a normalized volume, got unit {vol.unit!r}")
    return vol.with_voxels((vol.voxels.astype(np.float64) * HU_RANGE + HU_MIN).astype(np.float32), unit="HU")


def as_normalized(vol: Volume) -> Volume:
    return vol if vol.unit == "normalized" else normalize_hu(vol)


AXES = ("axial", "coronal", "sagittal")


def extract_slice(vol: Volume, axis: str, index: int) -> np.ndarray:
    """Axial -> H×W, coronal -> D×W, sagittal -> D×H."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    ax = AXES.index(axis)
    n = vol.shape[ax]
    if not 0 <= index < n:
        raise IndexError(f"{axis} index {index} out of range [0, {n})")
    return np.take(vol.voxels, index, axis=ax)


def export_slice_pgm(vol: Volume, axis: str, index: int, window: tuple[float, float], path) -> np.ndarray:
    """Write one slice as an 8-bit binary PGM using an HU (center, width) window.

    Returns the 8-bit image that was written.
    """
    center, width = window
    if width <= 0:
        raise ValueError("window width must be positive")
    img = extract_slice(vol, axis, index).astype(np.float64)
    if vol.unit == "normalized":
        img = img * HU_RANGE + HU_MIN
    lo = center - width / 2.0
    gray = np.clip((img - lo) / width, 0.0, 1.0)
    out = np.rint(gray * 255.0).astype(np.uint8)
    rows, cols = out.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (cols, rows) + out.tobytes())
    return out


def load_any(path) -> Volume:
    """Dispatch on suffix: ``.nii`` is NIfTI-1, anything else the native container."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"volume file {p} not found")
    return read_nifti1(p) if p.suffix == ".nii" else read_volume(p)


def save_any(vol: Volume, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if p.suffix == ".nii":
        write_nifti1(vol, p, datatype=16)
    else:
        write_volume(vol, p)
