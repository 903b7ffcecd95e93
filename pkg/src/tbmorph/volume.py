"""Scalar density volumes on regular 2D/3D grids: normalization, resampling, IO.

Values are density samples at voxel centers; the world coordinate of index i
along an axis is (i + 0.5) * spacing. Total mass is the discrete integral
sum(values) * voxel_volume, which is a plain sum on unit-spacing grids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import (
    AllZeroVolume,
    BadMagic,
    DimensionalityOutOfRange,
    NonFiniteInput,
    NotNifti1,
    TruncatedFile,
    UnsupportedDatatype,
    UnsupportedEncoding,
)

DEFAULT_TARGET_MASS = 1.0e6
DEFAULT_FLOOR = 0.1

MAGIC = b"TBMV1\n"

# NIfTI-1 datatype codes we accept (all plain scalars).
_NIFTI_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}


@dataclass(frozen=True)
class GridSpec:
    """Regular grid: per-axis voxel counts and physical voxel size."""

    dims: tuple[int, ...]
    spacing: tuple[float, ...] = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got {len(dims)} axes")
        if any(d < 4 for d in dims):
            raise ValueError(f"every axis needs at least 4 voxels, got {dims}")
        spacing = self.spacing or tuple(1.0 for _ in dims)
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != len(dims):
            raise ValueError("spacing must give one value per axis")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_coords(self, axis: int) -> np.ndarray:
        """World coordinates of voxel centers along one axis."""
        return (np.arange(self.dims[axis], dtype=np.float64) + 0.5) * self.spacing[axis]

    @property
    def extent(self) -> tuple[float, ...]:
        return tuple(d * s for d, s in zip(self.dims, self.spacing))


@dataclass(frozen=True, eq=False)
class DensityVolume:
    """Nonnegative scalar field on a regular grid. Immutable after construction."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)  # private copy
        if v.shape != self.grid.dims:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteInput("volume contains NaN or infinite values")
        if np.any(v < 0):
            raise ValueError("volume values must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def mass(self) -> float:
        return float(self.values.sum()) * self.grid.voxel_volume


def normalize_density(
    v: DensityVolume,
    target_mass: float = DEFAULT_TARGET_MASS,
    floor: float = DEFAULT_FLOOR,
) -> DensityVolume:
    """Scale to target mass, add a small constant floor, and rescale.

    The floor keeps the output strictly positive so mass-preservation
    constraints stay well posed; the trailing rescale restores the exact
    target mass. Output minimum is at least
    floor * target / (target + floor * N * voxel_volume).
    """
    if floor < 0:
        raise ValueError("floor must be nonnegative")
    if target_mass <= 0:
        raise ValueError("target_mass must be positive")
    vals = v.values
    total = vals.sum() * v.grid.voxel_volume
    if total == 0.0:
        raise AllZeroVolume("cannot normalize a volume with zero total mass")
    scaled = vals * (target_mass / total)
    if floor > 0:
        scaled = scaled + floor
        scaled *= target_mass / (scaled.sum() * v.grid.voxel_volume)
    return DensityVolume(v.grid, scaled)


def resample(v: DensityVolume, new_dims) -> DensityVolume:
    """Multilinear resampling onto a new voxel count, preserving extent and mass."""
    old = v.grid
    new_dims = tuple(int(d) for d in new_dims)
    new_spacing = tuple(s * d / nd for s, d, nd in zip(old.spacing, old.dims, new_dims))
    new_grid = GridSpec(new_dims, new_spacing)
    # source index coordinates of the new voxel centers
    axes = [
        (new_grid.axis_coords(a) / old.spacing[a]) - 0.5
        for a in range(old.ndim)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    out = map_coordinates(v.values, np.stack(mesh), order=1, mode="nearest")
    total = out.sum() * new_grid.voxel_volume
    if total > 0:
        out *= v.mass / total
    return DensityVolume(new_grid, out)


def write_volume(v: DensityVolume, path) -> None:
    """Write the native container: magic, axis count, dims, spacing, then the
    row-major little-endian float64 payload."""
    header = [float(v.grid.ndim)]
    header += [float(d) for d in v.grid.dims]
    header += list(v.grid.spacing)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.asarray(header, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(v.values, dtype="<f8").tobytes())


def _read_f64(fh, count, what):
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise TruncatedFile(f"file ended inside {what}")
    return np.frombuffer(raw, dtype="<f8")


def read_volume(path) -> DensityVolume:
    """Read the native scalar container written by :func:`write_volume`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
        ndim_f = float(_read_f64(fh, 1, "axis count")[0])
        if ndim_f < 0:
            raise UnsupportedEncoding(
                "vector payload container; use the embedding reader"
            )
        if ndim_f not in (2.0, 3.0):
            raise UnsupportedEncoding(f"axis count must be 2 or 3, got {ndim_f}")
        ndim = int(ndim_f)
        dims_f = _read_f64(fh, ndim, "dims")
        if np.any(dims_f != np.floor(dims_f)) or np.any(dims_f < 4):
            raise UnsupportedEncoding(f"bad dims {dims_f.tolist()}")
        dims = tuple(int(d) for d in dims_f)
        spacing = tuple(float(s) for s in _read_f64(fh, ndim, "spacing"))
        grid = GridSpec(dims, spacing)
        payload = _read_f64(fh, grid.voxel_count, "payload").reshape(dims)
        if fh.read(1):
            raise UnsupportedEncoding("trailing bytes after payload")
    return DensityVolume(grid, payload)


def read_nifti1(path) -> DensityVolume:
    """Read a single-file NIfTI-1 scalar image as a density volume.

    Header fields used: dim, pixdim, datatype, vox_offset, scl_slope/scl_inter,
    magic. Both byte orders are handled. Trailing singleton dimensions are
    dropped; more than three non-trivial spatial axes is an error.
    """
    with open(path, "rb") as fh:
        hdr = fh.read(348)
        if len(hdr) < 348:
            raise NotNifti1("file shorter than a NIfTI-1 header")
        for order in ("<", ">"):
            (sizeof_hdr,) = struct.unpack(order + "i", hdr[0:4])
            if sizeof_hdr == 348:
                break
        else:
            raise NotNifti1("sizeof_hdr is not 348 in either byte order")
        magic = hdr[344:348]
        if magic != b"n+1\x00":
            raise NotNifti1(f"magic {magic!r} is not a single-file NIfTI-1 tag")
        dim = struct.unpack(order + "8h", hdr[40:56])
        datatype, _bitpix = struct.unpack(order + "2h", hdr[70:74])
        pixdim = struct.unpack(order + "8f", hdr[76:108])
        (vox_offset,) = struct.unpack(order + "f", hdr[108:112])
        scl_slope, scl_inter = struct.unpack(order + "2f", hdr[112:120])

        ndim_hdr = dim[0]
        if not 1 <= ndim_hdr <= 7:
            raise NotNifti1(f"dim[0] = {ndim_hdr} out of range")
        if datatype not in _NIFTI_DTYPES:
            raise UnsupportedDatatype(f"datatype code {datatype} not supported")
        shape = [max(1, dim[i + 1]) for i in range(ndim_hdr)]
        if any(s > 1 for s in shape[3:]):
            raise DimensionalityOutOfRange(
                "more than three non-trivial spatial dimensions"
            )
        spatial = [s for s in shape[:3] if s > 1]
        if len(spatial) not in (2, 3):
            raise DimensionalityOutOfRange(
                f"need 2 or 3 non-trivial spatial axes, got {len(spatial)}"
            )

        dtype = _NIFTI_DTYPES[datatype].newbyteorder(order)
        count = int(np.prod(shape))
        offset = int(vox_offset) if vox_offset >= 348 else 352
        fh.seek(offset)
        raw = fh.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise TruncatedFile("NIfTI payload shorter than header promises")
        data = np.frombuffer(raw, dtype=dtype, count=count)
        # NIfTI stores the first axis fastest
        data = data.reshape(shape, order="F")
        data = np.squeeze(data).astype(np.float64)
        if scl_slope != 0.0 and np.isfinite(scl_slope):
            data = data * scl_slope + scl_inter

    full_spacing = [abs(p) if p != 0 else 1.0 for p in pixdim[1:4]]
    spacing = tuple(sp for s, sp in zip(shape[:3], full_spacing) if s > 1)
    grid = GridSpec(tuple(spatial), spacing)
    return DensityVolume(grid, data)
