import struct

import numpy as np
import pytest

from tbmorph import DensityVolume, GridSpec, identity_map


@pytest.fixture
def grid2d():
    return GridSpec((8, 9))


@pytest.fixture
def grid3d():
    return GridSpec((6, 6, 6))


def world(grid):
    return identity_map(grid).components


def gaussian(grid, center, sigma):
    X = world(grid)
    r2 = np.zeros(grid.dims)
    for a in range(grid.ndim):
        r2 += (X[a] - center[a]) ** 2
    return np.exp(-r2 / (2.0 * sigma * sigma))


def write_nifti1(path, data, spacing=None, datatype=16, scl_slope=0.0,
                 scl_inter=0.0, magic=b"n+1\x00", extra_dim=None):
    """Minimal single-file NIfTI-1 writer for test fixtures."""
    data = np.asarray(data)
    ndim = data.ndim if extra_dim is None else data.ndim + 1
    dim = [ndim] + list(data.shape) + ([extra_dim] if extra_dim else [])
    dim += [1] * (8 - len(dim))
    pixdim = [0.0] + list(spacing or [1.0] * data.ndim)
    pixdim += [1.0] * (8 - len(pixdim))
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, datatype)
    bitpix = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64, 32: 64}[datatype]
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, scl_slope, scl_inter)
    hdr[344:348] = magic
    np_dtype = {2: "u1", 4: "<i2", 8: "<i4", 16: "<f4", 64: "<f8",
                32: "<c8"}[datatype]
    payload = np.asarray(data, dtype=np_dtype).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * 4)  # pad to vox_offset 352
        fh.write(payload)
