"""Discrete vector calculus on voxel grids, plus cubic sampling along maps.

All differential operators use second-order stencils: central differences in
the interior, one-sided three-point formulas at the faces (exact on affine
fields). Each forward stencil has an exact transpose (`*_adjoint`), so sums
of squares of these operators can be differentiated without discretization
slack; the solver relies on that.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import GridMismatch
from .volume import DensityVolume, GridSpec


@dataclass(eq=False)
class VectorField:
    """Map f: grid -> world coordinates, one component per axis."""

    grid: GridSpec
    components: np.ndarray = field(repr=False)  # (ndim, *dims), world units

    def __post_init__(self):
        c = np.asarray(self.components, dtype=np.float64)
        if c.shape != (self.grid.ndim,) + self.grid.dims:
            raise ValueError(
                f"components shape {c.shape} does not match grid {self.grid.dims}"
            )
        self.components = c

    def validate(self) -> "VectorField":
        if not np.all(np.isfinite(self.components)):
            raise ValueError("vector field contains non-finite values")
        return self

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.components.copy())


@dataclass(eq=False)
class JacobianField:
    """Per-voxel matrix of partial derivatives, entries[i, k] = d f_i / d x_k."""

    grid: GridSpec
    entries: np.ndarray = field(repr=False)  # (ndim, ndim, *dims)

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        n = self.grid.ndim
        if e.shape != (n, n) + self.grid.dims:
            raise ValueError(f"entries shape {e.shape} does not match grid")
        self.entries = e


def _diff(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    return np.gradient(a, h, axis=axis, edge_order=2)


def _diff_adjoint(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Exact transpose of the `_diff` stencil along one axis."""
    a = np.moveaxis(a, axis, 0)
    out = np.zeros_like(a)
    inv2h = 1.0 / (2.0 * h)
    # transpose of the interior central rows
    out[2:] += a[1:-1] * inv2h
    out[:-2] -= a[1:-1] * inv2h
    # transpose of the two one-sided boundary rows
    invh = 1.0 / h
    out[0] += -1.5 * invh * a[0]
    out[1] += 2.0 * invh * a[0]
    out[2] += -0.5 * invh * a[0]
    out[-3] += 0.5 * invh * a[-1]
    out[-2] += -2.0 * invh * a[-1]
    out[-1] += 1.5 * invh * a[-1]
    return np.moveaxis(out, 0, axis)


def identity_map(grid: GridSpec) -> VectorField:
    """The map id(x) = x sampled at voxel centers."""
    n = grid.ndim
    comps = np.empty((n,) + grid.dims)
    for a in range(n):
        shape = [1] * n
        shape[a] = grid.dims[a]
        comps[a] = grid.axis_coords(a).reshape(shape)
    return VectorField(grid, comps)


def gradient(values: np.ndarray, grid: GridSpec) -> VectorField:
    """Second-order gradient of a scalar field."""
    comps = np.stack(
        [_diff(values, a, grid.spacing[a]) for a in range(grid.ndim)]
    )
    return VectorField(grid, comps)


def jacobian(f: VectorField) -> JacobianField:
    """Componentwise gradient of a vector field."""
    g = f.grid
    n = g.ndim
    entries = np.empty((n, n) + g.dims)
    for i in range(n):
        for k in range(n):
            entries[i, k] = _diff(f.components[i], k, g.spacing[k])
    return JacobianField(g, entries)


def _det_cof(entries: np.ndarray):
    """Closed-form determinant and cofactor matrix C[i, k] = d det / d J[i, k]."""
    n = entries.shape[0]
    J = entries
    if n == 2:
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        cof = np.stack(
            [np.stack([J[1, 1], -J[1, 0]]), np.stack([-J[0, 1], J[0, 0]])]
        )
        return det, cof
    m00 = J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1]
    m01 = J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0]
    m02 = J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]
    det = J[0, 0] * m00 - J[0, 1] * m01 + J[0, 2] * m02
    cof = np.empty_like(J)
    cof[0, 0] = m00
    cof[0, 1] = -m01
    cof[0, 2] = m02
    cof[1, 0] = -(J[0, 1] * J[2, 2] - J[0, 2] * J[2, 1])
    cof[1, 1] = J[0, 0] * J[2, 2] - J[0, 2] * J[2, 0]
    cof[1, 2] = -(J[0, 0] * J[2, 1] - J[0, 1] * J[2, 0])
    cof[2, 0] = J[0, 1] * J[1, 2] - J[0, 2] * J[1, 1]
    cof[2, 1] = -(J[0, 0] * J[1, 2] - J[0, 2] * J[1, 0])
    cof[2, 2] = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    return det, cof


def determinant(J: JacobianField) -> np.ndarray:
    det, _ = _det_cof(J.entries)
    return det


def adjugate(J: JacobianField) -> JacobianField:
    """Adjugate (transposed cofactor matrix); J @ adj(J) = det(J) * I per voxel."""
    _, cof = _det_cof(J.entries)
    return JacobianField(J.grid, np.swapaxes(cof, 0, 1))


def divergence(f: VectorField) -> np.ndarray:
    g = f.grid
    out = np.zeros(g.dims)
    for a in range(g.ndim):
        out += _diff(f.components[a], a, g.spacing[a])
    return out


def curl(f: VectorField):
    """Rotation of a vector field: a scalar field in 2D, a vector field in 3D."""
    g = f.grid
    s = g.spacing
    c = f.components
    if g.ndim == 2:
        return _diff(c[1], 0, s[0]) - _diff(c[0], 1, s[1])
    out = np.empty_like(c)
    out[0] = _diff(c[2], 1, s[1]) - _diff(c[1], 2, s[2])
    out[1] = _diff(c[0], 2, s[2]) - _diff(c[2], 0, s[0])
    out[2] = _diff(c[1], 0, s[0]) - _diff(c[0], 1, s[1])
    return VectorField(g, out)


def curl_curl(f: VectorField) -> VectorField:
    """Curl of the curl. In 2D the scalar curl w maps back to the vector
    field (dw/dx1, -dw/dx0), matching the 3D formula restricted to the plane."""
    g = f.grid
    s = g.spacing
    if g.ndim == 2:
        w = curl(f)
        out = np.stack([_diff(w, 1, s[1]), -_diff(w, 0, s[0])])
        return VectorField(g, out)
    return curl(curl(f))


def curl_adjoint(w, grid: GridSpec) -> VectorField:
    """Exact transpose of the discrete curl; <curl f, w> = <f, curl_adjoint w>."""
    s = grid.spacing
    if grid.ndim == 2:
        out = np.stack(
            [-_diff_adjoint(w, 1, s[1]), _diff_adjoint(w, 0, s[0])]
        )
        return VectorField(grid, out)
    y = w.components if isinstance(w, VectorField) else np.asarray(w)
    out = np.empty_like(y)
    out[0] = _diff_adjoint(y[1], 2, s[2]) - _diff_adjoint(y[2], 1, s[1])
    out[1] = _diff_adjoint(y[2], 0, s[0]) - _diff_adjoint(y[0], 2, s[2])
    out[2] = _diff_adjoint(y[0], 1, s[1]) - _diff_adjoint(y[1], 0, s[0])
    return VectorField(grid, out)


def _cr_weights(t: np.ndarray):
    t2 = t * t
    t3 = t2 * t
    return (
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    )


def _cr_dweights(t: np.ndarray):
    t2 = t * t
    return (
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    )


def sample_cubic(values: np.ndarray, grid: GridSpec, points: np.ndarray,
                 with_gradient: bool = False):
    """Catmull-Rom sample of a scalar field at world-coordinate points.

    `points` has shape (ndim, ...). Queries outside the domain clamp to the
    boundary value. With `with_gradient`, also returns the analytic partial
    derivatives of the interpolant with respect to each query coordinate
    (zero in clamped directions), which makes downstream objectives exactly
    differentiable.
    """
    n = grid.ndim
    dims = grid.dims
    strides = np.empty(n, dtype=np.intp)
    strides[-1] = 1
    for a in range(n - 2, -1, -1):
        strides[a] = strides[a + 1] * dims[a + 1]
    flat = values.ravel()

    lin = []   # per axis: 4 arrays of linear index contributions
    wts = []   # per axis: 4 weight arrays
    dwts = []  # per axis: 4 derivative-weight arrays (world units)
    for a in range(n):
        m = dims[a]
        u = points[a] / grid.spacing[a] - 0.5
        uc = np.clip(u, 0.0, float(m - 1))
        base = np.floor(uc).astype(np.intp)
        frac = uc - base
        lin.append([
            np.clip(base + o, 0, m - 1) * strides[a] for o in (-1, 0, 1, 2)
        ])
        wts.append(_cr_weights(frac))
        if with_gradient:
            inside = (u == uc).astype(np.float64) / grid.spacing[a]
            dwts.append([d * inside for d in _cr_dweights(frac)])

    out_shape = points.shape[1:]
    val = np.zeros(out_shape)
    grad = np.zeros((n,) + out_shape) if with_gradient else None
    for combo in product(range(4), repeat=n):
        idx = lin[0][combo[0]]
        for a in range(1, n):
            idx = idx + lin[a][combo[a]]
        gathered = flat[idx]
        w = wts[0][combo[0]]
        for a in range(1, n):
            w = w * wts[a][combo[a]]
        val += w * gathered
        if with_gradient:
            for i in range(n):
                # same product but with the derivative weight on axis i
                p = None
                for a in range(n):
                    fa = dwts[a][combo[a]] if a == i else wts[a][combo[a]]
                    p = fa if p is None else p * fa
                grad[i] += p * gathered
    if with_gradient:
        return val, grad
    return val


def interp(values: np.ndarray, f: VectorField) -> np.ndarray:
    """Evaluate a scalar field along a map: (values o f) at voxel centers."""
    return sample_cubic(values, f.grid, f.components)


def pushforward_residual(f: VectorField, i1: DensityVolume,
                         i0: DensityVolume) -> np.ndarray:
    """det(Df) * i1(f) - i0: pointwise mass-preservation residual."""
    if i1.grid != f.grid or i0.grid != f.grid:
        raise GridMismatch("map and volumes must share a grid")
    det, _ = _det_cof(jacobian(f).entries)
    return det * interp(i1.values, f) - i0.values
