"""Independent ground-truth generators used by tests and the validation suite.

Nothing here shares code with the transport solver: the 1D map comes from
exact CDF matching, the grid cost from an exact linear program, and the
gradient check from central differences of the objective. Phantom cohorts
provide deterministic synthetic data with known structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.ndimage import gaussian_filter
from scipy.optimize import linprog

from . import calculus as calc
from . import solver as sol
from .errors import Infeasible, MassMismatch, TooLarge
from .volume import DensityVolume, GridSpec, normalize_density


def omt_1d(p: np.ndarray, q: np.ndarray, spacing: float = 1.0):
    """Closed-form 1D transport map via monotone CDF matching.

    Densities are piecewise constant on cells of width `spacing` with sample
    points at cell centers. Returns (f, cost): the map evaluated at the
    centers and the quadratic cost sum (f - x)^2 p dx.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 1 or q.ndim != 1:
        raise ValueError("omt_1d expects 1D arrays")
    if np.any(p <= 0) or np.any(q <= 0):
        raise ValueError("densities must be strictly positive")
    mp = p.sum() * spacing
    mq = q.sum() * spacing
    if abs(mp - mq) > 1e-9 * mp:
        raise MassMismatch(f"total masses differ: {mp} vs {mq}")

    x = (np.arange(p.size) + 0.5) * spacing
    # cumulative mass at cell edges; piecewise-linear CDFs
    edges_q = np.arange(q.size + 1) * spacing
    cum_q = np.concatenate([[0.0], np.cumsum(q) * spacing])
    # mass strictly left of each source center: everything before the cell
    # plus half of the cell itself
    cum_p = np.concatenate([[0.0], np.cumsum(p) * spacing])
    levels = cum_p[:-1] + 0.5 * p * spacing
    levels = np.clip(levels * (mq / mp), 0.0, cum_q[-1])
    f = np.interp(levels, cum_q, edges_q)
    cost = float(np.sum((f - x) ** 2 * p) * spacing)
    return f, cost


def kantorovich_lp(p: DensityVolume, q: DensityVolume,
                   max_voxels: int = 400) -> float:
    """Exact optimal coupling cost between two small volumes.

    Solves the transport linear program with squared Euclidean ground cost on
    voxel centers. Masses are normalized to one for conditioning and the
    result is rescaled; the LP itself is solved exactly (simplex).
    """
    if p.grid != q.grid:
        raise Infeasible("marginals must share a grid")
    n_vox = p.grid.voxel_count
    if n_vox > max_voxels:
        raise TooLarge(f"{n_vox} voxels exceeds the cap of {max_voxels}")
    mp = p.mass
    mq = q.mass
    if mp <= 0 or mq <= 0:
        raise Infeasible("marginals must carry mass")
    if abs(mp - mq) > 1e-9 * mp:
        raise Infeasible(f"total masses differ: {mp} vs {mq}")

    coords = np.stack(
        np.meshgrid(*[p.grid.axis_coords(a) for a in range(p.grid.ndim)],
                    indexing="ij")
    ).reshape(p.grid.ndim, -1).T
    wa = p.values.ravel() * p.grid.voxel_volume
    wb = q.values.ravel() * q.grid.voxel_volume
    ia = np.nonzero(wa > 0)[0]
    ib = np.nonzero(wb > 0)[0]
    a = wa[ia] / wa[ia].sum()
    b = wb[ib] / wb[ib].sum()
    ca = coords[ia]
    cb = coords[ib]
    cost = ((ca[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2)

    na, nb = a.size, b.size
    # row-sum and column-sum equality constraints; drop one redundant row
    rows, cols, vals = [], [], []
    for i in range(na):
        rows.extend([i] * nb)
        cols.extend(range(i * nb, (i + 1) * nb))
        vals.extend([1.0] * nb)
    for j in range(nb - 1):
        rows.extend([na + j] * na)
        cols.extend(range(j, na * nb, nb))
        vals.extend([1.0] * na)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(na + nb - 1, na * nb))
    rhs = np.concatenate([a, b[:-1]])
    res = linprog(cost.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None),
                  method="highs")
    if res.status != 0:
        raise Infeasible(f"linear program failed: {res.message}")
    return float(res.fun) * mp


def fd_objective_check(f: calc.VectorField, i0: DensityVolume,
                       i1: DensityVolume, cfg: sol.SolverConfig,
                       trials: int = 20, eps: float = 1e-5, seed: int = 0,
                       gradient_fn=None) -> float:
    """Worst relative mismatch between the analytic objective gradient and a
    central finite difference, over random smooth (map, direction) draws.

    Each trial perturbs the base map by a fresh smooth displacement and tests
    a fresh smooth direction. `gradient_fn` may substitute the gradient under
    test (used by negative controls).
    """
    gradient_fn = gradient_fn or (
        lambda ff, a, b, c: sol.el_gradient(ff, a, b, c, gamma_active=True)[0]
    )
    grid = f.grid
    vox = grid.voxel_volume
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        bump = np.stack([
            gaussian_filter(rng.standard_normal(grid.dims), 1.5)
            for _ in range(grid.ndim)
        ])
        bump *= 0.3 * min(grid.spacing) / max(np.abs(bump).max(), 1e-30)
        ft = calc.VectorField(grid, f.components + bump)
        h = np.stack([
            gaussian_filter(rng.standard_normal(grid.dims), 1.5)
            for _ in range(grid.ndim)
        ])
        h /= max(np.abs(h).max(), 1e-30)
        grad = gradient_fn(ft, i0, i1, cfg)
        ip = float(np.sum(grad.components * h)) * vox
        fp = calc.VectorField(grid, ft.components + eps * h)
        fm = calc.VectorField(grid, ft.components - eps * h)
        fd = (sol.objective(fp, i0, i1, cfg) -
              sol.objective(fm, i0, i1, cfg)) / (2.0 * eps)
        rel = abs(fd - ip) / max(abs(fd), abs(ip), 1e-30)
        worst = max(worst, rel)
    return worst


def random_smooth_density(grid: GridSpec, seed: int, n_blobs: int = 6,
                          sigma: float = 9.0,
                          target_mass: float = 1.0e6,
                          floor: float = 0.1,
                          margin_frac: float = 0.15) -> DensityVolume:
    """A normalized mixture of Gaussian blobs away from the faces."""
    rng = np.random.default_rng(seed)
    centers = _blob_centers(grid, rng, n_blobs, margin_frac)
    amps = rng.uniform(0.5, 1.5, n_blobs)
    sigs = rng.uniform(0.8, 1.2, n_blobs) * sigma
    v = _blob_mixture(grid, centers, amps, sigs)
    return normalize_density(DensityVolume(grid, v), target_mass, floor)


def random_smooth_pair(grid: GridSpec, seed: int, n_blobs: int = 6,
                       sigma: float = 9.0, jitter: float = 3.0,
                       target_mass: float = 1.0e6, floor: float = 0.1,
                       margin_frac: float = 0.15):
    """A smooth density and a smoothly displaced twin (blob centers jittered)."""
    rng = np.random.default_rng(seed)
    centers = _blob_centers(grid, rng, n_blobs, margin_frac)
    amps = rng.uniform(0.5, 1.5, n_blobs)
    sigs = rng.uniform(0.8, 1.2, n_blobs) * sigma
    shift = rng.uniform(-jitter, jitter, size=centers.shape)
    v0 = _blob_mixture(grid, centers, amps, sigs)
    v1 = _blob_mixture(grid, centers + shift, amps, sigs)
    return (normalize_density(DensityVolume(grid, v0), target_mass, floor),
            normalize_density(DensityVolume(grid, v1), target_mass, floor))


def _blob_centers(grid, rng, n_blobs, margin_frac=0.15):
    # margin capped so tiny grids still leave a nonempty center band
    lo = [min(4.5 * s + margin_frac * e, 0.45 * e)
          for s, e in zip(grid.spacing, grid.extent)]
    hi = [e - m for m, e in zip(lo, grid.extent)]
    return rng.uniform(lo, hi, size=(n_blobs, grid.ndim))


def _blob_mixture(grid, centers, amps, sigs):
    X = calc.identity_map(grid).components
    v = np.zeros(grid.dims)
    for c, a, s in zip(centers, amps, sigs):
        r2 = np.zeros(grid.dims)
        for ax in range(grid.ndim):
            r2 += (X[ax] - c[ax]) ** 2
        v += a * np.exp(-r2 / (2.0 * s * s))
    return v


def gaussian_bump(grid: GridSpec, center, sigma: float,
                  target_mass: float = 1.0e6,
                  floor: float = 0.1) -> DensityVolume:
    """A single normalized Gaussian bump."""
    v = _blob_mixture(grid, np.asarray([center], dtype=float), [1.0], [sigma])
    return normalize_density(DensityVolume(grid, v), target_mass, floor)


@dataclass
class Phantom:
    """Deterministic synthetic cohort description.

    Families:
      translation -- one bump shifted along `axis` by `shift_step` voxels per
        subject; covariate = shift.
      aging -- ring of tissue whose inner cavity dilates and rim thins as the
        stage parameter grows; covariate = stage + noise.
      two_class -- bumps offset to either side of the center with
        within-class jitter; labels 0/1.
    """

    family: str
    count: int
    dims: tuple
    seed: int = 0
    axis: int = 0
    shift_step: float = 1.0
    sigma: float = 5.0
    noise: float = 0.02
    class_offset: float = 4.0
    jitter: float = 0.75
    target_mass: float = 1.0e6
    floor: float = 0.1


def make_phantom_cohort(spec: Phantom):
    """Generate (volumes, covariates, labels); labels is None except for
    the two_class family. Deterministic for a fixed spec."""
    grid = GridSpec(tuple(spec.dims))
    rng = np.random.default_rng(spec.seed)
    center = np.array([0.5 * e for e in grid.extent])
    if spec.family == "translation":
        vols, covs = [], []
        for m in range(spec.count):
            c = center.copy()
            c[spec.axis] += (m - 0.5 * (spec.count - 1)) * spec.shift_step
            vols.append(gaussian_bump(grid, c, spec.sigma,
                                      spec.target_mass, spec.floor))
            covs.append(m * spec.shift_step)
        return vols, np.asarray(covs, dtype=float), None
    if spec.family == "aging":
        vols, covs = [], []
        stages = np.linspace(0.0, 1.0, spec.count)
        for t in stages:
            vols.append(_aging_volume(grid, float(t), spec))
        covs = stages + spec.noise * rng.standard_normal(spec.count)
        return vols, covs.astype(float), None
    if spec.family == "two_class":
        vols, labels = [], []
        for m in range(spec.count):
            label = m % 2
            c = center.copy()
            c[spec.axis] += spec.class_offset * (1 if label else -1)
            c += spec.jitter * rng.standard_normal(grid.ndim)
            vols.append(gaussian_bump(grid, c, spec.sigma,
                                      spec.target_mass, spec.floor))
            labels.append(label)
        labels = np.asarray(labels)
        return vols, labels.astype(float), labels
    raise ValueError(f"unknown phantom family {spec.family!r}")


def _aging_volume(grid: GridSpec, t: float, spec: Phantom) -> DensityVolume:
    """Tissue ring with a central cavity: the cavity radius grows and the rim
    thins monotonically with the stage parameter t in [0, 1]."""
    X = calc.identity_map(grid).components
    center = [0.5 * e for e in grid.extent]
    r = np.zeros(grid.dims)
    for ax in range(grid.ndim):
        r += (X[ax] - center[ax]) ** 2
    r = np.sqrt(r)
    scale = min(grid.extent)
    r_in = scale * (0.12 + 0.14 * t)     # cavity dilates
    r_out = scale * 0.38                 # fixed outer wall
    edge = scale * 0.03
    ring = 1.0 / (1.0 + np.exp(-(r - r_in) / edge))
    ring *= 1.0 / (1.0 + np.exp((r - r_out) / edge))
    return normalize_density(DensityVolume(grid, ring),
                             spec.target_mass, spec.floor)


def cavity_mean_radius(v: DensityVolume) -> float:
    """Mass-weighted mean distance from the volume center; grows as the
    cavity of an aging phantom dilates."""
    X = calc.identity_map(v.grid).components
    center = [0.5 * e for e in v.grid.extent]
    r = np.zeros(v.grid.dims)
    for ax in range(v.grid.ndim):
        r += (X[ax] - center[ax]) ** 2
    r = np.sqrt(r)
    w = v.values
    return float(np.sum(r * w) / np.sum(w))


def centroid(v: DensityVolume) -> np.ndarray:
    """Mass centroid in world coordinates."""
    X = calc.identity_map(v.grid).components
    w = v.values
    tot = np.sum(w)
    return np.array([float(np.sum(X[a] * w) / tot) for a in range(v.grid.ndim)])


def _radius_field(grid: GridSpec) -> np.ndarray:
    X = calc.identity_map(grid).components
    center = [0.5 * e for e in grid.extent]
    r = np.zeros(grid.dims)
    for ax in range(grid.ndim):
        r += (X[ax] - center[ax]) ** 2
    return np.sqrt(r)


def cavity_area(v: DensityVolume, frac: float = 0.25) -> float:
    """Area (volume) of the low-density pocket at the center: voxels inside
    the outer wall whose density is below `frac` of the maximum."""
    r = _radius_field(v.grid)
    inside = r < 0.38 * min(v.grid.extent)
    low = v.values < frac * v.values.max()
    return float(np.count_nonzero(inside & low)) * v.grid.voxel_volume


def inner_disk_mass(v: DensityVolume, radius_frac: float = 0.3) -> float:
    """Mass within a fixed central disk; shrinks as the cavity dilates."""
    r = _radius_field(v.grid)
    inside = r <= radius_frac * min(v.grid.extent)
    return float(v.values[inside].sum()) * v.grid.voxel_volume
