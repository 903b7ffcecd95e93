"""Variational optimal mass transport between density volumes.

Minimizes, over maps f,

    1/2 int |x - f|^2 I0  +  gamma/2 int |curl f|^2  +  lambda/2 int (det(Df) I1(f) - I0)^2

with multiscale Nesterov-accelerated descent. The curl penalty steers the
iterates toward the curl-free optimal map; the last term penalizes mass
preservation errors and its relative size (against the template norm) is the
termination metric. Gradients are exact for the discretized functional: every
stencil is paired with its transpose and the interpolant is differentiated
analytically, so directional derivatives agree with finite differences of
`objective` to rounding.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import calculus as calc
from .calculus import VectorField, identity_map, jacobian, sample_cubic, _det_cof, _diff_adjoint
from .errors import GridMismatch
from .volume import DensityVolume, GridSpec, resample


@lru_cache(maxsize=16)
def _ident(grid: GridSpec) -> np.ndarray:
    comps = identity_map(grid).components
    comps.setflags(write=False)
    return comps


@dataclass
class SolverConfig:
    """Weights, schedule, and termination thresholds for the transport solver."""

    lam: float = 100.0                    # mass-preservation penalty weight
    gamma: float = 6.5e4                  # curl penalty weight
    gamma_activation_fraction: float = 0.25  # switch gamma on at this fraction of initial MSE
    scales: int = 3                       # pyramid levels (factor 2 per level)
    max_step_voxels: float = 0.01         # displacement cap per update, in voxels
    mse_termination: float = 0.0055       # relative MSE stop
    max_iters: int = 5000                 # per scale
    diffeo_min_det: float = 1e-3          # reject steps whose min det(Df) falls below
    stagnation_window: int = 100
    stagnation_tol: float = 1e-7

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("penalty weights must be nonnegative")
        if not 0 < self.mse_termination < 1:
            raise ValueError("mse_termination must lie in (0, 1)")
        if self.scales < 1:
            raise ValueError("need at least one scale")
        if self.max_step_voxels <= 0:
            raise ValueError("max_step_voxels must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class SolveTrace:
    """Per-iteration solver diagnostics."""

    iteration: list = field(default_factory=list)
    scale: list = field(default_factory=list)
    rel_mse: list = field(default_factory=list)
    mean_curl: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    step: list = field(default_factory=list)

    def append(self, iteration, scale, rel_mse, mean_curl, cost, step):
        self.iteration.append(int(iteration))
        self.scale.append(int(scale))
        self.rel_mse.append(float(rel_mse))
        self.mean_curl.append(float(mean_curl))
        self.cost.append(float(cost))
        self.step.append(float(step))

    def __len__(self):
        return len(self.iteration)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "scale", "rel_mse", "mean_curl", "cost", "step"])
            for row in zip(self.iteration, self.scale, self.rel_mse,
                           self.mean_curl, self.cost, self.step):
                w.writerow([row[0], row[1]] + [repr(x) for x in row[2:]])


@dataclass
class SolveResult:
    map: VectorField
    trace: SolveTrace
    converged: bool
    rel_mse: float
    mean_curl: float
    cost: float
    cost_normalized: float
    min_det: float
    rejected_steps: int = 0
    stationary: bool = False


def _check_pair(i0: DensityVolume, i1: DensityVolume):
    if i0.grid != i1.grid:
        raise GridMismatch("source and target volumes live on different grids")


def _mp_terms(f: VectorField, i1_values: np.ndarray, with_gradient: bool):
    """Shared pieces of the mass-preservation term at map f.

    Returns (warped, warp_grad, det, cof) where warped = I1(f); warp_grad is
    the analytic derivative of the interpolant (None unless requested).
    """
    J = jacobian(f)
    det, cof = _det_cof(J.entries)
    if with_gradient:
        warped, warp_grad = sample_cubic(i1_values, f.grid, f.components,
                                         with_gradient=True)
    else:
        warped = sample_cubic(i1_values, f.grid, f.components)
        warp_grad = None
    return warped, warp_grad, det, cof


def _curl_field(f: VectorField):
    return calc.curl(f)


def _curl_sq_sum(w) -> float:
    arr = w.components if isinstance(w, VectorField) else w
    return float(np.sum(arr * arr))


def _mean_curl(w) -> float:
    if isinstance(w, VectorField):
        return float(np.mean(np.sqrt(np.sum(w.components ** 2, axis=0))))
    return float(np.mean(np.abs(w)))


def objective(f: VectorField, i0: DensityVolume, i1: DensityVolume,
              cfg: SolverConfig, gamma_active: bool = True) -> float:
    """Penalized transport functional, discretized as voxel sums times voxel volume."""
    _check_pair(i0, i1)
    if f.grid != i0.grid:
        raise GridMismatch("map grid does not match the volumes")
    vox = f.grid.voxel_volume
    disp = f.components - _ident(f.grid)
    transport = 0.5 * float(np.sum(disp ** 2 * i0.values)) * vox
    warped, _, det, _ = _mp_terms(f, i1.values, with_gradient=False)
    err = det * warped - i0.values
    mp = 0.5 * cfg.lam * float(np.sum(err ** 2)) * vox
    total = transport + mp
    gamma = cfg.gamma if gamma_active else 0.0
    if gamma > 0:
        total += 0.5 * gamma * _curl_sq_sum(_curl_field(f)) * vox
    return total


def el_gradient(f: VectorField, i0: DensityVolume, i1: DensityVolume,
                cfg: SolverConfig, gamma_active: bool = True):
    """Gradient of `objective` with respect to the map, per unit volume.

    The three terms: displacement weighted by the template; the
    mass-preservation term through both the determinant (cofactor rows, taken
    back through the transposed stencil) and the warped image (analytic
    interpolant derivative); and the curl penalty through the transposed curl.
    <el_gradient(f), h> * voxel_volume is the exact directional derivative.

    Returns (gradient: VectorField, residual: ndarray) so callers can reuse
    the mass-preservation residual for the relative MSE metric.
    """
    _check_pair(i0, i1)
    grid = f.grid
    n = grid.ndim
    warped, warp_grad, det, cof = _mp_terms(f, i1.values, with_gradient=True)
    err = det * warped - i0.values

    out = f.components - _ident(grid)
    out *= i0.values

    lam_err = cfg.lam * err
    for i in range(n):
        out[i] += lam_err * det * warp_grad[i]
        for k in range(n):
            out[i] += _diff_adjoint(lam_err * warped * cof[i, k], k, grid.spacing[k])

    gamma = cfg.gamma if gamma_active else 0.0
    if gamma > 0:
        w = _curl_field(f)
        adj = calc.curl_adjoint(w, grid)
        out += gamma * adj.components

    return VectorField(grid, out), err


def rel_mse(f: VectorField, i0: DensityVolume, i1: DensityVolume) -> float:
    """Relative MSE: sum(residual^2) / sum(I0^2) with residual = det(Df) I1(f) - I0."""
    warped, _, det, _ = _mp_terms(f, i1.values, with_gradient=False)
    err = det * warped - i0.values
    return float(np.sum(err ** 2) / np.sum(i0.values ** 2))


def transport_cost(f: VectorField, i0: DensityVolume,
                   normalized: bool = False) -> float:
    """Quadratic transport cost sum |f - id|^2 I0 * voxel_volume.

    With `normalized`, divides by the total mass of i0.
    """
    if f.grid != i0.grid:
        raise GridMismatch("map and volume must share a grid")
    disp = f.components - _ident(f.grid)
    raw = float(np.sum(disp ** 2 * i0.values)) * f.grid.voxel_volume
    if normalized:
        return raw / i0.mass
    return raw


@dataclass
class NesterovState:
    """Iterates needed by the accelerated update."""

    current: VectorField
    previous: VectorField
    k: int = 1
    stationary: bool = False


def extrapolate(state: NesterovState) -> VectorField:
    """Momentum point g_k = f_(k-1) + (k-2)/(k+1) * (f_(k-1) - f_(k-2))."""
    if state.k <= 1:
        return state.current
    coeff = (state.k - 2.0) / (state.k + 1.0)
    comps = state.current.components + coeff * (
        state.current.components - state.previous.components
    )
    return VectorField(state.current.grid, comps)


def nesterov_step(state: NesterovState, grad: VectorField,
                  cfg: SolverConfig, cap_factor: float = 1.0) -> NesterovState:
    """One accelerated update. `grad` must be evaluated at `extrapolate(state)`.

    The step size is chosen so the largest per-voxel displacement of the
    gradient step equals max_step_voxels * spacing (scaled by `cap_factor`,
    which the solve loop shrinks after rejected steps). A vanishing gradient
    flags stationarity and leaves the state unchanged.
    """
    g = extrapolate(state)
    norms = np.sqrt(np.sum(grad.components ** 2, axis=0))
    gmax = float(norms.max())
    if gmax <= 0.0 or not np.isfinite(gmax):
        return NesterovState(state.current, state.previous, state.k,
                             stationary=True)
    cap = cfg.max_step_voxels * min(state.current.grid.spacing) * cap_factor
    alpha = cap / gmax
    new = VectorField(g.grid, g.components - alpha * grad.components)
    return NesterovState(new, state.current, state.k + 1)


def _min_det(f: VectorField) -> float:
    det, _ = _det_cof(jacobian(f).entries)
    return float(det.min())


def enforce_diffeomorphism(candidate: VectorField, previous: VectorField,
                           cfg: SolverConfig, max_halvings: int = 20):
    """Keep det(Df) above the configured floor by shrinking toward `previous`.

    Returns (field, rejected). The step is halved up to `max_halvings` times;
    if the determinant still dips below the floor, `previous` is returned and
    the step is flagged rejected.
    """
    if candidate.components is previous.components or np.array_equal(
        candidate.components, previous.components
    ):
        return candidate, False
    if _min_det(candidate) > cfg.diffeo_min_det:
        return candidate, False
    delta = candidate.components - previous.components
    theta = 1.0
    for _ in range(max_halvings):
        theta *= 0.5
        trial = VectorField(previous.grid, previous.components + theta * delta)
        if _min_det(trial) > cfg.diffeo_min_det:
            return trial, False
    return previous, True


def _pyramid_dims(dims, scales):
    """Coarse-to-fine list of grid sizes, deduplicated, finest last."""
    levels = []
    for lvl in range(scales - 1, -1, -1):
        d = tuple(max(4, dim // (2 ** lvl)) for dim in dims)
        if not levels or levels[-1] != d:
            levels.append(d)
    return levels


def _upsample_displacement(f: VectorField, coarse: GridSpec,
                           fine: GridSpec, cfg: SolverConfig) -> VectorField:
    """Carry a map to a finer grid: interpolate the displacement field at the
    fine voxel centers and re-add the identity. World extent is shared across
    levels, so displacement values carry over unchanged. The result is pulled
    back toward the identity if interpolation overshoots the determinant
    floor, so every scale starts from a diffeomorphic map."""
    disp = f.components - identity_map(coarse).components
    fine_id = identity_map(fine)
    comps = np.empty((fine.ndim,) + fine.dims)
    for i in range(fine.ndim):
        comps[i] = sample_cubic(disp[i], coarse, fine_id.components)
    init = VectorField(fine, fine_id.components + comps)
    safe, _ = _accept_candidate(init, fine_id, cfg)
    return safe if safe is not None else fine_id


def _accept_candidate(candidate: VectorField, previous: VectorField,
                      cfg: SolverConfig, max_halvings: int = 20):
    """Diffeomorphism guard sharing one Jacobian evaluation with the caller.

    Returns (field or None if rejected, det field of the accepted candidate).
    """
    det, _ = _det_cof(jacobian(candidate).entries)
    if det.min() > cfg.diffeo_min_det:
        return candidate, det
    delta = candidate.components - previous.components
    theta = 1.0
    for _ in range(max_halvings):
        theta *= 0.5
        trial = VectorField(previous.grid, previous.components + theta * delta)
        det, _ = _det_cof(jacobian(trial).entries)
        if det.min() > cfg.diffeo_min_det:
            return trial, det
    return None, None


def _run_scale(f0: VectorField, i0: DensityVolume, i1: DensityVolume,
               cfg: SolverConfig, gamma_on: bool, scale_index: int,
               trace: SolveTrace):
    """Nesterov descent at a single scale. Returns (best map, gamma_on, info)."""
    i0_sq = float(np.sum(i0.values ** 2))
    mse0 = rel_mse(f0, i0, i1)
    best_f, best_mse = f0, mse0
    best_history = [mse0]
    rejected = 0
    stationary = False
    trace.append(0, scale_index, mse0, _mean_curl(_curl_field(f0)),
                 transport_cost(f0, i0), 0.0)
    if mse0 <= cfg.mse_termination:
        return best_f, gamma_on, {"converged": True, "rejected": rejected,
                                  "stationary": stationary}
    activation_level = cfg.gamma_activation_fraction * mse0
    state = NesterovState(f0, f0, k=1)
    converged = False
    cap_factor = 1.0  # shrinks after rejected steps so we can slide along the det barrier
    consecutive_rejects = 0
    for it in range(1, cfg.max_iters + 1):
        g = extrapolate(state)
        grad, _ = el_gradient(g, i0, i1, cfg, gamma_active=gamma_on)
        new_state = nesterov_step(state, grad, cfg, cap_factor)
        if new_state.stationary:
            stationary = True
            break
        candidate, det = _accept_candidate(new_state.current, state.current, cfg)
        if candidate is None:
            rejected += 1
            consecutive_rejects += 1
            # restart momentum and back the step cap off
            state = NesterovState(state.current, state.current, k=1)
            cap_factor = max(cap_factor * 0.5, 2.0 ** -12)
            trace.append(it, scale_index, best_mse, trace.mean_curl[-1],
                         trace.cost[-1], 0.0)
            if consecutive_rejects > 60:
                break
            continue
        consecutive_rejects = 0
        cap_factor = min(1.0, cap_factor * 1.3)
        prev_components = state.current.components
        state = NesterovState(candidate, state.current, new_state.k)
        warped = sample_cubic(i1.values, candidate.grid, candidate.components)
        err = det * warped - i0.values
        mse = float(np.sum(err ** 2) / i0_sq)
        curl_now = _mean_curl(_curl_field(candidate))
        step = float(np.max(np.sqrt(np.sum(
            (candidate.components - prev_components) ** 2, axis=0))))
        trace.append(it, scale_index, mse, curl_now,
                     transport_cost(candidate, i0), step)
        if mse < best_mse:
            best_mse, best_f = mse, candidate
        if not gamma_on and mse <= activation_level:
            gamma_on = True
        if mse <= cfg.mse_termination:
            converged = True
            break
        best_history.append(best_mse)
        if len(best_history) > cfg.stagnation_window:
            if best_history[-cfg.stagnation_window - 1] - best_mse < cfg.stagnation_tol:
                break
    return best_f, gamma_on, {"converged": converged, "rejected": rejected,
                              "stationary": stationary}


def solve(i0: DensityVolume, i1: DensityVolume, cfg: SolverConfig | None = None) -> SolveResult:
    """Compute the transport map carrying i0 onto i1.

    Runs coarse-to-fine: volumes are resampled to each pyramid level, the map
    found at a coarse level seeds the next via displacement interpolation, and
    each level runs accelerated descent with the curl penalty switching on
    once the relative MSE falls below the activation fraction of that level's
    starting value (and staying on afterwards). The lowest-MSE iterate of each
    level is retained. Never raises on non-convergence; check `converged`.
    """
    cfg = cfg or SolverConfig()
    _check_pair(i0, i1)
    if i0.values.min() <= 0 or i1.values.min() <= 0:
        raise ValueError("solver needs strictly positive densities; "
                         "normalize with a positive floor first")
    grid = i0.grid
    levels = _pyramid_dims(grid.dims, cfg.scales)
    trace = SolveTrace()
    gamma_on = False
    f = None
    info = {"converged": False, "rejected": 0, "stationary": False}
    rejected_total = 0
    prev_grid = None
    for idx, dims in enumerate(levels):
        if dims == grid.dims:
            lv0, lv1 = i0, i1
        else:
            lv0, lv1 = resample(i0, dims), resample(i1, dims)
        if f is None:
            f = identity_map(lv0.grid)
        else:
            f = _upsample_displacement(f, prev_grid, lv0.grid, cfg)
        scale_index = len(levels) - 1 - idx  # 0 = finest
        f, gamma_on, info = _run_scale(f, lv0, lv1, cfg, gamma_on,
                                       scale_index, trace)
        rejected_total += info["rejected"]
        prev_grid = lv0.grid
    final_mse = rel_mse(f, i0, i1)
    final_curl = _mean_curl(_curl_field(f))
    cost = transport_cost(f, i0)
    return SolveResult(
        map=f,
        trace=trace,
        converged=bool(info["converged"]),
        rel_mse=final_mse,
        mean_curl=final_curl,
        cost=cost,
        cost_normalized=cost / i0.mass,
        min_det=_min_det(f),
        rejected_steps=rejected_total,
        stationary=bool(info["stationary"]),
    )
