import collections

import numpy as np
import pytest

from tbmorph import (
    DensityVolume,
    GridSpec,
    NesterovState,
    SolverConfig,
    VectorField,
    el_gradient,
    enforce_diffeomorphism,
    extrapolate,
    identity_map,
    nesterov_step,
    normalize_density,
    objective,
    solve,
    transport_cost,
)
from tbmorph import calculus as calc
from tbmorph import oracles as orc
from tbmorph.errors import GridMismatch


def uniform_density(grid, mass=1e6):
    return normalize_density(
        DensityVolume(grid, np.ones(grid.dims)), mass, 0.0)


class TestObjective:
    def test_identity_same_density_is_zero(self):
        g = GridSpec((8, 8))
        i0 = orc.random_smooth_density(g, 1, n_blobs=2, sigma=1.6)
        cfg = SolverConfig()
        assert objective(identity_map(g), i0, i0, cfg) == 0.0

    def test_identity_mismatch_is_penalty_only(self):
        g = GridSpec((8, 8))
        i0 = orc.random_smooth_density(g, 1, n_blobs=2, sigma=1.6)
        i1 = orc.random_smooth_density(g, 2, n_blobs=2, sigma=1.6)
        cfg = SolverConfig()
        want = 0.5 * cfg.lam * np.sum((i1.values - i0.values) ** 2) * g.voxel_volume
        assert objective(identity_map(g), i0, i1, cfg) == pytest.approx(want, rel=1e-12)

    def test_constant_shift_transport_term(self):
        g = GridSpec((16, 16))
        i0 = uniform_density(g)
        t = np.array([0.75, -0.5])
        f = VectorField(g, identity_map(g).components + t[:, None, None])
        cfg = SolverConfig(lam=0.0, gamma=0.0)
        want = 0.5 * float(t @ t) * i0.mass
        assert objective(f, i0, i0, cfg) == pytest.approx(want, rel=1e-12)


class TestElGradient:
    def test_stationary_at_identity(self):
        g = GridSpec((8, 8, 8))
        i0 = orc.random_smooth_density(g, 3, n_blobs=2, sigma=1.6)
        grad, err = el_gradient(identity_map(g), i0, i0, SolverConfig())
        assert np.abs(grad.components).max() == 0.0
        assert np.abs(err).max() == 0.0

    def test_transport_only_gradient(self):
        g = GridSpec((8, 8))
        i0 = orc.random_smooth_density(g, 4, n_blobs=2, sigma=1.6)
        rng = np.random.default_rng(5)
        f = VectorField(g, identity_map(g).components
                        + 0.2 * rng.standard_normal((2,) + g.dims))
        cfg = SolverConfig(lam=0.0, gamma=0.0)
        grad, _ = el_gradient(f, i0, i0, cfg)
        disp = f.components - identity_map(g).components
        assert np.abs(grad.components - disp * i0.values).max() < 1e-9

    def test_curl_gradient_is_exact_adjoint(self):
        # <curl-penalty gradient, h> must equal gamma <curl f, curl h>
        g = GridSpec((10, 10))
        rng = np.random.default_rng(6)
        i0 = uniform_density(g)
        f = VectorField(g, identity_map(g).components
                        + 0.1 * rng.standard_normal((2,) + g.dims))
        h = rng.standard_normal((2,) + g.dims)
        cfg = SolverConfig(lam=0.0, gamma=3.0)
        grad, _ = el_gradient(f, i0, i0, cfg)
        disp_term = (f.components - identity_map(g).components) * i0.values
        lhs = float(np.sum((grad.components - disp_term) * h))
        wf = calc.curl(f)
        wh = calc.curl(VectorField(g, h))
        assert lhs == pytest.approx(3.0 * float(np.sum(wf * wh)), rel=1e-10)


class TestNesterov:
    def _state(self, grid, prev2, prev1, k):
        return NesterovState(
            VectorField(grid, prev1), VectorField(grid, prev2), k)

    def test_momentum_coefficients(self):
        g = GridSpec((4, 4))
        ones = np.ones((2,) + g.dims)
        state = self._state(g, 1.0 * ones, 3.0 * ones, k=5)
        # (k - 2) / (k + 1) = 0.5 at k = 5
        assert np.allclose(extrapolate(state).components, 3.0 + 0.5 * 2.0)
        state2 = self._state(g, 1.0 * ones, 3.0 * ones, k=2)
        assert np.allclose(extrapolate(state2).components, 3.0)
        state1 = self._state(g, 1.0 * ones, 3.0 * ones, k=1)
        assert np.allclose(extrapolate(state1).components, 3.0)

    def test_step_respects_displacement_cap(self):
        g = GridSpec((6, 6))
        f0 = identity_map(g)
        state = NesterovState(f0, f0, k=1)
        rng = np.random.default_rng(7)
        grad = VectorField(g, rng.standard_normal((2,) + g.dims))
        cfg = SolverConfig()
        new = nesterov_step(state, grad, cfg)
        step = np.sqrt(np.sum(
            (new.current.components - f0.components) ** 2, axis=0))
        assert step.max() == pytest.approx(cfg.max_step_voxels, rel=1e-12)
        assert new.k == 2

    def test_zero_gradient_flags_stationary(self):
        g = GridSpec((6, 6))
        f0 = identity_map(g)
        state = NesterovState(f0, f0, k=3)
        new = nesterov_step(state, VectorField(g, np.zeros((2,) + g.dims)),
                            SolverConfig())
        assert new.stationary
        assert new.current is f0
        assert new.k == 3


class TestDiffeomorphismGuard:
    def _compression(self, grid, factor):
        X = identity_map(grid).components
        center = 0.5 * grid.extent[0]
        comps = X.copy()
        comps[0] = center + factor * (X[0] - center)
        return VectorField(grid, comps)

    def test_diffeomorphic_candidate_unchanged(self):
        g = GridSpec((8, 8))
        cand = self._compression(g, 0.9)
        out, rejected = enforce_diffeomorphism(cand, identity_map(g),
                                               SolverConfig())
        assert not rejected
        assert out is cand

    def test_fold_halved_until_valid(self):
        g = GridSpec((8, 8))
        cand = self._compression(g, -0.2)  # det = -0.2: folded
        prev = identity_map(g)
        det_before = calc.determinant(calc.jacobian(cand)).min()
        assert det_before < 0
        out, rejected = enforce_diffeomorphism(cand, prev, SolverConfig())
        assert not rejected
        det_after = calc.determinant(calc.jacobian(out)).min()
        assert det_after > SolverConfig().diffeo_min_det

    def test_rejected_returns_previous(self):
        g = GridSpec((8, 8))
        cfg = SolverConfig()
        prev = self._compression(g, cfg.diffeo_min_det)  # pinned at the floor
        cand = self._compression(g, -0.5)
        out, rejected = enforce_diffeomorphism(cand, prev, cfg)
        assert rejected
        assert out is prev

    def test_no_step_is_no_op(self):
        g = GridSpec((8, 8))
        cand = self._compression(g, -0.5)
        out, rejected = enforce_diffeomorphism(cand, cand, SolverConfig())
        assert not rejected
        assert out is cand


class TestTransportCost:
    def test_identity_zero(self):
        g = GridSpec((8, 8))
        assert transport_cost(identity_map(g), uniform_density(g)) == 0.0

    def test_constant_shift(self):
        g = GridSpec((8, 8))
        i0 = uniform_density(g)
        f = VectorField(g, identity_map(g).components + 0.5)
        assert transport_cost(f, i0) == pytest.approx(0.5 * i0.mass, rel=1e-12)
        assert transport_cost(f, i0, normalized=True) == pytest.approx(0.5, rel=1e-12)


class TestSolve:
    def test_identity_instance(self):
        g = GridSpec((32, 32))
        i0 = orc.random_smooth_density(g, 8, n_blobs=3, sigma=4.0)
        res = solve(i0, i0, SolverConfig())
        assert res.converged
        assert res.cost <= 1e-8 * i0.mass
        assert len(res.trace) >= 1

    def test_mismatched_grids(self):
        a = uniform_density(GridSpec((8, 8)))
        b = uniform_density(GridSpec((8, 9)))
        with pytest.raises(GridMismatch):
            solve(a, b, SolverConfig())

    def test_requires_positive_densities(self):
        g = GridSpec((8, 8))
        v = np.ones((8, 8))
        v[0, 0] = 0.0
        with pytest.raises(ValueError):
            solve(DensityVolume(g, v), uniform_density(g), SolverConfig())

    def test_translation_smoke(self):
        g = GridSpec((64, 64))
        i0 = orc.gaussian_bump(g, (30.5, 32.0), 6.0)
        i1 = orc.gaussian_bump(g, (33.5, 32.0), 6.0)
        cfg = SolverConfig(mse_termination=1e-6, max_iters=1500,
                           stagnation_window=400, stagnation_tol=1e-13)
        res = solve(i0, i1, cfg)
        assert res.converged
        disp = res.map.components - identity_map(g).components
        mask = i0.values > 0.01 * i0.values.max()
        err = np.sqrt((disp[0] - 3.0) ** 2 + disp[1] ** 2)[mask].mean()
        assert err < 0.35
        assert res.cost == pytest.approx(9.0 * i0.mass, rel=0.05)
        assert res.min_det > cfg.diffeo_min_det
        # pushforward mass is conserved at convergence
        warped = calc.interp(i1.values, res.map)
        det = calc.determinant(calc.jacobian(res.map))
        assert (det * warped).sum() == pytest.approx(i0.values.sum(), rel=0.01)
        # each scale ends no worse than it started
        by_scale = collections.defaultdict(list)
        for s, m in zip(res.trace.scale, res.trace.rel_mse):
            by_scale[s].append(m)
        for mses in by_scale.values():
            assert min(mses) <= mses[0]

    def test_cost_symmetry(self):
        g = GridSpec((64, 64))
        i0, i1 = orc.random_smooth_pair(g, seed=31, n_blobs=3, sigma=8.0,
                                        jitter=2.0, margin_frac=0.30)
        cfg = SolverConfig(mse_termination=1e-7, max_iters=2500, scales=2,
                           stagnation_window=500, stagnation_tol=1e-13)
        fwd = solve(i0, i1, cfg)
        bwd = solve(i1, i0, cfg)
        mean_cost = 0.5 * (fwd.cost + bwd.cost)
        assert abs(fwd.cost - bwd.cost) <= 0.02 * mean_cost


class TestTrace:
    def test_csv_export(self, tmp_path):
        g = GridSpec((16, 16))
        i0, i1 = orc.random_smooth_pair(g, seed=2, n_blobs=2, sigma=2.5,
                                        jitter=0.8)
        cfg = SolverConfig(max_iters=40, scales=2)
        res = solve(i0, i1, cfg)
        p = tmp_path / "trace.csv"
        res.trace.write_csv(p)
        lines = p.read_text().strip().splitlines()
        assert lines[0] == "iter,scale,rel_mse,mean_curl,cost,step"
        assert len(lines) == len(res.trace) + 1
