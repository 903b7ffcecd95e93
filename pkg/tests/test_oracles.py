import numpy as np
import pytest

from tbmorph import (
    DensityVolume,
    GridSpec,
    Phantom,
    SolverConfig,
    fd_objective_check,
    identity_map,
    kantorovich_lp,
    make_phantom_cohort,
    omt_1d,
)
from tbmorph import oracles as orc
from tbmorph.errors import Infeasible, MassMismatch, TooLarge


class TestOmt1d:
    def test_same_density_identity_map(self):
        p = np.exp(-((np.arange(64) - 32.0) ** 2) / 50.0) + 0.01
        f, cost = omt_1d(p, p)
        x = np.arange(64) + 0.5
        assert np.abs(f - x).max() < 1e-10
        assert cost < 1e-20

    def test_shift_is_translation(self):
        p = np.exp(-((np.arange(64) + 0.5 - 28.0) ** 2) / 50.0) + 1e-12
        q = np.roll(p, 5)
        f, cost = omt_1d(p, q)
        x = np.arange(64) + 0.5
        mass_region = p > 1e-3 * p.max()
        assert np.abs(f - (x + 5))[mass_region].max() < 1e-4
        assert cost == pytest.approx(25.0 * p.sum(), rel=1e-6)

    def test_gaussian_widening_affine_map(self):
        h = 0.5
        x = (np.arange(512) + 0.5) * h
        p = np.exp(-((x - 128.0) ** 2) / (2 * 25.0))
        q = np.exp(-((x - 128.0) ** 2) / (2 * 100.0))
        p = p / (p.sum() * h) * 1e6
        q = q / (q.sum() * h) * 1e6
        f, cost = omt_1d(p, q, spacing=h)
        central = np.abs(x - 128.0) < 10.0
        slope = np.polyfit(x[central], f[central], 1)[0]
        assert slope == pytest.approx(2.0, abs=0.01)
        # cost of doubling a sigma-5 gaussian: (2-1)^2 sigma^2 * mass
        assert cost == pytest.approx(25.0 * 1e6, rel=0.01)

    def test_mass_mismatch(self):
        p = np.ones(16)
        with pytest.raises(MassMismatch):
            omt_1d(p, 2.0 * p)


class TestKantorovichLp:
    def test_same_marginals_zero(self):
        g = GridSpec((4, 4))
        v = np.zeros((4, 4))
        v[1, 1] = 2.0
        dv = DensityVolume(g, v)
        assert kantorovich_lp(dv, dv) == pytest.approx(0.0, abs=1e-12)

    def test_single_atom_pair(self):
        g = GridSpec((4, 4))
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[1, 1] = 2.0
        b[1, 3] = 2.0
        cost = kantorovich_lp(DensityVolume(g, a), DensityVolume(g, b))
        assert cost == pytest.approx(4.0 * 2.0, rel=1e-12)

    def test_symmetry(self):
        g = GridSpec((6, 6))
        rng = np.random.default_rng(6)
        a = DensityVolume(g, rng.random((6, 6)) + 0.05)
        b = DensityVolume(g, (lambda v: v * (a.values.sum() / v.sum()))(
            rng.random((6, 6)) + 0.05))
        ab = kantorovich_lp(a, b)
        ba = kantorovich_lp(b, a)
        assert ab == pytest.approx(ba, rel=1e-9)

    def test_too_large(self):
        g = GridSpec((32, 32))
        dv = DensityVolume(g, np.ones((32, 32)))
        with pytest.raises(TooLarge):
            kantorovich_lp(dv, dv, max_voxels=400)

    def test_mass_mismatch_infeasible(self):
        g = GridSpec((4, 4))
        a = DensityVolume(g, np.ones((4, 4)))
        b = DensityVolume(g, 2.0 * np.ones((4, 4)))
        with pytest.raises(Infeasible):
            kantorovich_lp(a, b)

    def test_matches_1d_oracle(self):
        g = GridSpec((80, 4))
        x = np.arange(80) + 0.5
        p = np.exp(-((x - 30.0) ** 2) / 72.0) + 1e-4
        q = np.exp(-((x - 42.0) ** 2) / 112.5) + 1e-4
        pv = np.tile(p[:, None], (1, 4))
        qv = np.tile(q[:, None], (1, 4))
        pv = pv / pv.sum() * 1e4
        qv = qv / qv.sum() * 1e4
        lp = kantorovich_lp(DensityVolume(g, pv), DensityVolume(g, qv))
        _, c1d = omt_1d(pv.sum(axis=1), qv.sum(axis=1))
        assert lp == pytest.approx(c1d, rel=0.005)


class TestFdObjectiveCheck:
    def test_transport_term_only(self):
        g = GridSpec((8, 8, 8))
        i0 = orc.random_smooth_density(g, 1, n_blobs=3, sigma=1.6)
        i1 = orc.random_smooth_density(g, 2, n_blobs=3, sigma=1.6)
        cfg = SolverConfig(lam=0.0, gamma=0.0)
        assert fd_objective_check(identity_map(g), i0, i1, cfg,
                                  trials=5, seed=3) <= 1e-8

    def test_full_objective(self):
        g = GridSpec((8, 8, 8))
        i0 = orc.random_smooth_density(g, 1, n_blobs=3, sigma=1.6)
        i1 = orc.random_smooth_density(g, 2, n_blobs=3, sigma=1.6)
        cfg = SolverConfig()
        assert fd_objective_check(identity_map(g), i0, i1, cfg,
                                  trials=10, seed=4) <= 1e-3

    def test_detects_tampered_gradient(self):
        from tbmorph import el_gradient
        g = GridSpec((8, 8, 8))
        i0 = orc.random_smooth_density(g, 1, n_blobs=3, sigma=1.6)
        i1 = orc.random_smooth_density(g, 2, n_blobs=3, sigma=1.6)
        cfg = SolverConfig()

        def skewed(f, a, b, c):
            grad, _ = el_gradient(f, a, b, c, gamma_active=True)
            grad.components = grad.components * 1.02
            return grad

        err = fd_objective_check(identity_map(g), i0, i1, cfg,
                                 trials=3, seed=5, gradient_fn=skewed)
        assert err > 1e-3


class TestPhantoms:
    def test_deterministic(self):
        spec = Phantom(family="translation", count=4, dims=(32, 32), seed=9)
        a_vols, a_cov, _ = make_phantom_cohort(spec)
        b_vols, b_cov, _ = make_phantom_cohort(spec)
        assert np.array_equal(a_cov, b_cov)
        for a, b in zip(a_vols, b_vols):
            assert np.array_equal(a.values, b.values)

    def test_aging_monotone_measures(self):
        spec = Phantom(family="aging", count=5, dims=(32, 32), seed=3)
        vols, _, _ = make_phantom_cohort(spec)
        areas = [orc.cavity_area(v) for v in vols]
        masses = [orc.inner_disk_mass(v) for v in vols]
        assert all(np.diff(areas) > 0)
        assert all(np.diff(masses) < 0)

    def test_two_class_structure(self):
        spec = Phantom(family="two_class", count=10, dims=(32, 32), seed=4,
                       class_offset=3.0, jitter=0.3, sigma=3.0)
        vols, covs, labels = make_phantom_cohort(spec)
        assert sorted(set(labels.tolist())) == [0, 1]
        c0 = np.mean([orc.centroid(v)[0] for v, l in zip(vols, labels) if l == 0])
        c1 = np.mean([orc.centroid(v)[0] for v, l in zip(vols, labels) if l == 1])
        assert c1 - c0 > 3.0

    def test_translation_covariate_tracks_centroid(self):
        spec = Phantom(family="translation", count=5, dims=(32, 32), seed=2,
                       shift_step=1.5, sigma=3.0)
        vols, covs, _ = make_phantom_cohort(spec)
        cents = [orc.centroid(v)[0] for v in vols]
        assert np.corrcoef(cents, covs)[0, 1] > 0.999

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            make_phantom_cohort(Phantom(family="nope", count=2, dims=(8, 8)))

    def test_volumes_normalized(self):
        spec = Phantom(family="aging", count=3, dims=(32, 32), seed=1)
        vols, _, _ = make_phantom_cohort(spec)
        for v in vols:
            assert v.values.min() > 0
            assert v.values.sum() == pytest.approx(1e6, rel=1e-9)
