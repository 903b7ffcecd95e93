import numpy as np
import pytest

from conftest import gaussian, write_nifti1
from tbmorph import DensityVolume, GridSpec, normalize_density, read_nifti1, read_volume, resample, write_volume
from tbmorph.errors import (
    AllZeroVolume,
    BadMagic,
    DimensionalityOutOfRange,
    NonFiniteInput,
    NotNifti1,
    TruncatedFile,
    UnsupportedDatatype,
    UnsupportedEncoding,
)


class TestGridSpec:
    def test_defaults(self):
        g = GridSpec((8, 9))
        assert g.spacing == (1.0, 1.0)
        assert g.voxel_volume == 1.0
        assert g.extent == (8.0, 9.0)

    def test_axis_coords_are_cell_centers(self):
        g = GridSpec((4, 4), (2.0, 1.0))
        assert np.allclose(g.axis_coords(0), [1.0, 3.0, 5.0, 7.0])

    @pytest.mark.parametrize("dims", [(3, 8), (8,), (4, 4, 4, 4)])
    def test_bad_dims(self, dims):
        with pytest.raises(ValueError):
            GridSpec(dims)

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            GridSpec((4, 4), (1.0, 0.0))


class TestDensityVolume:
    def test_rejects_nan(self):
        v = np.ones((4, 4))
        v[0, 0] = np.nan
        with pytest.raises(NonFiniteInput):
            DensityVolume(GridSpec((4, 4)), v)

    def test_rejects_negative(self):
        v = np.ones((4, 4))
        v[1, 1] = -0.5
        with pytest.raises(ValueError):
            DensityVolume(GridSpec((4, 4)), v)

    def test_values_read_only(self):
        dv = DensityVolume(GridSpec((4, 4)), np.ones((4, 4)))
        with pytest.raises(ValueError):
            dv.values[0, 0] = 2.0


class TestNormalizeDensity:
    def test_uniform_is_fixed_point(self):
        dv = DensityVolume(GridSpec((4, 4)), np.ones((4, 4)))
        out = normalize_density(dv, 1e6, 0.1)
        assert np.allclose(out.values, 62500.0)
        assert out.values.sum() == pytest.approx(1e6, rel=1e-12)

    def test_hot_voxel_two_step_formula(self):
        v = np.zeros((4, 4))
        v[1, 2] = 5.0
        out = normalize_density(DensityVolume(GridSpec((4, 4)), v), 1e6, 0.1)
        # scale to 1e6, add 0.1, rescale: sum after floor is 1e6 + 1.6
        assert out.values[1, 2] == pytest.approx((1e6 + 0.1) * 1e6 / (1e6 + 1.6), rel=1e-12)
        assert out.values[0, 0] == pytest.approx(0.1e6 / (1e6 + 1.6), rel=1e-12)
        assert out.values.min() > 0
        assert out.values.sum() == pytest.approx(1e6, rel=1e-9)

    def test_min_value_floor_bound(self):
        rng = np.random.default_rng(0)
        v = rng.random((6, 6))
        v[v < 0.3] = 0.0
        out = normalize_density(DensityVolume(GridSpec((6, 6)), v), 1e6, 0.1)
        bound = 0.1 * 1e6 / (1e6 + 0.1 * 36)
        assert out.values.min() >= bound * (1 - 1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        dv = DensityVolume(GridSpec((6, 6)), rng.random((6, 6)))
        once = normalize_density(dv, 1e6, 0.1)
        twice = normalize_density(once, 1e6, 0.0)
        assert np.max(np.abs(twice.values - once.values) / once.values) < 1e-12

    def test_all_zero_raises(self):
        with pytest.raises(AllZeroVolume):
            normalize_density(DensityVolume(GridSpec((4, 4)), np.zeros((4, 4))), 1e6, 0.1)

    def test_strictly_positive_output(self):
        v = np.zeros((4, 4))
        v[2, 2] = 1.0
        out = normalize_density(DensityVolume(GridSpec((4, 4)), v), 1e6, 0.1)
        assert out.values.min() > 0


class TestResample:
    def test_uniform_stays_uniform(self):
        dv = DensityVolume(GridSpec((8, 8)), np.full((8, 8), 3.0))
        out = resample(dv, (16, 12))
        assert np.allclose(out.values, out.values[0, 0])
        assert out.mass == pytest.approx(dv.mass, rel=1e-12)

    def test_mass_preserved(self):
        rng = np.random.default_rng(2)
        dv = DensityVolume(GridSpec((12, 10)), rng.random((12, 10)))
        out = resample(dv, (7, 5))
        assert out.mass == pytest.approx(dv.mass, rel=1e-12)

    def test_gaussian_down_up_within_two_percent(self):
        g = GridSpec((64, 64))
        dv = normalize_density(
            DensityVolume(g, gaussian(g, (32.0, 32.0), 8.0)), 1e6, 0.0)
        back = resample(resample(dv, (32, 32)), (64, 64))
        rel = np.linalg.norm(back.values - dv.values) / np.linalg.norm(dv.values)
        assert rel < 0.02

    def test_extent_preserved(self):
        dv = DensityVolume(GridSpec((8, 8), (2.0, 2.0)), np.ones((8, 8)))
        out = resample(dv, (4, 4))
        assert out.grid.extent == dv.grid.extent


class TestNativeContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        vals = np.cumsum(rng.random((4, 5, 7)), axis=0)  # a ramp-like payload
        dv = DensityVolume(GridSpec((4, 5, 7), (1.0, 0.5, 2.0)), vals)
        p = tmp_path / "v.tbmv"
        write_volume(dv, p)
        back = read_volume(p)
        assert back.grid == dv.grid
        assert np.array_equal(back.values, dv.values)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.tbmv"
        p.write_bytes(b"NOTME!" + b"\x00" * 64)
        with pytest.raises(BadMagic):
            read_volume(p)

    def test_truncated_payload(self, tmp_path):
        dv = DensityVolume(GridSpec((4, 4)), np.ones((4, 4)))
        p = tmp_path / "v.tbmv"
        write_volume(dv, p)
        raw = p.read_bytes()
        p.write_bytes(raw[:-9])
        with pytest.raises(TruncatedFile):
            read_volume(p)

    def test_trailing_garbage(self, tmp_path):
        dv = DensityVolume(GridSpec((4, 4)), np.ones((4, 4)))
        p = tmp_path / "v.tbmv"
        write_volume(dv, p)
        with open(p, "ab") as fh:
            fh.write(b"x")
        with pytest.raises(UnsupportedEncoding):
            read_volume(p)


class TestNifti:
    def test_ramp_round_trip(self, tmp_path):
        data = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
        p = tmp_path / "ramp.nii"
        write_nifti1(p, data, spacing=[1.0, 2.0, 0.5])
        dv = read_nifti1(p)
        assert dv.grid.dims == (4, 4, 4)
        assert dv.grid.spacing == (1.0, 2.0, 0.5)
        assert np.array_equal(dv.values, data.astype(np.float64))

    def test_scl_slope_applied(self, tmp_path):
        data = np.arange(16, dtype=np.int16).reshape(4, 4)
        p = tmp_path / "scaled.nii"
        write_nifti1(p, data, datatype=4, scl_slope=2.0, scl_inter=1.0)
        dv = read_nifti1(p)
        assert np.array_equal(dv.values, data * 2.0 + 1.0)

    def test_2d_accepted(self, tmp_path):
        data = np.ones((5, 6), dtype=np.float64)
        p = tmp_path / "flat.nii"
        write_nifti1(p, data, datatype=64)
        dv = read_nifti1(p)
        assert dv.grid.dims == (5, 6)

    def test_trailing_singleton_ok(self, tmp_path):
        data = np.ones((4, 4, 4), dtype=np.float32)
        p = tmp_path / "t.nii"
        write_nifti1(p, data, extra_dim=1)
        assert read_nifti1(p).grid.dims == (4, 4, 4)

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "no.nii"
        write_nifti1(p, np.ones((4, 4), dtype=np.float32), magic=b"ni1\x00")
        with pytest.raises(NotNifti1):
            read_nifti1(p)

    def test_complex_datatype_rejected(self, tmp_path):
        p = tmp_path / "c.nii"
        write_nifti1(p, np.ones((4, 4), dtype=np.complex64), datatype=32)
        with pytest.raises(UnsupportedDatatype):
            read_nifti1(p)

    def test_four_nontrivial_dims_rejected(self, tmp_path):
        p = tmp_path / "4d.nii"
        write_nifti1(p, np.ones((4, 4, 4), dtype=np.float32), extra_dim=3)
        with pytest.raises(DimensionalityOutOfRange):
            read_nifti1(p)

    def test_truncated_payload(self, tmp_path):
        data = np.ones((6, 6), dtype=np.float32)
        p = tmp_path / "short.nii"
        write_nifti1(p, data)
        raw = p.read_bytes()
        p.write_bytes(raw[:-10])
        with pytest.raises(TruncatedFile):
            read_nifti1(p)
