import numpy as np
import pytest

from parahom import corrector as co
from parahom import ensemble as en
from parahom import fluxcor as fx
from parahom import lattice as lt


def solved_sample(n=16, n_t=32, seed=1, kind="checkerboard"):
    lat = lt.make_lattice(2, n, n_t, 1.0)
    if kind == "checkerboard":
        spec = en.EnsembleSpec(kind="checkerboard", mu=0.5, ell=2 * lat.h,
                               phases=(0.5, 2.0))
    else:
        spec = en.EnsembleSpec(kind="constant", value=2.0)
    a = en.sample(spec, lat, seed=seed)
    cs = co.solve_cell(a, tol=1e-11)
    fl = co.flux(a, cs, co.effective(a, cs))
    return lat, a, cs, fl


class TestSolveSigma:
    def test_constant_coefficients_zero_sigma(self):
        lat, a, cs, fl = solved_sample(kind="constant", n=8, n_t=16)
        fc = fx.solve_sigma(fl)
        assert np.max(np.abs(fc.sigma)) <= 1e-12

    def test_skew_symmetry_exact(self):
        lat, a, cs, fl = solved_sample()
        fc = fx.solve_sigma(fl)
        assert fx.skew_defect(fc) <= 1e-14

    def test_divergence_identity_checkerboard_n32(self):
        lat, a, cs, fl = solved_sample(n=32, n_t=64, seed=2)
        fc = fx.solve_sigma(fl)
        rep = fx.verify_identities(fc, fl, cs)
        assert rep["divergence"] <= 1e-8

    def test_nonzero_mean_rejected(self):
        lat, a, cs, fl = solved_sample(n=8, n_t=16)
        fl.q[0, 0] += 1.0
        with pytest.raises(lt.CompatibilityError):
            fx.solve_sigma(fl)

    def test_sigma_mean_zero(self):
        lat, a, cs, fl = solved_sample(n=8, n_t=16, seed=3)
        fc = fx.solve_sigma(fl)
        dp1 = lat.d + 1
        for kp in range(dp1):
            for ip in range(dp1):
                for j in range(lat.d):
                    assert abs(np.mean(fc.sigma[kp, ip, j])) <= 1e-12


class TestVerifyIdentities:
    def test_zero_inputs(self):
        lat = lt.make_lattice(2, 8, 16, 1.0)
        fc = fx.FluxCorrector(lat, np.zeros((3, 3, 2) + lat.shape))
        fl = co.FluxField(lat, np.zeros((3, 2) + lat.shape))
        cs = co.CorrectorSet(lat, 0.0, np.zeros((2,) + lat.shape),
                             np.zeros((2, 2) + lat.shape), [])
        rep = fx.verify_identities(fc, fl, cs)
        assert rep["poisson"] == 0.0
        assert rep["divergence"] == 0.0
        assert rep["time_slice"] == 0.0

    def test_solved_sample_residuals(self):
        lat, a, cs, fl = solved_sample(seed=4)
        fc = fx.solve_sigma(fl)
        rep = fx.verify_identities(fc, fl, cs)
        assert rep["poisson"] <= 1e-8
        assert rep["divergence"] <= 1e-8
        assert rep["time_slice"] <= 1e-8

    def test_corruption_sensitivity(self):
        lat, a, cs, fl = solved_sample(seed=5)
        fc = fx.solve_sigma(fl)
        fc.sigma[0, 1, 0][3, 5, 7] += 1.0
        rep = fx.verify_identities(fc, fl, cs)
        assert rep["divergence"] > 1e-3


class TestGrowthProfile:
    def test_constant_zero_increments(self):
        lat, a, cs, fl = solved_sample(kind="constant", n=8, n_t=64)
        fc = fx.solve_sigma(fl)
        rows = fx.growth_profile(fc, [2 * lat.h])
        assert rows[0]["rms"] <= 1e-12

    def test_radius_bound(self):
        lat, a, cs, fl = solved_sample(n=8, n_t=16)
        fc = fx.solve_sigma(fl)
        with pytest.raises(lt.ConfigurationError):
            fx.growth_profile(fc, [lat.L])

    def test_profile_is_finite_positive(self):
        lat, a, cs, fl = solved_sample(n=16, n_t=64, seed=6)
        fc = fx.solve_sigma(fl)
        rows = fx.growth_profile(fc, [2 * lat.h, 4 * lat.h])
        for row in rows:
            assert np.isfinite(row["rms"])
        assert rows[-1]["rms"] > 0
