import numpy as np
import pytest

from parahom import lattice as lt
from parahom import solver as sv


def lat2():
    return lt.make_lattice(2, 8, 16, 1.0)


def identity_op():
    return sv.LinearOperator(apply=lambda u: u, symmetric=True)


class TestCG:
    def test_zero_rhs(self):
        lat = lat2()
        x, rep = sv.cg(identity_op(), np.zeros(lat.shape))
        assert rep.iterations == 0 and rep.converged
        assert np.all(x == 0)

    def test_identity_one_iteration(self):
        lat = lat2()
        b = np.random.default_rng(0).standard_normal(lat.shape)
        x, rep = sv.cg(identity_op(), b)
        assert rep.iterations == 1
        assert np.allclose(x, b)

    def test_laplacian_single_mode_matches_spectral(self):
        lat = lat2()
        x1 = np.arange(lat.n) * lat.h
        b = np.broadcast_to(np.sin(2 * np.pi * x1)[None, :, None], lat.shape).copy()
        A = sv.LinearOperator(
            apply=lambda u: -lt.div_b(lat, lt.grad_f(lat, u)),
            symmetric=True, constant_nullspace=True)
        x, rep = sv.cg(A, b, tol=1e-11, max_iter=2000)
        assert rep.converged
        # spectral oracle: invert only the spatial Laplacian symbol
        want = b / ((4 / lat.h**2) * np.sin(np.pi * 1 * lat.h / lat.L) ** 2)
        assert np.allclose(x, want, atol=1e-9)

    def test_mean_compatibility_error(self):
        lat = lat2()
        A = sv.LinearOperator(apply=lambda u: u, symmetric=True,
                              constant_nullspace=True)
        with pytest.raises(lt.CompatibilityError):
            sv.cg(A, np.ones(lat.shape))

    def test_nonconvergence_reported(self):
        lat = lat2()
        A = sv.LinearOperator(
            apply=lambda u: -lt.div_b(lat, lt.grad_f(lat, u)),
            symmetric=True, constant_nullspace=True)
        b = lt.project_mean_zero(np.random.default_rng(1).standard_normal(lat.shape))
        _, rep = sv.cg(A, b, tol=1e-14, max_iter=2)
        assert not rep.converged


class TestBiCGStab:
    def test_identity(self):
        lat = lat2()
        b = np.random.default_rng(2).standard_normal(lat.shape)
        x, rep = sv.bicgstab(identity_op(), b)
        assert rep.converged
        assert np.allclose(x, b, atol=1e-10)

    def test_zero_rhs(self):
        lat = lat2()
        x, rep = sv.bicgstab(identity_op(), np.zeros(lat.shape))
        assert rep.iterations == 0
        assert np.all(x == 0)

    def test_constant_coefficient_parabolic_vs_spectral(self):
        lat = lat2()
        beta, a0 = 0.7, 1.3
        A = sv.parabolic_constant_apply(lat, beta, a0)
        b = np.random.default_rng(3).standard_normal(lat.shape)
        x, rep = sv.bicgstab(A, b, tol=1e-10, max_iter=4000)
        assert rep.converged
        want = sv.parabolic_preconditioner(lat, beta, a0).apply(b)
        assert np.allclose(x, want, atol=1e-8)

    def test_preconditioned_converges_fast(self):
        lat = lat2()
        A = sv.parabolic_constant_apply(lat, 1.0, 2.0)
        M = sv.parabolic_preconditioner(lat, 1.0, 2.0)
        b = np.random.default_rng(4).standard_normal(lat.shape)
        x, rep = sv.bicgstab(A, b, tol=1e-12, max_iter=50, preconditioner=M)
        assert rep.converged
        assert rep.iterations <= 3

    def test_preconditioner_reduces_iterations_on_checkerboard(self):
        # measured-iteration-count oracle for the a0 = mean(a) choice
        lat = lt.make_lattice(2, 16, 16, 1.0)
        r = np.random.default_rng(5)
        a = np.where(r.random(lat.shape) < 0.5, 0.5, 2.0)

        def apply(u):
            g = lt.grad_f(lat, u)
            flux = np.stack([0.5 * (a + np.roll(a, -1, axis=1 + i)) * g[i]
                             for i in range(lat.d)])
            return u + lt.dt_b(lat, u) - lt.div_b(lat, flux)

        A = sv.LinearOperator(apply=apply)
        b = r.standard_normal(lat.shape)
        _, rep_plain = sv.bicgstab(A, b, tol=1e-10, max_iter=5000)
        M = sv.parabolic_preconditioner(lat, 1.0, float(np.mean(a)))
        _, rep_pre = sv.bicgstab(A, b, tol=1e-10, max_iter=5000, preconditioner=M)
        assert rep_pre.converged
        assert rep_pre.iterations < rep_plain.iterations


class TestSpectralPoisson:
    def test_zero(self):
        lat = lat2()
        assert np.all(sv.spectral_poisson(lat, np.zeros(lat.shape)) == 0)

    def test_single_mode_divided_by_symbol(self):
        lat = lat2()
        x1 = np.arange(lat.n) * lat.h
        t = np.arange(lat.n_t) * lat.tau
        rhs = (np.sin(2 * np.pi * 3 * x1 / lat.L)[None, :, None]
               * np.cos(2 * np.pi * 2 * t / lat.T)[:, None, None])
        rhs = np.broadcast_to(rhs, lat.shape).copy()
        sym = -(4 / lat.h**2) * np.sin(np.pi * 3 * lat.h / lat.L) ** 2 \
            - (4 / lat.tau**2) * np.sin(np.pi * 2 * lat.tau / lat.T) ** 2
        u = sv.spectral_poisson(lat, rhs)
        assert np.allclose(u, rhs / sym, atol=1e-12)

    def test_round_trip_random(self):
        lat = lat2()
        rhs = lt.project_mean_zero(
            np.random.default_rng(6).standard_normal(lat.shape))
        u = sv.spectral_poisson(lat, rhs)
        assert abs(np.mean(u)) < 1e-13
        assert np.allclose(lt.lap_st(lat, u), rhs, atol=1e-10 * np.linalg.norm(rhs))

    def test_poisson_after_laplacian_is_identity(self):
        lat = lat2()
        u = lt.project_mean_zero(
            np.random.default_rng(7).standard_normal(lat.shape))
        back = sv.spectral_poisson(lat, lt.lap_st(lat, u))
        assert np.allclose(back, u, atol=1e-10)

    def test_nonzero_mean_rejected(self):
        lat = lat2()
        with pytest.raises(lt.CompatibilityError):
            sv.spectral_poisson(lat, np.ones(lat.shape))


class TestParabolicPreconditioner:
    def test_inverse_of_own_operator(self):
        lat = lat2()
        A = sv.parabolic_constant_apply(lat, 1.0, 0.8)
        M = sv.parabolic_preconditioner(lat, 1.0, 0.8)
        u = np.random.default_rng(8).standard_normal(lat.shape)
        assert np.allclose(M.apply(A.apply(u)), u, atol=1e-12 * np.linalg.norm(u))

    def test_beta_zero_preserves_mean_zero(self):
        lat = lat2()
        M = sv.parabolic_preconditioner(lat, 0.0, 1.0)
        u = lt.project_mean_zero(np.random.default_rng(9).standard_normal(lat.shape))
        assert abs(np.mean(M.apply(u))) < 1e-13

    def test_symmetry_flags(self):
        lat = lat2()
        assert sv.parabolic_preconditioner(lat, 0.0, 1.0).constant_nullspace
        assert not sv.parabolic_preconditioner(lat, 1.0, 1.0).constant_nullspace
