import numpy as np
import pytest

from parahom import lattice as lt


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMakeLattice:
    def test_parabolic_scaling_default(self):
        lat = lt.make_lattice(2, 8, 64, 1.0)
        assert lat.h == 0.125
        assert lat.tau == 0.015625

    def test_1d(self):
        lat = lt.make_lattice(1, 4, 16, 1.0)
        assert lat.h == 0.25
        assert lat.tau == 0.0625

    def test_degenerate_sizes_rejected(self):
        with pytest.raises(lt.ConfigurationError):
            lt.make_lattice(2, 0, 8, 1.0)
        with pytest.raises(lt.ConfigurationError):
            lt.make_lattice(2, 8, 1, 1.0)
        with pytest.raises(lt.ConfigurationError):
            lt.make_lattice(2, 8, 8, -1.0)
        with pytest.raises(lt.ConfigurationError):
            lt.make_lattice(4, 8, 8, 1.0)

    def test_tau_override(self):
        lat = lt.make_lattice(2, 8, 16, 1.0, tau_override=0.5)
        assert lat.tau == 0.5


class TestDifferences:
    def test_grad_of_constant_is_zero(self):
        lat = lt.make_lattice(2, 8, 4, 1.0)
        u = np.full(lat.shape, 3.7)
        assert np.all(lt.grad_f(lat, u) == 0.0)

    def test_grad_sine_matches_analytic(self):
        # forward difference of sin equals the shifted cosine up to O(h^2):
        # (sin(k(x+h)) - sin(kx))/h = k cos(k(x+h/2)) * sinc correction
        lat = lt.make_lattice(2, 64, 4, 1.0)
        k = 2 * np.pi / lat.L
        x1 = np.arange(lat.n) * lat.h
        u = np.broadcast_to(np.sin(k * x1)[None, :, None], lat.shape).copy()
        g = lt.grad_f(lat, u)[0]
        expected = k * np.cos(k * (x1 + lat.h / 2))[None, :, None]
        # Taylor remainder oracle: |error| <= k^3 h^2 / 24 * max|cos|
        bound = k**3 * lat.h**2 / 24 * 1.0
        assert np.max(np.abs(g - expected)) <= bound * 1.05

    def test_adjointness_exact(self):
        lat = lt.make_lattice(2, 8, 8, 1.0)
        r = rng(1)
        u = r.standard_normal(lat.shape)
        v = r.standard_normal((lat.d,) + lat.shape)
        lhs = np.sum(lt.div_b(lat, v) * u)
        rhs = -np.sum(v * lt.grad_f(lat, u))
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)

    def test_div_constant_zero(self):
        lat = lt.make_lattice(3, 4, 4, 1.0)
        v = np.ones((lat.d,) + lat.shape)
        assert np.allclose(lt.div_b(lat, v), 0.0, atol=1e-14)

    def test_div_single_fourier_mode_symbol(self):
        # backward difference of e^{ikx} has symbol (1 - e^{-ikh})/h
        lat = lt.make_lattice(1, 16, 4, 1.0)
        k = 3
        x = np.arange(lat.n) * lat.h
        mode = np.exp(2j * np.pi * k * x / lat.L)
        u = np.broadcast_to(mode[None, :], lat.shape).copy()
        v = np.stack([u])
        got = lt.div_b(lat, v.real) + 1j * lt.div_b(lat, v.imag)
        sym = (1 - np.exp(-2j * np.pi * k * lat.h / lat.L)) / lat.h
        assert np.allclose(got, sym * u, atol=1e-12)
        # magnitude of the symbol is (2/h) sin(pi k h / L)
        assert abs(abs(sym) - (2 / lat.h) * np.sin(np.pi * k * lat.h / lat.L)) < 1e-12

    def test_dt_b_time_constant(self):
        lat = lt.make_lattice(2, 4, 8, 1.0)
        u = np.broadcast_to(rng(2).standard_normal((1, 4, 4)), lat.shape).copy()
        assert np.allclose(lt.dt_b(lat, u), 0.0, atol=1e-12)

    def test_dt_b_sine_first_order(self):
        lat = lt.make_lattice(1, 4, 128, 1.0, tau_override=1.0 / 128)
        T = lat.T
        t = np.arange(lat.n_t) * lat.tau
        u = np.broadcast_to(np.sin(2 * np.pi * t / T)[:, None], lat.shape).copy()
        got = lt.dt_b(lat, u)
        expected = (2 * np.pi / T) * np.cos(2 * np.pi * t / T)[:, None]
        # Taylor oracle: backward difference error <= max|u''| tau / 2
        bound = (2 * np.pi / T) ** 2 * lat.tau / 2
        assert np.max(np.abs(got - expected)) <= bound * 1.05

    def test_dt_b_telescopes(self):
        lat = lt.make_lattice(2, 4, 8, 1.0)
        u = rng(3).standard_normal(lat.shape)
        assert abs(np.sum(lt.dt_b(lat, u), axis=0).max()) < 1e-10


class TestLaplacian:
    def test_constant_zero(self):
        lat = lt.make_lattice(2, 8, 8, 1.0)
        assert np.allclose(lt.lap_st(lat, np.full(lat.shape, 2.0)), 0.0)

    def test_plane_wave_eigenvalue(self):
        lat = lt.make_lattice(2, 8, 16, 1.0)
        k = (2, 3)
        m = 5
        t = np.arange(lat.n_t) * lat.tau
        x = np.arange(lat.n) * lat.h
        phase = (2j * np.pi) * (
            k[0] * x[None, :, None] / lat.L
            + k[1] * x[None, None, :] / lat.L
            + m * t[:, None, None] / lat.T)
        u = np.exp(phase)
        lam = -sum((4 / lat.h**2) * np.sin(np.pi * ki * lat.h / lat.L) ** 2 for ki in k) \
            - (4 / lat.tau**2) * np.sin(np.pi * m * lat.tau / lat.T) ** 2
        got = lt.lap_st(lat, u.real) + 1j * lt.lap_st(lat, u.imag)
        assert np.allclose(got, lam * u, atol=1e-8 * abs(lam))

    def test_mean_zero(self):
        lat = lt.make_lattice(2, 8, 8, 1.0)
        u = rng(4).standard_normal(lat.shape)
        assert abs(np.mean(lt.lap_st(lat, u))) < 1e-10

    def test_equals_div_of_st_gradient(self):
        lat = lt.make_lattice(2, 8, 8, 1.0)
        u = rng(5).standard_normal(lat.shape)
        alt = lt.div_st_b(lat, lt.grad_st_f(lat, u))
        assert np.allclose(lt.lap_st(lat, u), alt, rtol=1e-12, atol=1e-9)


class TestAverages:
    def test_mean_of_constant(self):
        lat = lt.make_lattice(2, 4, 4, 1.0)
        assert lt.mean(np.full(lat.shape, 2.5)) == 2.5

    def test_box_average_full_torus_is_mean(self):
        lat = lt.make_lattice(2, 8, 8, 1.0, tau_override=1.0)
        u = rng(6).standard_normal(lat.shape)
        # radius covering the whole torus (offsets wrap, every site hit equally)
        r = lat.L * 4
        got = lt.box_average(lat, u, (0, 0, 0), r)
        # enumeration oracle over wrapped offsets
        off_x, off_t = lt.box_offsets(lat, r)
        acc = [u[tuple([(ot) % lat.n_t] + [(ox) % lat.n, (oy) % lat.n])]
               for ot in off_t for ox in off_x for oy in off_x]
        assert abs(got - np.mean(acc)) < 1e-12

    def test_box_average_delta_enumeration(self):
        lat = lt.make_lattice(2, 8, 16, 1.0)
        u = np.zeros(lat.shape)
        u[3, 2, 5] = 7.0
        r = lat.h
        off_x, off_t = lt.box_offsets(lat, r)
        n_box = len(off_t) * len(off_x) ** 2
        got = lt.box_average(lat, u, (3, 2, 5), r)
        assert abs(got - 7.0 / n_box) < 1e-14

    def test_too_small_radius_rejected(self):
        lat = lt.make_lattice(2, 8, 16, 1.0)
        with pytest.raises(lt.ConfigurationError):
            lt.box_average(lat, np.zeros(lat.shape), (0, 0, 0), lat.h / 4)


class TestShiftsAndPeriodicity:
    def test_operators_commute_with_shift(self):
        lat = lt.make_lattice(2, 8, 8, 1.0)
        u = rng(7).standard_normal(lat.shape)
        z = (3, 1, 5)
        for op in (lambda w: lt.grad_f(lat, w)[0], lambda w: lt.dt_b(lat, w),
                   lambda w: lt.lap_st(lat, w)):
            a = op(lt.shift(u, lat, z))
            b = lt.shift(op(u), lat, z)
            assert np.allclose(a, b, atol=1e-12)


class TestPhomIO:
    def test_round_trip(self, tmp_path):
        lat = lt.make_lattice(2, 8, 4, 1.0)
        u = rng(8).standard_normal(lat.shape)
        p = tmp_path / "f.phom"
        lt.write_field(p, lat, u)
        d, n, n_t, v = lt.read_field(p)
        assert (d, n, n_t) == (2, 8, 4)
        assert np.array_equal(u, v)

    def test_header_layout(self, tmp_path):
        lat = lt.make_lattice(1, 2, 2, 1.0)
        u = np.arange(4.0).reshape(2, 2)
        p = tmp_path / "f.phom"
        lt.write_field(p, lat, u)
        raw = p.read_bytes()
        assert raw[:4] == b"PHOM"
        # time-major: t=0 slice first
        vals = np.frombuffer(raw[20:], dtype="<f8")
        assert list(vals) == [0.0, 1.0, 2.0, 3.0]

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"JUNKxxxxxxxxxxxxxxxxxxxx")
        with pytest.raises(lt.ConfigurationError):
            lt.read_field(p)
