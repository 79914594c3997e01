import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import chebyshev as cheb
from numpy.polynomial import legendre

from slabmhd.spectral import (
    ConfigurationError,
    SlabGrid,
    SurfaceField,
    TorusGrid,
    VolumeField,
    anisotropic_norm,
    chebyshev_matrix,
    chebyshev_points,
    clenshaw_curtis_weights,
    differentiate,
    integrate,
    random_band_limited,
    sobolev_norm_surface,
    transform,
    volume_sobolev_norm,
)


def naive_dft2(values):
    """Direct O(n^2) evaluation of the normalised 2-D DFT."""
    n1, n2 = values.shape
    j1 = np.arange(n1)
    j2 = np.arange(n2)
    out = np.zeros((n1, n2), dtype=complex)
    for a in range(n1):
        for b in range(n2):
            phase = np.exp(-2j * np.pi * (a * j1[:, None] / n1 + b * j2[None, :] / n2))
            out[a, b] = np.sum(values * phase) / (n1 * n2)
    return out


class TestGrids:
    def test_rejects_odd_or_small_torus(self):
        with pytest.raises(ConfigurationError):
            TorusGrid(5, 8)
        with pytest.raises(ConfigurationError):
            TorusGrid(2, 8)

    def test_rejects_short_vertical_grid(self):
        with pytest.raises(ConfigurationError):
            SlabGrid(TorusGrid(4, 4), 4, 9)

    def test_shared_interface_node(self):
        g = SlabGrid(TorusGrid(4, 4), 9, 7)
        assert g.z("lower")[0] == -1.0 and g.z("lower")[-1] == 0.0
        assert g.z("upper")[0] == 0.0 and g.z("upper")[-1] == 1.0

    def test_chebyshev_matrix_exact_on_polynomials(self):
        x = chebyshev_points(9)
        D = chebyshev_matrix(9)
        for deg in range(9):
            assert np.allclose(D @ x**deg, deg * x ** max(deg - 1, 0) * (deg > 0), atol=1e-12)

    def test_clenshaw_curtis_matches_legendre_gauss(self):
        # independent rule: Gauss-Legendre integrates the same polynomials exactly
        for n in (5, 8, 17):
            x = chebyshev_points(n)
            w = clenshaw_curtis_weights(n)
            gx, gw = legendre.leggauss(n)
            for deg in range(n):
                assert abs(w @ x**deg - gw @ gx**deg) < 1e-13


class TestTransform:
    def test_constant_has_single_mode(self):
        t = TorusGrid(8, 8)
        f = SurfaceField.from_values(t, np.full(t.shape, 3.5))
        c = f.coefficients
        assert abs(c[0, 0] - 3.5) < 1e-15
        c[0, 0] = 0
        assert np.max(np.abs(c)) < 1e-15

    def test_sine_amplitudes(self):
        t = TorusGrid(8, 6)
        f = SurfaceField.from_function(t, lambda x1, x2: np.sin(2 * np.pi * x1) + 0 * x2)
        c = f.coefficients.copy()
        assert abs(c[1, 0] - (-0.5j)) < 1e-15
        assert abs(c[-1, 0] - 0.5j) < 1e-15
        c[1, 0] = c[-1, 0] = 0
        assert np.max(np.abs(c)) < 1e-15

    def test_matches_naive_dft(self):
        t = TorusGrid(8, 6)
        vals = np.random.default_rng(3).standard_normal(t.shape)
        f = SurfaceField.from_values(t, vals)
        assert np.max(np.abs(f.coefficients - naive_dft2(vals))) < 1e-12
        assert np.max(np.abs(f.values - vals)) < 1e-12

    def test_hermitian_symmetry(self):
        t = TorusGrid(8, 8)
        f = SurfaceField.from_values(t, np.random.default_rng(0).standard_normal(t.shape))
        c = f.coefficients
        flipped = np.conj(np.roll(np.flip(c, axis=(0, 1)), 1, axis=(0, 1)))
        assert np.max(np.abs(c - flipped)) < 1e-14

    def test_volume_roundtrip(self):
        g = SlabGrid(TorusGrid(8, 4), 9, 6)
        rng = np.random.default_rng(1)
        f = VolumeField(g, "both", lower=rng.standard_normal(g.shape("lower")),
                        upper=rng.standard_normal(g.shape("upper")))
        s = transform(f, "to-spectral")
        assert s.space == "spectral"
        back = transform(s, "to-physical")
        for r in ("lower", "upper"):
            assert np.max(np.abs(back.data(r) - f.data(r))) < 1e-12

    def test_chebyshev_coefficients_of_polynomial(self):
        g = SlabGrid(TorusGrid(4, 4), 7, 7)
        # on [-1, 0] the local variable is s = 2 x3 + 1; x3^2 = (s^2 - 2 s + 1) / 4
        f = VolumeField.from_function(g, "lower", lambda x1, x2, x3: x3**2 + 0 * x1)
        s = transform(f, "to-spectral").data("lower")[0, 0]
        expected = cheb.poly2cheb([0.25, -0.5, 0.25])
        assert np.allclose(s[:3], expected, atol=1e-14)
        assert np.allclose(s[3:], 0, atol=1e-14)

    def test_region_mismatch_rejected(self):
        g = SlabGrid(TorusGrid(4, 4), 5, 5)
        with pytest.raises(ConfigurationError):
            VolumeField(g, "lower", upper=np.zeros(g.shape("upper")))


class TestDifferentiate:
    def test_sine_derivative(self):
        t = TorusGrid(16, 8)
        f = SurfaceField.from_function(t, lambda x1, x2: np.sin(2 * np.pi * x1) + 0 * x2)
        d = differentiate(f, "x1")
        x1, _ = t.mesh
        assert np.max(np.abs(d.values - 2 * np.pi * np.cos(2 * np.pi * x1))) < 1e-12

    def test_vertical_polynomial_exact(self):
        g = SlabGrid(TorusGrid(4, 4), 9, 9)
        f = VolumeField.from_function(g, "lower", lambda x1, x2, x3: x3**2 + 0 * x1)
        d = differentiate(f, "x3")
        x3 = g.z("lower")
        assert np.max(np.abs(d.data("lower") - 2 * x3)) < 1e-12

    def test_recurrence_matches_collocation(self):
        g = SlabGrid(TorusGrid(4, 6), 11, 8)
        rng = np.random.default_rng(5)
        f = VolumeField(g, "both", lower=rng.standard_normal(g.shape("lower")),
                        upper=rng.standard_normal(g.shape("upper")))
        via_matrix = differentiate(f, "x3", 2)
        via_coeffs = transform(differentiate(transform(f, "to-spectral"), "x3", 2), "to-physical")
        for r in ("lower", "upper"):
            scale = np.max(np.abs(via_matrix.data(r)))
            assert np.max(np.abs(via_matrix.data(r) - via_coeffs.data(r))) < 1e-11 * scale

    def test_fourth_order_finite_difference_oracle(self):
        # band-limited field known in closed form, so stencils can sample off-grid
        rng = np.random.default_rng(11)
        modes = [(int(a), int(b), complex(rng.standard_normal(), rng.standard_normal()))
                 for a, b in [(1, 0), (2, 1), (0, 3), (-1, 2)]]

        def field(x1, x2):
            return sum(np.real(c * np.exp(2j * np.pi * (a * x1 + b * x2))) for a, b, c in modes)

        t = TorusGrid(16, 16)
        f = SurfaceField.from_function(t, field)
        spectral = differentiate(f, "x1").values
        x1, x2 = t.mesh
        errs = []
        for h in (1e-2, 5e-3):
            fd = (-field(x1 + 2 * h, x2) + 8 * field(x1 + h, x2)
                  - 8 * field(x1 - h, x2) + field(x1 - 2 * h, x2)) / (12 * h)
            errs.append(np.max(np.abs(fd - spectral)))
        assert errs[1] < errs[0]
        assert 12 < errs[0] / errs[1] < 20   # fourth order: ratio near 16

    def test_horizontal_derivatives_commute(self):
        g = SlabGrid(TorusGrid(8, 8), 5, 5)
        rng = np.random.default_rng(2)
        f = VolumeField(g, "lower", lower=rng.standard_normal(g.shape("lower")))
        a = differentiate(differentiate(f, "x1"), "x2").data("lower")
        b = differentiate(differentiate(f, "x2"), "x1").data("lower")
        assert np.max(np.abs(a - b)) < 1e-12

    def test_under_resolved_flag(self):
        g = SlabGrid(TorusGrid(8, 8), 5, 5)
        rng = np.random.default_rng(2)
        f = VolumeField(g, "lower", lower=rng.standard_normal(g.shape("lower")))
        assert "under-resolved" in differentiate(f, "x1").flags
        assert "under-resolved" in differentiate(f, "x3", 4).flags
        smooth = VolumeField.from_function(g, "lower", lambda x1, x2, x3: np.cos(2 * np.pi * x1) + 0 * x3)
        assert differentiate(smooth, "x1").flags == ()


class TestNorms:
    t = TorusGrid(8, 8)

    def test_constant_surface_norm(self):
        one = SurfaceField.from_values(self.t, np.ones(self.t.shape))
        for s in (-1.0, 0.0, 0.5, 3.0):
            assert abs(sobolev_norm_surface(one, s) - 1.0) < 1e-14

    def test_sine_surface_norms(self):
        f = SurfaceField.from_function(self.t, lambda x1, x2: np.sin(2 * np.pi * x1) + 0 * x2)
        assert abs(sobolev_norm_surface(f, 0) ** 2 - 0.5) < 1e-14
        assert abs(sobolev_norm_surface(f, 1) ** 2 - (1 + 4 * np.pi**2) / 2) < 1e-12

    def test_parseval(self):
        rng = np.random.default_rng(4)
        vals = rng.standard_normal(self.t.shape)
        f = SurfaceField.from_values(self.t, vals)
        assert abs(np.mean(vals**2) - sobolev_norm_surface(f, 0) ** 2) < 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-2, 2), st.floats(0.01, 2))
    def test_monotone_in_s(self, seed, s, ds):
        rng = np.random.default_rng(seed)
        f = SurfaceField.from_values(self.t, rng.standard_normal(self.t.shape))
        assert sobolev_norm_surface(f, s + ds) > sobolev_norm_surface(f, s)

    def test_anisotropic_constant(self):
        g = SlabGrid(self.t, 9, 9)
        c = VolumeField.from_function(g, "lower", lambda x1, x2, x3: -2.5 + 0 * x1 * x3)
        for ell in (0, 1, 2):
            assert abs(anisotropic_norm(c, 0, ell) - 2.5) < 1e-12

    def test_anisotropic_reduces_to_standard(self):
        g = SlabGrid(self.t, 9, 9)
        f = VolumeField.from_function(g, "both", lambda x1, x2, x3: np.sin(2 * np.pi * x2) * x3**2)
        assert abs(anisotropic_norm(f, 2, 0) - volume_sobolev_norm(f, 2)) < 1e-14

    def test_anisotropic_sine_against_gauss_quadrature(self):
        g = SlabGrid(self.t, 9, 9)
        f = VolumeField.from_function(g, "lower", lambda x1, x2, x3: np.sin(2 * np.pi * x1) + 0 * x2 * x3)
        # independent tensor Gauss-Legendre rule on [0,1]^2 x [-1,0]
        gx, gw = legendre.leggauss(12)
        u, uw = (gx + 1) / 2, gw / 2
        z, zw = (gx - 1) / 2, gw / 2
        X1, X2, Z = np.meshgrid(u, u, z, indexing="ij")
        W = uw[:, None, None] * uw[None, :, None] * zw[None, None, :]
        n_f = np.sqrt(np.sum(W * np.sin(2 * np.pi * X1) ** 2))
        n_d1 = np.sqrt(np.sum(W * (2 * np.pi * np.cos(2 * np.pi * X1)) ** 2))
        assert abs(anisotropic_norm(f, 0, 1) - (n_f + n_d1)) < 1e-10

    def test_volume_quadrature_parseval(self):
        g = SlabGrid(self.t, 9, 9)
        rng = np.random.default_rng(8)
        a = rng.standard_normal(g.shape("lower"))
        phys = float(integrate(a**2, g, "lower"))
        ah = np.fft.fft2(a, axes=(0, 1)) / 64
        spec = float(np.sum(np.abs(ah) ** 2, axis=(0, 1)) @ g.weights("lower"))
        assert abs(phys - spec) < 1e-10

    def test_random_band_limited_is_real_and_limited(self):
        vals = random_band_limited(self.t, np.random.default_rng(0), max_mode=2)
        c = np.fft.fft2(vals)
        xi = np.fft.fftfreq(8, 1 / 8)
        outside = (np.abs(xi)[:, None] > 2) | (np.abs(xi)[None, :] > 2)
        assert np.max(np.abs(c[outside])) < 1e-12
