import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from slabmhd.diagnostics import (
    DiagnosticError,
    constraint_report,
    decay_fit,
    energy_law_residual,
    physical_energy,
    poincare_check,
    reduced_functionals,
)
from slabmhd.dynamics import (
    DerivativeTable,
    ParameterError,
    Params,
    PlasmaState,
    complete_state,
    construct_initial_derivatives,
    magnetic_substep,
    solenoidal_field,
    step,
)
from slabmhd.geometry import flat_metric
from slabmhd.spectral import (
    ConfigurationError,
    SlabGrid,
    SurfaceField,
    TorusGrid,
    VectorField,
    VolumeField,
    random_band_limited,
    volume_sobolev_norm,
)

K = 2 * np.pi


def grid(n=8, nz=17):
    return SlabGrid(TorusGrid(n, n), nz, nz)


def state(g, seed, amp=1e-2, eta_amp=0.0, mode="linearized"):
    rng = np.random.default_rng(seed)
    u = solenoidal_field(g, rng, amp, max_mode=1, power=3)
    b = solenoidal_field(g, rng, amp, max_mode=1, power=3)
    e = random_band_limited(g.torus, rng, max_mode=1)
    eta = SurfaceField.from_values(g.torus, eta_amp * (e - e.mean()) / np.max(np.abs(e)))
    return complete_state(VectorField.from_arrays(g, "lower", lower=u),
                          VectorField.from_arrays(g, "lower", lower=b), eta, Params(), mode=mode)


def eigen_state(g):
    """Mean-mode b = (cos(pi (x3 + 1) / 2), 0, 0): a resistive eigenmode with rate pi^2 / 4 (kappa = 1)."""
    z = g.z("lower")
    b = np.zeros((3,) + g.shape("lower"))
    b[0] = np.cos(np.pi * (z + 1) / 2)[None, None, :]
    return PlasmaState.equilibrium(g).replace(b=VectorField.from_arrays(g, "lower", lower=b))


class TestPhysicalEnergy:
    def test_equilibrium(self):
        rep = physical_energy(PlasmaState.equilibrium(grid()), Params())
        assert all(v == 0.0 for v in rep.as_dict().values())

    def test_kinetic_scaling(self):
        s = state(grid(), 0, eta_amp=1e-3, mode="nonlinear")
        a = physical_energy(s, Params())
        b = physical_energy(s.replace(u=s.u * 2.0), Params())
        assert b.kinetic == pytest.approx(4 * a.kinetic, rel=1e-14)
        for key in ("mag_plasma", "mag_vacuum", "surface", "dissipation"):
            assert getattr(b, key) == getattr(a, key)

    def test_total_is_sum(self):
        r = physical_energy(state(grid(), 1, eta_amp=1e-2, mode="nonlinear"), Params())
        assert r.total == r.kinetic + r.mag_plasma + r.mag_vacuum + r.surface

    def test_surface_against_quadrature(self):
        """eta = 0.1 cos(2 pi x1): sigma * int_0^1 (sqrt(1 + (0.2 pi sin(2 pi x))^2) - 1) dx."""
        g = grid(32)
        sigma = 1.0
        eta = SurfaceField.from_function(g.torus, lambda x1, x2: 0.1 * np.cos(K * x1) + 0 * x2)
        # u = b = 0, so the volume weight is irrelevant; a slope this large is outside the metric's range
        rep = physical_energy(PlasmaState.equilibrium(g).replace(eta=eta), Params(sigma=sigma), flat_metric(g))
        exact, _ = quad(lambda x: np.sqrt(1 + (0.1 * K * np.sin(K * x)) ** 2) - 1, 0, 1, epsabs=1e-14, epsrel=1e-13, limit=200)
        assert rep.surface == pytest.approx(sigma * exact, rel=1e-12)
        assert rep.kinetic == rep.mag_plasma == rep.mag_vacuum == rep.dissipation == 0.0

    def test_linearized_surface_quadratic(self):
        g = grid(16)
        eta = SurfaceField.from_function(g.torus, lambda x1, x2: 0.1 * np.cos(K * x1) + 0 * x2)
        rep = physical_energy(PlasmaState.equilibrium(g).replace(eta=eta), Params(sigma=2.0), linearized=True)
        # (sigma / 2) int |grad eta|^2 = (sigma / 2) (0.1 * 2 pi)^2 / 2
        assert rep.surface == pytest.approx(0.5 * 2.0 * (0.1 * K) ** 2 / 2, rel=1e-13)

    def test_eigenmode_values(self):
        g = grid(4, 17)
        rep = physical_energy(eigen_state(g), Params(kappa=0.5))
        # int_{-1}^0 cos^2 = 1/2, curl b = (0, -pi/2 sin, 0)
        assert rep.mag_plasma == pytest.approx(0.25, rel=1e-13)
        assert rep.dissipation == pytest.approx(0.5 * (np.pi / 2) ** 2 * 0.5, rel=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1e-2))
    def test_parts_nonnegative(self, seed, eta_amp):
        r = physical_energy(state(grid(), seed, amp=1.0, eta_amp=eta_amp, mode="nonlinear"), Params())
        assert min(r.kinetic, r.mag_plasma, r.mag_vacuum, r.surface, r.dissipation) >= 0.0
        assert r.total == pytest.approx(r.kinetic + r.mag_plasma + r.mag_vacuum + r.surface, rel=0, abs=0)


class TestEnergyLaw:
    def test_too_short(self):
        s = PlasmaState.equilibrium(grid())
        with pytest.raises(DiagnosticError, match="3 snapshots"):
            energy_law_residual([s, s.replace(t=1.0)], Params())

    def test_nonuniform(self):
        s = PlasmaState.equilibrium(grid())
        with pytest.raises(DiagnosticError, match="uniform"):
            energy_law_residual([s, s.replace(t=1.0), s.replace(t=3.0)], Params())

    def test_equilibrium_zero(self):
        s = PlasmaState.equilibrium(grid())
        tr = [s.replace(t=0.1 * i) for i in range(5)]
        r = energy_law_residual(tr, Params())
        assert r.max == 0.0 and r.residual.size == 3

    @pytest.mark.parametrize("dt", [1e-3, 2.5e-4])
    def test_pure_diffusion_closed_form(self, dt):
        """Crank-Nicolson on the eigenmode: E_n = E_0 r^(2n), D_n = 2 a E_n, r = (1 - a dt/2)/(1 + a dt/2).

        The normalised residual is then |(r^2 - r^-2) / (2 dt) + 2 a| / (2 a) at every sample.
        """
        g = grid(4, 17)
        params = Params()
        a = np.pi**2 / 4
        tr = [eigen_state(g)]
        zero = VectorField.zeros(g, "lower")
        for _ in range(20):
            s = tr[-1]
            b, bh = magnetic_substep(s, zero, dt, params, mode="linearized")
            tr.append(s.replace(b=b, b_hat=bh, t=s.t + dt))
        r = (1 - a * dt / 2) / (1 + a * dt / 2)
        expect = abs((r**2 - r**-2) / (2 * dt) + 2 * a) / (2 * a)
        law = energy_law_residual(tr, params, linearized=True)
        np.testing.assert_allclose(law.residual, expect, rtol=1e-4, atol=1e-11)
        if dt <= 2.5e-4:
            assert law.max <= 1e-6


class TestReducedFunctionals:
    def table(self, g, u=None, J=2):
        zl, zu = VectorField.zeros(g, "lower"), VectorField.zeros(g, "upper")
        us = u if u is not None else (zl,) * (J + 1)
        return DerivativeTable(
            u=tuple(us), b=(zl,) * (J + 1), b_hat=(zu,) * (J + 1),
            p=(VolumeField.zeros(g, "lower"),) * J, eta=(SurfaceField.zeros(g.torus),) * (J + 2), J=J,
        )

    def test_zero(self):
        r = reduced_functionals(self.table(grid()))
        assert r.energy == r.low_energy == r.dissipation == 0.0

    def test_single_field(self):
        """Only u nonzero: the energy reduces to sum_j ||d_t^j u||^2_(n - j)."""
        g = grid()
        rng = np.random.default_rng(3)
        us = tuple(VectorField.from_arrays(g, "lower", lower=solenoidal_field(g, rng, 1.0, max_mode=1, power=3))
                   for _ in range(3))
        n = 3
        r = reduced_functionals(self.table(g, us), n=n, j_max=2)
        direct = sum(volume_sobolev_norm(c, n - j) ** 2 for j in range(3) for c in us[j].components)
        assert r.energy == pytest.approx(direct, rel=1e-13)
        assert "d_t^3 u" in r.metadata["dropped"]
        assert "d_t^2 p" in r.metadata["missing"]

    def test_monotone_in_truncation(self):
        g = grid()
        s = state(g, 4)
        table = construct_initial_derivatives(s.u, s.b, s.eta, Params(), J=1, mode="linearized")
        lo = reduced_functionals(table, n=2, j_max=0)
        hi = reduced_functionals(table, n=2, j_max=1)
        assert lo.energy <= hi.energy
        assert lo.low_energy <= hi.low_energy
        assert lo.dissipation <= hi.dissipation
        assert np.isfinite(hi.metadata["F_over_D_next"])

    def test_insufficient_data(self):
        g = grid()
        with pytest.raises(DiagnosticError, match="insufficient derivative data"):
            reduced_functionals(self.table(g, J=1), j_max=2)

    def test_bad_order(self):
        with pytest.raises(ConfigurationError):
            reduced_functionals(self.table(grid()), n=4)


class TestPoincare:
    def field(self, g, fn):
        return VolumeField.from_function(g, "lower", lambda x1, x2, x3: fn(x3) + 0 * x1 + 0 * x2)

    def test_constant_equality(self):
        r = poincare_check(self.field(grid(), lambda z: 3.0 + 0 * z), (0, 0, 1))
        assert r.volume == pytest.approx(9.0, rel=1e-14)
        assert r.trace == pytest.approx(9.0, rel=1e-14)
        assert r.directional == pytest.approx(0.0, abs=1e-20)
        assert r.satisfied

    def test_linear_profile(self):
        """f = x3: ||f||^2 = 1/3, |f|^2 = 0, ||B . grad f||^2 / B3^2 = 1."""
        r = poincare_check(self.field(grid(), lambda z: z), (2.0, -1.0, 3.0))
        assert r.volume == pytest.approx(1 / 3, rel=1e-14)
        assert r.trace == pytest.approx(0.0, abs=1e-28)
        assert r.directional == pytest.approx(1.0, rel=1e-13)
        assert r.satisfied

    def test_literal_volume_form_counterexample(self):
        """f = x3 - 1: ||f||^2 = 7/3 exceeds 1 + 1; a factor 2 on the trace term repairs it."""
        f = self.field(grid(), lambda z: z - 1)
        r = poincare_check(f, (0, 0, 1))
        assert r.volume == pytest.approx(7 / 3, rel=1e-14)
        assert not r.volume_ok
        assert poincare_check(f, (0, 0, 1), constant=2.0).volume_ok

    def test_literal_trace_form_counterexample(self):
        """f = exp(x3): |f|^2 = 1 exceeds 2 (1 - e^-2) / 2."""
        r = poincare_check(self.field(grid(4, 25), np.exp), (0, 0, 1))
        assert r.trace_rhs == pytest.approx(1 - np.exp(-2), rel=1e-12)
        assert not r.trace_ok

    def test_transversal_required(self):
        with pytest.raises(ParameterError, match="transversal field required"):
            poincare_check(self.field(grid(), lambda z: z), (1, 1, 0))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([(0, 0, 1), (1, 1, 1), (2, 0, 3)]))
    def test_random_band_limited(self, seed, B):
        from slabmhd.cli import poincare_field

        r = poincare_check(poincare_field(grid(), np.random.default_rng(seed)), B)
        assert r.satisfied


class TestDecayFit:
    def test_exponential(self):
        t = np.linspace(0, 5, 50)
        fit = decay_fit(t, np.exp(-2 * t))
        assert fit.rate == pytest.approx(2.0, rel=1e-12)
        assert fit.quality >= 0.999
        assert fit.window == (0.0, 5.0)

    def test_algebraic(self):
        t = np.linspace(0, 10, 40)
        fit = decay_fit(t, (1 + t) ** -3.0, "algebraic")
        assert abs(fit.rate - 3.0) <= 1e-6

    def test_window(self):
        t = np.linspace(0, 10, 101)
        v = np.where(t < 5, np.exp(-t), np.exp(-5) * np.exp(-3 * (t - 5)))
        assert decay_fit(t, v, window=(5, 10)).rate == pytest.approx(3.0, rel=1e-10)

    def test_nonpositive(self):
        v = np.ones(12)
        v[4] = 0.0
        with pytest.raises(DiagnosticError, match="positive"):
            decay_fit(np.arange(12.0), v)

    def test_too_few(self):
        with pytest.raises(DiagnosticError, match="at least 10"):
            decay_fit(np.arange(5.0), np.ones(5))

    @given(st.lists(st.floats(1e-3, 1e3), min_size=10, max_size=30))
    def test_quality_in_unit_interval(self, vals):
        fit = decay_fit(np.arange(float(len(vals))), np.array(vals))
        assert 0.0 <= fit.quality <= 1.0


class TestConstraintReport:
    def test_equilibrium(self):
        rep = constraint_report(PlasmaState.equilibrium(grid()))
        assert all(v == 0.0 for v in rep.values())

    def test_after_step(self):
        g = grid(8, 33)
        s = step(state(g, 5, eta_amp=1e-3, mode="nonlinear"), Params(), 1e-2)
        rep = constraint_report(s)
        for key in ("div_u", "div_b", "u3_wall", "b3_wall", "jump_b", "bhat_tangential_top", "eta_mean"):
            assert rep[key] <= 1e-8, key

    def test_corrupted_b(self):
        """Adding the gradient of a bump breaks div b."""
        g = grid()
        s = state(g, 6)
        x1, _, z = np.broadcast_arrays(*g.coordinates("lower"))
        k = K
        P = (z * (1 + z)) ** 2
        dP = 2 * z * (1 + z) * (1 + 2 * z)
        grad = np.stack([-k * np.sin(k * x1) * P, 0 * z, np.cos(k * x1) * dP])
        bad = s.replace(b=VectorField.from_arrays(g, "lower", lower=s.b.data("lower") + grad))
        assert constraint_report(bad)["div_b"] > 1e-3
