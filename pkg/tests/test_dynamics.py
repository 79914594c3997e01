import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slabmhd.dynamics import (
    ParameterError,
    Params,
    PlasmaState,
    StepSizeError,
    complete_state,
    compute_nonlinear_terms,
    construct_initial_derivatives,
    euler_substep,
    magnetic_substep,
    pressure_solve,
    project_solenoidal,
    solenoidal_field,
    step,
    vorticity_damping_residual,
)
from slabmhd.diagnostics import constraint_report
from slabmhd.geometry import build_metric, flat_metric, surface_gradient
from slabmhd.hodge import CompatibilityError
from slabmhd.spectral import (
    ConfigurationError,
    SlabGrid,
    SurfaceField,
    TorusGrid,
    VectorField,
    random_band_limited,
)

K = 2 * np.pi


def grid(n=8, nz=17):
    return SlabGrid(TorusGrid(n, n), nz, nz)


def random_state(g, seed, amp=1e-2, eta_amp=0.0, mode="linearized", params=None, b_amp=None):
    rng = np.random.default_rng(seed)
    params = params or Params()
    # max_mode 1 keeps metric products clear of the Nyquist mode on 8^2 grids
    u = solenoidal_field(g, rng, amp, max_mode=1, power=3)
    b = solenoidal_field(g, rng, amp if b_amp is None else b_amp, max_mode=1, power=3)
    e = random_band_limited(g.torus, rng, max_mode=1)
    e = e - e.mean()
    eta = SurfaceField.from_values(g.torus, eta_amp * e / np.max(np.abs(e)))
    return complete_state(
        VectorField.from_arrays(g, "lower", lower=u),
        VectorField.from_arrays(g, "lower", lower=b),
        eta, params, mode=mode,
    )


def max_abs(v):
    return float(np.max(np.abs(v)))


class TestParams:
    def test_defaults(self):
        p = Params()
        assert p.B == (0.0, 0.0, 1.0)
        assert p.damping == 1.0

    @pytest.mark.parametrize("kw", [{"kappa": 0.0}, {"kappa": -1.0}, {"sigma": 0.0}])
    def test_positivity(self, kw):
        with pytest.raises(ParameterError, match="positivity"):
            Params(**kw)

    def test_transversal(self):
        with pytest.raises(ParameterError, match="transversal field required"):
            Params(B=(1.0, 0.0, 0.0))

    def test_damping_coefficient(self):
        assert Params(kappa=1.0, B=(0.0, 0.0, 2.0)).damping == 4.0

    @given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0).filter(lambda x: abs(x) > 1e-3))
    def test_damping_is_b3_squared_over_kappa(self, kappa, b3):
        assert Params(kappa=kappa, B=(0.3, -0.2, b3)).damping == b3**2 / kappa


class TestEquilibrium:
    @pytest.mark.parametrize("mode", ["linearized", "nonlinear"])
    def test_fixed_point(self, mode):
        g = grid()
        s = PlasmaState.equilibrium(g)
        out = step(s, Params(), 1e-2, mode=mode)
        for f in (out.u, out.b):
            assert max_abs(f.data("lower")) == 0.0
        assert max_abs(out.b_hat.data("upper")) == 0.0
        assert max_abs(out.eta.values) == 0.0
        assert out.t == pytest.approx(1e-2)

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            step(PlasmaState.equilibrium(grid()), Params(), 1e-2, mode="implicit")


class TestPressure:
    def test_linearized_closed_form(self):
        """Static interface eps cos(2 pi x1): p harmonic, Neumann at the wall, -sigma H on top."""
        g = grid(8, 25)
        eps, sigma = 1e-2, 1.5
        params = Params(sigma=sigma)
        eta = SurfaceField.from_function(g.torus, lambda x1, x2: eps * np.cos(K * x1) + 0 * x2)
        s = PlasmaState.equilibrium(g).replace(eta=eta)
        p = pressure_solve(s, params, mode="linearized").physical().data("lower")
        x1, _, z = np.broadcast_arrays(*g.coordinates("lower"))
        exact = sigma * K**2 * eps * np.cos(K * x1) * np.cosh(K * (z + 1)) / np.cosh(K)
        assert max_abs(p - exact) <= 1e-10 * max_abs(exact)


class TestNonlinearTerms:
    def test_constraint_defects_vanish_when_flat(self):
        s = random_state(grid(), 1, mode="nonlinear")
        G = compute_nonlinear_terms(s, Params())
        assert max_abs(G.G2.data("lower")) == 0.0
        assert max_abs(G.G4.data("lower")) == 0.0
        assert max_abs(G.Ghat3.data("upper")) == 0.0
        assert max_abs(G.G6.values) == 0.0

    def test_quadratic_when_flat(self):
        """With eta = 0 the remainders are pure products, so they scale by lambda^2."""
        g = grid()
        s = random_state(g, 2, mode="nonlinear")
        lam = 3.0
        s2 = s.replace(u=s.u * lam, b=s.b * lam, p=s.p * lam)
        G, G2 = compute_nonlinear_terms(s, Params()), compute_nonlinear_terms(s2, Params())
        a, b = G.G1.data("lower"), G2.G1.data("lower")
        assert max_abs(b - lam**2 * a) <= 1e-12 * max_abs(b)
        a, b = G.G3.data("lower"), G2.G3.data("lower")
        assert max_abs(b - lam**2 * a) <= 1e-12 * max_abs(b)

    def test_g2_direct(self):
        """G2 equals div u - div^phi u computed with the metric directly."""
        g = grid()
        s = random_state(g, 3, eta_amp=1e-2, mode="nonlinear")
        m = build_metric(s.eta, grid=g)
        u = s.u.data("lower")
        expect = flat_metric(g).div(u, "lower") - m.div(u, "lower")
        G = compute_nonlinear_terms(s, Params(), m)
        assert max_abs(G.G2.data("lower") - expect) <= 1e-12 * max(max_abs(expect), 1e-300)


class TestEulerSubstep:
    def test_mean_and_divergence(self):
        g = grid()
        s = random_state(g, 4, eta_amp=1e-3, mode="nonlinear")
        F = VectorField.zeros(g, "lower")
        u, eta, p = euler_substep(s, F, 1e-2, Params())
        assert abs(eta.mean() - s.eta.mean()) <= 1e-15
        m = build_metric(eta, grid=g)
        assert max_abs(m.div(u.data("lower"), "lower")) <= 1e-8
        assert max_abs(u.data("lower")[2][..., 0]) <= 1e-12

    def test_cfl_violation(self):
        g = grid()
        s = random_state(g, 5, amp=10.0)
        with pytest.raises(StepSizeError, match="CFL"):
            euler_substep(s, VectorField.zeros(g, "lower"), 1.0, Params())


class TestMagneticSubstep:
    def test_mean_mode_decay(self):
        """b = (cos(pi (x3 + 1) / 2), 0, 0) is a diffusion eigenmode with rate kappa pi^2 / 4.

        Wall: d3 b_h = 0; interface: b_h = 0 (the mean vacuum field is zero).
        Crank-Nicolson multiplies it by (1 - a dt / 2) / (1 + a dt / 2).
        """
        g = grid(4, 25)
        kappa, dt = 0.7, 1e-2
        params = Params(kappa=kappa)
        z = g.z("lower")
        prof = np.cos(np.pi * (z + 1) / 2)
        b = np.zeros((3,) + g.shape("lower"))
        b[0] = prof[None, None, :]
        s = PlasmaState.equilibrium(g).replace(b=VectorField.from_arrays(g, "lower", lower=b))
        bn, bh = magnetic_substep(s, VectorField.zeros(g, "lower"), dt, params, mode="linearized")
        a = kappa * np.pi**2 / 4
        factor = (1 - a * dt / 2) / (1 + a * dt / 2)
        assert max_abs(bn.data("lower") - factor * b) <= 1e-10
        assert max_abs(bh.data("upper")) <= 1e-12

    def test_interface_match_and_wall(self):
        g = grid()
        s = random_state(g, 6)
        bn, bh = magnetic_substep(s, VectorField.zeros(g, "lower"), 1e-2, Params(), mode="linearized")
        b, h = bn.data("lower"), bh.data("upper")
        assert max_abs(h[..., 0] - b[..., -1]) <= 1e-10 * max_abs(b)
        assert max_abs(b[2][..., 0]) <= 1e-12


class TestStep:
    def test_constraints_after_step(self):
        g = grid()
        s = random_state(g, 7, eta_amp=1e-3, mode="nonlinear")
        out = step(s, Params(), 1e-2, mode="nonlinear")
        rep = constraint_report(out)
        for key in ("div_u", "div_b", "u3_wall", "b3_wall", "jump_b", "bhat_tangential_top"):
            assert rep[key] <= 1e-8, key

    def test_sweep_report_contracts(self):
        g = grid()
        s = random_state(g, 8, amp=1e-3, eta_amp=1e-3, mode="nonlinear")
        rep = {}
        step(s, Params(), 1e-2, mode="nonlinear", sweeps=4, report=rep)
        assert rep["sweeps"] == 4
        assert rep["contraction"] < 0.5
        d = rep["sweep_diffs"]
        assert d[-1] < d[0]

    def test_more_sweeps_converge(self):
        g = grid()
        s = random_state(g, 9, amp=1e-3, eta_amp=1e-3, mode="nonlinear")
        a = step(s, Params(), 1e-2, mode="nonlinear", sweeps=6).u.data("lower")
        b = step(s, Params(), 1e-2, mode="nonlinear", sweeps=7).u.data("lower")
        assert max_abs(a - b) <= 1e-9 * max_abs(a)

    def test_bad_sweeps(self):
        with pytest.raises(ConfigurationError):
            step(PlasmaState.equilibrium(grid()), Params(), 1e-2, sweeps=0)

    def test_time_advances(self):
        s = step(PlasmaState.equilibrium(grid()), Params(), 0.25, mode="linearized")
        assert s.t == 0.25


class TestProjection:
    def test_curved_solenoidal(self):
        g = grid(16, 25)
        rng = np.random.default_rng(10)
        u = solenoidal_field(g, rng, 1.0, max_mode=1, power=3)
        e = random_band_limited(g.torus, rng, max_mode=1)
        eta = SurfaceField.from_values(g.torus, 1e-2 * (e - e.mean()) / np.max(np.abs(e)))
        m = build_metric(eta, grid=g)
        assert max_abs(m.div(u, "lower")) > 1e-6
        v = project_solenoidal(u, m, Params())
        assert max_abs(m.div(v, "lower")) <= 1e-10
        assert max_abs(v[2][..., 0]) <= 1e-14
        assert max_abs(v - u) <= 0.1 * max_abs(u)

    def test_flat_metric_is_identity(self):
        g = grid()
        u = solenoidal_field(g, np.random.default_rng(0), 1.0, power=3)
        assert np.array_equal(project_solenoidal(u, flat_metric(g), Params()), u)

    def test_complete_state_projects(self):
        g = grid(16, 25)
        s = random_state(g, 11, amp=1.0, eta_amp=1e-2, mode="nonlinear")
        rep = constraint_report(s)
        assert rep["div_u"] <= 1e-10 and rep["div_b"] <= 1e-10


class TestInitialDerivatives:
    def test_linear_first_layer_matches_step(self):
        """d_t u at t = 0 agrees with a tiny time step to O(dt).

        b is not compared: the random data break the first-order interface
        compatibility, so the stepper's d_t b has a layer at x3 = 0.
        """
        g = grid()
        params = Params()
        s = random_state(g, 12, amp=1e-2)
        table = construct_initial_derivatives(s.u, s.b, s.eta, params, J=1, mode="linearized")
        dt = 1e-6
        s1 = step(s, params, dt, mode="linearized", sweeps=3)
        fd = (s1.u.data("lower") - s.u.data("lower")) / dt
        exact = table.u[1].data("lower")
        assert max_abs(fd - exact) <= 1e-3 * max_abs(exact)

    def test_linear_eta_layers(self):
        """Linearized kinematics: d_t^j eta = d_t^(j-1) u3 on the interface."""
        g = grid()
        s = random_state(g, 13, amp=1e-2)
        table = construct_initial_derivatives(s.u, s.b, s.eta, Params(), J=1, mode="linearized")
        assert len(table.u) == 2 and len(table.p) == 1 and len(table.eta) == 3
        for j in (1, 2):
            top = table.u[j - 1].data("lower")[2][..., -1]
            assert max_abs(table.eta[j].values - top) <= 1e-14 * max(max_abs(top), 1e-300)

    def test_eta_rate_is_normal_velocity(self):
        g = grid(16)
        s = random_state(g, 14, eta_amp=1e-4, mode="nonlinear")
        table = construct_initial_derivatives(s.u, s.b, s.eta, Params(), J=1)
        u = s.u.data("lower")[..., -1]
        g1, g2 = surface_gradient(s.eta)
        assert max_abs(table.eta[1].values - (u[2] - u[0] * g1 - u[1] * g2)) <= 1e-15

    def test_wall_violation(self):
        g = grid()
        x1, x2, z = np.broadcast_arrays(*g.coordinates("lower"))
        u = np.stack([0 * z, 0 * z, 1.0 + 0 * z])  # constant vertical flow through the wall
        uf = VectorField.from_arrays(g, "lower", lower=u)
        with pytest.raises(CompatibilityError, match="bottom wall"):
            construct_initial_derivatives(uf, VectorField.zeros(g, "lower"), SurfaceField.zeros(g.torus), Params())

    def test_order_limit(self):
        g = grid()
        s = PlasmaState.equilibrium(g)
        with pytest.raises(ConfigurationError):
            construct_initial_derivatives(s.u, s.b, s.eta, Params(), J=3)


class TestVorticity:
    def test_identity_residual(self):
        g = grid(8, 17)
        params = Params(kappa=1.0, B=(0.5, -0.3, 2.0))
        s = random_state(g, 15, amp=0.1, mode="nonlinear", params=params)
        table = construct_initial_derivatives(s.u, s.b, s.eta, params, J=1)
        r = vorticity_damping_residual(s, params, table.u[1], table.b[1])
        assert r.max_abs <= 1e-8
        assert r.coefficient == 4.0

    def test_wrong_derivative_detected(self):
        g = grid(8, 17)
        params = Params()
        s = random_state(g, 16, amp=0.1, mode="nonlinear")
        table = construct_initial_derivatives(s.u, s.b, s.eta, params, J=1)
        r = vorticity_damping_residual(s, params, table.u[1] * 1.1, table.b[1])
        assert r.max_abs > 1e-4


class TestProperties:
    @settings(max_examples=8, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-3.0, 3.0).filter(lambda a: abs(a) > 1e-2))
    def test_linearized_step_is_linear(self, seed, a):
        g = grid(8, 9)
        params = Params()
        s = random_state(g, seed)
        sa = s.replace(u=s.u * a, b=s.b * a, b_hat=s.b_hat * a, p=s.p * a, eta=s.eta * a)
        x = step(s, params, 1e-2, mode="linearized").u.data("lower")
        y = step(sa, params, 1e-2, mode="linearized").u.data("lower")
        assert max_abs(y - a * x) <= 1e-12 * max_abs(y)

    @settings(max_examples=6, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_interface_mean_held(self, seed):
        g = grid(8, 9)
        s = random_state(g, seed, eta_amp=1e-3, mode="nonlinear")
        out = step(s, Params(), 1e-2, mode="nonlinear")
        assert abs(out.eta.mean() - s.eta.mean()) <= 1e-16
