"""Time integration of the perturbed plasma-vacuum interface system.

State variables live on the flattened slab: velocity, plasma magnetic field
and pressure on the lower half, vacuum field on the upper half, interface
height on the torus.

Time stepping is a trapezoidal (Crank-Nicolson) rule closed by Picard
sweeps. The stiff or constraint-carrying parts are implicit and flat:
the vector Laplacian in the induction equation (with the bottom wall and
vacuum matching rows), the pressure projection, and the capillary coupling
between the pressure and the interface height. Everything else (the
Lorentz force, induction source, transport, metric corrections) is averaged
between the old level and the current iterate. Each Fourier mode is a small
dense problem in x3.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Metric, build_metric, flat_metric, mean_curvature, surface_gradient
from .hodge import (
    COMPAT_TOL,
    CompatibilityError,
    ModeStack,
    recover_vacuum_field,
    scalar_system,
    solve_scalar,
)
from .spectral import (
    ConfigurationError,
    SlabGrid,
    SurfaceField,
    VectorField,
    VolumeField,
    dealias,
    dz,
    gradient,
    hfft,
    ihfft,
    random_band_limited,
)

MODES = ("linearized", "nonlinear")
SETTLE_TOL = 1e-13  # relative stop for the constraint fixed points inside a sweep


class ParameterError(ValueError):
    """Physical parameters outside the admissible range."""


class StepSizeError(ValueError):
    """The requested time step violates the transport CFL limit."""


class SweepError(RuntimeError):
    """Picard sweeps failed to contract."""


@dataclass(frozen=True)
class Params:
    """Magnetic diffusivity, surface tension and the constant background field."""

    kappa: float = 1.0
    sigma: float = 1.0
    B: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self) -> None:
        B = tuple(float(x) for x in self.B)
        if len(B) != 3:
            raise ParameterError("background field needs three components")
        object.__setattr__(self, "B", B)
        if not self.kappa > 0:
            raise ParameterError(f"positivity assumption violated: kappa = {self.kappa} must be > 0")
        if not self.sigma > 0:
            raise ParameterError(f"positivity assumption violated: sigma = {self.sigma} must be > 0")
        if B[2] == 0.0:
            raise ParameterError("transversal field required: B3 must be nonzero")

    @property
    def Bvec(self) -> np.ndarray:
        return np.array(self.B)

    @property
    def damping(self) -> float:
        """Vorticity damping coefficient B3^2 / kappa."""
        return self.B[2] ** 2 / self.kappa


def _vec(grid: SlabGrid, region: str, a: np.ndarray) -> VectorField:
    return VectorField(tuple(VolumeField(grid, region, **{region: np.asarray(a[i], float)}) for i in range(3)))


def _vol(grid: SlabGrid, region: str, a: np.ndarray) -> VolumeField:
    return VolumeField(grid, region, **{region: np.asarray(a, float)})


@dataclass(frozen=True, eq=False)
class PlasmaState:
    """Immutable snapshot (u, p, b on the lower half, b_hat above, eta on the torus).

    ``memory`` carries the previous level of a run (used by the predictor);
    it plays no role in the physics of the snapshot.
    """

    u: VectorField
    b: VectorField
    b_hat: VectorField
    eta: SurfaceField
    p: VolumeField
    t: float = 0.0
    memory: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        for name in ("u", "b", "p"):
            if getattr(self, name).region != "lower":
                raise ConfigurationError(f"{name} lives on the lower half")
        if self.b_hat.region != "upper":
            raise ConfigurationError("b_hat lives on the upper half")
        if self.eta.grid != self.u.grid.torus:
            raise ConfigurationError("eta lives on a different torus")

    @property
    def grid(self) -> SlabGrid:
        return self.u.grid

    @classmethod
    def equilibrium(cls, grid: SlabGrid) -> "PlasmaState":
        return cls(
            VectorField.zeros(grid, "lower"),
            VectorField.zeros(grid, "lower"),
            VectorField.zeros(grid, "upper"),
            SurfaceField.zeros(grid.torus),
            VolumeField.zeros(grid, "lower"),
        )

    def replace(self, **changes) -> "PlasmaState":
        return dataclasses.replace(self, **changes)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.u.data("lower"), self.b.data("lower"), self.p.physical().data("lower")


# ---------------------------------------------------------------------------
# pointwise helpers


def _cross(a, b) -> np.ndarray:
    return np.stack([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])


def _cross_const(a: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.stack([
        a[1] * B[2] - a[2] * B[1],
        a[2] * B[0] - a[0] * B[2],
        a[0] * B[1] - a[1] * B[0],
    ])


def _flat_curl(v: np.ndarray, grid: SlabGrid, half: str) -> np.ndarray:
    g = np.stack([gradient(v[i], grid, half) for i in range(3)])  # g[i, k] = d_k v_i
    return np.stack([g[2, 1] - g[1, 2], g[0, 2] - g[2, 0], g[1, 0] - g[0, 1]])


def _flat_div(v: np.ndarray, grid: SlabGrid, half: str) -> np.ndarray:
    return sum(gradient(v[i], grid, half)[i] for i in range(3))


def kinematic_rate(u: np.ndarray, eta: SurfaceField) -> np.ndarray:
    """u . N on the interface, N = (-d1 eta, -d2 eta, 1)."""
    e1, e2 = surface_gradient(eta)
    top = u[..., -1]
    return top[2] - e1 * top[0] - e2 * top[1]


def state_metric(u: np.ndarray, eta: SurfaceField, grid: SlabGrid) -> Metric:
    """Metric of eta with d_t eta taken from the kinematic law."""
    dt_eta = SurfaceField.from_values(grid.torus, kinematic_rate(u, eta))
    return build_metric(eta, dt_eta, grid=grid)


def cfl_number(u: np.ndarray, grid: SlabGrid, dt: float) -> float:
    t = grid.torus
    z = grid.z("lower")
    hz = float(np.min(np.diff(z)))
    return dt * (np.max(np.abs(u[0])) * t.n1 + np.max(np.abs(u[1])) * t.n2 + np.max(np.abs(u[2])) / hz)


# ---------------------------------------------------------------------------
# nonlinear remainders


@dataclass(frozen=True)
class NonlinearBundle:
    """The remainders moving the full system onto the linearized one.

    G1, G3 (vector) and G2, G4 (scalar) on the lower half; Ghat3, Ghat4 on
    the upper half; G5, G6 on the interface; G7 (vector) on the bottom wall.
    """

    G1: VectorField
    G2: VolumeField
    G3: VectorField
    G4: VolumeField
    Ghat3: VectorField
    Ghat4: VolumeField
    G5: SurfaceField
    G6: SurfaceField
    G7: tuple

    def sizes(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, VectorField):
                out[f.name] = max(float(np.max(np.abs(v.data(v.region)))), 0.0)
            elif isinstance(v, VolumeField):
                out[f.name] = float(np.max(np.abs(v.physical().data(v.region))))
            elif isinstance(v, SurfaceField):
                out[f.name] = float(np.max(np.abs(v.values)))
            else:
                out[f.name] = float(max(np.max(np.abs(c)) for c in v))
        return out


def _g1_parts(u, b, p, m: Metric, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """G1 without and with only its pressure term."""
    h = "lower"
    g = m.gbar[h]
    J = m.jacobian(u, h)
    adv = np.einsum("k...,ik...->i...", u, J)
    d3u = m.d3(u, h)
    d3b = m.d3(b, h)
    part = -adv - _cross_const(_cross(g, d3b), B) + _cross(m.curl(b, h), b)
    if m.dtebar is not None:
        part = part + m.dtebar[h] * d3u
    return part, g * m.d3(p, h)


def _g2(u, m: Metric) -> np.ndarray:
    return np.einsum("i...,i...->...", m.gbar["lower"], m.d3(u, "lower"))


def _g3(u, b, m: Metric, params: Params) -> np.ndarray:
    h = "lower"
    grid = m.grid
    cb = m.curl(b, h)
    curved = m.curl(cb, h) - _flat_curl(_flat_curl(b, grid, h), grid, h)
    uB = _cross_const(u, params.Bvec)
    out = -params.kappa * curved + (m.curl(uB, h) - _flat_curl(uB, grid, h)) + m.curl(_cross(u, b), h)
    if m.dtebar is not None:
        out = out + m.dtebar[h] * m.d3(b, h)
    return out


def _g5(u, eta: SurfaceField) -> np.ndarray:
    e1, e2 = surface_gradient(eta)
    return -(u[0][..., -1] * e1 + u[1][..., -1] * e2)


def _g6(eta: SurfaceField, sigma: float) -> SurfaceField:
    """-sigma div_h(((1 + |grad eta|^2)^(-1/2) - 1) grad eta) = -sigma (H - Delta eta)."""
    return (mean_curvature(eta, "full") - mean_curvature(eta, "linearized")) * (-sigma)


def _curl_defect_bottom(b, m: Metric) -> np.ndarray:
    """(curl b - curl^phi b) at the bottom wall."""
    h = "lower"
    return (_flat_curl(b, m.grid, h) - m.curl(b, h))[..., 0]


def compute_nonlinear_terms(state: PlasmaState, params: Params, metric: Optional[Metric] = None, *,
                            dealiased: bool = True) -> NonlinearBundle:
    """Assemble G1..G7 for a snapshot.

    The evolution remainders (G1, G3, G5) have their products dealiased
    when ``dealiased``; the constraint remainders (G2, G4, Ghat3, Ghat4, G7)
    are evaluated as is. G6 uses the dealiased curvature.
    """
    grid = state.grid
    u, b, p = state.arrays()
    m = metric if metric is not None else state_metric(u, state.eta, grid)
    B = params.Bvec
    t = grid.torus
    da = (lambda a: dealias(a, t)) if dealiased else (lambda a: a)
    g1a, g1p = _g1_parts(u, b, p, m, B)
    g3 = _g3(u, b, m, params)
    bh = state.b_hat.data("upper")
    gu = m.gbar["upper"]
    d3bh = m.d3(bh, "upper")
    g7 = params.kappa * _cross_const(_curl_defect_bottom(b, m), np.array([0.0, 0.0, 1.0]))
    return NonlinearBundle(
        G1=_vec(grid, "lower", da(g1a + g1p)),
        G2=_vol(grid, "lower", _g2(u, m)),
        G3=_vec(grid, "lower", da(g3)),
        G4=_vol(grid, "lower", _g2(b, m)),
        Ghat3=_vec(grid, "upper", _cross(gu, d3bh)),
        Ghat4=_vol(grid, "upper", np.einsum("i...,i...->...", gu, d3bh)),
        G5=SurfaceField.from_values(t, da(_g5(u, state.eta))),
        G6=_g6(state.eta, params.sigma),
        G7=tuple(SurfaceField.from_values(t, c) for c in g7),
    )


def electric_field(state: PlasmaState, params: Params, metric: Optional[Metric] = None) -> VectorField:
    """E = u x (B + b) - kappa curl^phi b on the lower half."""
    grid = state.grid
    u, b, _ = state.arrays()
    m = metric if metric is not None else state_metric(u, state.eta, grid)
    E = _cross(u, params.Bvec[:, None, None, None] + b) - params.kappa * m.curl(b, "lower")
    return _vec(grid, "lower", E)


# ---------------------------------------------------------------------------
# pressure


def _pressure_sources(u, b, m: Metric, params: Params, linearized: bool):
    h = "lower"
    B = params.Bvec[:, None, None, None]
    if linearized:
        grid = m.grid
        F = _cross(_flat_curl(b, grid, h), B)
        return _flat_div(F, grid, h), F[2][..., 0]
    J = m.jacobian(u, h)
    F = _cross(m.curl(b, h), B + b)
    rhs = -np.einsum("ik...,ki...->...", J, J) + m.div(F, h)
    return rhs, F[2][..., 0]


def pressure_solve(state: PlasmaState, params: Params, metric: Optional[Metric] = None, *,
                   mode: str = "nonlinear") -> VolumeField:
    """Pressure from the elliptic problem implied by the momentum equation.

    Delta^phi p = -grad^phi u : (grad^phi u)^T + div^phi(curl^phi b x (B + b)),
    p = -sigma H on the interface, d3 p = (curl^phi b x (B + b)) . e3 on the
    bottom wall. ``mode="linearized"`` drops quadratic terms, uses the flat
    operators and the linearized curvature.
    """
    _check_mode(mode)
    grid = state.grid
    u, b, _ = state.arrays()
    lin = mode == "linearized"
    m = flat_metric(grid) if lin else (metric if metric is not None else state_metric(u, state.eta, grid))
    rhs, neumann = _pressure_sources(u, b, m, params, lin)
    H = mean_curvature(state.eta, "linearized" if lin else "full")
    p = solve_scalar(grid, "lower", {"lower": rhs}, ("neumann", neumann), ("dirichlet", -params.sigma * H.values), m)
    return _vol(grid, "lower", p["lower"])


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")


# ---------------------------------------------------------------------------
# per-mode flat core


class _Core:
    """Flat per-mode operators on the lower half for one (grid, kappa, sigma, dt).

    Hat arrays: vectors (3, M, nz), scalars (M, nz), interface values (M,),
    over the M active horizontal modes.
    """

    def __init__(self, grid: SlabGrid, kappa: float, sigma: float, dt: float):
        self.grid, self.kappa, self.sigma, self.dt = grid, kappa, sigma, dt
        self.st = st = ModeStack(grid, ("lower",))
        self.up = ModeStack(grid, ("upper",))
        M, N = st.M, st.N
        D = grid.D("lower")
        self.D, self.D2 = D, D @ D
        self.i1 = 1j * st.k1[:, None]
        self.i2 = 1j * st.k2[:, None]
        self.ksq = st.ksq
        self.zero = np.flatnonzero(st.ksq == 0)
        self.w = grid.weights("lower")
        self.wu = grid.weights("upper")

        zM = np.zeros(M, dtype=complex)
        self.pois = scalar_system(grid, "lower", "neumann", "dirichlet")
        self.P = self.pois.solve_coeffs(np.zeros((M, N)), zM, np.ones(M))
        self.dP0 = (self.P @ D.T)[:, -1]
        vac = scalar_system(grid, "upper", "neumann", "dirichlet")
        self.Phi = vac.solve_coeffs(np.zeros((M, grid.nz("upper"))), np.ones(M), zM)
        self.dPhi = self.Phi @ grid.D("upper").T
        self.phi0 = self.Phi[:, 0]

        I = np.eye(N)
        H = I / dt - 0.5 * kappa * (self.D2[None] - self.ksq[:, None, None] * I)
        # b3: wall Dirichlet, interface Robin row from the k-component of the vacuum match
        A3 = H.astype(complex).copy()
        A3[:, 0, :] = 0.0
        A3[:, 0, 0] = 1.0
        A3[:, N - 1, :] = -D[N - 1]
        A3[:, N - 1, N - 1] += self.ksq * self.phi0
        self.A3inv = np.linalg.inv(A3)
        # j3 = (curl b)_3: wall Neumann (k-component of the tangential curl), interface Dirichlet
        Aj = H.astype(complex).copy()
        Aj[:, 0, :] = -kappa * D[0]
        Aj[:, N - 1, :] = 0.0
        Aj[:, N - 1, N - 1] = 1.0
        self.Ajinv = np.linalg.inv(Aj)
        # mean mode of b_h: wall Neumann, interface Dirichlet
        H0 = I / dt - 0.5 * kappa * self.D2
        H0[0] = kappa * D[0]
        H0[N - 1] = 0.0
        H0[N - 1, N - 1] = 1.0
        self.H0inv = np.linalg.inv(H0)
        Dint = D.copy()
        Dint[0] = 0.0
        Dint[0, 0] = 1.0
        self.Dint_inv = np.linalg.inv(Dint)

    # packing --------------------------------------------------------------
    def pack(self, a: np.ndarray) -> np.ndarray:
        return hfft(a)[..., self.st.active, :]

    def unpack(self, c: np.ndarray) -> np.ndarray:
        return self.st.unpack(c)["lower"]

    def pack_s(self, v: np.ndarray) -> np.ndarray:
        return self.st.pack_surface(v)

    def unpack_s(self, c: np.ndarray) -> SurfaceField:
        t = self.grid.torus
        full = np.zeros(t.shape, dtype=complex)
        full[self.st.active] = c
        return SurfaceField(t, full)

    # flat operators ---------------------------------------------------------
    def ddz(self, a: np.ndarray) -> np.ndarray:
        return a @ self.D.T

    def curl(self, V: np.ndarray) -> np.ndarray:
        DV = self.ddz(V)
        return np.stack([
            self.i2 * V[2] - DV[1],
            DV[0] - self.i1 * V[2],
            self.i1 * V[1] - self.i2 * V[0],
        ])

    def div(self, V: np.ndarray) -> np.ndarray:
        return self.i1 * V[0] + self.i2 * V[1] + self.ddz(V[2])

    def grad(self, q: np.ndarray) -> np.ndarray:
        return np.stack([self.i1 * q, self.i2 * q, self.ddz(q)])

    def lap(self, V: np.ndarray) -> np.ndarray:
        return V @ self.D2.T - self.ksq[:, None] * V

    # solves -----------------------------------------------------------------
    def clean(self, U: np.ndarray, g2: np.ndarray) -> np.ndarray:
        """Rebuild u_h from (curl u)_3 and u3 so that div u = g2 exactly."""
        U = U.copy()
        nz = self.ksq > 0
        k2 = self.ksq[nz, None]
        i1, i2 = self.i1[nz], self.i2[nz]
        w3 = i1 * U[1][nz] - i2 * U[0][nz]
        psi = w3 / k2
        chi = (self.ddz(U[2])[nz] - g2[nz]) / k2
        U[0][nz] = i2 * psi + i1 * chi
        U[1][nz] = -i1 * psi + i2 * chi
        for z in self.zero:
            r = g2[z].copy()
            r[0] = 0.0
            U[2][z] = self.Dint_inv @ r
        return U

    def euler(self, Un, Hn, Abar, Kbar, P6bar, g2):
        """Projection with implicit capillary coupling; returns (U, H, q)."""
        dt, s_ = self.dt, self.sigma
        us = Un + dt * Abar
        r = (self.div(us) - g2) / dt
        zM = np.zeros(self.st.M, dtype=complex)
        qA = self.pois.solve_coeffs(r, us[2][:, 0] / dt, zM)
        a = us[2][:, -1] - dt * self.ddz(qA)[:, -1]
        s = dt * dt * s_ * self.ksq * self.dP0 / 4.0
        H = (Hn * (1 - s) + 0.5 * dt * (Un[2][:, -1] + a) + dt * Kbar - 0.5 * dt * dt * self.dP0 * P6bar) / (1 + s)
        H[self.zero] = Hn[self.zero]
        qtop = s_ * self.ksq * 0.5 * (H + Hn) + P6bar
        q = qA + qtop[:, None] * self.P
        U = us - dt * self.grad(q)
        return self.clean(U, g2), H, q

    def magnetic(self, Bn, Sbar, cb, rtop, tgt):
        """Crank-Nicolson step of d_t b - kappa Delta b = Sbar.

        b3 and j3 = (curl b)_3 are advanced as scalars; b_h is rebuilt from
        them so that div b = tgt at every node. Wall data cb are the targets
        for kappa (curl b)_h, interface data rtop the defect in
        b_h - i k phi0 b3 (zero for the flat vacuum).
        """
        i1, i2 = 1j * self.st.k1, 1j * self.st.k2
        kap, dt = self.kappa, self.dt
        z = self.zero
        b3n = Bn[2]
        j3n = i1[:, None] * Bn[1] - i2[:, None] * Bn[0]
        r3 = b3n / dt + 0.5 * kap * self.lap(b3n) + Sbar[2]
        r3[:, 0] = 0.0
        r3[:, -1] = i1 * rtop[0] + i2 * rtop[1] - tgt[:, -1]
        rj = j3n / dt + 0.5 * kap * self.lap(j3n) + i1[:, None] * Sbar[1] - i2[:, None] * Sbar[0]
        rj[:, 0] = i1 * cb[0] + i2 * cb[1]
        rj[:, -1] = i1 * rtop[1] - i2 * rtop[0]
        b3 = np.einsum("mij,mj->mi", self.A3inv, r3)
        j3 = np.einsum("mij,mj->mi", self.Ajinv, rj)
        B = np.empty_like(Bn)
        nz = self.ksq > 0
        k2 = self.ksq[nz, None]
        psi = j3[nz] / k2
        chi = (self.ddz(b3)[nz] - tgt[nz]) / k2
        B[0][nz] = self.i2[nz] * psi + self.i1[nz] * chi
        B[1][nz] = -self.i1[nz] * psi + self.i2[nz] * chi
        B[2] = b3
        for m in z:
            r = tgt[m].copy()
            r[0] = 0.0
            B[2][m] = self.Dint_inv @ r
            for c, data in ((0, cb[1][m]), (1, -cb[0][m])):
                rr = Bn[c][m] / dt + 0.5 * kap * (self.D2 @ Bn[c][m]) + Sbar[c][m]
                rr[0] = data
                rr[-1] = rtop[c][m]
                B[c][m] = self.H0inv @ rr
        return B

    def vacuum(self, B: np.ndarray) -> np.ndarray:
        """Flat vacuum field (hat, upper half) matching b3 on the interface."""
        b3 = B[2][:, -1][:, None]
        i1, i2 = 1j * self.up.k1[:, None], 1j * self.up.k2[:, None]
        return np.stack([i1 * self.Phi * b3, i2 * self.Phi * b3, self.dPhi * b3])

    def norm2(self, V: np.ndarray, upper: bool = False) -> float:
        w = self.wu if upper else self.w
        return float(np.sum((np.abs(V) ** 2) @ w))


_CORES: dict = {}


def _core(grid: SlabGrid, params: Params, dt: float) -> _Core:
    key = (grid, params.kappa, params.sigma, float(dt))
    if key not in _CORES:
        if len(_CORES) > 16:
            _CORES.clear()
        _CORES[key] = _Core(grid, params.kappa, params.sigma, dt)
    return _CORES[key]


# ---------------------------------------------------------------------------
# force models


@dataclass
class _Level:
    U: np.ndarray
    B: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    cache: dict = field(default_factory=dict)


class _Linear:
    """Flat linearized forcing, all in hat space."""

    def __init__(self, core: _Core, params: Params):
        self.c, self.params = core, params
        self.B = params.Bvec

    def euler_force(self, lev: _Level, lorentz: bool = True, F=None):
        c = self.c
        A = self.lorentz(lev) if lorentz else np.zeros_like(lev.U)
        if F is not None:
            A = A + F
        z = np.zeros(c.st.M, dtype=complex)
        return A, z, z, np.zeros_like(lev.Q)

    def lorentz(self, lev: _Level) -> np.ndarray:
        return _cross_const(self.c.curl(lev.B), self.B)

    def pressure_force(self, lev: _Level, Q: np.ndarray):
        return 0.0

    def magnetic_force(self, lev: _Level, G=None):
        c, kap = self.c, self.params.kappa
        G = _cross_const(lev.U, self.B) if G is None else G
        S = c.curl(G) - kap * (c.curl(c.curl(lev.B)) + c.lap(lev.B))
        z = np.zeros(c.st.M, dtype=complex)
        return S, (G[0][:, 0], G[1][:, 0]), (z, z), np.zeros_like(lev.Q)

    def vacuum(self, lev: _Level) -> np.ndarray:
        return self.c.up.unpack(self.c.vacuum(lev.B))["upper"]

    def settle_u(self, lev: _Level, g2: np.ndarray) -> None:
        """Re-clean lev.U against its own metric defect (no-op when flat)."""

    def settle_b(self, lev: _Level, Bn, Sbar, cb, rtop, tgt) -> np.ndarray:
        return lev.B


class _Nonlinear(_Linear):
    """Flat hat-space parts plus metric and quadratic remainders from physical space."""

    def __init__(self, core: _Core, params: Params, dealiased: bool = True):
        super().__init__(core, params)
        self.grid = core.grid
        self.da = (lambda a: dealias(a, core.grid.torus)) if dealiased else (lambda a: a)

    def _phys(self, lev: _Level):
        k = lev.cache
        if "u" not in k:
            c = self.c
            k["u"] = c.unpack(lev.U)
            k["b"] = c.unpack(lev.B)
            k["eta"] = c.unpack_s(lev.H)
            k["m"] = state_metric(k["u"], k["eta"], self.grid)
        return k["u"], k["b"], k["eta"], k["m"]

    def euler_force(self, lev: _Level, lorentz: bool = True, F=None):
        c = self.c
        u, b, eta, m = self._phys(lev)
        h = "lower"
        J = m.jacobian(u, h)
        part = -np.einsum("k...,ik...->i...", u, J) + m.dtebar[h] * m.d3(u, h)
        if lorentz:
            d3b = m.d3(b, h)
            part = part - _cross_const(_cross(m.gbar[h], d3b), self.B) + _cross(m.curl(b, h), b)
            A = self.lorentz(lev)
        else:
            A = np.zeros_like(lev.U)
        if F is not None:
            A = A + F
        A = A + c.pack(self.da(part))
        K = c.pack_s(self.da(_g5(u, eta)))
        P6 = c.pack_s(_g6(eta, self.params.sigma).values)
        g2 = c.pack(_g2(u, m))
        return A, K, P6, g2

    def pressure_force(self, lev: _Level, Q: np.ndarray):
        c = self.c
        _, _, _, m = self._phys(lev)
        if m.flat:
            return 0.0
        q = c.unpack(Q)
        return c.pack(self.da(m.gbar["lower"] * m.d3(q, "lower")))

    def magnetic_force(self, lev: _Level, G=None):
        c, p = self.c, self.params
        u, b, eta, m = self._phys(lev)
        h = "lower"
        if G is None:
            Gp = _cross(u, self.B[:, None, None, None] + b)
            G = c.pack(Gp)
        else:
            Gp = c.unpack(G)
        cb_phi = m.curl(b, h)
        S_flat = c.curl(G) - p.kappa * (c.curl(c.curl(lev.B)) + c.lap(lev.B))
        extra = (m.curl(Gp, h) - _flat_curl(Gp, self.grid, h)) - p.kappa * (
            m.curl(cb_phi, h) - _flat_curl(_flat_curl(b, self.grid, h), self.grid, h)
        ) + m.dtebar[h] * m.d3(b, h)
        S = S_flat + c.pack(self.da(extra))
        defect = p.kappa * _curl_defect_bottom(b, m)
        cb = (c.pack_s(Gp[0][..., 0] + defect[0]), c.pack_s(Gp[1][..., 0] + defect[1]))
        bn = SurfaceField.from_values(self.grid.torus, _normal_trace(b, eta))
        bh = recover_vacuum_field(bn, grid=self.grid, metric=m).data("upper")
        lev.cache["bh"] = bh
        top = c.pack_s(bh[0][..., 0]), c.pack_s(bh[1][..., 0])
        b3 = lev.B[2][:, -1]
        rtop = (top[0] - 1j * c.st.k1 * c.phi0 * b3, top[1] - 1j * c.st.k2 * c.phi0 * b3)
        tgt = c.pack(_flat_div(b, self.grid, h) - m.div(b, h))
        return S, cb, rtop, tgt

    def settle_u(self, lev: _Level, g2: np.ndarray, iters: int = 10) -> None:
        c = self.c
        _, _, _, m = self._phys(lev)
        scale = max(float(np.max(np.abs(lev.U))), 1e-300)
        for _ in range(iters):
            g = c.pack(_g2(c.unpack(lev.U), m))
            if float(np.max(np.abs(g - g2))) <= SETTLE_TOL * scale:
                break
            lev.U = c.clean(lev.U, g)
            g2 = g
        lev.cache["u"] = c.unpack(lev.U)

    def settle_b(self, lev: _Level, Bn, Sbar, cb, rtop, tgt, iters: int = 10) -> np.ndarray:
        """Re-solve the induction step until its divergence target uses the new field."""
        c = self.c
        _, _, _, m = self._phys(lev)
        B = lev.B
        scale = max(float(np.max(np.abs(B))), 1e-300)
        for _ in range(iters):
            b = c.unpack(B)
            t_new = c.pack(_flat_div(b, self.grid, "lower") - m.div(b, "lower"))
            if float(np.max(np.abs(t_new - tgt))) <= SETTLE_TOL * scale:
                break
            tgt = t_new
            B = c.magnetic(Bn, Sbar, cb, rtop, tgt)
        return B

    def vacuum(self, lev: _Level) -> np.ndarray:
        u, b, eta, m = self._phys(lev)
        bn = SurfaceField.from_values(self.grid.torus, _normal_trace(b, eta))
        return recover_vacuum_field(bn, grid=self.grid, metric=m).data("upper")


def _normal_trace(b: np.ndarray, eta: SurfaceField) -> np.ndarray:
    return kinematic_rate(b, eta)


def _model(core: _Core, params: Params, mode: str):
    _check_mode(mode)
    return _Linear(core, params) if mode == "linearized" else _Nonlinear(core, params)


# ---------------------------------------------------------------------------
# stepping


def _hat_level(core: _Core, state: PlasmaState) -> _Level:
    u, b, p = state.arrays()
    return _Level(core.pack(u), core.pack(b), core.pack_s(state.eta.values), core.pack(p))


def _predict(core: _Core, state: PlasmaState, lev: _Level, dt: float, mode: str) -> _Level:
    mem = state.memory
    if mem and mem.get("dt") == dt and mem.get("mode") == mode and mem.get("grid") == core.grid:
        prev = mem["level"]
        return _Level(2 * lev.U - prev.U, 2 * lev.B - prev.B, 2 * lev.H - prev.H, 2 * lev.Q - prev.Q)
    return _Level(lev.U, lev.B, lev.H, lev.Q)


def _distance(a: _Level, b: _Level, core: _Core, with_b: bool = True) -> float:
    d = core.norm2(a.U - b.U) + float(np.sum(np.abs(a.H - b.H) ** 2))
    if with_b:
        d += core.norm2(a.B - b.B)
    return float(np.sqrt(d))


def _contraction(diffs: list, floor: float) -> float:
    ratios = [diffs[i + 1] / diffs[i] for i in range(len(diffs) - 1) if diffs[i] > floor]
    return max(ratios) if ratios else 0.0


def _check_dt(dt: float, sweeps: int) -> None:
    if not dt > 0:
        raise StepSizeError(f"time step must be positive, got {dt}")
    if sweeps < 1:
        raise ConfigurationError("at least one Picard sweep is required")


def _finish_report(report, diffs, scale):
    floor = 1e-13 * max(scale, 1e-300)
    rho = _contraction(diffs, floor)
    if report is not None:
        report["sweep_diffs"] = list(diffs)
        report["contraction"] = rho
        report["sweeps"] = len(diffs)
    if len(diffs) >= 2 and rho >= 1.0 and diffs[-1] > floor:
        raise SweepError(f"Picard sweeps do not contract (measured factor {rho:.3g})")


def step(state: PlasmaState, params: Params, dt: float, *, mode: str = "nonlinear", sweeps: int = 2,
         report: Optional[dict] = None) -> PlasmaState:
    """Advance one trapezoidal step closed by ``sweeps`` Picard sweeps.

    Within a sweep the fluid part is advanced first (old-field Lorentz
    force, metric of the current iterate), then the induction part with the
    fresh velocity and the metric of the fresh interface.
    """
    _check_dt(dt, sweeps)
    model_mode = mode
    _check_mode(model_mode)
    grid = state.grid
    u0 = state.u.data("lower")
    cfl = cfl_number(u0, grid, dt)
    if cfl > 1.0:
        raise StepSizeError(f"CFL number {cfl:.3g} exceeds 1")
    core = _core(grid, params, dt)
    model = _model(core, params, mode)
    n = _hat_level(core, state)
    An, Kn, P6n, _ = model.euler_force(n)
    Sn = model.magnetic_force(n)[0]
    X = _predict(core, state, n, dt, mode)
    diffs = []
    for _ in range(sweeps):
        As, Ks, P6s, g2 = model.euler_force(X)
        Ap = model.pressure_force(n, X.Q) + model.pressure_force(X, X.Q)
        Abar = 0.5 * (An + As + Ap)
        U, H, Q = core.euler(n.U, n.H, Abar, 0.5 * (Kn + Ks), 0.5 * (P6n + P6s), g2)
        mid = _Level(U, X.B, H, Q)
        model.settle_u(mid, g2)
        U = mid.U
        S, cb, rtop, tgt = model.magnetic_force(mid)
        Sbar = 0.5 * (Sn + S)
        B = core.magnetic(n.B, Sbar, cb, rtop, tgt)
        B = model.settle_b(_Level(U, B, H, Q, mid.cache), n.B, Sbar, cb, rtop, tgt)
        new = _Level(U, B, H, Q)
        diffs.append(_distance(new, X, core))
        X = new
        last_mid = mid
    _finish_report(report, diffs, np.sqrt(core.norm2(n.U) + core.norm2(n.B) + float(np.sum(np.abs(n.H) ** 2))))
    final = _Level(X.U, X.B, X.H, X.Q)
    if mode == "nonlinear":
        # the last metric was built from (U, H), which the final level shares
        final.cache.update(last_mid.cache)
        final.cache["b"] = core.unpack(X.B)
    bh = model.vacuum(final)
    return PlasmaState(
        u=_vec(grid, "lower", core.unpack(X.U)),
        b=_vec(grid, "lower", core.unpack(X.B)),
        b_hat=_vec(grid, "upper", bh),
        eta=core.unpack_s(X.H),
        p=_vol(grid, "lower", core.unpack(X.Q)),
        t=state.t + dt,
        memory={"dt": dt, "mode": mode, "grid": grid, "level": n},
    )


def euler_substep(state: PlasmaState, F: VectorField, dt: float, params: Params, *, mode: str = "nonlinear",
                  sweeps: int = 2, report: Optional[dict] = None) -> tuple[VectorField, SurfaceField, VolumeField]:
    """Advance (u, eta) one step under the given body force F, b frozen.

    Transport and metric terms are treated as in :func:`step`; the pressure
    projection keeps div^phi u = 0 and the interface mean is held fixed.
    Returns (u, eta, p) where p is the mid-step pressure.
    """
    _check_dt(dt, sweeps)
    grid = state.grid
    cfl = cfl_number(state.u.data("lower"), grid, dt)
    if cfl > 1.0:
        raise StepSizeError(f"CFL number {cfl:.3g} exceeds 1")
    core = _core(grid, params, dt)
    model = _model(core, params, mode)
    Fh = core.pack(F.data("lower"))
    n = _hat_level(core, state)
    An, Kn, P6n, _ = model.euler_force(n, lorentz=False, F=Fh)
    X = _Level(n.U, n.B, n.H, n.Q)
    diffs = []
    for _ in range(sweeps):
        As, Ks, P6s, g2 = model.euler_force(X, lorentz=False, F=Fh)
        Ap = model.pressure_force(n, X.Q) + model.pressure_force(X, X.Q)
        U, H, Q = core.euler(n.U, n.H, 0.5 * (An + As + Ap), 0.5 * (Kn + Ks), 0.5 * (P6n + P6s), g2)
        new = _Level(U, n.B, H, Q)
        model.settle_u(new, g2)
        new = _Level(new.U, n.B, H, Q)
        diffs.append(_distance(new, X, core, with_b=False))
        X = new
    _finish_report(report, diffs, np.sqrt(core.norm2(n.U) + float(np.sum(np.abs(n.H) ** 2))))
    return _vec(grid, "lower", core.unpack(X.U)), core.unpack_s(X.H), _vol(grid, "lower", core.unpack(X.Q))


def magnetic_substep(state: PlasmaState, G: VectorField, dt: float, params: Params, *, mode: str = "nonlinear",
                     sweeps: int = 4, report: Optional[dict] = None) -> tuple[VectorField, VectorField]:
    """Advance b one step of d_t^phi b + kappa curl^phi curl^phi b = curl^phi G, u and eta frozen.

    Wall rows: b3 = 0 and kappa (curl^phi b)_h = G_h; interface rows: b
    matches the vacuum field recovered from its normal trace.
    """
    _check_dt(dt, sweeps)
    grid = state.grid
    core = _core(grid, params, dt)
    model = _model(core, params, mode)
    Gh = core.pack(G.data("lower"))
    n = _hat_level(core, state)
    Sn = model.magnetic_force(n, Gh)[0]
    X = _Level(n.U, n.B, n.H, n.Q)
    diffs = []
    for _ in range(sweeps):
        lev = _Level(n.U, X.B, n.H, n.Q, cache={})
        S, cb, rtop, tgt = model.magnetic_force(lev, Gh)
        B = core.magnetic(n.B, 0.5 * (Sn + S), cb, rtop, tgt)
        new = _Level(n.U, B, n.H, n.Q)
        diffs.append(np.sqrt(core.norm2(B - X.B)))
        X = new
    _finish_report(report, diffs, np.sqrt(core.norm2(n.B)))
    final = _Level(n.U, X.B, n.H, n.Q)
    return _vec(grid, "lower", core.unpack(X.B)), _vec(grid, "upper", model.vacuum(final))


# ---------------------------------------------------------------------------
# data


def solenoidal_field(grid: SlabGrid, rng: np.random.Generator, amplitude: float = 1e-3, *, max_mode: int = 2,
                     power: int = 5) -> np.ndarray:
    """Random divergence-free lower-half field vanishing to high order at both ends.

    Built from toroidal/poloidal potentials psi(x_h) P(x3), phi(x_h) P(x3)
    with P = (x3 (1 + x3))^power; derivatives are spectral so the discrete
    divergence vanishes to round-off. Returns raw (3, n1, n2, nz) values
    scaled to max |v| = amplitude.
    """
    t = grid.torus
    z = grid.z("lower")
    P = (z * (1.0 + z)) ** power
    dP = grid.D("lower") @ P
    psi = hfft(random_band_limited(t, rng, max_mode)[..., None])[..., 0]
    phi = hfft(random_band_limited(t, rng, max_mode)[..., None])[..., 0]
    i1, i2 = 1j * t.k1, 1j * t.k2
    back = lambda c, prof: ihfft(c[..., None] * prof)
    v = np.stack([
        back(i2 * psi, P) + back(i1 * phi, dP),
        back(-i1 * psi, P) + back(i2 * phi, dP),
        back(t.ksq * phi, P),
    ])
    s = float(np.max(np.abs(v)))
    return v * (amplitude / s) if s > 0 else v


def project_solenoidal(v: np.ndarray, metric: Metric, params: Params, *, tol: float = 1e-14,
                       max_iter: int = 30) -> np.ndarray:
    """Correct v until div^phi v = 0, keeping v3 = 0 on the bottom wall.

    Fixed point of the flat cleaning step with the metric defect lagged; the
    correction is of the size of the interface slope times v.
    """
    core = _core(metric.grid, params, 1.0)
    scale = max(float(np.max(np.abs(v))), 1e-300)
    for _ in range(max_iter):
        if float(np.max(np.abs(metric.div(v, "lower")))) <= tol * scale:
            break
        v = core.unpack(core.clean(core.pack(v), core.pack(_g2(v, metric))))
    return v


def complete_state(u: VectorField, b: VectorField, eta: SurfaceField, params: Params, *, mode: str = "nonlinear",
                   t: float = 0.0, project: bool = True) -> PlasmaState:
    """Attach the vacuum field and the pressure to (u, b, eta).

    In the nonlinear mode with a curved interface, u and b are first
    projected onto div^phi = 0 (``project``).
    """
    _check_mode(mode)
    grid = u.grid
    ua, ba = u.data("lower"), b.data("lower")
    m = flat_metric(grid) if mode == "linearized" else state_metric(ua, eta, grid)
    if project and not m.flat:
        ua = project_solenoidal(ua, m, params)
        ba = project_solenoidal(ba, m, params)
        m = state_metric(ua, eta, grid)
        u, b = _vec(grid, "lower", ua), _vec(grid, "lower", ba)
    eta_for = SurfaceField.zeros(grid.torus) if mode == "linearized" else eta
    bn = SurfaceField.from_values(grid.torus, _normal_trace(ba, eta_for))
    bh = recover_vacuum_field(bn, grid=grid, metric=m)
    s = PlasmaState(u, b, bh, eta, VolumeField.zeros(grid, "lower"), t)
    return s.replace(p=pressure_solve(s, params, m, mode=mode))


# ---------------------------------------------------------------------------
# initial time derivatives


@dataclass(frozen=True)
class DerivativeTable:
    """Time derivatives at t = 0: index j holds d_t^j of each unknown."""

    u: tuple
    b: tuple
    b_hat: tuple
    p: tuple
    eta: tuple
    J: int


def _first_derivatives(u, b, eta: SurfaceField, eta_t: SurfaceField, params: Params, grid: SlabGrid, linearized: bool):
    """(d_t u, d_t b, p) at one instant from the equations, given eta and d_t eta."""
    h = "lower"
    B = params.Bvec[:, None, None, None]
    if linearized:
        m = flat_metric(grid)
        Hs = mean_curvature(eta, "linearized")
        rhs, neu = _pressure_sources(u, b, m, params, True)
        p = solve_scalar(grid, h, {h: rhs}, ("neumann", neu), ("dirichlet", -params.sigma * Hs.values), m)[h]
        cb = _flat_curl(b, grid, h)
        du = -gradient(p, grid, h) + _cross(cb, B)
        db = -params.kappa * _flat_curl(cb, grid, h) + _flat_curl(_cross(u, B), grid, h)
        return du, db, p
    m = build_metric(eta, eta_t, grid=grid)
    Hs = mean_curvature(eta, "full")
    rhs, neu = _pressure_sources(u, b, m, params, False)
    p = solve_scalar(grid, h, {h: rhs}, ("neumann", neu), ("dirichlet", -params.sigma * Hs.values), m)[h]
    J = m.jacobian(u, h)
    cb = m.curl(b, h)
    dphi_u = -np.einsum("k...,ik...->i...", u, J) - m.grad(p, h) + _cross(cb, B + b)
    E = _cross(u, B + b) - params.kappa * cb
    dphi_b = m.curl(E, h)
    dte = m.dtebar[h]
    return dphi_u + dte * m.d3(u, h), dphi_b + dte * m.d3(b, h), p


def _vacuum_of(b, eta: SurfaceField, grid: SlabGrid, linearized: bool) -> np.ndarray:
    if linearized:
        bn = SurfaceField.from_values(grid.torus, b[2][..., -1])
        return recover_vacuum_field(bn, grid=grid).data("upper")
    bn = SurfaceField.from_values(grid.torus, _normal_trace(b, eta))
    return recover_vacuum_field(bn, grid=grid, metric=build_metric(eta, grid=grid)).data("upper")


def _surface_product_rate(uj: list, etaj: list, order: int) -> np.ndarray:
    """d_t^order (u . N) on the interface from the derivative lists (Leibniz rule)."""
    from math import comb

    total = np.zeros(etaj[0].grid.shape)
    for i in range(order + 1):
        e1, e2 = surface_gradient(etaj[order - i])
        top = uj[i][..., -1]
        c = comb(order, i)
        total += c * (-e1 * top[0] - e2 * top[1])
        if i == order:
            total += top[2]
    return total


def _check_compat(name: str, residual: float, scale: float) -> None:
    if residual > COMPAT_TOL * max(1.0, scale):
        raise CompatibilityError(f"initial data: {name} violated (residual {residual:.3g})")


def construct_initial_derivatives(u0: VectorField, b0: VectorField, eta0: SurfaceField, params: Params, J: int = 1, *,
                                  mode: str = "nonlinear", eps: float = 1e-4) -> DerivativeTable:
    """Time derivatives of all unknowns at t = 0 up to order J (J <= 2).

    The first layer is computed directly from the equations. In the
    nonlinear mode the second layer uses a centred difference of the
    first-layer map along the tangent (u, b, eta, d_t eta) + s (d_t u, d_t b,
    d_t eta, d_t^2 eta); in the linearized mode every layer is exact.
    """
    _check_mode(mode)
    if not 0 <= J <= 2:
        raise ConfigurationError("only J <= 2 is supported")
    grid = u0.grid
    lin = mode == "linearized"
    h = "lower"
    u, b = u0.data(h), b0.data(h)
    eta_c = SurfaceField.zeros(grid.torus) if lin else eta0
    m0 = flat_metric(grid) if lin else build_metric(eta0, grid=grid)
    scale = max(float(np.max(np.abs(u))), float(np.max(np.abs(b))), 1e-300)
    _check_compat("div^phi u0 = 0", float(np.max(np.abs(m0.div(u, h)))), scale)
    _check_compat("div^phi b0 = 0", float(np.max(np.abs(m0.div(b, h)))), scale)
    _check_compat("u0_3 = 0 on the bottom wall", float(np.max(np.abs(u[2][..., 0]))), scale)
    _check_compat("b0_3 = 0 on the bottom wall", float(np.max(np.abs(b[2][..., 0]))), scale)

    us, bs, ps, bhs = [u], [b], [], [_vacuum_of(b, eta_c, grid, lin)]
    etas = [eta0]
    e1_rate = _surface_product_rate([u], [eta_c], 0) if not lin else u[2][..., -1]
    etas.append(SurfaceField.from_values(grid.torus, e1_rate))
    _check_layer(0, u, b, bhs[0], eta_c, params, grid, lin, m0, scale)

    for j in range(J):
        if lin:
            du, db, p = _linear_layer(us[j], bs[j], etas[j], params, grid)
            etas.append(SurfaceField.from_values(grid.torus, du[2][..., -1]))
            bh_next = _vacuum_of(db, eta_c, grid, True)
        elif j == 0:
            du, db, p = _first_derivatives(u, b, eta0, etas[1], params, grid, False)
            etas.append(SurfaceField.from_values(grid.torus, _surface_product_rate([u, du], etas, 1)))
            bh_next = _fd_vacuum(b, db, eta0, etas[1], grid, eps)
        else:
            du, db, p = _fd_second(us, bs, etas, params, grid, eps)
            etas.append(SurfaceField.from_values(grid.torus, _surface_product_rate([us[0], us[1], du], etas, 2)))
            bh_next = _fd_vacuum2(bs, etas, db, grid, eps)
        us.append(du)
        bs.append(db)
        ps.append(p)
        bhs.append(bh_next)
        if j + 1 < J:
            _check_layer(j + 1, us, bs, bhs[j + 1], eta_c, params, grid, lin, m0, scale)

    return DerivativeTable(
        u=tuple(_vec(grid, h, a) for a in us),
        b=tuple(_vec(grid, h, a) for a in bs),
        b_hat=tuple(_vec(grid, "upper", a) for a in bhs),
        p=tuple(_vol(grid, h, a) for a in ps),
        eta=tuple(etas),
        J=J,
    )


def _linear_layer(u, b, eta: SurfaceField, params: Params, grid: SlabGrid):
    return _first_derivatives(u, b, eta, eta * 0.0, params, grid, True)


def _check_layer(j, us, bs, bh, eta_c, params, grid, lin, m0, scale):
    """[d_t^j b] x N0 = 0 on the interface and d_t^j E x e3 = 0 on the wall."""
    if j == 0:
        us, bs = [us], [bs]
    b = bs[j]
    e1, e2 = surface_gradient(eta_c)
    jump = bh[..., 0] - b[..., -1]
    tang = _cross(jump, np.stack([-e1, -e2, np.ones_like(e1)]))
    _check_compat(f"[d_t^{j} b] x N0 = 0 on the interface", float(np.max(np.abs(tang))), scale)
    B = params.Bvec[:, None, None, None]
    if j == 0:
        E = _cross(us[0], B + (0.0 if lin else bs[0])) - params.kappa * (
            _flat_curl(bs[0], grid, "lower") if lin else m0.curl(bs[0], "lower"))
    else:
        E = _cross(us[1], B) - params.kappa * _flat_curl(bs[1], grid, "lower")
        if not lin:
            E = E + _cross(us[1], bs[0]) + _cross(us[0], bs[1])
    _check_compat(f"d_t^{j} E x e3 = 0 on the bottom wall", float(np.max(np.abs(E[:2][..., 0]))), scale)


def _fd_vacuum(b, db, eta, eta_t, grid, eps):
    plus = _vacuum_of(b + eps * db, eta + eps * eta_t, grid, False)
    minus = _vacuum_of(b - eps * db, eta - eps * eta_t, grid, False)
    return (plus - minus) / (2 * eps)


def _fd_vacuum2(bs, etas, b2, grid, eps):
    def at(s):
        bb = bs[0] + s * bs[1] + 0.5 * s * s * b2
        ee = etas[0] + etas[1] * s + etas[2] * (0.5 * s * s)
        return _vacuum_of(bb, ee, grid, False)

    return (at(eps) - 2 * at(0.0) + at(-eps)) / (eps * eps)


def _fd_second(us, bs, etas, params, grid, eps):
    def at(s):
        return _first_derivatives(us[0] + s * us[1], bs[0] + s * bs[1], etas[0] + etas[1] * s,
                                  etas[1] + etas[2] * s, params, grid, False)

    up, bp, pp = at(eps)
    um, bm, pm = at(-eps)
    return (up - um) / (2 * eps), (bp - bm) / (2 * eps), (pp - pm) / (2 * eps)


# ---------------------------------------------------------------------------
# vorticity damping


@dataclass(frozen=True)
class VorticityResidual:
    """Residuals of the two horizontal vorticity identities, and the damping coefficient."""

    residual: np.ndarray  # (2, n1, n2, nz)
    coefficient: float

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.residual)))


def vorticity_damping_residual(state: PlasmaState, params: Params, dt_u: VectorField, dt_b: VectorField,
                               metric: Optional[Metric] = None) -> VorticityResidual:
    """Evaluate both sides of the damped horizontal vorticity equations.

    d_t^phi of the vorticity is taken as curl^phi(d_t^phi u).
    """
    h = "lower"
    grid = state.grid
    u, b, _ = state.arrays()
    m = metric if metric is not None else state_metric(u, state.eta, grid)
    B1, B2, B3 = params.B
    kap = params.kappa
    c = params.damping
    dtu, dtb = dt_u.data(h), dt_b.data(h)
    Ju = m.jacobian(u, h)
    w = m.curl(u, h)
    dphi_u = m.ddt(u, dtu, h)
    dphi_b = m.ddt(b, dtb, h)
    dphi_w = m.curl(dphi_u, h)
    Jw = m.jacobian(w, h)
    cb = m.curl(b, h)
    Jc = m.jacobian(cb, h)
    adv_w = np.einsum("k...,ik...->i...", u, Jw)
    stretch = np.einsum("k...,ik...->i...", w, Ju)
    cuxb = m.curl(_cross(u, b), h)
    lorentz = m.curl(_cross(cb, b), h)
    lhs = dphi_w[:2] + adv_w[:2] + c * w[:2]
    r1 = (B1 * Jc[0, 0] + B2 * Jc[0, 1] + B3 * Jc[2, 0]
          + (B3 / kap) * (-dphi_b[1] + B1 * Ju[1, 0] + B2 * Ju[1, 1] + B3 * Ju[2, 1])
          + (B3 / kap) * cuxb[1] + stretch[0] + lorentz[0])
    r2 = (B1 * Jc[1, 0] + B2 * Jc[1, 1] + B3 * Jc[2, 1]
          - (B3 / kap) * (-dphi_b[0] + B1 * Ju[0, 0] + B2 * Ju[0, 1] + B3 * Ju[2, 0])
          - (B3 / kap) * cuxb[0] + stretch[1] + lorentz[1])
    return VorticityResidual(lhs - np.stack([r1, r2]), c)
