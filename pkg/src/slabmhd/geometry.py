"""Flattening of the moving interface onto the fixed slab.

The interface height eta is extended into the slab by a two-sided Poisson
sum whose upper half is a weighted combination of decaying exponentials,
tuned so the extension is C^m across x3 = 0. The extension times a cutoff
gives eta_bar, and phi = x3 + eta_bar defines the change of variables.
Everything else here (metric, chain-rule derivatives, normals, curvature)
follows from eta_bar.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial import Polynomial

from .spectral import (
    REGIONS,
    ConfigurationError,
    SlabGrid,
    SurfaceField,
    TorusGrid,
    VectorField,
    VolumeField,
    dz,
    hfft,
    ihfft,
)


class MetricError(ValueError):
    """The interface is too large for the flattening map to stay well conditioned."""


# ---------------------------------------------------------------------------
# cutoff and Poisson weights


@dataclass(frozen=True)
class CutoffProfile:
    """Polynomial cutoff chi on [-1, 1] with chi(0) = 1 and chi(+-1) = 0."""

    poly: Polynomial = field(default_factory=lambda: Polynomial([1.0, 0.0, -1.0]) ** 4)

    def __post_init__(self) -> None:
        if abs(self.poly(0.0) - 1.0) > 1e-14 or abs(self.poly(1.0)) > 1e-14 or abs(self.poly(-1.0)) > 1e-14:
            raise ConfigurationError("cutoff must satisfy chi(0) = 1 and chi(-1) = chi(1) = 0")
        z = np.linspace(-1.0, 1.0, 401)
        if np.max(np.abs(self.poly(z))) > 1.0 + 1e-12:
            raise ConfigurationError("cutoff must satisfy |chi| <= 1")

    def __call__(self, z: np.ndarray, order: int = 0) -> np.ndarray:
        p = self.poly.deriv(order) if order else self.poly
        return p(np.asarray(z, dtype=float))


@dataclass(frozen=True)
class PoissonWeights:
    m: int
    lam: tuple[float, ...]
    alpha: tuple[float, ...]

    def kernel(self, kmag: np.ndarray, z: np.ndarray, order: int = 0) -> np.ndarray:
        """order-th x3-derivative of the upper kernel sum_j alpha_j exp(-lam_j |xi| z).

        ``kmag`` is 2*pi*|xi|; the result broadcasts kmag[..., None] against z.
        """
        xi = np.asarray(kmag)[..., None] / (2 * np.pi)
        out = np.zeros(np.broadcast(xi, z).shape)
        for a, l in zip(self.alpha, self.lam):
            out += a * (-l * xi) ** order * np.exp(-l * xi * z)
        return out


def poisson_weights(m: int = 4, lam: Optional[Sequence[float]] = None) -> PoissonWeights:
    """Weights making the upper exponential sum match exp(2 pi |xi| x3) to order m at x3 = 0.

    Row k of the system reads sum_j alpha_j mu_j**k = 1 with mu_j = -lam_j / (2 pi).
    """
    if m < 0:
        raise ConfigurationError("m must be nonnegative")
    if lam is None:
        lam = [2 * np.pi * (j + 1) for j in range(m + 1)]
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (m + 1,):
        raise ConfigurationError(f"need {m + 1} decay rates, got {lam.size}")
    if np.any(lam <= 0) or np.any(np.diff(lam) <= 0):
        raise ConfigurationError("decay rates must be positive and strictly increasing (duplicates make V singular)")
    mu = -lam / (2 * np.pi)
    V = np.vander(mu, increasing=True).T
    alpha = np.linalg.solve(V, np.ones(m + 1))
    return PoissonWeights(m=m, lam=tuple(lam), alpha=tuple(alpha))


# ---------------------------------------------------------------------------
# harmonic extension


def _lower_kernel(kmag: np.ndarray, z: np.ndarray, order: int = 0) -> np.ndarray:
    k = np.asarray(kmag)[..., None]
    return k**order * np.exp(k * z)


def extension_kernel(torus: TorusGrid, weights: PoissonWeights, half: str, z: np.ndarray, order: int = 0) -> np.ndarray:
    """Per-mode vertical profile of the extension (no cutoff), shape (n1, n2, len(z))."""
    kmag = _full_kmag(torus)
    if half == "lower":
        out = _lower_kernel(kmag, z, order)
    else:
        out = weights.kernel(kmag, z, order)
    if order > 0:
        out[0, 0, :] = 0.0
    return out


def _full_kmag(torus: TorusGrid) -> np.ndarray:
    # |xi| including the Nyquist row: the extension is not a derivative, so no zeroing
    return 2 * np.pi * np.sqrt(torus.xi1**2 + torus.xi2**2)


def extend_raw(eta_hat: np.ndarray, grid: SlabGrid, weights: PoissonWeights, half: str, order: int = 0) -> np.ndarray:
    """Physical values of the order-th x3-derivative of the extension (no cutoff)."""
    ker = extension_kernel(grid.torus, weights, half, grid.z(half), order)
    return ihfft(eta_hat[:, :, None] * ker)


def harmonic_extend(
    eta: SurfaceField,
    weights: Optional[PoissonWeights] = None,
    chi: Optional[CutoffProfile] = None,
    grid: Optional[SlabGrid] = None,
) -> VolumeField:
    """eta_bar = chi * P eta on both halves."""
    weights = weights or poisson_weights()
    chi = chi or CutoffProfile()
    grid = grid or SlabGrid(eta.grid)
    eh = eta.coefficients
    halves = {h: chi(grid.z(h)) * extend_raw(eh, grid, weights, h) for h in REGIONS}
    return VolumeField(grid, "both", **halves)


def extension_one_sided(eta: SurfaceField, weights: PoissonWeights, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact one-sided x3-derivatives of P eta at x3 = 0, orders 0..order.

    Returns (lower, upper) physical arrays of shape (order + 1, n1, n2).
    """
    t = eta.grid
    eh = eta.coefficients
    z0 = np.zeros(1)
    lo, up = [], []
    for k in range(order + 1):
        for half, acc in (("lower", lo), ("upper", up)):
            ker = extension_kernel(t, weights, half, z0, k)[:, :, 0]
            acc.append(np.real(np.fft.ifft2(eh * ker)) * t.n1 * t.n2)
    return np.array(lo), np.array(up)


def extension_jump(eta: SurfaceField, weights: Optional[PoissonWeights] = None) -> np.ndarray:
    """Relative jump of the k-th one-sided derivative across x3 = 0, k = 0..m."""
    weights = weights or poisson_weights()
    lo, up = extension_one_sided(eta, weights, weights.m)
    scale = np.maximum(np.max(np.abs(lo), axis=(1, 2)), 1e-300)
    return np.max(np.abs(up - lo), axis=(1, 2)) / scale


def extension_norm_ratio(eta: SurfaceField, s: int, weights: Optional[PoissonWeights] = None) -> float:
    """||P eta||_{H^s(T^2 x (-1,1))} / |eta|_{s - 1/2}, from closed-form mode integrals."""
    from .spectral import sobolev_norm_surface

    weights = weights or poisson_weights()
    t = eta.grid
    eh2 = np.abs(eta.coefficients) ** 2
    xi = np.sqrt(t.xi1**2 + t.xi2**2)
    k = 2 * np.pi * xi
    k1sq = np.broadcast_to((2 * np.pi * t.xi1) ** 2, t.shape)
    k2sq = np.broadcast_to((2 * np.pi * t.xi2) ** 2, t.shape)
    lam = np.array(weights.lam)
    alpha = np.array(weights.alpha)
    nz = xi > 0
    total = np.zeros(t.shape)
    for c in range(s + 1):
        # vertical integral of |q^(c)|^2 over both halves
        vert = np.zeros(t.shape)
        kk = k[nz]
        vert[nz] += kk ** (2 * c) * -np.expm1(-2 * kk) / (2 * kk)
        up = np.zeros(kk.shape)
        for j in range(lam.size):
            for l in range(lam.size):
                r = (lam[j] + lam[l]) * xi[nz]
                up += alpha[j] * alpha[l] * (lam[j] * lam[l] * xi[nz] ** 2) ** c * -np.expm1(-r) / r
        vert[nz] += up
        if c == 0:
            vert[~nz] = 2.0
        horiz = np.zeros(t.shape)
        for b1 in range(s - c + 1):
            for b2 in range(s - c - b1 + 1):
                horiz += k1sq**b1 * k2sq**b2
        total += horiz * vert
    num = np.sqrt(np.sum(total * eh2))
    return float(num / sobolev_norm_surface(eta, s - 0.5))


# ---------------------------------------------------------------------------
# metric


@dataclass(frozen=True, eq=False)
class Metric:
    """Flattening data on both halves; raw arrays keyed by half name.

    ``gbar[half]`` stacks (d1 eta_bar, d2 eta_bar, d3 eta_bar).
    """

    grid: SlabGrid
    eta: SurfaceField
    ebar: dict
    gbar: dict
    dtebar: Optional[dict] = None

    def __post_init__(self) -> None:
        lo = min(float(np.min(self.j(h))) for h in REGIONS)
        hi = max(float(np.max(self.j(h))) for h in REGIONS)
        if lo < 0.5 or hi > 1.5:
            raise MetricError(f"interface too large: d3 phi ranges over [{lo:.3g}, {hi:.3g}], outside [1/2, 3/2]")

    # field views
    @property
    def eta_bar(self) -> VolumeField:
        return VolumeField(self.grid, "both", **self.ebar)

    @property
    def grad_eta_bar(self) -> VectorField:
        return VectorField(tuple(VolumeField(self.grid, "both", **{h: self.gbar[h][i] for h in REGIONS}) for i in range(3)))

    @property
    def d3phi(self) -> VolumeField:
        return VolumeField(self.grid, "both", **{h: self.j(h) for h in REGIONS})

    @property
    def dt_eta_bar(self) -> Optional[VolumeField]:
        if self.dtebar is None:
            return None
        return VolumeField(self.grid, "both", **self.dtebar)

    @property
    def flat(self) -> bool:
        return not any(np.any(self.ebar[h]) for h in REGIONS)

    def j(self, half: str) -> np.ndarray:
        """d3 phi = 1 + d3 eta_bar."""
        return 1.0 + self.gbar[half][2]

    # raw-array chain-rule derivatives -----------------------------------
    def d3(self, a: np.ndarray, half: str) -> np.ndarray:
        return dz(a, self.grid.D(half)) / self.j(half)

    def grad(self, a: np.ndarray, half: str) -> np.ndarray:
        t = self.grid.torus
        ah = hfft(a)
        d3a = dz(a, self.grid.D(half))
        g = self.gbar[half]
        d3p = d3a / self.j(half)
        return np.stack([
            ihfft(1j * t.k1[:, :, None] * ah) - g[0] * d3p,
            ihfft(1j * t.k2[:, :, None] * ah) - g[1] * d3p,
            d3p,
        ])

    def jacobian(self, v: np.ndarray, half: str) -> np.ndarray:
        """J[i, k] = d_k^phi v_i, shape (3, 3, n1, n2, nz)."""
        t = self.grid.torus
        vh = hfft(v)
        d3v = dz(v, self.grid.D(half)) / self.j(half)
        g = self.gbar[half]
        d1 = ihfft(1j * t.k1[:, :, None] * vh) - g[0] * d3v
        d2 = ihfft(1j * t.k2[:, :, None] * vh) - g[1] * d3v
        return np.stack([d1, d2, d3v], axis=1)

    def div(self, v: np.ndarray, half: str) -> np.ndarray:
        t = self.grid.torus
        vh = hfft(v[:2])
        d3v = dz(v, self.grid.D(half)) / self.j(half)
        g = self.gbar[half]
        flat_h = ihfft(1j * t.k1[:, :, None] * vh[0] + 1j * t.k2[:, :, None] * vh[1])
        return flat_h - g[0] * d3v[0] - g[1] * d3v[1] + d3v[2]

    def curl(self, v: np.ndarray, half: str) -> np.ndarray:
        # horizontal parts combined in Fourier space: three inverse transforms instead of six
        t = self.grid.torus
        i1, i2 = 1j * t.k1[:, :, None], 1j * t.k2[:, :, None]
        vh = hfft(v)
        d3v = dz(v, self.grid.D(half)) / self.j(half)
        g0, g1 = self.gbar[half][0], self.gbar[half][1]
        h = ihfft(np.stack([i2 * vh[2], -i1 * vh[2], i1 * vh[1] - i2 * vh[0]]))
        return np.stack([
            h[0] - g1 * d3v[2] - d3v[1],
            h[1] + g0 * d3v[2] + d3v[0],
            h[2] - g0 * d3v[1] + g1 * d3v[0],
        ])

    def laplacian(self, a: np.ndarray, half: str) -> np.ndarray:
        g = self.grad(a, half)
        return self.div(g, half)

    def ddt(self, a: np.ndarray, dta: np.ndarray, half: str) -> np.ndarray:
        """d_t^phi a = d_t a - d_t eta_bar d3^phi a."""
        if self.dtebar is None:
            raise ConfigurationError("metric was built without d_t eta")
        return dta - self.dtebar[half] * self.d3(a, half)

    def weight(self, half: str) -> np.ndarray:
        """Volume element d3 phi for quadrature."""
        return self.j(half)


def build_metric(
    eta: SurfaceField,
    dt_eta: Optional[SurfaceField] = None,
    weights: Optional[PoissonWeights] = None,
    chi: Optional[CutoffProfile] = None,
    grid: Optional[SlabGrid] = None,
) -> Metric:
    weights = weights or poisson_weights()
    chi = chi or CutoffProfile()
    grid = grid or SlabGrid(eta.grid)
    if grid.torus != eta.grid:
        raise ConfigurationError("eta lives on a different torus")
    t = grid.torus
    eh = eta.coefficients
    ebar, gbar, dtebar = {}, {}, ({} if dt_eta is not None else None)
    for h in REGIONS:
        z = grid.z(h)
        ext = extend_raw(eh, grid, weights, h)
        eb = chi(z) * ext
        ebh = hfft(eb)
        gbar[h] = np.stack([
            ihfft(1j * t.k1[:, :, None] * ebh),
            ihfft(1j * t.k2[:, :, None] * ebh),
            dz(eb, grid.D(h)),
        ])
        ebar[h] = eb
        if dt_eta is not None:
            dtebar[h] = chi(z) * extend_raw(dt_eta.coefficients, grid, weights, h)
    return Metric(grid=grid, eta=eta, ebar=ebar, gbar=gbar, dtebar=dtebar)


def flat_metric(grid: SlabGrid) -> Metric:
    return build_metric(SurfaceField.zeros(grid.torus), SurfaceField.zeros(grid.torus), grid=grid)


# ---------------------------------------------------------------------------
# field-level perturbed operators


def perturbed_apply(metric: Metric, op: str, f, dt_f=None):
    """Apply grad^phi, div^phi, curl^phi or d_t^phi to a field on any region."""
    grid = metric.grid
    if f.grid != grid:
        raise ConfigurationError("field and metric live on different grids")
    halves = f.halves if isinstance(f, VolumeField) else f[0].halves
    if op == "grad":
        if not isinstance(f, VolumeField):
            raise ConfigurationError("grad takes a scalar field")
        comps = {h: metric.grad(f.physical().data(h), h) for h in halves}
        return _vector(grid, f.region, comps)
    if op in ("div", "curl"):
        if not isinstance(f, VectorField):
            raise ConfigurationError(f"{op} takes a vector field")
        if op == "div":
            return VolumeField(grid, f.region, **{h: metric.div(f.data(h), h) for h in halves})
        return _vector(grid, f.region, {h: metric.curl(f.data(h), h) for h in halves})
    if op == "dt":
        if dt_f is None:
            raise ConfigurationError("dt needs the plain time derivative of the field")
        if isinstance(f, VolumeField):
            return VolumeField(grid, f.region, **{h: metric.ddt(f.physical().data(h), dt_f.physical().data(h), h) for h in halves})
        return _vector(grid, f.region, {h: metric.ddt(f.data(h), dt_f.data(h), h) for h in halves})
    raise ConfigurationError(f"unknown operator {op!r}")


def _vector(grid: SlabGrid, region: str, comps: dict) -> VectorField:
    return VectorField(tuple(
        VolumeField(grid, region, **{h: comps[h][i] for h in comps}) for i in range(3)
    ))


# ---------------------------------------------------------------------------
# interface quantities


def surface_gradient(eta: SurfaceField) -> tuple[np.ndarray, np.ndarray]:
    t = eta.grid
    eh = eta.coefficients
    back = lambda c: np.real(np.fft.ifft2(c)) * t.n1 * t.n2
    return back(1j * t.k1 * eh), back(1j * t.k2 * eh)


def mean_curvature(eta: SurfaceField, mode: str = "full") -> SurfaceField:
    t = eta.grid
    if mode == "linearized":
        return SurfaceField(t, -t.ksq * eta.coefficients)
    if mode != "full":
        raise ConfigurationError(f"unknown curvature mode {mode!r}")
    g1, g2 = surface_gradient(eta)
    inv = 1.0 / np.sqrt(1.0 + g1**2 + g2**2)
    q1 = SurfaceField.from_values(t, g1 * inv).coefficients * t.dealias_mask
    q2 = SurfaceField.from_values(t, g2 * inv).coefficients * t.dealias_mask
    return SurfaceField(t, 1j * t.k1 * q1 + 1j * t.k2 * q2)


def normal_vector(eta: SurfaceField, unit: bool = False) -> tuple[tuple[SurfaceField, SurfaceField, SurfaceField], bool]:
    """Upward normal (-grad eta, 1), optionally normalised pointwise."""
    t = eta.grid
    g1, g2 = surface_gradient(eta)
    n = [-g1, -g2, np.ones(t.shape)]
    if unit:
        s = np.sqrt(1.0 + g1**2 + g2**2)
        n = [c / s for c in n]
    return tuple(SurfaceField.from_values(t, c) for c in n), unit
