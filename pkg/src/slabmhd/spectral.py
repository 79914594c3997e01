"""Fourier x Chebyshev discretisation of the periodic slab.

Horizontal directions live on the unit torus and use plain FFTs. Each vertical
half, [-1, 0] below and [0, 1] above, carries its own Chebyshev-Gauss-Lobatto
grid; the node x3 = 0 belongs to both halves.

Fields are stored as physical-space values. The helpers at the bottom
(``hfft``, ``ihfft``, ``deriv`` ...) act on raw numpy arrays of shape
``(n1, n2, nz)`` and are what the other modules use in their inner loops.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import chebyshev as cheb
from scipy import fft as sfft
from scipy.fft import dct

REGIONS = ("lower", "upper")


class ConfigurationError(ValueError):
    """Raised for inconsistent grids, regions or shapes."""


# ---------------------------------------------------------------------------
# one-dimensional Chebyshev building blocks


def chebyshev_points(n: int) -> np.ndarray:
    """Gauss-Lobatto points on [-1, 1] in ascending order."""
    return -np.cos(np.pi * np.arange(n) / (n - 1))


def chebyshev_matrix(n: int) -> np.ndarray:
    """First-derivative collocation matrix for ``chebyshev_points(n)``."""
    N = n - 1
    x = np.cos(np.pi * np.arange(n) / N)
    c = np.ones(n)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(n)
    dX = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dX + np.eye(n))
    D -= np.diag(D.sum(axis=1))
    # nodes above are descending; flip both axes for ascending order
    return D[::-1, ::-1].copy()


def clenshaw_curtis_weights(n: int) -> np.ndarray:
    """Quadrature weights on [-1, 1] for ``chebyshev_points(n)``."""
    N = n - 1
    theta = np.pi * np.arange(n) / N
    w = np.zeros(n)
    v = np.ones(N - 1)
    inner = slice(1, N)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N**2 - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k**2 - 1)
        v -= np.cos(N * theta[inner]) / (N**2 - 1)
    else:
        w[0] = w[N] = 1.0 / N**2
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k**2 - 1)
    w[inner] = 2.0 * v / N
    return w


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid on the unit 2-torus with ``n1 x n2`` points."""

    n1: int
    n2: int

    def __post_init__(self) -> None:
        for n in (self.n1, self.n2):
            if int(n) != n or n < 4 or n % 2:
                raise ConfigurationError(
                    f"horizontal mode counts must be even and >= 4, got {n}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n1, self.n2)

    @cached_property
    def x1(self) -> np.ndarray:
        return np.arange(self.n1) / self.n1

    @cached_property
    def x2(self) -> np.ndarray:
        return np.arange(self.n2) / self.n2

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x1, self.x2, indexing="ij")

    @cached_property
    def xi1(self) -> np.ndarray:
        return np.fft.fftfreq(self.n1, 1.0 / self.n1)[:, None]

    @cached_property
    def xi2(self) -> np.ndarray:
        return np.fft.fftfreq(self.n2, 1.0 / self.n2)[None, :]

    @cached_property
    def k1(self) -> np.ndarray:
        """Symbol of d/dx1 divided by i (odd derivatives drop Nyquist)."""
        k = 2 * np.pi * self.xi1.copy()
        k[self.n1 // 2] = 0.0
        return k

    @cached_property
    def k2(self) -> np.ndarray:
        k = 2 * np.pi * self.xi2.copy()
        k[:, self.n2 // 2] = 0.0
        return k

    @cached_property
    def ksq(self) -> np.ndarray:
        """|2 pi xi|^2 including Nyquist modes (used for even symbols)."""
        return (2 * np.pi) ** 2 * (self.xi1**2 + self.xi2**2)

    @cached_property
    def kmag(self) -> np.ndarray:
        return np.sqrt(self.ksq)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        return (np.abs(self.xi1) <= self.n1 // 3) & (np.abs(self.xi2) <= self.n2 // 3)

    def symbol(self, a1: int, a2: int) -> np.ndarray:
        """Fourier multiplier of d1^a1 d2^a2."""
        s1 = (1j * 2 * np.pi * self.xi1) ** a1 if a1 % 2 == 0 else (1j * self.k1) ** a1
        s2 = (1j * 2 * np.pi * self.xi2) ** a2 if a2 % 2 == 0 else (1j * self.k2) ** a2
        return s1 * s2


@dataclass(frozen=True)
class SlabGrid:
    """Torus times two Chebyshev grids, on [-1, 0] and [0, 1]."""

    torus: TorusGrid
    nz_lower: int = 17
    nz_upper: int = 17

    def __post_init__(self) -> None:
        for n in (self.nz_lower, self.nz_upper):
            if int(n) != n or n < 5:
                raise ConfigurationError(f"need at least 5 vertical points per half, got {n}")

    def nz(self, region: str) -> int:
        _check_half(region)
        return self.nz_lower if region == "lower" else self.nz_upper

    def interval(self, region: str) -> tuple[float, float]:
        _check_half(region)
        return (-1.0, 0.0) if region == "lower" else (0.0, 1.0)

    def z(self, region: str) -> np.ndarray:
        return self._z[region]

    def D(self, region: str) -> np.ndarray:
        """Scaled first-derivative matrix on the half."""
        return self._D[region]

    def weights(self, region: str) -> np.ndarray:
        return self._w[region]

    def shape(self, region: str) -> tuple[int, int, int]:
        return (self.torus.n1, self.torus.n2, self.nz(region))

    @cached_property
    def _z(self) -> dict:
        out = {}
        for r in REGIONS:
            a, b = self.interval(r)
            out[r] = a + (b - a) * (chebyshev_points(self.nz(r)) + 1.0) / 2.0
        return out

    @cached_property
    def _D(self) -> dict:
        return {r: 2.0 * chebyshev_matrix(self.nz(r)) for r in REGIONS}

    @cached_property
    def _w(self) -> dict:
        return {r: 0.5 * clenshaw_curtis_weights(self.nz(r)) for r in REGIONS}

    def coordinates(self, region: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable (x1, x2, x3) arrays for one half."""
        t = self.torus
        return (t.x1[:, None, None], t.x2[None, :, None], self.z(region)[None, None, :])


def _check_half(region: str) -> None:
    if region not in REGIONS:
        raise ConfigurationError(f"unknown half {region!r}; expected 'lower' or 'upper'")


def _halves(region: str) -> tuple[str, ...]:
    if region == "both":
        return REGIONS
    _check_half(region)
    return (region,)


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class SurfaceField:
    """Real scalar on the torus, held as Fourier coefficients."""

    grid: TorusGrid
    coefficients: np.ndarray
    flags: tuple = ()

    def __post_init__(self) -> None:
        if np.shape(self.coefficients) != self.grid.shape:
            raise ConfigurationError("coefficient array does not match the torus grid")

    @classmethod
    def from_values(cls, grid: TorusGrid, values: np.ndarray) -> "SurfaceField":
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise ConfigurationError("value array does not match the torus grid")
        return cls(grid, sfft.fft2(values) / (grid.n1 * grid.n2))

    @classmethod
    def from_function(cls, grid: TorusGrid, fn: Callable) -> "SurfaceField":
        x1, x2 = grid.mesh
        return cls.from_values(grid, np.broadcast_to(fn(x1, x2), grid.shape))

    @classmethod
    def zeros(cls, grid: TorusGrid) -> "SurfaceField":
        return cls(grid, np.zeros(grid.shape, dtype=complex))

    @property
    def values(self) -> np.ndarray:
        return np.real(sfft.ifft2(self.coefficients)) * (self.grid.n1 * self.grid.n2)

    def mean(self) -> float:
        return float(np.real(self.coefficients[0, 0]))

    def _wrap(self, c: np.ndarray) -> "SurfaceField":
        return SurfaceField(self.grid, c)

    def __add__(self, other: "SurfaceField") -> "SurfaceField":
        return self._wrap(self.coefficients + other.coefficients)

    def __sub__(self, other: "SurfaceField") -> "SurfaceField":
        return self._wrap(self.coefficients - other.coefficients)

    def __neg__(self) -> "SurfaceField":
        return self._wrap(-self.coefficients)

    def __mul__(self, a: float) -> "SurfaceField":
        return self._wrap(a * self.coefficients)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class VolumeField:
    """Real scalar on one or both slab halves.

    ``space`` is ``"physical"`` (grid values) or ``"spectral"`` (Fourier
    coefficients horizontally, Chebyshev coefficients vertically).
    """

    grid: SlabGrid
    region: str
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    space: str = "physical"
    flags: tuple = ()

    def __post_init__(self) -> None:
        halves = _halves(self.region)
        for r in REGIONS:
            arr = getattr(self, r)
            if (r in halves) != (arr is not None):
                raise ConfigurationError(
                    f"region {self.region!r} inconsistent with populated half {r!r}"
                )
            if arr is not None and np.shape(arr) != self.grid.shape(r):
                raise ConfigurationError(f"array for {r} half has wrong shape")
        if self.space not in ("physical", "spectral"):
            raise ConfigurationError(f"unknown space {self.space!r}")

    @classmethod
    def from_function(cls, grid: SlabGrid, region: str, fn: Callable) -> "VolumeField":
        arrays = {}
        for r in _halves(region):
            x1, x2, x3 = grid.coordinates(r)
            arrays[r] = np.broadcast_to(fn(x1, x2, x3), grid.shape(r)).astype(float)
        return cls(grid, region, **arrays)

    @classmethod
    def zeros(cls, grid: SlabGrid, region: str) -> "VolumeField":
        return cls(grid, region, **{r: np.zeros(grid.shape(r)) for r in _halves(region)})

    @property
    def halves(self) -> tuple[str, ...]:
        return _halves(self.region)

    def data(self, half: str) -> np.ndarray:
        arr = getattr(self, half)
        if arr is None:
            raise ConfigurationError(f"field has no {half} half")
        return arr

    def physical(self) -> "VolumeField":
        return self if self.space == "physical" else transform(self, "to-physical")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "VolumeField":
        return VolumeField(
            self.grid, self.region, space=self.space,
            **{r: fn(self.data(r)) for r in self.halves},
        )

    def _binary(self, other, op) -> "VolumeField":
        if isinstance(other, VolumeField):
            if other.region != self.region or other.grid != self.grid:
                raise ConfigurationError("fields live on different regions or grids")
            return VolumeField(
                self.grid, self.region, space=self.space,
                **{r: op(self.data(r), other.data(r)) for r in self.halves},
            )
        return self.map(lambda a: op(a, other))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return self.map(np.negative)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Three ``VolumeField`` components on a common grid and region."""

    components: tuple

    def __post_init__(self) -> None:
        if len(self.components) != 3:
            raise ConfigurationError("a vector field has exactly three components")
        g, r = self.components[0].grid, self.components[0].region
        if any(c.grid != g or c.region != r for c in self.components):
            raise ConfigurationError("vector components must share grid and region")

    @property
    def grid(self) -> SlabGrid:
        return self.components[0].grid

    @property
    def region(self) -> str:
        return self.components[0].region

    def __getitem__(self, i: int) -> VolumeField:
        return self.components[i]

    def data(self, half: str) -> np.ndarray:
        """Stacked ``(3, n1, n2, nz)`` array for one half."""
        return np.stack([c.physical().data(half) for c in self.components])

    @classmethod
    def from_arrays(cls, grid: SlabGrid, region: str, **arrays: np.ndarray) -> "VectorField":
        comps = []
        for i in range(3):
            comps.append(VolumeField(grid, region, **{r: np.asarray(a[i], dtype=float)
                                                      for r, a in arrays.items()}))
        return cls(tuple(comps))

    @classmethod
    def from_function(cls, grid: SlabGrid, region: str, fn: Callable) -> "VectorField":
        arrays = {}
        for r in _halves(region):
            x1, x2, x3 = grid.coordinates(r)
            out = fn(x1, x2, x3)
            arrays[r] = np.stack([np.broadcast_to(c, grid.shape(r)) for c in out]).astype(float)
        return cls.from_arrays(grid, region, **arrays)

    @classmethod
    def zeros(cls, grid: SlabGrid, region: str) -> "VectorField":
        return cls(tuple(VolumeField.zeros(grid, region) for _ in range(3)))

    def __add__(self, other: "VectorField") -> "VectorField":
        return VectorField(tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: "VectorField") -> "VectorField":
        return VectorField(tuple(a - b for a, b in zip(self.components, other.components)))

    def __mul__(self, s: float) -> "VectorField":
        return VectorField(tuple(s * a for a in self.components))

    __rmul__ = __mul__

    def __neg__(self) -> "VectorField":
        return VectorField(tuple(-a for a in self.components))


# ---------------------------------------------------------------------------
# raw-array kernels


def hfft(a: np.ndarray) -> np.ndarray:
    """Horizontal Fourier coefficients over the first two (or last-but-one pair of) axes."""
    n1, n2 = a.shape[-3], a.shape[-2]
    return sfft.fft2(a, axes=(-3, -2)) / (n1 * n2)


def ihfft(ah: np.ndarray) -> np.ndarray:
    n1, n2 = ah.shape[-3], ah.shape[-2]
    return np.real(sfft.ifft2(ah, axes=(-3, -2))) * (n1 * n2)


def dz(a: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Apply a vertical matrix along the last axis."""
    return a @ D.T


def deriv(a: np.ndarray, grid: SlabGrid, half: str, axis: int) -> np.ndarray:
    """Spectral partial derivative of physical values ``a`` (shape (..., n1, n2, nz))."""
    if axis == 3:
        return dz(a, grid.D(half))
    t = grid.torus
    k = t.k1[:, :, None] if axis == 1 else t.k2[:, :, None]
    return ihfft(1j * k * hfft(a))


def gradient(a: np.ndarray, grid: SlabGrid, half: str) -> np.ndarray:
    ah = hfft(a)
    t = grid.torus
    return np.stack([
        ihfft(1j * t.k1[:, :, None] * ah),
        ihfft(1j * t.k2[:, :, None] * ah),
        dz(a, grid.D(half)),
    ])


def dealias(a: np.ndarray, torus: TorusGrid) -> np.ndarray:
    """Two-thirds truncation of horizontal modes."""
    mask = torus.dealias_mask[:, :, None] if a.ndim >= 3 else torus.dealias_mask
    if a.ndim == 2:
        return np.real(sfft.ifft2(sfft.fft2(a) * mask))
    return ihfft(hfft(a) * mask)


def integrate(a: np.ndarray, grid: SlabGrid, half: str) -> np.ndarray:
    """Volume integral of ``a`` over one half (leading axes are kept)."""
    return np.mean(a, axis=(-3, -2)) @ grid.weights(half)


def surface_integral(a: np.ndarray) -> float:
    return float(np.mean(a))


# ---------------------------------------------------------------------------
# public operations


def transform(field, direction: str):
    """Switch a field between physical values and spectral coefficients."""
    if direction not in ("to-spectral", "to-physical"):
        raise ConfigurationError(f"unknown direction {direction!r}")
    if isinstance(field, SurfaceField):
        if direction == "to-physical":
            return field.values
        return field
    if not isinstance(field, VolumeField):
        raise ConfigurationError("transform expects a SurfaceField or VolumeField")
    target = "spectral" if direction == "to-spectral" else "physical"
    if field.space == target:
        return field
    out = {}
    for r in field.halves:
        a = field.data(r)
        if any(s != t for s, t in zip(a.shape, field.grid.shape(r))):
            raise ConfigurationError("array shape does not match grid")
        if target == "spectral":
            out[r] = _cheb_forward(hfft(a))
        else:
            out[r] = ihfft(_cheb_backward(a))
    return VolumeField(field.grid, field.region, space=target, **out)


def _cheb_forward(v: np.ndarray) -> np.ndarray:
    """Chebyshev coefficients (local variable) from ascending-node values."""
    n = v.shape[-1]
    N = n - 1
    c = dct(v[..., ::-1], type=1, axis=-1) / N
    c[..., 0] /= 2.0
    c[..., N] /= 2.0
    return c


def _cheb_backward(c: np.ndarray) -> np.ndarray:
    n = c.shape[-1]
    x = chebyshev_points(n)
    V = cheb.chebvander(x, n - 1)
    return c @ V.T


def differentiate(field, axis: str, order: int = 1):
    """Spectral derivative of a surface or volume field.

    Horizontal axes multiply by ``(2 pi i xi)^order``. The vertical axis uses
    the Chebyshev coefficient recurrence on spectral input and the equivalent
    collocation matrix on physical input.
    """
    if order < 1:
        raise ConfigurationError("derivative order must be >= 1")
    ax = {"x1": 1, "x2": 2, "x3": 3}.get(axis)
    if ax is None:
        raise ConfigurationError(f"unknown axis {axis!r}")
    if isinstance(field, SurfaceField):
        if ax == 3:
            raise ConfigurationError("surface fields have no vertical direction")
        t = field.grid
        sym = t.symbol(order, 0) if ax == 1 else t.symbol(0, order)
        flags = ("under-resolved",) if _tail_energy(field.coefficients, t) else ()
        return SurfaceField(t, sym * field.coefficients, flags=flags)

    grid = field.grid
    t = grid.torus
    flags = []
    out = {}
    for r in field.halves:
        a = field.data(r)
        n = grid.nz(r)
        if ax == 3:
            if order > n - 2:
                flags.append("under-resolved")
            if field.space == "spectral":
                out[r] = _pad_last(cheb.chebder(a, m=order, scl=2.0, axis=-1), n)
            else:
                Dm = np.linalg.matrix_power(grid.D(r), order)
                out[r] = dz(a, Dm)
        else:
            sym = t.symbol(order, 0) if ax == 1 else t.symbol(0, order)
            ah = a if field.space == "spectral" else hfft(a)
            if _tail_energy(ah, t):
                flags.append("under-resolved")
            dh = sym[:, :, None] * ah
            out[r] = dh if field.space == "spectral" else ihfft(dh)
    return VolumeField(grid, field.region, space=field.space,
                       flags=tuple(sorted(set(flags))), **out)


def _pad_last(a: np.ndarray, n: int) -> np.ndarray:
    pad = n - a.shape[-1]
    if pad <= 0:
        return a
    width = [(0, 0)] * (a.ndim - 1) + [(0, pad)]
    return np.pad(a, width)


def _tail_energy(ah: np.ndarray, t: TorusGrid, threshold: float = 1e-20) -> bool:
    """True when the modes removed by dealiasing carry non-negligible energy."""
    mask = t.dealias_mask if ah.ndim == 2 else t.dealias_mask[:, :, None]
    total = np.sum(np.abs(ah) ** 2)
    if total == 0:
        return False
    return bool(np.sum(np.abs(ah * ~mask) ** 2) > threshold * total)


def sobolev_norm_surface(f: SurfaceField, s: float) -> float:
    """|f|_s = (sum (1+|2 pi xi|^2)^s |f_hat|^2)^(1/2)."""
    w = (1.0 + f.grid.ksq) ** s
    return float(np.sqrt(np.sum(w * np.abs(f.coefficients) ** 2)))


def volume_sobolev_norm(f: VolumeField, m: int) -> float:
    """H^m norm from every mixed partial of total order <= m, by quadrature."""
    return float(np.sqrt(_hm_squared(f.physical(), m)))


def _hm_squared(f: VolumeField, m: int) -> float:
    grid = f.grid
    total = 0.0
    for r in f.halves:
        ah = hfft(f.data(r))
        for a1, a2, a3 in _multi_indices(m):
            g = grid.torus.symbol(a1, a2)[:, :, None] * ah
            if a3:
                g = dz(g, np.linalg.matrix_power(grid.D(r), a3))
            total += float(integrate(np.abs(ihfft(g)) ** 2, grid, r))
    return total


def _multi_indices(m: int):
    for a1, a2, a3 in itertools.product(range(m + 1), repeat=3):
        if a1 + a2 + a3 <= m:
            yield a1, a2, a3


def anisotropic_norm(f: VolumeField, m: int, ell: int) -> float:
    """Sum over horizontal multi-indices |alpha| <= ell of ||d^alpha f||_m."""
    if m < 0 or ell < 0:
        raise ConfigurationError("norm orders must be non-negative")
    f = f.physical()
    total = 0.0
    for a1 in range(ell + 1):
        for a2 in range(ell + 1 - a1):
            g = f
            if a1:
                g = differentiate(g, "x1", a1)
            if a2:
                g = differentiate(g, "x2", a2)
            total += volume_sobolev_norm(g, m)
    return total


def l2_squared(a: np.ndarray, grid: SlabGrid, half: str, weight: Optional[np.ndarray] = None) -> float:
    """Integral of |a|^2 (summed over any leading component axis)."""
    sq = a**2 if a.ndim == 3 else np.sum(a**2, axis=0)
    if weight is not None:
        sq = sq * weight
    return float(integrate(sq, grid, half))


def random_band_limited(
    grid: TorusGrid,
    rng: np.random.Generator,
    max_mode: int = 2,
    decay: float = 1.0,
    size: Sequence[int] = (),
) -> np.ndarray:
    """Physical values of a random real field supported on |xi_i| <= max_mode."""
    shape = tuple(size) + grid.shape
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    xi1 = np.broadcast_to(grid.xi1, grid.shape)
    xi2 = np.broadcast_to(grid.xi2, grid.shape)
    keep = (np.abs(xi1) <= max_mode) & (np.abs(xi2) <= max_mode)
    keep &= (np.abs(xi1) < grid.n1 // 2) & (np.abs(xi2) < grid.n2 // 2)
    c = c * keep / (1.0 + xi1**2 + xi2**2) ** decay
    return np.real(np.fft.ifft2(c, axes=(-2, -1))) * np.sqrt(grid.n1 * grid.n2)
