"""Div-curl (Hodge-type) elliptic solvers on the flattened slab.

Every solve reduces, per horizontal Fourier mode, to a small dense
collocation problem in x3. For the flat interface the vector problem

    curl v = f1,  div v = f2,  v x e3 = f3 on one end,  v3 = f4 on the other

is solved through its second-order form v'' - |k|^2 v = grad f2 - curl f1
with first-order boundary rows, which reproduces the first-order collocation
solution exactly. A curved interface is handled by moving all eta-dependent
terms to the right-hand side and iterating flat solves to a fixed point.

The three-stage construction (normal/normal field, stream function of the
tangential defect, harmonic gradient correction) is available as
``method="staged"``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Metric, build_metric
from .spectral import (
    REGIONS,
    ConfigurationError,
    SlabGrid,
    SurfaceField,
    VectorField,
    VolumeField,
    dz,
    hfft,
    ihfft,
)

COMPAT_TOL = 1e-8


class CompatibilityError(ValueError):
    """Input data violate a structural compatibility condition."""


class ConvergenceError(RuntimeError):
    """The curved-interface fixed point did not converge."""


class StageError(RuntimeError):
    """The auxiliary first stage of the mixed problem failed."""


@dataclass(frozen=True)
class HodgeData:
    """Data for curl v = f1, div v = f2, v x N = f3 on one end, v . N = f4 on the other.

    ``tangential`` names the end ("bottom" or "top") carrying f3; the other
    end carries f4. f3 is a triple of surface fields (its third component only
    enters the compatibility check). Missing boundary data mean zero.
    """

    f1: VectorField
    f2: VolumeField
    f3: Optional[Sequence[SurfaceField]] = None
    f4: Optional[SurfaceField] = None
    tangential: str = "bottom"

    def __post_init__(self) -> None:
        if self.tangential not in ("bottom", "top"):
            raise ConfigurationError("tangential end must be 'bottom' or 'top'")
        if self.f1.region != self.f2.region or self.f1.grid != self.f2.grid:
            raise ConfigurationError("f1 and f2 must share grid and region")

    @property
    def grid(self) -> SlabGrid:
        return self.f1.grid

    @property
    def region(self) -> str:
        return self.f1.region


# ---------------------------------------------------------------------------
# per-mode collocation machinery


def _halves(region: str) -> tuple[str, ...]:
    return REGIONS if region == "both" else (region,)


def _curved_end(halves: tuple[str, ...], end: str) -> bool:
    """Whether the given end of the stack is the interface x3 = 0."""
    if len(halves) == 2:
        return False
    return (halves[0] == "lower" and end == "top") or (halves[0] == "upper" and end == "bottom")


class ModeStack:
    """Vertical patches stacked bottom to top, with mode bookkeeping.

    Only modes strictly below Nyquist in both directions are solved for;
    the rest are returned as zero.
    """

    def __init__(self, grid: SlabGrid, halves: tuple[str, ...]):
        self.grid = grid
        self.halves = halves
        self.sizes = [grid.nz(h) for h in halves]
        self.N = sum(self.sizes)
        self.starts = np.cumsum([0] + self.sizes[:-1])
        D = np.zeros((self.N, self.N))
        for s, n, h in zip(self.starts, self.sizes, halves):
            D[s:s + n, s:s + n] = grid.D(h)
        self.D = D
        self.D2 = D @ D
        t = grid.torus
        xi1 = np.broadcast_to(t.xi1, t.shape)
        xi2 = np.broadcast_to(t.xi2, t.shape)
        self.active = (np.abs(xi1) < t.n1 // 2) & (np.abs(xi2) < t.n2 // 2)
        self.k1 = np.broadcast_to(t.k1, t.shape)[self.active]
        self.k2 = np.broadcast_to(t.k2, t.shape)[self.active]
        self.ksq = self.k1**2 + self.k2**2
        self.M = int(self.active.sum())
        self.interfaces = [(s - 1, s) for s in self.starts[1:]]

    # spectral packing -----------------------------------------------------
    def pack(self, arrays: dict) -> np.ndarray:
        """Physical arrays per half, shape (..., n1, n2, nz) -> active coefficients (..., M, N)."""
        parts = [hfft(arrays[h])[..., self.active, :] for h in self.halves]
        return np.concatenate(parts, axis=-1)

    def pack_surface(self, values: np.ndarray) -> np.ndarray:
        t = self.grid.torus
        return (np.fft.fft2(values, axes=(-2, -1)) / (t.n1 * t.n2))[..., self.active]

    def unpack(self, coeffs: np.ndarray) -> dict:
        t = self.grid.torus
        out = {}
        for s, n, h in zip(self.starts, self.sizes, self.halves):
            full = np.zeros(coeffs.shape[:-2] + t.shape + (n,), dtype=complex)
            full[..., self.active, :] = coeffs[..., s:s + n]
            out[h] = ihfft(full)
        return out

    def ddz(self, c: np.ndarray) -> np.ndarray:
        return c @ self.D.T

    def end_index(self, end: str) -> int:
        return 0 if end == "bottom" else self.N - 1


class VectorSystem:
    """Batched dense per-mode solver for the flat div-curl problem on a stack."""

    def __init__(self, grid: SlabGrid, region: str, tangential: str):
        self.stack = st = ModeStack(grid, _halves(region))
        self.region = region
        self.tangential = tangential
        self.normal = "top" if tangential == "bottom" else "bottom"
        N, M = st.N, st.M
        A = np.zeros((M, 3 * N, 3 * N), dtype=complex)
        eye = np.eye(N)
        for c in range(3):
            A[:, c * N:(c + 1) * N, c * N:(c + 1) * N] = st.D2[None] - st.ksq[:, None, None] * eye[None]
        iK = (1j * st.k1, 1j * st.k2)

        def put(c, g, row):
            A[:, c * N + g, :] = row

        def unit(c, g):
            r = np.zeros((M, 3 * N), dtype=complex)
            r[:, c * N + g] = 1.0
            return r

        def crow(i, g):
            # (D v_i - iK_i v3) at node g
            r = np.zeros((M, 3 * N), dtype=complex)
            r[:, i * N:(i + 1) * N] = st.D[g]
            r[:, 2 * N + g] -= iK[i]
            return r

        def divrow(g):
            r = np.zeros((M, 3 * N), dtype=complex)
            r[:, g] = iK[0]
            r[:, N + g] = iK[1]
            r[:, 2 * N:] += st.D[g]
            return r

        gt = st.end_index(tangential)
        put(0, gt, unit(0, gt))
        put(1, gt, unit(1, gt))
        put(2, gt, divrow(gt))
        gn = st.end_index(self.normal)
        put(0, gn, crow(0, gn))
        put(1, gn, crow(1, gn))
        put(2, gn, unit(2, gn))
        for gl, gu in st.interfaces:
            for c in range(3):
                put(c, gl, unit(c, gu) - unit(c, gl))
            put(0, gu, crow(0, gu) - crow(0, gl))
            put(1, gu, crow(1, gu) - crow(1, gl))
            put(2, gu, divrow(gu) - divrow(gl))
        self.inv = np.linalg.inv(A)

    def solve(self, f1: dict, f2: dict, tang: Optional[tuple] = None, norm: Optional[np.ndarray] = None) -> dict:
        """Physical data per half in, physical solution (3, n1, n2, nz) per half out.

        ``tang`` = (t1, t2) are the first two components of v x e3 at the
        tangential end; ``norm`` is v3 at the normal end.
        """
        st = self.stack
        N = st.N
        F1 = st.pack(f1)
        F2 = st.pack(f2)
        dF1 = st.ddz(F1)
        dF2 = st.ddz(F2)
        i1, i2 = 1j * st.k1[:, None], 1j * st.k2[:, None]
        g = np.stack([
            i1 * F2 - (i2 * F1[2] - dF1[1]),
            i2 * F2 - (dF1[0] - i1 * F1[2]),
            dF2 - (i1 * F1[1] - i2 * F1[0]),
        ])
        rhs = g.copy()
        gt = st.end_index(self.tangential)
        if tang is not None:
            t1 = st.pack_surface(tang[0])
            t2 = st.pack_surface(tang[1])
            rhs[0, :, gt] = -t2
            rhs[1, :, gt] = t1
        else:
            rhs[0, :, gt] = 0.0
            rhs[1, :, gt] = 0.0
        rhs[2, :, gt] = F2[:, gt]
        gn = st.end_index(self.normal)
        rhs[0, :, gn] = F1[1, :, gn]
        rhs[1, :, gn] = -F1[0, :, gn]
        rhs[2, :, gn] = 0.0 if norm is None else st.pack_surface(norm)
        for gl, gu in st.interfaces:
            rhs[:, :, gl] = 0.0
            rhs[0, :, gu] = F1[1, :, gu] - F1[1, :, gl]
            rhs[1, :, gu] = -(F1[0, :, gu] - F1[0, :, gl])
            rhs[2, :, gu] = F2[:, gu] - F2[:, gl]
        b = np.concatenate([rhs[0], rhs[1], rhs[2]], axis=-1)
        x = np.einsum("mij,mj->mi", self.inv, b)
        coeffs = np.stack([x[:, :N], x[:, N:2 * N], x[:, 2 * N:]])
        return st.unpack(coeffs)


class ScalarSystem:
    """Per-mode solver for phi'' - |k|^2 phi = r with Dirichlet/Neumann ends.

    ``bottom`` and ``top`` are "dirichlet" or "neumann"; at patch interfaces
    phi and d3 phi are continuous up to the supplied jump of d3 phi.
    """

    def __init__(self, grid: SlabGrid, region: str, bottom: str, top: str):
        self.stack = st = ModeStack(grid, _halves(region))
        self.kinds = {"bottom": bottom, "top": top}
        N, M = st.N, st.M
        A = np.broadcast_to(st.D2, (M, N, N)) - st.ksq[:, None, None] * np.eye(N)[None]
        A = A.astype(complex)
        for end, kind in self.kinds.items():
            g = st.end_index(end)
            A[:, g, :] = 0.0
            if kind == "dirichlet":
                A[:, g, g] = 1.0
            elif kind == "neumann":
                A[:, g, :] = st.D[g]
            else:
                raise ConfigurationError(f"unknown boundary kind {kind!r}")
        for gl, gu in st.interfaces:
            A[:, gl, :] = 0.0
            A[:, gl, gu] = 1.0
            A[:, gl, gl] = -1.0
            A[:, gu, :] = st.D[gu] - st.D[gl]
        zero = st.ksq == 0
        if zero.any() and bottom == top == "neumann":
            raise ConfigurationError("pure Neumann problem is singular on the zero mode")
        self.inv = np.linalg.inv(A)

    def solve_coeffs(self, r: np.ndarray, bottom: np.ndarray, top: np.ndarray) -> np.ndarray:
        st = self.stack
        rhs = r.astype(complex).copy()
        rhs[..., 0] = bottom
        rhs[..., st.N - 1] = top
        for gl, gu in st.interfaces:
            rhs[..., gl] = 0.0
            rhs[..., gu] = 0.0
        return np.einsum("mij,...mj->...mi", self.inv, rhs)

    def solve(self, r: dict, bottom: Optional[np.ndarray] = None, top: Optional[np.ndarray] = None) -> dict:
        st = self.stack
        R = st.pack(r)
        zeros = np.zeros(R.shape[:-1], dtype=complex)
        b = zeros if bottom is None else st.pack_surface(bottom)
        t = zeros if top is None else st.pack_surface(top)
        return st.unpack(self.solve_coeffs(R, b, t))


# ---------------------------------------------------------------------------
# curved-interface fixed point


_SYSTEM_CACHE: dict = {}


def vector_system(grid: SlabGrid, region: str, tangential: str) -> VectorSystem:
    key = ("vec", grid, region, tangential)
    if key not in _SYSTEM_CACHE:
        _SYSTEM_CACHE[key] = VectorSystem(grid, region, tangential)
    return _SYSTEM_CACHE[key]


def scalar_system(grid: SlabGrid, region: str, bottom: str, top: str) -> ScalarSystem:
    key = ("sca", grid, region, bottom, top)
    if key not in _SYSTEM_CACHE:
        _SYSTEM_CACHE[key] = ScalarSystem(grid, region, bottom, top)
    return _SYSTEM_CACHE[key]


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])


def _interface_slope(metric: Metric) -> tuple[np.ndarray, np.ndarray]:
    g = metric.gbar["lower"]
    return g[0][..., -1], g[1][..., -1]


def _end_trace(v: dict, halves: tuple[str, ...], end: str) -> np.ndarray:
    return v[halves[0]][..., 0] if end == "bottom" else v[halves[-1]][..., -1]


def _fixed_point(solve, v0: dict, update, tol: float, max_sweeps: int, report: Optional[dict]):
    """Iterate v <- solve(update(v)) until the relative change drops below tol."""
    v = v0
    history = []
    for _ in range(max_sweeps):
        v_new = solve(*update(v))
        num = max(float(np.max(np.abs(v_new[h] - v[h]))) for h in v)
        den = max(max(float(np.max(np.abs(v_new[h]))) for h in v_new), 1e-300)
        history.append(num / den)
        v = v_new
        if history[-1] < tol:
            break
    else:
        if report is not None:
            report["history"] = history
        raise ConvergenceError(f"curved-interface iteration stalled at relative change {history[-1]:.3e}")
    if report is not None:
        report["history"] = history
        report["sweeps"] = len(history)
        ratios = [b / a for a, b in zip(history, history[1:]) if a > 0]
        report["contraction"] = max(ratios) if ratios else 0.0
    return v


def _solve_vector(
    grid: SlabGrid,
    region: str,
    tangential: str,
    f1: dict,
    f2: dict,
    tang: Optional[tuple],
    norm: Optional[np.ndarray],
    metric: Metric,
    method: str,
    tol: float,
    max_sweeps: int,
    report: Optional[dict],
) -> dict:
    halves = _halves(region)
    if method == "direct":
        sys = vector_system(grid, region, tangential)
        flat = sys.solve
    elif method == "staged":
        flat = lambda a, b, t, n: _staged_flat(grid, region, tangential, a, b, t, n)
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    v = flat(f1, f2, tang, norm)
    if metric.flat:
        if report is not None:
            report.update(history=[], sweeps=0, contraction=0.0)
        return v
    normal = "top" if tangential == "bottom" else "bottom"
    e1, e2 = _interface_slope(metric)
    t1 = np.zeros(grid.torus.shape) if tang is None else tang[0]
    t2 = np.zeros(grid.torus.shape) if tang is None else tang[1]
    nv = np.zeros(grid.torus.shape) if norm is None else norm

    def update(v):
        p1, p2 = {}, {}
        for h in halves:
            s = dz(v[h], grid.D(h)) / metric.j(h)
            g = metric.gbar[h]
            p1[h] = f1[h] + _cross(g, s)
            p2[h] = f2[h] + np.sum(g * s, axis=0)
        tg, nm = tang, norm
        if _curved_end(halves, tangential):
            w = _end_trace(v, halves, tangential)
            # v x (e3 - N) with e3 - N = (eta_1, eta_2, 0)
            tg = (t1 - w[2] * e2, t2 + w[2] * e1)
        if _curved_end(halves, normal):
            w = _end_trace(v, halves, normal)
            nm = nv + w[0] * e1 + w[1] * e2
        return p1, p2, tg, nm

    return _fixed_point(flat, v, update, tol, max_sweeps, report)


# ---------------------------------------------------------------------------
# three-stage construction (flat)


def _staged_flat(grid, region, tangential, f1, f2, tang, norm) -> dict:
    """Normal/normal field, then the stream function of the tangential defect,
    then a harmonic gradient carrying that defect."""
    st = ModeStack(grid, _halves(region))
    halves = st.halves
    normal = "top" if tangential == "bottom" else "bottom"
    t = grid.torus
    # stage 1: normal data at both ends; the flux constant keeps div consistent
    from .spectral import integrate

    flux = sum(float(np.mean(integrate(f2[h], grid, h))) for h in halves)
    norm_mean = 0.0 if norm is None else float(np.mean(norm))
    c = norm_mean - flux if tangential == "bottom" else norm_mean + flux
    vt = _normal_normal(grid, region, tangential, f1, f2, c, norm, tang)
    # stage 2: tangential defect and its stream function
    w = _end_trace(vt, halves, tangential)
    t1 = np.zeros(t.shape) if tang is None else tang[0]
    t2 = np.zeros(t.shape) if tang is None else tang[1]
    d1 = st.pack_surface(t1 - w[1])
    d2 = st.pack_surface(t2 + w[0])
    psi = np.zeros_like(d1)
    nz = st.ksq > 0
    psi[nz] = (-1j * st.k2[nz] * d1[nz] + 1j * st.k1[nz] * d2[nz]) / st.ksq[nz]
    # stage 3: harmonic phi = psi on the tangential end, d3 phi = 0 on the other
    kinds = {tangential: "dirichlet", normal: "neumann"}
    ss = scalar_system(grid, region, kinds["bottom"], kinds["top"])
    zero = np.zeros_like(psi)
    bot, top = (psi, zero) if tangential == "bottom" else (zero, psi)
    phi = ss.solve_coeffs(np.zeros((st.M, st.N)), bot, top)
    grad = np.stack([1j * st.k1[:, None] * phi, 1j * st.k2[:, None] * phi, st.ddz(phi)])
    corr = st.unpack(grad)
    return {h: vt[h] + corr[h] for h in halves}


def _normal_normal(grid, region, tangential, f1, f2, c, norm, tang) -> dict:
    """curl v = f1, div v = f2, v3 given on both ends (constant c on the tangential end)."""
    key = ("nn", grid, region, tangential)
    if key not in _SYSTEM_CACHE:
        _SYSTEM_CACHE[key] = _NormalNormal(grid, region, tangential)
    return _SYSTEM_CACHE[key].solve(f1, f2, c, norm, tang)


class _NormalNormal(VectorSystem):
    def __init__(self, grid, region, tangential):
        self.stack = st = ModeStack(grid, _halves(region))
        self.tangential = tangential
        self.normal = "top" if tangential == "bottom" else "bottom"
        N, M = st.N, st.M
        A = np.zeros((M, 3 * N, 3 * N), dtype=complex)
        eye = np.eye(N)
        for cc in range(3):
            A[:, cc * N:(cc + 1) * N, cc * N:(cc + 1) * N] = st.D2[None] - st.ksq[:, None, None] * eye[None]
        iK = (1j * st.k1, 1j * st.k2)
        zero = st.ksq == 0

        def unit(cc, g):
            r = np.zeros((M, 3 * N), dtype=complex)
            r[:, cc * N + g] = 1.0
            return r

        def crow(i, g):
            r = np.zeros((M, 3 * N), dtype=complex)
            r[:, i * N:(i + 1) * N] = st.D[g]
            r[:, 2 * N + g] -= iK[i]
            return r

        def divrow(g):
            r = np.zeros((M, 3 * N), dtype=complex)
            r[:, g] = iK[0]
            r[:, N + g] = iK[1]
            r[:, 2 * N:] += st.D[g]
            return r

        for end in ("bottom", "top"):
            g = st.end_index(end)
            A[:, 2 * N + g] = unit(2, g)
            for i in range(2):
                row = crow(i, g)
                if end == tangential:
                    # the horizontal mean is pinned by the tangential data
                    row[zero] = unit(i, g)[zero]
                A[:, i * N + g] = row
        for gl, gu in st.interfaces:
            for cc in range(3):
                A[:, cc * N + gl] = unit(cc, gu) - unit(cc, gl)
            A[:, gu] = crow(0, gu) - crow(0, gl)
            A[:, N + gu] = crow(1, gu) - crow(1, gl)
            A[:, 2 * N + gu] = divrow(gu) - divrow(gl)
        self.inv = np.linalg.inv(A)

    def solve(self, f1, f2, c, norm, tang):
        st = self.stack
        N = st.N
        F1 = st.pack(f1)
        F2 = st.pack(f2)
        dF1 = st.ddz(F1)
        dF2 = st.ddz(F2)
        i1, i2 = 1j * st.k1[:, None], 1j * st.k2[:, None]
        rhs = np.stack([
            i1 * F2 - (i2 * F1[2] - dF1[1]),
            i2 * F2 - (dF1[0] - i1 * F1[2]),
            dF2 - (i1 * F1[1] - i2 * F1[0]),
        ])
        zero = st.ksq == 0
        for end in ("bottom", "top"):
            g = st.end_index(end)
            rhs[0, :, g] = F1[1, :, g]
            rhs[1, :, g] = -F1[0, :, g]
            if end == self.tangential:
                rhs[2, :, g] = np.where(zero, c, 0.0)
                if tang is not None:
                    rhs[0, zero, g] = -st.pack_surface(tang[1])[zero]
                    rhs[1, zero, g] = st.pack_surface(tang[0])[zero]
                else:
                    rhs[0, zero, g] = 0.0
                    rhs[1, zero, g] = 0.0
            else:
                rhs[2, :, g] = 0.0 if norm is None else st.pack_surface(norm)
        for gl, gu in st.interfaces:
            rhs[:, :, gl] = 0.0
            rhs[0, :, gu] = F1[1, :, gu] - F1[1, :, gl]
            rhs[1, :, gu] = -(F1[0, :, gu] - F1[0, :, gl])
            rhs[2, :, gu] = F2[:, gu] - F2[:, gl]
        b = np.concatenate([rhs[0], rhs[1], rhs[2]], axis=-1)
        x = np.einsum("mij,mj->mi", self.inv, b)
        return st.unpack(np.stack([x[:, :N], x[:, N:2 * N], x[:, 2 * N:]]))


# ---------------------------------------------------------------------------
# compatibility checks


def _check(name: str, residual: float, scale: float) -> None:
    if residual > COMPAT_TOL * max(1.0, scale):
        raise CompatibilityError(f"{name} violated (residual {residual:.3e})")


def _maxabs(a) -> float:
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def _surface_div(t1: np.ndarray, t2: np.ndarray, torus) -> np.ndarray:
    c1 = np.fft.fft2(t1)
    c2 = np.fft.fft2(t2)
    return np.real(np.fft.ifft2(1j * torus.k1 * c1 + 1j * torus.k2 * c2))


def _check_div_free(name: str, f1: dict, metric: Metric) -> None:
    for h, a in f1.items():
        _check(f"{name}: div f1 = 0 in the {h} half", _maxabs(metric.div(a, h)), _maxabs(a))


def _normal_dot(w: np.ndarray, e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    return -e1 * w[0] - e2 * w[1] + w[2]


def _check_tangential(name: str, f1_trace: np.ndarray, f3: Sequence[np.ndarray], e1, e2, torus) -> None:
    scale = max(_maxabs(f1_trace), max(_maxabs(c) for c in f3))
    _check(f"{name}: f3 . N = 0", _maxabs(_normal_dot(np.stack(f3), e1, e2)), scale)
    # f3 holds v x N, whose horizontal part (v2 + eta_2 v3, -v1 - eta_1 v3) has divergence (curl v) . N
    _check(f"{name}: f1 . N = div_h f3_h", _maxabs(_normal_dot(f1_trace, e1, e2) - _surface_div(f3[0], f3[1], torus)), scale)


# ---------------------------------------------------------------------------
# public solvers


def _get_metric(grid: SlabGrid, eta: Optional[SurfaceField], metric: Optional[Metric]) -> Metric:
    if metric is not None:
        if metric.grid != grid:
            raise ConfigurationError("metric built on a different grid")
        return metric
    if eta is None:
        eta = SurfaceField.zeros(grid.torus)
    return build_metric(eta, grid=grid)


def _raw(f, halves) -> dict:
    if isinstance(f, VectorField):
        return {h: f.data(h) for h in halves}
    return {h: f.physical().data(h) for h in halves}


def _as_vector(grid: SlabGrid, region: str, v: dict) -> VectorField:
    return VectorField(tuple(VolumeField(grid, region, **{h: v[h][i] for h in v}) for i in range(3)))


def solve_one_phase(
    data: HodgeData,
    eta: Optional[SurfaceField] = None,
    *,
    metric: Optional[Metric] = None,
    method: str = "direct",
    tol: float = 1e-10,
    max_sweeps: int = 50,
    report: Optional[dict] = None,
) -> VectorField:
    """curl^phi v = f1, div^phi v = f2, v x N = f3 (tangential end), v . N = f4 (other end)."""
    grid, region = data.grid, data.region
    halves = _halves(region)
    metric = _get_metric(grid, eta, metric)
    f1 = _raw(data.f1, halves)
    f2 = _raw(data.f2, halves)
    t = grid.torus
    zeros = np.zeros(t.shape)
    f3 = [zeros, zeros, zeros] if data.f3 is None else [s.values for s in data.f3]
    f4 = None if data.f4 is None else data.f4.values
    _check_div_free("one-phase", f1, metric)
    curved = _curved_end(halves, data.tangential)
    e1, e2 = _interface_slope(metric) if curved else (zeros, zeros)
    _check_tangential("one-phase", _end_trace(f1, halves, data.tangential), f3, e1, e2, t)
    v = _solve_vector(grid, region, data.tangential, f1, f2, (f3[0], f3[1]), f4, metric, method, tol, max_sweeps, report)
    return _as_vector(grid, region, v)


def solve_two_phase(
    f1: VectorField,
    f2: VolumeField,
    f1_hat: VectorField,
    f2_hat: VolumeField,
    eta: Optional[SurfaceField] = None,
    *,
    metric: Optional[Metric] = None,
    method: str = "direct",
    tol: float = 1e-10,
    max_sweeps: int = 50,
    report: Optional[dict] = None,
) -> tuple[VectorField, VectorField]:
    """Plasma/vacuum pair with matched traces, v3 = 0 below and v_hat x e3 = 0 on top."""
    grid = f1.grid
    if f1.region != "lower" or f1_hat.region != "upper":
        raise ConfigurationError("two-phase data live on the lower and upper halves")
    metric = _get_metric(grid, eta, metric)
    F1 = {"lower": f1.data("lower"), "upper": f1_hat.data("upper")}
    F2 = {"lower": f2.physical().data("lower"), "upper": f2_hat.physical().data("upper")}
    _check_div_free("two-phase", F1, metric)
    e1, e2 = _interface_slope(metric)
    scale = max(_maxabs(F1["lower"]), _maxabs(F1["upper"]))
    jump = F1["upper"][..., 0] - F1["lower"][..., -1]
    _check("two-phase: [f1] . N = 0 on the interface", _maxabs(_normal_dot(jump, e1, e2)), scale)
    _check("two-phase: f1_hat . e3 = 0 on the top wall", _maxabs(F1["upper"][2][..., -1]), scale)
    v = _solve_vector(grid, "both", "top", F1, F2, None, None, metric, method, tol, max_sweeps, report)
    return _as_vector(grid, "lower", {"lower": v["lower"]}), _as_vector(grid, "upper", {"upper": v["upper"]})


def solve_mixed_phase(
    f1: VectorField,
    f2: VolumeField,
    f1_hat: VectorField,
    f2_hat: VolumeField,
    f3: Optional[Sequence[SurfaceField]] = None,
    eta: Optional[SurfaceField] = None,
    *,
    metric: Optional[Metric] = None,
    method: str = "direct",
    tol: float = 1e-10,
    max_sweeps: int = 50,
    report: Optional[dict] = None,
) -> tuple[VectorField, VectorField]:
    """curl^phi curl^phi v = f1 below, with curl^phi v x e3 = f3 on the bottom wall.

    Built in two stages: w = curl^phi v from a one-phase problem on the lower
    half, then the two-phase problem with curl datum w.
    """
    grid = f1.grid
    metric = _get_metric(grid, eta, metric)
    t = grid.torus
    zeros = np.zeros(t.shape)
    f3v = [zeros, zeros, zeros] if f3 is None else [s.values for s in f3]
    F1 = {"lower": f1.data("lower")}
    _check_div_free("mixed-phase", F1, metric)
    _check_div_free("mixed-phase", {"upper": f1_hat.data("upper")}, metric)
    _check_tangential("mixed-phase (bottom wall)", F1["lower"][..., 0], f3v, zeros, zeros, t)
    top_hat = f1_hat.data("upper")[2][..., -1]
    _check("mixed-phase: f1_hat . e3 = 0 on the top wall", _maxabs(top_hat), _maxabs(f1_hat.data("upper")))
    e1, e2 = _interface_slope(metric)
    # stage 1: curl w = f1, div w = 0, w x e3 = f3 on the bottom wall, w . N = f1_hat . N on the interface
    hat_n = _normal_dot(f1_hat.data("upper")[..., 0], e1, e2)
    stage_report: dict = {}
    try:
        w = _solve_vector(
            grid, "lower", "bottom", F1, {"lower": np.zeros(grid.shape("lower"))},
            (f3v[0], f3v[1]), hat_n, metric, method, tol, max_sweeps, stage_report,
        )
    except (ConvergenceError, np.linalg.LinAlgError) as exc:
        raise StageError(f"auxiliary curl field failed: {exc}") from exc
    if report is not None:
        report["stage1"] = stage_report
        report["w"] = _as_vector(grid, "lower", w)
    wf = _as_vector(grid, "lower", w)
    return solve_two_phase(wf, f2, f1_hat, f2_hat, metric=metric, method=method, tol=tol, max_sweeps=max_sweeps, report=report)


# ---------------------------------------------------------------------------
# scalar problems and the vacuum fields


def solve_scalar(
    grid: SlabGrid,
    region: str,
    rhs: dict,
    bottom: tuple[str, Optional[np.ndarray]],
    top: tuple[str, Optional[np.ndarray]],
    metric: Metric,
    *,
    tol: float = 1e-12,
    max_sweeps: int = 60,
    report: Optional[dict] = None,
) -> dict:
    """Delta^phi p = rhs with Dirichlet (p) or Neumann (grad^phi p . N) data at the ends."""
    halves = _halves(region)
    ss = scalar_system(grid, region, bottom[0], top[0])
    p = ss.solve(rhs, bottom[1], top[1])
    if metric.flat:
        return p
    zeros = np.zeros(grid.torus.shape)
    e1, e2 = _interface_slope(metric)

    def update(p):
        r = {}
        for h in halves:
            flat_lap = dz(dz(p[h], grid.D(h)), grid.D(h)) - ihfft(grid.torus.ksq[:, :, None] * hfft(p[h]))
            r[h] = rhs[h] - (metric.laplacian(p[h], h) - flat_lap)
        bt = []
        for end, (kind, val) in (("bottom", bottom), ("top", top)):
            val = zeros if val is None else val
            if kind == "neumann" and _curved_end(halves, end):
                h = halves[0]
                at = 0 if end == "bottom" else -1
                gp = metric.grad(p[h], h)[..., at]
                flat_d3 = dz(p[h], grid.D(h))[..., at]
                val = val - (_normal_dot(gp, e1, e2) - flat_d3)
            bt.append(val)
        return r, bt[0], bt[1]

    return _fixed_point(ss.solve, p, update, tol, max_sweeps, report)


def vacuum_potential(bn: SurfaceField, eta: Optional[SurfaceField] = None, *, grid: Optional[SlabGrid] = None,
                     metric: Optional[Metric] = None, report: Optional[dict] = None) -> VolumeField:
    """Harmonic potential above the interface with grad^phi p . N = bn on it and p = 0 on top."""
    grid = grid or (metric.grid if metric is not None else SlabGrid(bn.grid))
    metric = _get_metric(grid, eta, metric)
    rhs = {"upper": np.zeros(grid.shape("upper"))}
    p = solve_scalar(grid, "upper", rhs, ("neumann", bn.values), ("dirichlet", None), metric, report=report)
    return VolumeField(grid, "upper", upper=p["upper"])


def recover_vacuum_field(bn: SurfaceField, eta: Optional[SurfaceField] = None, *, grid: Optional[SlabGrid] = None,
                         metric: Optional[Metric] = None, report: Optional[dict] = None) -> VectorField:
    """Curl- and divergence-free vacuum field with normal trace bn on the interface."""
    grid = grid or (metric.grid if metric is not None else SlabGrid(bn.grid))
    metric = _get_metric(grid, eta, metric)
    p = vacuum_potential(bn, grid=grid, metric=metric, report=report)
    g = metric.grad(p.data("upper"), "upper")
    return _as_vector(grid, "upper", {"upper": g})


def recover_vacuum_electric(
    dtb_hat: VectorField,
    e_tangential: Optional[Sequence[SurfaceField]],
    eta: Optional[SurfaceField] = None,
    *,
    metric: Optional[Metric] = None,
    tol: float = 1e-10,
    max_sweeps: int = 50,
    report: Optional[dict] = None,
) -> VectorField:
    """Vacuum electric field: curl^phi E = dtb_hat, div^phi E = 0, E x N given on the interface, E3 = 0 on top."""
    grid = dtb_hat.grid
    if dtb_hat.region != "upper":
        raise ConfigurationError("the vacuum electric field lives on the upper half")
    data = HodgeData(dtb_hat, VolumeField.zeros(grid, "upper"), e_tangential, None, tangential="bottom")
    return solve_one_phase(data, eta, metric=metric, tol=tol, max_sweeps=max_sweeps, report=report)
