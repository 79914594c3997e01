"""Energy and dissipation functionals, constraint residuals, Poincare checks and decay fits."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import ParameterError, Params, PlasmaState, _flat_curl
from .geometry import Metric, build_metric, flat_metric, surface_gradient
from .spectral import (
    ConfigurationError,
    SlabGrid,
    SurfaceField,
    VectorField,
    VolumeField,
    anisotropic_norm,
    integrate,
    sobolev_norm_surface,
    surface_integral,
    volume_sobolev_norm,
)


class DiagnosticError(ValueError):
    """Input that a diagnostic cannot be evaluated on."""


# ---------------------------------------------------------------------------
# physical energy


@dataclass(frozen=True)
class EnergyReport:
    kinetic: float
    mag_plasma: float
    mag_vacuum: float
    surface: float
    dissipation: float

    @property
    def total(self) -> float:
        return self.kinetic + self.mag_plasma + self.mag_vacuum + self.surface

    def as_dict(self) -> dict:
        return {
            "kinetic": self.kinetic,
            "mag_plasma": self.mag_plasma,
            "mag_vacuum": self.mag_vacuum,
            "surface": self.surface,
            "total": self.total,
            "dissipation": self.dissipation,
        }


def _weighted_sq(a: np.ndarray, w: np.ndarray, grid: SlabGrid, half: str) -> float:
    return float(integrate(np.sum(a**2, axis=0) * w, grid, half))


def _metric_for(state: PlasmaState, metric: Optional[Metric], linearized: bool) -> Metric:
    if metric is not None:
        return metric
    if linearized:
        return flat_metric(state.grid)
    return build_metric(state.eta, grid=state.grid)


def physical_energy(state: PlasmaState, params: Params, metric: Optional[Metric] = None, *,
                    linearized: bool = False) -> EnergyReport:
    """Kinetic, magnetic and capillary energy of a snapshot plus the resistive dissipation rate.

    Volume integrals carry the d3 phi weight of ``metric`` (built from the
    state's interface when omitted). The capillary energy is
    sigma * int (sqrt(1 + |grad eta|^2) - 1), the quadratic form
    (sigma / 2) int |grad eta|^2 in the linearized model, where the flat
    metric is used throughout.
    """
    grid = state.grid
    m = _metric_for(state, metric, linearized)
    u = state.u.data("lower")
    b = state.b.data("lower")
    bh = state.b_hat.data("upper")
    wl, wu = m.weight("lower"), m.weight("upper")
    e1, e2 = surface_gradient(state.eta)
    s = e1**2 + e2**2
    if linearized:
        surf = 0.5 * params.sigma * surface_integral(s)
        cb = _flat_curl(b, grid, "lower")
    else:
        # sqrt(1+s) - 1 written without cancellation
        surf = params.sigma * surface_integral(s / (np.sqrt(1.0 + s) + 1.0))
        cb = m.curl(b, "lower")
    return EnergyReport(
        kinetic=0.5 * _weighted_sq(u, wl, grid, "lower"),
        mag_plasma=0.5 * _weighted_sq(b, wl, grid, "lower"),
        mag_vacuum=0.5 * _weighted_sq(bh, wu, grid, "upper"),
        surface=float(surf),
        dissipation=params.kappa * _weighted_sq(cb, wl, grid, "lower"),
    )


# ---------------------------------------------------------------------------
# energy law


@dataclass(frozen=True)
class EnergyLawSeries:
    """Residual of dE/dt + D at the interior samples of a trajectory."""

    t: np.ndarray
    residual: np.ndarray  # normalised
    raw: np.ndarray
    energy: np.ndarray  # total energy at every sample
    dissipation: np.ndarray

    @property
    def max(self) -> float:
        return float(np.max(self.residual)) if self.residual.size else 0.0


def energy_law_residual(trajectory: Sequence, params: Params, *, linearized: bool = False,
                        floor: float = 1e-300, reports: Optional[Sequence[EnergyReport]] = None) -> EnergyLawSeries:
    """|(E[n+1] - E[n-1]) / (2 dt) + D[n]| / max(E[n], D[n], floor) at interior samples.

    ``reports`` may carry precomputed energies for the same snapshots.
    """
    states = list(trajectory)
    if len(states) < 3:
        raise DiagnosticError("energy law needs at least 3 snapshots")
    t = np.array([s.t for s in states], dtype=float)
    steps = np.diff(t)
    dt = float(np.mean(steps))
    if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-9 * max(abs(dt), 1e-300) + 1e-14:
        raise DiagnosticError("snapshots must be uniformly spaced in time")
    reps = list(reports) if reports is not None else [physical_energy(s, params, linearized=linearized) for s in states]
    E = np.array([r.total for r in reps])
    D = np.array([r.dissipation for r in reps])
    raw = np.abs((E[2:] - E[:-2]) / (2.0 * dt) + D[1:-1])
    scale = np.maximum(np.maximum(E[1:-1], D[1:-1]), floor)
    return EnergyLawSeries(t[1:-1], raw / scale, raw, E, D)


# ---------------------------------------------------------------------------
# reduced functionals


@dataclass(frozen=True)
class ReducedFunctionals:
    energy: float  # high-order energy with 2N replaced by n
    low_energy: float
    dissipation: float
    terms: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _vec_sq(v: VectorField, m: int) -> float:
    return sum(volume_sobolev_norm(c, m) ** 2 for c in v.components)


def _vec_aniso_sq(v: VectorField, m: int, ell: int) -> float:
    # ||v||_{m,l} for a vector: the component norms are combined in l2
    return sum(anisotropic_norm(c, m, ell) ** 2 for c in v.components)


class _Collector:
    def __init__(self, table, j_max: int):
        self.table = table
        self.j_max = j_max
        self.terms: dict = {}
        self.dropped: list = []
        self.missing: list = []

    def _get(self, name: str, j: int):
        seq = getattr(self.table, name)
        if j > self.j_max:
            self.dropped.append(f"d_t^{j} {name}")
            return None
        if j >= len(seq):
            self.missing.append(f"d_t^{j} {name}")
            return None
        return seq[j]

    def vol(self, key: str, name: str, j: int, m: int) -> float:
        f = self._get(name, j)
        if f is None:
            return 0.0
        val = _vec_sq(f, m) if isinstance(f, VectorField) else volume_sobolev_norm(f, m) ** 2
        self.terms[key] = val
        return val

    def aniso(self, key: str, name: str, j: int, m: int, ell: int) -> float:
        f = self._get(name, j)
        if f is None:
            return 0.0
        val = _vec_aniso_sq(f, m, ell)
        self.terms[key] = val
        return val

    def surf(self, key: str, j: int, s: float) -> float:
        f = self._get("eta", j)
        if f is None:
            return 0.0
        val = sobolev_norm_surface(f, s) ** 2
        self.terms[key] = val
        return val


def _high_energy(c: _Collector, n: int) -> float:
    tot = sum(c.vol(f"E:u{j}:H{n - j}", "u", j, n - j) for j in range(n + 1))
    for name in ("b", "b_hat"):
        tot += sum(c.vol(f"E:{name}{j}:H{n - j + 1}", name, j, n - j + 1) for j in range(n))
        tot += c.vol(f"E:{name}{n}:H0", name, n, 0)
    tot += sum(c.vol(f"E:p{j}:H{n - j}", "p", j, n - j) for j in range(n))
    tot += sum(c.surf(f"E:eta{j}:H{n - j + 1.5}", j, n - j + 1.5) for j in range(n))
    tot += c.surf(f"E:eta{n}:H1", n, 1.0)
    tot += c.surf(f"E:eta{n + 1}:H-0.5", n + 1, -0.5)
    return tot


def _low_energy(c: _Collector, n: int) -> float:
    tot = c.vol(f"F:u0:H{n - 1}", "u", 0, n - 1) + c.aniso(f"F:u0:H0,{n}", "u", 0, 0, n)
    tot += sum(c.vol(f"F:u{j}:H{n - j}", "u", j, n - j) for j in range(1, n + 1))
    for name in ("b", "b_hat"):
        tot += c.vol(f"F:{name}0:H{n}", name, 0, n)
        tot += sum(c.vol(f"F:{name}{j}:H{n - j + 1}", name, j, n - j + 1) for j in range(1, n))
        tot += c.vol(f"F:{name}{n}:H0", name, n, 0)
    tot += sum(c.vol(f"F:p{j}:H{n - j}", "p", j, n - j) for j in range(n))
    tot += sum(c.surf(f"F:eta{j}:H{n - j + 1.5}", j, n - j + 1.5) for j in range(n))
    tot += c.surf(f"F:eta{n}:H1", n, 1.0)
    tot += c.surf(f"F:eta{n + 1}:H-0.5", n + 1, -0.5)
    return tot


def _low_dissipation(c: _Collector, n: int, tag: str = "D") -> float:
    tot = sum(c.vol(f"{tag}:u{j}:H{n - j - 1}", "u", j, n - j - 1) for j in range(n))
    tot += sum(c.vol(f"{tag}:b{j}:H{n - j}", "b", j, n - j) for j in range(n - 1))
    tot += sum(c.aniso(f"{tag}:b{j}:H1,{n - j}", "b", j, 1, n - j) for j in range(n + 1))
    tot += sum(c.vol(f"{tag}:b_hat{j}:H{n - j + 1}", "b_hat", j, n - j + 1) for j in range(n + 1))
    tot += sum(c.vol(f"{tag}:p{j}:H{n - j - 1}", "p", j, n - j - 1) for j in range(n - 1))
    tot += sum(c.surf(f"{tag}:eta{j}:H{n - j + 0.5}", j, n - j + 0.5) for j in range(n - 1))
    tot += c.surf(f"{tag}:eta{n - 1}:H1", n - 1, 1.0)
    tot += c.surf(f"{tag}:eta{n}:H0", n, 0.0)
    return tot


def reduced_functionals(table, n: int = 3, j_max: int = 2, *, with_ratio: bool = True) -> ReducedFunctionals:
    """Energy-like, low-energy and dissipation functionals at small order.

    Every sum is truncated to time derivatives j <= j_max; the dropped
    terms are listed in ``metadata["dropped"]``, along with terms the table
    cannot supply (``metadata["missing"]``, e.g. d_t^J p which is never
    stored). With ``with_ratio`` the metadata also records
    F_n / D_{n+1} computed under the same truncation.
    """
    if not 1 <= n <= 3:
        raise ConfigurationError("reduced order n must be in 1..3")
    if not 0 <= j_max <= 2:
        raise ConfigurationError("j_max must be in 0..2")
    if j_max > table.J:
        raise DiagnosticError(f"insufficient derivative data: table holds J = {table.J} < j_max = {j_max}")
    c = _Collector(table, j_max)
    E = _high_energy(c, n)
    F = _low_energy(c, n)
    D = _low_dissipation(c, n)
    meta = {
        "n": n,
        "j_max": j_max,
        "dropped": sorted(set(c.dropped)),
        "missing": sorted(set(c.missing)),
        "convention": "volume H^m: all mixed partials |beta| <= m with factor 2 pi; surface H^s: (1+|2 pi xi|^2)^s",
    }
    if with_ratio:
        c2 = _Collector(table, j_max)
        D_next = _low_dissipation(c2, n + 1, tag="D+")
        meta["dissipation_next"] = D_next
        meta["F_over_D_next"] = F / D_next if D_next > 0 else (0.0 if F == 0 else float("inf"))
    return ReducedFunctionals(E, F, D, c.terms, meta)


# ---------------------------------------------------------------------------
# Poincare-type inequalities


@dataclass(frozen=True)
class PoincareResult:
    volume: float  # ||f||_0^2 on the lower half
    trace: float  # |f|_0^2 on the interface
    directional: float  # ||B . grad f||_0^2 / B3^2
    constant: float
    volume_ok: bool  # ||f||^2 <= directional + constant |f|^2
    trace_ok: bool  # |f|^2 <= directional + constant ||f||^2

    @property
    def satisfied(self) -> bool:
        return self.volume_ok and self.trace_ok

    @property
    def volume_rhs(self) -> float:
        return self.directional + self.constant * self.trace

    @property
    def trace_rhs(self) -> float:
        return self.directional + self.constant * self.volume


def poincare_check(f: VolumeField, B: Sequence[float], *, constant: float = 1.0, slack: float = 1e-12) -> PoincareResult:
    """Evaluate both Poincare-type inequalities for f on the lower half (flat slab).

    ``constant`` multiplies the lower-order term on each right-hand side;
    ``slack`` is a relative round-off allowance for the equality cases.
    """
    B = np.asarray(B, dtype=float)
    if B.shape != (3,):
        raise ConfigurationError("background field needs three components")
    if B[2] == 0.0:
        raise ParameterError("transversal field required: B3 must be nonzero")
    if "lower" not in f.halves:
        raise ConfigurationError("f must live on the lower half")
    grid = f.grid
    a = f.physical().data("lower")
    g = flat_metric(grid).grad(a, "lower")
    Bg = B[0] * g[0] + B[1] * g[1] + B[2] * g[2]
    vol = float(integrate(a**2, grid, "lower"))
    tr = surface_integral(a[..., -1] ** 2)
    dirn = float(integrate(Bg**2, grid, "lower")) / B[2] ** 2
    tol = slack * max(vol, tr, dirn, 1e-300)
    return PoincareResult(
        volume=vol, trace=tr, directional=dirn, constant=constant,
        volume_ok=bool(vol <= dirn + constant * tr + tol),
        trace_ok=bool(tr <= dirn + constant * vol + tol),
    )


# ---------------------------------------------------------------------------
# decay fits


@dataclass(frozen=True)
class DecayFit:
    rate: float
    quality: float  # coefficient of determination of the log fit, clipped to [0, 1]
    window: tuple
    model: str
    intercept: float = 0.0


def decay_fit(times, values, model: str = "exponential", *, window: Optional[tuple] = None,
              min_samples: int = 10) -> DecayFit:
    """Least-squares fit of log(value) against t (exponential) or log(1 + t) (algebraic).

    The returned rate is the negated slope, so decay gives a positive rate.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.ndim != 1:
        raise DiagnosticError("times and values must be 1-d arrays of equal length")
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, v = t[sel], v[sel]
    if t.size < min_samples:
        raise DiagnosticError(f"decay fit needs at least {min_samples} samples, got {t.size}")
    if np.any(~(v > 0)):
        raise DiagnosticError("decay fit needs positive values in the window")
    if model == "exponential":
        x = t
    elif model == "algebraic":
        if np.any(t <= -1):
            raise DiagnosticError("algebraic model needs t > -1")
        x = np.log1p(t)
    else:
        raise ConfigurationError(f"unknown decay model {model!r}")
    y = np.log(v)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return DecayFit(float(-slope), float(np.clip(r2, 0.0, 1.0)), (float(t[0]), float(t[-1])), model, float(icpt))


# ---------------------------------------------------------------------------
# constraints


def constraint_report(state: PlasmaState, metric: Optional[Metric] = None, *, linearized: bool = False) -> dict:
    """Max-norm residual of every interior, wall, interface and far-field constraint.

    Keys: div_u, div_b, u3_wall, b3_wall, jump_b, bhat_tangential_top,
    curl_bhat, div_bhat, eta_mean.
    """
    grid = state.grid
    m = _metric_for(state, metric, linearized)
    u = state.u.data("lower")
    b = state.b.data("lower")
    bh = state.b_hat.data("upper")

    def mx(a) -> float:
        return float(np.max(np.abs(a)))

    return {
        "div_u": mx(m.div(u, "lower")),
        "div_b": mx(m.div(b, "lower")),
        "u3_wall": mx(u[2][..., 0]),
        "b3_wall": mx(b[2][..., 0]),
        "jump_b": mx(bh[..., 0] - b[..., -1]),
        "bhat_tangential_top": mx(bh[:2, ..., -1]),
        "curl_bhat": mx(m.curl(bh, "upper")),
        "div_bhat": mx(m.div(bh, "upper")),
        "eta_mean": abs(state.eta.mean()),
    }
