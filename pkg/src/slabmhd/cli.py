"""Scenario runner: ``slabmhd --config run.ini [--out DIR] [--scenario NAME] [--seed N]``.

Config files are ``key = value`` lines under ``[section]`` headers::

    [scenario]
    name = energy-law
    [grid]
    n1 = 16
    n2 = 16
    nz_lower = 17
    nz_upper = 17
    [physics]
    kappa = 1.0
    sigma = 1.0
    B = 0, 0, 1
    [time]
    dt = 1e-3
    steps = 100
    mode = linearized
    [initial]
    family = modes
    amplitude = 1.0
    eta_amplitude = 0.05
    seed = 0
    [output]
    dir = out
    [tolerances]
    energy_law = 1e-4

Every scenario writes ``<name>.csv`` (per-sample time series; header only
for the static suites) and ``<name>_summary.json`` into the output
directory. The exit status is 0 iff every declared tolerance is met.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .diagnostics import (
    DiagnosticError,
    constraint_report,
    decay_fit,
    energy_law_residual,
    physical_energy,
    poincare_check,
)
from .dynamics import (
    ParameterError,
    Params,
    PlasmaState,
    StepSizeError,
    SweepError,
    complete_state,
    construct_initial_derivatives,
    solenoidal_field,
    step,
    vorticity_damping_residual,
)
from .geometry import build_metric, flat_metric
from .hodge import (
    CompatibilityError,
    ConvergenceError,
    HodgeData,
    recover_vacuum_field,
    solve_mixed_phase,
    solve_one_phase,
    solve_two_phase,
    vacuum_potential,
)
from .spectral import (
    REGIONS,
    ConfigurationError,
    SlabGrid,
    SurfaceField,
    TorusGrid,
    VectorField,
    VolumeField,
    random_band_limited,
)

SCENARIOS = (
    "linearized-decay",
    "energy-law",
    "hodge-verify",
    "vacuum-recovery",
    "vorticity-damping",
    "nonlinear-small-data",
    "poincare-suite",
)

CSV_COLUMNS = ("t", "E_total", "E_kin", "E_mag_plasma", "E_mag_vac", "E_surf", "D", "law_residual",
               "eta_mean", "eta_max", "div_u", "div_b", "jump_b")

FAMILIES = ("equilibrium", "modes", "random")

DEFAULT_TOLERANCES = {
    "linearized-decay": {"monotone": 1e-6},
    "energy-law": {"energy_law": 1e-4, "constraints": 1e-8, "min_order_ratio": 0.0},
    "hodge-verify": {"relative_error": 1e-9},
    "vacuum-recovery": {"closed_form": 1e-10, "constraints": 1e-9},
    "vorticity-damping": {"residual": 1e-8},
    "nonlinear-small-data": {"contraction": 0.5, "energy_law": 1e-3, "constraints": 1e-8, "eta_drift": 1e-12},
    "poincare-suite": {},
}

# Settings a scenario uses unless the config names them.
SCENARIO_DEFAULTS = {
    "vacuum-recovery": {"nz_upper": 25},
    "linearized-decay": {"mode": "linearized", "family": "random", "amplitude": 1e-3, "b_amplitude": 1e-3,
                         "eta_amplitude": 1e-3, "dt": 1e-2, "steps": 1000},
    "nonlinear-small-data": {"mode": "nonlinear", "nz_lower": 33, "amplitude": 1e-3, "b_amplitude": 1e-3, "eta_amplitude": 1e-3, "steps": 200,
                             "spinup_steps": 100, "spinup_dt": 2.5e-4},
    "energy-law": {"spinup_steps": 400, "spinup_dt": 2.5e-4},
    "vorticity-damping": {"amplitude": 0.1, "samples": 10},
}

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_IO = 0, 1, 2, 3, 4


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    n1: int = 16
    n2: int = 16
    nz_lower: int = 17
    nz_upper: int = 17
    kappa: float = 1.0
    sigma: float = 1.0
    B: tuple = (0.0, 0.0, 1.0)
    dt: float = 1e-3
    steps: int = 100
    mode: str = "linearized"
    sweeps: int = 2
    spinup_steps: int = 0
    spinup_dt: Optional[float] = None
    family: str = "modes"
    amplitude: float = 1.0
    b_amplitude: float = 0.0
    eta_amplitude: float = 0.05
    seed: int = 0
    max_mode: int = 2
    samples: int = 100
    out: str = "out"
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        self.params  # validates kappa, sigma, B
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be > 0, got {self.dt}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown initial-data family {self.family!r}")
        if self.mode not in ("linearized", "nonlinear"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")

    @property
    def params(self) -> Params:
        return Params(self.kappa, self.sigma, tuple(self.B))

    @property
    def grid(self) -> SlabGrid:
        return SlabGrid(TorusGrid(self.n1, self.n2), self.nz_lower, self.nz_upper)

    def tol(self, key: str) -> float:
        merged = dict(DEFAULT_TOLERANCES.get(self.scenario, {}))
        merged.update(self.tolerances)
        return float(merged[key])


_SCHEMA = {
    "scenario": {"name": ("scenario", str)},
    "grid": {"n1": ("n1", int), "n2": ("n2", int), "nz_lower": ("nz_lower", int), "nz_upper": ("nz_upper", int)},
    "physics": {"kappa": ("kappa", float), "sigma": ("sigma", float), "b": ("B", "vector")},
    "time": {"dt": ("dt", float), "steps": ("steps", int), "mode": ("mode", str), "sweeps": ("sweeps", int),
             "spinup_steps": ("spinup_steps", int), "spinup_dt": ("spinup_dt", float)},
    "initial": {"family": ("family", str), "amplitude": ("amplitude", float), "b_amplitude": ("b_amplitude", float),
                "eta_amplitude": ("eta_amplitude", float), "seed": ("seed", int), "max_mode": ("max_mode", int),
                "samples": ("samples", int)},
    "output": {"dir": ("out", str)},
}


def _convert(raw: str, kind, key: str):
    try:
        if kind == "vector":
            vals = tuple(float(x) for x in raw.replace(",", " ").split())
            if len(vals) != 3:
                raise ValueError("expected three components")
            return vals
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from None


def parse_config(text: str, *, scenario: Optional[str] = None, seed: Optional[int] = None,
                 out: Optional[str] = None) -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"unreadable config: {exc}") from None
    kw: dict = {}
    tolerances: dict = {}
    for section in cp.sections():
        name = section.lower()
        if name == "tolerances":
            for key, raw in cp.items(section):
                tolerances[key] = _convert(raw, float, f"tolerances.{key}")
            continue
        if name not in _SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SCHEMA[name]:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            attr, kind = _SCHEMA[name][key]
            kw[attr] = _convert(raw, kind, f"{section}.{key}")
    if scenario is not None:
        kw["scenario"] = scenario
    if seed is not None:
        kw["seed"] = seed
    if out is not None:
        kw["out"] = out
    if "scenario" not in kw:
        raise ConfigurationError("no scenario named (set [scenario] name or pass --scenario)")
    for key, val in SCENARIO_DEFAULTS.get(kw["scenario"], {}).items():
        kw.setdefault(key, val)
    return ScenarioConfig(tolerances=tolerances, **kw)


def load_config(path, **overrides) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, **overrides)


# ---------------------------------------------------------------------------
# initial data


def mode_fields(grid: SlabGrid) -> tuple[np.ndarray, np.ndarray]:
    """Unit-amplitude single-mode u (poloidal in x1 plus toroidal in x2) and b (toroidal)."""
    x1, x2, z = np.broadcast_arrays(*grid.coordinates("lower"))
    k = 2 * np.pi
    P = (z * (1 + z)) ** 2
    dP = np.broadcast_to(grid.D("lower") @ ((grid.z("lower") * (1 + grid.z("lower"))) ** 2), P.shape)
    u = np.stack([-k * np.sin(k * x1) * dP + k * np.cos(k * x2) * P, 0 * z, k * k * np.cos(k * x1) * P])
    b = np.stack([k * np.cos(k * x2) * P, 0 * z, 0 * z])
    return u / np.max(np.abs(u)), b / np.max(np.abs(b))


def initial_state(cfg: ScenarioConfig, params: Optional[Params] = None) -> PlasmaState:
    """Build (u, b, eta), then attach vacuum field and pressure."""
    grid = cfg.grid
    params = params or cfg.params
    t = grid.torus
    if cfg.family == "equilibrium":
        return PlasmaState.equilibrium(grid)
    if cfg.family == "modes":
        u1, b1 = mode_fields(grid)
        u, b = cfg.amplitude * u1, cfg.b_amplitude * b1
        eta = SurfaceField.from_function(t, lambda x1, x2: cfg.eta_amplitude * np.cos(2 * np.pi * x1) + 0 * x2)
    else:
        rng = np.random.default_rng(cfg.seed)
        u = solenoidal_field(grid, rng, cfg.amplitude, max_mode=cfg.max_mode, power=3)
        b = solenoidal_field(grid, rng, cfg.b_amplitude, max_mode=cfg.max_mode, power=3)
        e = random_band_limited(t, rng, max_mode=cfg.max_mode)
        e = e - e.mean()
        scale = np.max(np.abs(e))
        eta = SurfaceField.from_values(t, e * (cfg.eta_amplitude / scale if scale > 0 else 0.0))
    return complete_state(
        VectorField.from_arrays(grid, "lower", lower=u),
        VectorField.from_arrays(grid, "lower", lower=b),
        eta, params, mode=cfg.mode,
    )


def spin_up(state: PlasmaState, cfg: ScenarioConfig, params: Params) -> PlasmaState:
    """Run the configured spin-up steps, then restart the clock and the predictor."""
    if cfg.spinup_steps <= 0:
        return state
    dt = cfg.spinup_dt or cfg.dt
    for _ in range(cfg.spinup_steps):
        state = step(state, params, dt, mode=cfg.mode, sweeps=cfg.sweeps)
    return state.replace(t=0.0, memory=None)


# ---------------------------------------------------------------------------
# time series


@dataclass
class Run:
    states: list
    reports: list
    constraints: list
    sweep_reports: list


def integrate_run(state: PlasmaState, cfg: ScenarioConfig, params: Params, *, dt: Optional[float] = None,
                  steps: Optional[int] = None) -> Run:
    dt = dt or cfg.dt
    steps = steps or cfg.steps
    lin = cfg.mode == "linearized"
    run = Run([], [], [], [])

    flat = flat_metric(state.grid) if lin else None

    def record(s):
        m = flat if lin else build_metric(s.eta, grid=s.grid)
        run.states.append(s.replace(memory=None))
        run.reports.append(physical_energy(s, params, m, linearized=lin))
        run.constraints.append(constraint_report(s, m, linearized=lin))

    record(state)
    for _ in range(steps):
        rep: dict = {}
        state = step(state, params, dt, mode=cfg.mode, sweeps=cfg.sweeps, report=rep)
        run.sweep_reports.append(rep)
        record(state)
    return run


def series_rows(run: Run, params: Params, linearized: bool) -> list[dict]:
    rows = []
    law = None
    if len(run.states) >= 3:
        law = energy_law_residual(run.states, params, linearized=linearized, reports=run.reports).residual
    for i, (s, r, c) in enumerate(zip(run.states, run.reports, run.constraints)):
        res = float(law[i - 1]) if law is not None and 0 < i < len(run.states) - 1 else math.nan
        rows.append({
            "t": s.t, "E_total": r.total, "E_kin": r.kinetic, "E_mag_plasma": r.mag_plasma,
            "E_mag_vac": r.mag_vacuum, "E_surf": r.surface, "D": r.dissipation, "law_residual": res,
            "eta_mean": s.eta.mean(), "eta_max": float(np.max(np.abs(s.eta.values))),
            "div_u": c["div_u"], "div_b": c["div_b"], "jump_b": c["jump_b"],
        })
    return rows


def _worst(run: Run, keys: Sequence[str]) -> float:
    return max(max(c[k] for k in keys) for c in run.constraints)


CONSTRAINT_KEYS = ("div_u", "div_b", "u3_wall", "b3_wall", "jump_b", "bhat_tangential_top")


class Outcome:
    """Rows, flat summary and the declared checks of one scenario."""

    def __init__(self, cfg: ScenarioConfig):
        self.rows: list[dict] = []
        self.summary: dict = {"scenario": cfg.scenario, "seed": cfg.seed}
        self.checks: dict = {}

    def check(self, name: str, value: float, tol: float, ok: Optional[bool] = None, *, upper: bool = True) -> None:
        if ok is None:
            ok = bool(value <= tol) if upper else bool(value >= tol)
        self.checks[name] = bool(ok)
        self.summary[f"{name}.value"] = float(value)
        self.summary[f"{name}.tol"] = float(tol)
        self.summary[f"{name}.pass"] = bool(ok)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


# ---------------------------------------------------------------------------
# scenarios


def scenario_energy_law(cfg: ScenarioConfig) -> Outcome:
    out = Outcome(cfg)
    params = cfg.params
    lin = cfg.mode == "linearized"
    s0 = spin_up(initial_state(cfg), cfg, params)
    run = integrate_run(s0, cfg, params)
    out.rows = series_rows(run, params, lin)
    law = energy_law_residual(run.states, params, linearized=lin, reports=run.reports)
    out.check("energy_law", law.max, cfg.tol("energy_law"))
    out.check("constraints", _worst(run, CONSTRAINT_KEYS), cfg.tol("constraints"))
    ratio_tol = cfg.tol("min_order_ratio")
    if ratio_tol > 0:
        half = integrate_run(s0, cfg, params, dt=cfg.dt / 2, steps=2 * cfg.steps)
        law2 = energy_law_residual(half.states, params, linearized=lin, reports=half.reports)
        ratio = law.max / law2.max if law2.max > 0 else math.inf
        out.summary["energy_law_half_dt"] = law2.max
        out.check("order_ratio", ratio, ratio_tol, upper=False)
    return out


def scenario_linearized_decay(cfg: ScenarioConfig) -> Outcome:
    cfg = replace(cfg, mode="linearized")
    out = Outcome(cfg)
    params = cfg.params
    run = integrate_run(spin_up(initial_state(cfg), cfg, params), cfg, params)
    out.rows = series_rows(run, params, True)
    E = np.array([r.total for r in run.reports])
    t = np.array([s.t for s in run.states])
    rise = float(np.max(np.diff(E) / np.maximum(E[:-1], 1e-300))) if E.size > 1 else 0.0
    out.check("monotone_rise", rise, cfg.tol("monotone"))
    fit = decay_fit(t, E, "exponential")
    out.summary.update({"decay_rate": fit.rate, "decay_quality": fit.quality,
                        "decay_window_start": fit.window[0], "decay_window_end": fit.window[1]})
    out.check("decay_rate_positive", fit.rate, 0.0, ok=fit.rate > 0)
    # doubling kappa must not lower the dissipation right after the start
    p2 = Params(2 * cfg.kappa, cfg.sigma, tuple(cfg.B))
    s0 = initial_state(cfg)
    d1 = physical_energy(step(s0, params, cfg.dt, mode="linearized"), params, linearized=True).dissipation
    d2 = physical_energy(step(initial_state(cfg, p2), p2, cfg.dt, mode="linearized"), p2, linearized=True).dissipation
    out.summary.update({"D0plus_kappa": d1, "D0plus_2kappa": d2})
    out.check("kappa_sanity", d2 - d1, 0.0, ok=d2 >= d1)
    return out


def scenario_nonlinear(cfg: ScenarioConfig) -> Outcome:
    cfg = replace(cfg, mode="nonlinear")
    out = Outcome(cfg)
    params = cfg.params
    s0 = spin_up(initial_state(cfg), cfg, params)
    run = integrate_run(s0, cfg, params)
    out.rows = series_rows(run, params, False)
    law = energy_law_residual(run.states, params, reports=run.reports)
    contraction = max(r.get("contraction", 0.0) for r in run.sweep_reports)
    drift = abs(run.states[-1].eta.mean() - run.states[0].eta.mean())
    out.check("contraction", contraction, cfg.tol("contraction"))
    out.check("energy_law", law.max, cfg.tol("energy_law"))
    out.check("constraints", _worst(run, CONSTRAINT_KEYS), cfg.tol("constraints"))
    out.check("eta_drift_per_1000", drift * 1000.0 / cfg.steps, cfg.tol("eta_drift"))
    return out


# manufactured fields for the elliptic suite ----------------------------


def manufactured_field(grid: SlabGrid, rng: np.random.Generator, profiles=None, max_mode: int = 1) -> dict:
    """Smooth field on both halves, continuous across x3 = 0: random horizontal modes times cubics."""
    t = grid.torus
    hor = [[random_band_limited(t, rng, max_mode=max_mode, decay=0.0) for _ in range(2)] for _ in range(3)]
    coef = rng.standard_normal((3, 2, 4))
    out = {}
    for h in REGIONS:
        z = grid.z(h)
        comps = []
        for c in range(3):
            acc = np.zeros(grid.shape(h))
            for j in range(2):
                poly = np.polynomial.Polynomial(coef[c, j])(z)
                if profiles is not None:
                    poly = poly * profiles[c](z)
                acc += hor[c][j][:, :, None] * poly[None, None, :]
            comps.append(acc)
        out[h] = np.stack(comps)
    return out


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.sum((a - b) ** 2) / max(np.sum(b**2), 1e-300)))


_WALL_PROFILES = (lambda z: 1 - z, lambda z: 1 - z, lambda z: 1 + z)


def hodge_suite(grid: SlabGrid, seed: int) -> dict:
    """Relative L2 errors of the three div-curl problems on manufactured solutions (flat interface)."""
    rng = np.random.default_rng(seed)
    m = flat_metric(grid)
    t = grid.torus
    errors = {}

    v = manufactured_field(grid, rng)["upper"]
    tr = v[..., 0]
    data = HodgeData(
        VectorField.from_arrays(grid, "upper", upper=m.curl(v, "upper")),
        VolumeField(grid, "upper", upper=m.div(v, "upper")),
        (SurfaceField.from_values(t, tr[1]), SurfaceField.from_values(t, -tr[0]), SurfaceField.zeros(t)),
        SurfaceField.from_values(t, v[2][..., -1]),
        tangential="bottom",
    )
    errors["one_phase"] = _rel(solve_one_phase(data).data("upper"), v)

    v = manufactured_field(grid, rng, _WALL_PROFILES)
    lo, up = solve_two_phase(
        VectorField.from_arrays(grid, "lower", lower=m.curl(v["lower"], "lower")),
        VolumeField(grid, "lower", lower=m.div(v["lower"], "lower")),
        VectorField.from_arrays(grid, "upper", upper=m.curl(v["upper"], "upper")),
        VolumeField(grid, "upper", upper=m.div(v["upper"], "upper")),
    )
    errors["two_phase"] = max(_rel(lo.data("lower"), v["lower"]), _rel(up.data("upper"), v["upper"]))

    v = manufactured_field(grid, rng, _WALL_PROFILES)
    w = m.curl(v["lower"], "lower")
    wb = w[..., 0]
    lo, up = solve_mixed_phase(
        VectorField.from_arrays(grid, "lower", lower=m.curl(w, "lower")),
        VolumeField(grid, "lower", lower=m.div(v["lower"], "lower")),
        VectorField.from_arrays(grid, "upper", upper=m.curl(v["upper"], "upper")),
        VolumeField(grid, "upper", upper=m.div(v["upper"], "upper")),
        (SurfaceField.from_values(t, wb[1]), SurfaceField.from_values(t, -wb[0]), SurfaceField.zeros(t)),
    )
    errors["mixed_phase"] = max(_rel(lo.data("lower"), v["lower"]), _rel(up.data("upper"), v["upper"]))
    return errors


def scenario_hodge(cfg: ScenarioConfig) -> Outcome:
    out = Outcome(cfg)
    tol = cfg.tol("relative_error")
    for name, err in hodge_suite(cfg.grid, cfg.seed).items():
        out.check(f"hodge.{name}", err, tol)
    return out


def vacuum_single_mode(grid: SlabGrid) -> dict:
    """Closed-form check for b . e3 = cos(2 pi x1) on a flat interface."""
    t = grid.torus
    bn = SurfaceField.from_function(t, lambda x1, x2: np.cos(2 * np.pi * x1) + 0 * x2)
    b = recover_vacuum_field(bn, grid=grid).data("upper")
    p = vacuum_potential(bn, grid=grid).data("upper")
    x1, _, x3 = np.broadcast_arrays(*grid.coordinates("upper"))
    k = 2 * np.pi
    exact_b = np.stack([
        -np.sin(k * x1) * np.sinh(k * (x3 - 1)) / np.cosh(k),
        0 * x1,
        np.cos(k * x1) * np.cosh(k * (x3 - 1)) / np.cosh(k),
    ])
    exact_p = np.cos(k * x1) * np.sinh(k * (x3 - 1)) / (k * np.cosh(k))
    m = flat_metric(grid)
    return {
        "field_error": float(np.max(np.abs(b - exact_b))),
        "potential_error": float(np.max(np.abs(p - exact_p))),
        "curl": float(np.max(np.abs(m.curl(b, "upper")))),
        "div": float(np.max(np.abs(m.div(b, "upper")))),
        "tangential_top": float(np.max(np.abs(b[:2, ..., -1]))),
    }


def scenario_vacuum(cfg: ScenarioConfig) -> Outcome:
    out = Outcome(cfg)
    r = vacuum_single_mode(cfg.grid)
    out.check("vacuum.field_error", r["field_error"], cfg.tol("closed_form"))
    out.check("vacuum.potential_error", r["potential_error"], cfg.tol("closed_form"))
    for key in ("curl", "div", "tangential_top"):
        out.check(f"vacuum.{key}", r[key], cfg.tol("constraints"))
    return out


def vorticity_suite(grid: SlabGrid, params: Params, seed: int, samples: int, amplitude: float = 0.1) -> tuple[float, float]:
    """Largest vorticity-identity residual over random consistent states (flat interface)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    coef = params.damping
    for _ in range(samples):
        u = VectorField.from_arrays(grid, "lower", lower=solenoidal_field(grid, rng, amplitude, power=3))
        b = VectorField.from_arrays(grid, "lower", lower=solenoidal_field(grid, rng, amplitude, power=3))
        s = complete_state(u, b, SurfaceField.zeros(grid.torus), params)
        table = construct_initial_derivatives(s.u, s.b, s.eta, params, J=1)
        r = vorticity_damping_residual(s, params, table.u[1], table.b[1])
        worst = max(worst, r.max_abs)
        coef = r.coefficient
    return worst, coef


def scenario_vorticity(cfg: ScenarioConfig) -> Outcome:
    out = Outcome(cfg)
    params = cfg.params
    worst, coef = vorticity_suite(cfg.grid, params, cfg.seed, min(cfg.samples, 20), cfg.amplitude)
    expected = params.B[2] ** 2 / params.kappa
    out.check("vorticity.residual", worst, cfg.tol("residual"))
    out.summary["vorticity.coefficient"] = coef
    out.check("vorticity.coefficient_error", abs(coef - expected), 0.0, ok=coef == expected)
    return out


def poincare_field(grid: SlabGrid, rng: np.random.Generator, max_mode: int = 2, degree: int = 4) -> VolumeField:
    """Random band-limited field on the lower half: horizontal modes times Chebyshev polynomials in x3."""
    z = grid.z("lower")
    s = 2 * z + 1
    vals = np.zeros(grid.shape("lower"))
    for k in range(degree + 1):
        Tk = np.polynomial.chebyshev.Chebyshev.basis(k)(s)
        vals += random_band_limited(grid.torus, rng, max_mode=max_mode)[:, :, None] * Tk[None, None, :]
    return VolumeField(grid, "lower", lower=vals)


POINCARE_FIELDS = ((0.0, 0.0, 1.0), (1.0, 1.0, 1.0), (2.0, 0.0, 3.0))


def poincare_suite(grid: SlabGrid, seed: int, samples: int = 100, fields=POINCARE_FIELDS) -> dict:
    out = {}
    for B in fields:
        rng = np.random.default_rng(seed)
        fails1 = fails2 = 0
        worst1 = worst2 = 0.0
        for _ in range(samples):
            r = poincare_check(poincare_field(grid, rng), B)
            fails1 += not r.volume_ok
            fails2 += not r.trace_ok
            worst1 = max(worst1, r.volume / r.volume_rhs)
            worst2 = max(worst2, r.trace / r.trace_rhs)
        out[B] = {"volume_failures": fails1, "trace_failures": fails2,
                  "volume_worst_ratio": worst1, "trace_worst_ratio": worst2}
    return out


def scenario_poincare(cfg: ScenarioConfig) -> Outcome:
    out = Outcome(cfg)
    for B, r in poincare_suite(cfg.grid, cfg.seed, cfg.samples).items():
        tag = "B=" + ",".join(f"{x:g}" for x in B)
        out.summary[f"poincare.{tag}.volume_worst_ratio"] = r["volume_worst_ratio"]
        out.summary[f"poincare.{tag}.trace_worst_ratio"] = r["trace_worst_ratio"]
        out.check(f"poincare.{tag}.volume_failures", r["volume_failures"], 0)
        out.check(f"poincare.{tag}.trace_failures", r["trace_failures"], 0)
    return out


RUNNERS: dict[str, Callable[[ScenarioConfig], Outcome]] = {
    "linearized-decay": scenario_linearized_decay,
    "energy-law": scenario_energy_law,
    "hodge-verify": scenario_hodge,
    "vacuum-recovery": scenario_vacuum,
    "vorticity-damping": scenario_vorticity,
    "nonlinear-small-data": scenario_nonlinear,
    "poincare-suite": scenario_poincare,
}


# ---------------------------------------------------------------------------
# output


def format_value(x) -> str:
    return f"{float(x):.17g}"


def write_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow([format_value(row[c]) for c in CSV_COLUMNS])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _jsonable(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return str(v)


def write_summary(summary: dict, path) -> None:
    flat = {k: _jsonable(v) for k, v in summary.items()}
    with open(path, "w") as fh:
        json.dump(flat, fh, indent=1, sort_keys=True)
        fh.write("\n")


def emit(outcome: Outcome, cfg: ScenarioConfig) -> tuple[Path, Path]:
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    csv_path = d / f"{cfg.scenario}.csv"
    summary_path = d / f"{cfg.scenario}_summary.json"
    write_csv(outcome.rows, csv_path)
    summary = dict(outcome.summary)
    summary["passed"] = outcome.passed
    write_summary(summary, summary_path)
    return csv_path, summary_path


# ---------------------------------------------------------------------------
# entry point


def _thread_limit():
    n = os.environ.get("SLABMHD_THREADS")
    if not n:
        return None
    try:
        count = int(n)
    except ValueError:
        raise ConfigurationError(f"SLABMHD_THREADS must be an integer, got {n!r}") from None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=count)


def run(cfg: ScenarioConfig) -> tuple[int, Outcome]:
    limiter = _thread_limit()
    try:
        outcome = RUNNERS[cfg.scenario](cfg)
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return (EXIT_OK if outcome.passed else EXIT_FAILED), outcome


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slabmhd", description="Run a plasma-vacuum interface scenario.")
    ap.add_argument("--config", required=True, help="key = value config file with [section] headers")
    ap.add_argument("--out", help="output directory (overrides [output] dir)")
    ap.add_argument("--scenario", help=f"scenario name, one of: {', '.join(SCENARIOS)}")
    ap.add_argument("--seed", type=int, help="unsigned 64-bit seed for random initial data")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, scenario=args.scenario, seed=args.seed, out=args.out)
    except (ConfigurationError, ParameterError) as exc:
        print(f"slabmhd: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        status, outcome = run(cfg)
    except (SweepError, ConvergenceError) as exc:
        print(f"slabmhd: nonconvergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ConfigurationError, ParameterError, StepSizeError, CompatibilityError, DiagnosticError) as exc:
        print(f"slabmhd: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        csv_path, summary_path = emit(outcome, cfg)
    except OSError as exc:
        print(f"slabmhd: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    verdict = "PASS" if status == EXIT_OK else "FAIL"
    print(f"{cfg.scenario}: {verdict} ({time.perf_counter() - start:.1f} s) -> {csv_path}, {summary_path}")
    for name, ok in outcome.checks.items():
        print(f"  {'ok  ' if ok else 'FAIL'} {name} = {outcome.summary[name + '.value']:.3e} "
              f"(tol {outcome.summary[name + '.tol']:.1e})")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
