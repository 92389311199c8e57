"""Command-line driver: verification suites, scans and structured output.

Exit codes: 0 all checks pass, 2 a check failed, 3 bad configuration,
4 numerical instability or quadrature failure, 5 insufficient resolution.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import platform
import re
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, bubble, corrections, outer, spectral
from .errors import InputError, LabError
from .modulation import ModulationParams, check_modulation_ode, solve_modulation
from .numerics import grid_per_decade

COMMANDS = ("verify", "modulation", "profile", "residual", "evolve", "spectral")

# acceptance thresholds; fixed here so a config file cannot loosen them
IDENTITY_TOL = 1e-10
OPERATOR_TOL = 1e-6
REFINEMENT_SLOPE = 1.9
WRONSKIAN_TOL = 1e-6
CONJUGATION_TOL = 1e-6
ORTHOGONALITY_TOL = 1e-8
ZETA_ODE_TOL = 1e-8
W_GRID_STABILITY = 0.10
ALPHA_WINDOW = (0.9, 1.1)
H0_RATIO = 0.2
H1_RATIO = 0.3
ENERGY_DRIFT = 1e-4
TRACKING_TOL = 0.2
RECURSION_TOL = 1e-5
C_FLATNESS = 3.0
PLATEAU_FACTOR = 4.0
ENVELOPE_FLATNESS = 0.05


# ------------------------------------------------------------------ config

@dataclass
class GridConfig:
    per_decade: float = 64.0
    modulation_per_unit: int = 256


@dataclass
class ToleranceConfig:
    quadrature: float = 1e-12


@dataclass
class ModulationConfig:
    t_min: float = 1e-4
    n_rows: int = 200


@dataclass
class ProfileConfig:
    t: float = 0.1
    r_min_factor: float = 1e-4
    r_max_factor: float = 2.0
    n: int = 400


@dataclass
class ResidualConfig:
    tau_min: float = 20.0
    tau_max: float = 200.0
    n_samples: int = 6
    levels: int = 2
    dr_lambda2: float = 0.1
    tau_start: float = 1e7
    couple_m: bool = False


@dataclass
class EvolveConfig:
    tau_from: float = 30.0
    t_ratio: float = 0.75
    n_steps: int = 2000
    depth: int = 2
    levels: int = 2
    coupling_iterations: int = 3
    fit_window: float = 3.0
    n_out: int = 10
    per_decade: float = 40.0
    r_outer: float = 1.0
    tau_start: float = 1e7
    dr_lambda2: float = 0.1
    snapshots: bool = True


@dataclass
class SpectralConfig:
    xi_min: float = 0.01
    xi_max: float = 100.0
    n_xi: int = 17
    r_match_factor: float = 60.0
    jmax: int = 8
    per_decade: float = 400.0


_SECTIONS = {"grids": GridConfig, "tolerances": ToleranceConfig,
             "modulation": ModulationConfig, "profile": ProfileConfig,
             "residual": ResidualConfig, "evolve": EvolveConfig, "spectral": SpectralConfig}


@dataclass
class RunConfig:
    beta: float = 2.0
    t0: float = 0.3
    c_source: str = "computed"
    jobs: int = 1
    output_dir: str = "out"
    grids: GridConfig = field(default_factory=GridConfig)
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    evolve: EvolveConfig = field(default_factory=EvolveConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)

    def validate(self) -> "RunConfig":
        outer.OuterParams(self.beta, self.t0)
        if self.c_source not in ("paper", "computed"):
            raise InputError(f"c_source must be 'paper' or 'computed', got {self.c_source!r}")
        if self.jobs < 1:
            raise InputError("jobs must be at least 1")
        if not self.output_dir:
            raise InputError("output_dir must be non-empty")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise InputError("config must be a JSON object")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            if f.name in _SECTIONS:
                kwargs[f.name] = _parse_section(_SECTIONS[f.name], data[f.name], f.name)
            else:
                kwargs[f.name] = _coerce(f.type, data[f.name], f.name)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs).validate()

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)


def _coerce(typ, value, name):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if not isinstance(value, bool):
            raise InputError(f"{name} must be a boolean")
        return value
    if typ == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise InputError(f"{name} must be an integer")
        return value
    if typ == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InputError(f"{name} must be a number")
        if not math.isfinite(value):
            raise InputError(f"{name} must be finite")
        return float(value)
    if typ == "str":
        if not isinstance(value, str):
            raise InputError(f"{name} must be a string")
        return value
    raise InputError(f"unsupported field type {typ} for {name}")


def _parse_section(cls, data, name):
    if not isinstance(data, dict):
        raise InputError(f"config section {name} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise InputError(f"unknown keys in {name}: {sorted(unknown)}")
    return cls(**{k: _coerce(names[k].type, v, f"{name}.{k}") for k, v in data.items()})


# ------------------------------------------------------------------ output

def fmt(x) -> str:
    """17 significant digits, so values survive a write/read round trip."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


_FLOAT_TAG = "\x00f17:"
_FLOAT_RE = re.compile(r'"\\u0000f17:([^"]*)"')


def _tag_floats(obj):
    if isinstance(obj, dict):
        return {str(k): _tag_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tag_floats(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
        return _FLOAT_TAG + fmt(x)
    return obj


def json_text(obj) -> str:
    """JSON with every float written to 17 significant digits; NaN becomes null."""
    text = json.dumps(_tag_floats(obj), indent=2, sort_keys=True)
    return _FLOAT_RE.sub(r"\1", text) + "\n"


# ------------------------------------------------------------------ manifest

@dataclass
class Check:
    name: str
    status: str                   # pass | fail | info | error | skip
    value: object = None
    threshold: object = None
    comparison: str = ""
    detail: str = ""
    exit_code: int = 0

    def as_dict(self):
        return {"name": self.name, "status": self.status, "value": self.value,
                "threshold": self.threshold, "comparison": self.comparison,
                "detail": self.detail}


class Manifest:
    def __init__(self, command: str, config: RunConfig):
        self.command = command
        self.config = config
        self.checks: list[Check] = []
        self.summary: dict = {}
        self.artifacts: list[str] = []
        self.started = time.perf_counter()

    def _add(self, check: Check) -> Check:
        if any(c.name == check.name for c in self.checks):
            raise ValueError(f"check {check.name!r} recorded twice")
        self.checks.append(check)
        return check

    def compare(self, name, value, threshold, op="<=", detail=""):
        ok = {"<=": value <= threshold, "<": value < threshold,
              ">=": value >= threshold, ">": value > threshold}[op]
        ok = bool(ok) and bool(np.isfinite(value))
        return self._add(Check(name, "pass" if ok else "fail", float(value), threshold, op,
                               detail, 0 if ok else 2))

    def within(self, name, value, lo, hi, detail=""):
        ok = bool(lo <= value <= hi)
        return self._add(Check(name, "pass" if ok else "fail", float(value), [lo, hi],
                               "in", detail, 0 if ok else 2))

    def info(self, name, value, detail=""):
        return self._add(Check(name, "info", value, None, "", detail))

    def error(self, name, exc: LabError):
        return self._add(Check(name, "error", None, None, "", str(exc), exc.exit_code))

    def skip(self, name, reason):
        return self._add(Check(name, "skip", None, None, "", reason))

    def guarded(self, name, fn):
        """Run fn(); a LabError becomes an error entry under `name`."""
        try:
            return fn()
        except LabError as exc:
            self.error(name, exc)
            return None

    @property
    def exit_code(self) -> int:
        codes = [c.exit_code for c in self.checks if c.exit_code]
        if not codes:
            return 0
        hard = [c for c in codes if c != 2]
        return hard[0] if hard else 2

    def as_dict(self):
        return {
            "command": self.command,
            "config": self.config.to_dict(),
            "versions": {"wavemaplab": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "wall_clock_s": time.perf_counter() - self.started,
            "checks": [c.as_dict() for c in self.checks],
            "summary": self.summary,
            "artifacts": sorted(self.artifacts),
            "exit_code": self.exit_code,
        }


class Writer:
    """Single writer for every artifact of one run."""

    def __init__(self, out_dir: Path, manifest: Manifest):
        self.out = Path(out_dir)
        self.manifest = manifest

    def csv(self, name, header, rows):
        atomic_write(self.out / name, csv_text(header, rows))
        self.manifest.artifacts.append(name)

    def json(self, name, obj):
        atomic_write(self.out / name, json_text(obj))
        self.manifest.artifacts.append(name)

    def finish(self):
        atomic_write(self.out / "config.json", self.manifest.config.dumps())
        atomic_write(self.out / f"manifest_{self.manifest.command}.json",
                     json_text(self.manifest.as_dict()))


# ------------------------------------------------------------------ helpers

def _mod_params(cfg: RunConfig) -> ModulationParams:
    return ModulationParams(cfg.beta, cfg.t0, cfg.c_source,
                            per_unit=cfg.grids.modulation_per_unit)


def _setup(cfg: RunConfig, mod=None) -> corrections.CorrectionSetup:
    mod = mod or solve_modulation(_mod_params(cfg))
    prof = corrections.ConeProfile(outer.OuterParams(cfg.beta, cfg.t0))
    return corrections.CorrectionSetup(mod, prof, per_decade=cfg.grids.per_decade)


def _t_at_tau(mod, tau):
    return float(mod.t_at_log_tau(math.log(tau)))


# ------------------------------------------------------------------ commands

def cmd_verify(cfg: RunConfig, w: Writer) -> None:
    m = w.manifest
    rep = m.guarded("identity.quadrature",
                    lambda: bubble.compute_identities(cfg.tolerances.quadrature))
    if rep is not None:
        m.compare("identity.I1", abs(rep.I1 / (2 * math.pi) - 1), IDENTITY_TOL,
                  detail="I1 = int Phi^2 R dR against 2 pi")
        m.compare("identity.I2", abs(rep.I2 / 32.0 - 1), IDENTITY_TOL,
                  detail="I2 = 8 int (1 - cos 2Q) Phi R dR against 32")
        m.info("identity.stated_values", rep.as_dict(),
               "deviations from the stated 3 pi and 12 pi")
        w.json("identities.json", rep.as_dict())
    else:
        for name in ("identity.I1", "identity.I2", "identity.stated_values"):
            m.skip(name, "identity quadrature failed")

    targets = (("L_Phi", bubble.L_SPECTRAL, "Phi"), ("L_Theta", bubble.L_SPECTRAL, "Theta"),
               ("Lt_phi0", bubble.LT_SPECTRAL, "phi0"), ("Lt_theta0", bubble.LT_SPECTRAL, "theta0"))
    pd = cfg.grids.per_decade
    slopes = []
    for label, op, kind in targets:
        sups = []
        for k in (pd / 2, pd):
            g = grid_per_decade(1e-2, 1e2, k)
            sups.append(float(np.max(bubble.relative_residual(op, bubble.profile_fn(kind, g))[1])))
        m.compare(f"operator.{label}", sups[1], OPERATOR_TOL,
                  detail=f"sup relative residual at {pd:g} nodes/decade")
        slopes.append(math.log2(sups[0] / sups[1]))
    m.compare("operator.refinement_slope", min(slopes), REFINEMENT_SLOPE, ">=",
              detail="min over the four profiles of log2(res(n/2)/res(n))")
    R = np.logspace(-2, 2, 81)
    m.compare("wronskian.analytic", float(np.max(np.abs(bubble.wronskian(R) + 1.0))), WRONSKIAN_TOL)
    m.compare("wronskian.fd", float(np.max(np.abs(bubble.wronskian(R, "fd") + 1.0))), WRONSKIAN_TOL)
    m.compare("conjugation", bubble.conjugation_defect(grid_per_decade(1e-2, 1e2, pd)),
              CONJUGATION_TOL, detail="L f against R^{-1/2} L~ (R^{1/2} f), f = R^2 e^{-R}")

    def orth():
        setup = _setup(cfg)
        worst = 0.0
        for tau in (10.0, 100.0, 1e4):
            val, scale = corrections.orthogonality_defect(setup, _t_at_tau(setup.modulation, tau))
            worst = max(worst, abs(val) / scale)
        return worst

    worst = m.guarded("orthogonality", orth)
    if worst is not None:
        if cfg.c_source == "computed":
            m.compare("orthogonality", worst, ORTHOGONALITY_TOL,
                      detail="|int (E2~ - B) Phi R dR| / L1 scale at tau = 10, 100, 1e4")
        else:
            m.info("orthogonality", worst, "stated constants: a nonzero defect is expected")


def _modulation_rows(mod, t):
    rows = []
    ode = mod.zeta_ode_residual(t)
    for k, tk in enumerate(t):
        rows.append((tk, mod.log_lambda1(tk), mod.log_lambda2(tk), mod.zeta(tk), mod.w(tk),
                     mod.nu(tk), mod.log_tau(tk), ode[k]))
    return rows


def cmd_modulation(cfg: RunConfig, w: Writer) -> None:
    m = w.manifest
    mc = cfg.modulation
    if not (0.0 < mc.t_min < cfg.t0):
        raise InputError("modulation.t_min must lie in (0, t0)")
    if mc.n_rows < 2:
        raise InputError("modulation.n_rows must be at least 2")
    params = _mod_params(cfg)
    mod = solve_modulation(params)
    t = np.exp(np.linspace(math.log(mc.t_min), math.log(cfg.t0), mc.n_rows))
    rows = _modulation_rows(mod, t)
    w.csv("modulation.csv", ("t", "log_lambda1", "lambda2_log", "zeta", "w", "nu", "tau_log",
                             "ode_residual"), rows)
    m.compare("modulation.zeta_ode", float(np.max(np.abs([r[-1] for r in rows]))), ZETA_ODE_TOL,
              detail="sup |zeta' - (c lambda2^2 zeta^2 - 1)| on the trace")
    fine = solve_modulation(dataclasses.replace(params, per_unit=2 * params.per_unit))
    b1 = mod.w_sol.bound_constant(1e-4)
    b2 = fine.w_sol.bound_constant(1e-4)
    m.info("modulation.w_bound", b1, "sup |w| |log t|^{2 beta}/t over [1e-4, t0]")
    m.compare("modulation.w_grid_stability", abs(b1 / b2 - 1.0), W_GRID_STABILITY,
              detail="relative change of the w bound under grid doubling")
    m.compare("modulation.nu_zero", float(np.max(np.abs(mod.nu(t)))), 0.0,
              detail="nu vanishes identically for m = 0")
    ratio = float(mod.alpha(1e-6) / mod.log_tau_exp(1e-6)) if params.t_min <= 1e-6 else math.nan
    m.within("modulation.alpha_asymptotics", ratio, *ALPHA_WINDOW,
             detail="alpha / (2 kappa |log t|^{beta+1}/(beta+1)) at t = 1e-6")
    ode = check_modulation_ode(mod, None, t)
    lam2 = np.exp(np.asarray(mod.log_lambda2(t)))
    m.info("modulation.lambda1_ode", float(np.max(np.abs(ode) / (params.c * lam2 ** 2))),
           "alpha'' - alpha'^2 + c lambda2^2, relative to c lambda2^2, from the alpha spline")


_TRUNC_FILES = {"Q-only": "profile_q.csv", "+v10": "profile_v10.csv",
                "+v10+v11": "profile_v11.csv"}


def cmd_profile(cfg: RunConfig, w: Writer) -> None:
    m = w.manifest
    pc = cfg.profile
    params = outer.OuterParams(cfg.beta, cfg.t0)
    if not (0.0 < pc.t <= cfg.t0):
        raise InputError("profile.t must lie in (0, t0]")
    if not (0.0 < pc.r_min_factor < 1.0 < pc.r_max_factor) or pc.n < 32:
        raise InputError("profile grid needs r_min_factor < 1 < r_max_factor and n >= 32")
    r = np.exp(np.linspace(math.log(pc.r_min_factor * pc.t), math.log(pc.r_max_factor * pc.t), pc.n))
    lam2 = outer.lambda2(pc.t, params)
    norms = {}
    for trunc in outer.TRUNCATIONS:
        prof = outer.OuterProfile(params, trunc)
        u, ut, _ = prof.time_derivatives(pc.t, r)
        w.csv(_TRUNC_FILES[trunc], ("r", "u", "ut"), zip(r, u, ut))
        rs, res = outer.pde_residual(prof, pc.t, r)
        keep = rs <= pc.t
        norms[trunc] = float(np.sqrt(np.trapezoid(res[keep] ** 2 * rs[keep], rs[keep])) / lam2)
    m.info("profile.residual_norms", norms,
           "lambda2^{-1} ||PDE residual||_{L2(r dr, r <= t)} per truncation")
    vals = [norms[k] for k in outer.TRUNCATIONS]
    m.compare("profile.residual_decreasing", max(vals[1] / vals[0], vals[2] / vals[1]), 1.0, "<",
              detail="each correction lowers the residual")
    full = outer.OuterProfile(params)
    keep = r <= pc.t
    v = full.correction(pc.t, r[keep])
    m.info("profile.v_bound", float(np.max(np.abs(v)) * -math.log(pc.t)),
           "sup_{r <= t} |v| |log t|")


def _residual_stack(cfg: RunConfig):
    rc = cfg.residual
    if not (1.0 < rc.tau_min < rc.tau_max < rc.tau_start):
        raise InputError("residual needs 1 < tau_min < tau_max < tau_start")
    if rc.n_samples < 1:
        raise InputError("residual.n_samples must be at least 1")
    setup = _setup(cfg)
    mod = setup.modulation
    taus = np.exp(np.linspace(math.log(rc.tau_min), math.log(rc.tau_max), rc.n_samples))
    times = sorted(_t_at_tau(mod, x) for x in taus)
    t_max = min(max(times) + 0.01, cfg.t0)
    config = corrections.StackConfig(_t_at_tau(mod, rc.tau_start), t_max, levels=rc.levels,
                                     dr_lambda2=rc.dr_lambda2)
    if rc.couple_m:
        setup, stack, changes = corrections.couple_stack(setup, config, sample_times=times)
        return stack, changes
    return corrections.build_stack(setup, config, sample_times=times), ()


def cmd_residual(cfg: RunConfig, w: Writer) -> None:
    m = w.manifest
    stack, changes = _residual_stack(cfg)
    rows = []
    for s in stack.samples:
        l2sq = s.lam2 ** 2
        mk = [x * l2sq for x in s.m_hat] + [math.nan] * (2 - len(s.m_hat))
        rh1 = s.residual_h[1] if len(s.residual_h) > 1 else math.nan
        rows.append((s.t, math.exp(s.log_tau), s.residual_empty, s.residual_h[0], rh1, s.m,
                     mk[0], mk[1], s.orth_defect))
    rows.sort(key=lambda row: row[0])
    w.csv("residual.csv", ("t", "tau", "residual_empty", "residual_h0", "residual_h1", "m",
                           "m1", "m2", "orth_defect"), rows)
    r0 = max(row[3] / row[2] for row in rows)
    m.compare("residual.h0_ratio", r0, H0_RATIO,
              detail="max over samples of residual(u_N with h0) / residual(Q1 - Q2~)")
    if all(math.isfinite(row[4]) for row in rows):
        r1 = max(row[4] / row[3] for row in rows)
        m.compare("residual.h1_ratio", r1, H1_RATIO,
                  detail="max over samples of residual(with h1) / residual(with h0)")
    else:
        m.skip("residual.h1_ratio", "levels < 1")
    m.summary["coupling_changes"] = list(changes)


def cmd_evolve(cfg: RunConfig, w: Writer) -> None:
    m = w.manifest
    ec = cfg.evolve
    if not (0.0 < ec.t_ratio < 1.0):
        raise InputError("evolve.t_ratio must lie in (0, 1)")
    if not (1.0 < ec.tau_from < ec.tau_start):
        raise InputError("evolve needs 1 < tau_from < tau_start")
    if not (0 <= ec.depth <= ec.levels):
        raise InputError("evolve.depth must lie in [0, levels]")
    setup = _setup(cfg)
    mod = setup.modulation
    t_from = _t_at_tau(mod, ec.tau_from)
    config = corrections.StackConfig(_t_at_tau(mod, ec.tau_start), min(t_from + 0.01, cfg.t0),
                                     levels=max(ec.levels, 1), dr_lambda2=ec.dr_lambda2)
    setup, stack, changes = corrections.couple_stack(setup, config, ec.coupling_iterations)
    t_to = ec.t_ratio * t_from
    r = corrections.tracking_grid(math.exp(float(setup.modulation.log_lambda1(t_to))),
                                  ec.r_outer, ec.per_decade)
    rep = corrections.track_nonlinear(stack, t_from, t_to, r, ec.n_steps, ec.depth,
                                      ec.fit_window, ec.n_out, keep_snapshots=ec.snapshots)
    rows = rep.rows()
    for row in rows:
        row["ratio_error"] = abs(math.exp(row["lambda_fit_log"] - row["lambda1_log"]) - 1.0)
    w.json("tracking.json", {"rows": rows, "energy_drift": rep.energy_drift,
                             "max_ratio_error": rep.max_ratio_error,
                             "coupling_changes": list(changes)})
    for k, (tk, (u, ut)) in enumerate(sorted(rep.snapshots.items())):
        w.csv(f"snapshot_{k:03d}.csv", ("r", "u", "ut"), zip(r, u, ut))
    m.compare("evolve.energy_drift", rep.energy_drift, ENERGY_DRIFT,
              detail="max relative change of the discrete wave-map energy")
    m.compare("evolve.tracking", rep.max_ratio_error, TRACKING_TOL,
              detail="max |lambda_fit/lambda1 - 1| over the output times")
    m.summary["t_from"] = t_from
    m.summary["t_to"] = t_to


def cmd_spectral(cfg: RunConfig, w: Writer) -> None:
    m = w.manifest
    sc = cfg.spectral
    if not (0.0 < sc.xi_min < sc.xi_max) or sc.n_xi < 2:
        raise InputError("spectral needs 0 < xi_min < xi_max and n_xi >= 2")
    grid = grid_per_decade(min(1e-3, 1e-2), 1e3, sc.per_decade)
    series = spectral.recurse_fj(sc.jmax, grid)
    worst = max(spectral.recursion_residual(series, j) for j in range(1, min(4, sc.jmax) + 1))
    m.compare("spectral.recursion", worst, RECURSION_TOL,
              detail="max_j<=4 |L~ phi_j - phi_{j-1}| / |phi_{j-1}| on 0.1 <= R <= 10")
    bounds = spectral.check_fj_bounds(series, min(6, sc.jmax))
    w.csv("fj_bounds.csv", ("j", "sup_ratio", "scaled_ratio", "abs_f_at_1"), bounds.rows())
    m.info("spectral.C_fit", bounds.C)
    m.compare("spectral.C_flatness", bounds.flatness, C_FLATNESS,
              detail="max/min over j = 1..6 of sup ratio / C^j")
    xi = np.exp(np.linspace(math.log(sc.xi_min), math.log(sc.xi_max), sc.n_xi))
    scan = spectral.scan(xi, sc.r_match_factor, jobs=cfg.jobs)
    w.csv("spectral.csv", ("xi", "a_abs_sq", "rho", "rho_over_xi2"), scan.rows())
    m.compare("spectral.envelope_flatness", max(scan.flatness), ENVELOPE_FLATNESS, "<")
    if any(0.01 <= x <= 0.5 for x in xi):
        m.compare("spectral.plateau", scan.spread(0.01, 0.5), PLATEAU_FACTOR,
                  detail="rho within a factor of its median on [0.01, 0.5]")
    else:
        m.skip("spectral.plateau", "no xi in [0.01, 0.5]")
    if any(10.0 <= x <= 100.0 for x in xi):
        m.compare("spectral.growth", scan.spread(10.0, 100.0, 2.0), PLATEAU_FACTOR,
                  detail="rho/xi^2 within a factor of its median on [10, 100]")
    else:
        m.skip("spectral.growth", "no xi in [10, 100]")


_RUNNERS = {"verify": cmd_verify, "modulation": cmd_modulation, "profile": cmd_profile,
            "residual": cmd_residual, "evolve": cmd_evolve, "spectral": cmd_spectral}


# ------------------------------------------------------------------ entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(3, f"{self.prog}: error: {message}\n")


EPILOG = """exit codes:
  0  every check passed
  2  a check failed (the manifest lists which)
  3  invalid configuration or arguments
  4  numerical instability or quadrature failure
  5  insufficient resolution
"""


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wavemaplab", description=__doc__.splitlines()[0], epilog=EPILOG,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=_RUNNERS[name].__doc__ or name, epilog=EPILOG,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", type=Path, help="JSON config file; flags override it")
        sp.add_argument("--beta", type=float)
        sp.add_argument("--t0", type=float)
        sp.add_argument("--c-source", choices=("paper", "computed"), dest="c_source")
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--out", type=str, dest="output_dir")
    return p


def load_config(args) -> RunConfig:
    if args.config is not None:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read config: {exc}") from None
        cfg = RunConfig.loads(text)
    else:
        cfg = RunConfig()
    for key in ("beta", "t0", "c_source", "jobs", "output_dir"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    return cfg.validate()


def run(command: str, cfg: RunConfig) -> Manifest:
    manifest = Manifest(command, cfg)
    writer = Writer(Path(cfg.output_dir), manifest)
    try:
        _RUNNERS[command](cfg, writer)
    except LabError as exc:
        manifest.error(f"{command}.run", exc)
    writer.finish()
    return manifest


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except LabError as exc:
        print(f"wavemaplab: {exc}", file=sys.stderr)
        return exc.exit_code
    manifest = run(args.command, cfg)
    for c in manifest.checks:
        print(f"{c.status.upper():5s} {c.name}  {c.value if c.status != 'error' else c.detail}")
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())
