"""Configuration, experiment orchestration, Monte Carlo ensembles and report files."""
from __future__ import annotations

import csv
import functools
import math
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import __version__, analysis, spectral
from .model import (DomainError, EntropyPair, FluxModel, InitialData, NoiseModel, validate_model)
from .solver import (ConvergenceError, PathRecord, SolverConfig, calibrate_star_constant, energy_report,
                     fixed_point_solve, heat_history, mean_and_se, mild_iterate, sample_increments,
                     simulate, standard_normals, star_norm, tree_mean, zero_path)
from .symbol import exponent_fit

EXPERIMENTS = ("max_principle", "mass_martingale", "comparison", "energy", "contraction",
               "viscosity_sweep", "symbol_scan", "trace_scan", "kinetic_budget", "regularity_sweep",
               "smoothing", "weak_forms", "simulate")
ALIASES = {"kinetic": "kinetic_budget", "trace": "trace_scan", "symbol": "symbol_scan"}

DEFAULT_REPLICAS = {"max_principle": 64, "mass_martingale": 256, "comparison": 512, "energy": 64,
                    "contraction": 64, "viscosity_sweep": 16, "symbol_scan": 1, "trace_scan": 16,
                    "kinetic_budget": 64, "regularity_sweep": 64, "smoothing": 10_000, "weak_forms": 4,
                    "simulate": 1}
SWEEP_EPS = (1e-3, 3e-3, 1e-2)
VISCOSITY_EPS = (1e-2, 5e-3, 2.5e-3)
SWEEP_EXPERIMENTS = ("energy", "kinetic_budget", "regularity_sweep")


# ------------------------------------------------------------------ config


class ExperimentError(RuntimeError):
    """A module error raised while running a named experiment."""

    def __init__(self, experiment: str, cause: BaseException):
        super().__init__(f"experiment {experiment}: {type(cause).__name__}: {cause}")
        self.experiment = experiment
        self.cause = cause


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "simulate"
    replicas: int = 0  # 0 = experiment default
    seed: int = 0
    eps_list: tuple[float, ...] = ()
    out_dir: str = "out"
    threads: int = 1
    scale_grid_with_eps: bool = True
    c_star_safety: float = 2.0
    picard_replicas: int = 16
    picard_tol: float = 1e-8
    depths: tuple[int, ...] = (8, 4, 2)
    delta_min: float = 1e-4
    delta_max: float = 1e-2
    points: int = 9
    n_directions: int = 1000
    symbol_exponents: tuple[int, ...] = (1, 2)
    s: float = 0.02
    r: float = 1.5
    holder_lambda: float = 0.25
    regularity_grid: int = 200
    second_profile: str = "cosine"
    second_params: tuple[float, ...] = (0.0, 0.5, 2.0)


@dataclass(frozen=True)
class FluxSection:
    kind: str = "example-family"
    exponents: tuple[int, ...] = (1,)
    coeffs: tuple[float, ...] = ()
    a_lo: float = -1.0
    b_hi: float = 1.0
    L0: float | None = None


@dataclass(frozen=True)
class NoiseSection:
    K: int = 8
    alpha_scale: float = 0.2
    M: float = 0.5
    profile: str = "cosine"


@dataclass(frozen=True)
class InitSection:
    profile: str = "bump"
    params: tuple[float, ...] = (-0.6, 1.4, 0.5, 0.35)


@dataclass(frozen=True)
class SolverSection:
    eps: float = 1e-2
    dt: float | None = None
    auto_cfl: bool = True
    T: float = 0.5
    N: int = 200
    backend: str = "finite-volume"
    flux_scheme: str = "engquist-osher"
    cfl_safety: float = 0.9
    n_snapshots: int = 50


SECTIONS = {"experiment": ExperimentSection, "flux": FluxSection, "noise": NoiseSection,
            "init": InitSection, "solver": SolverSection}


def _kind_of(cls, name):
    ann = {f.name: f.type for f in fields(cls)}[name]
    return {"int": int, "float": float, "str": str, "bool": _bool, "tuple[float, ...]": _floats,
            "tuple[int, ...]": _ints, "float | None": _opt_float}[ann]


_CHOICES = {("flux", "kind"): ("example-family", "polynomial"),
            ("noise", "profile"): ("cosine", "uniform"),
            ("init", "profile"): ("constant", "step", "bump", "cosine", "tabulated"),
            ("experiment", "second_profile"): ("constant", "step", "bump", "cosine", "tabulated"),
            ("solver", "backend"): ("finite-volume", "mild"),
            ("solver", "flux_scheme"): ("engquist-osher", "lax-friedrichs")}


def _constraints(section: str, key: str, value):
    """Return an error message when ``value`` violates a documented constraint."""
    if (section, key) in _CHOICES and value not in _CHOICES[section, key]:
        return f"{key} must be one of {', '.join(_CHOICES[section, key])}"
    if section == "experiment":
        if key == "name" and value not in EXPERIMENTS and value not in ALIASES:
            return f"unknown experiment {value!r}"
        if key in ("replicas", "seed") and value < 0:
            return f"{key} must be non-negative"
        if key in ("threads", "picard_replicas", "points", "n_directions", "regularity_grid") and value < 1:
            return f"{key} must be >= 1"
        if key == "eps_list" and any(e <= 0 for e in value):
            return "viscosities must be positive"
        if key == "depths" and (any(d < 1 for d in value) or len(value) < 2):
            return "need at least two depths of at least one cell"
        if key in ("delta_min", "delta_max", "picard_tol", "c_star_safety") and value <= 0:
            return f"{key} must be positive"
        if key == "holder_lambda" and not 0 < value < 0.5:
            return "holder_lambda must lie in (0, 1/2)"
    if section == "solver":
        if key in ("eps", "T") and value <= 0:
            return f"{key} must be positive"
        if key == "dt" and value is not None and value <= 0:
            return "dt must be positive"
        if key == "cfl_safety" and not 0 < value <= 1:
            return "cfl_safety must lie in (0, 1]"
        if key == "N" and value < 8:
            return "N must be at least 8"
        if key == "n_snapshots" and value < 1:
            return "n_snapshots must be >= 1"
    if section == "noise":
        if key == "K" and value < 0:
            return "K must be non-negative"
        if key in ("M", "alpha_scale") and value <= 0:
            return f"{key} must be positive"
    if section == "flux" and key == "exponents" and (not value or any(v < 1 for v in value)):
        return "exponents must be positive integers"
    return None


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = ExperimentSection()
    flux: FluxSection = FluxSection()
    noise: NoiseSection = NoiseSection()
    init: InitSection = InitSection()
    solver: SolverSection = SolverSection()

    @property
    def name(self) -> str:
        return self.experiment.name

    @property
    def replicas(self) -> int:
        return self.experiment.replicas

    def build_flux(self) -> FluxModel:
        f = self.flux
        if f.kind == "polynomial":
            return FluxModel.polynomial(f.coeffs, f.a_lo, f.b_hi, f.L0)
        return FluxModel.example(f.exponents, f.a_lo, f.b_hi, f.L0)

    def build_noise(self) -> NoiseModel:
        n = self.noise
        return NoiseModel.off() if n.K == 0 else NoiseModel.default(n.K, n.alpha_scale, n.M, n.profile)

    def build_u0(self) -> InitialData:
        return InitialData(self.init.profile, self.init.params)

    def solver_config(self, eps: float | None = None, N: int | None = None, dt: float | None = None) -> SolverConfig:
        s = self.solver
        return SolverConfig(eps=s.eps if eps is None else eps, T=s.T, N=s.N if N is None else N,
                            dt=s.dt if dt is None else dt, cfl_safety=s.cfl_safety, backend=s.backend,
                            flux_scheme=s.flux_scheme, n_snapshots=s.n_snapshots)

    def with_(self, **sections) -> "ExperimentConfig":
        """Replace keys per section, e.g. ``with_(noise={"K": 0})``."""
        out = self
        for sec, kv in sections.items():
            out = replace(out, **{sec: replace(getattr(out, sec), **kv)})
        return out


def parse_config(text: str, resolved: bool = True) -> ExperimentConfig:
    """Parse ``[section]`` / ``key = value`` text; '#' and ';' start comments.

    Missing keys take documented defaults.  Unless ``resolved`` is false the
    experiment's replica count and viscosity list are filled in as well, so the
    echoed configuration is complete.
    """
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, val = (p.strip() for p in line.split("=", 1))
        cls = SECTIONS[section]
        if key not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno)
        try:
            conv = _kind_of(cls, key)(val)
        except ValueError as exc:
            raise ConfigError(f"type mismatch for {key!r}: {exc}", lineno) from None
        if section == "experiment" and key == "name":
            conv = ALIASES.get(conv, conv)
        msg = _constraints(section, key, conv)
        if msg:
            raise ConfigError(msg, lineno)
        if section == "experiment" and key == "replicas" and conv == 0:
            raise ConfigError("replicas must be >= 1", lineno)
        values[section][key] = (conv, lineno)
    built = {s: SECTIONS[s](**{k: v for k, (v, _) in values[s].items()}) for s in SECTIONS}
    solver = values["solver"]
    dt_given = built["solver"].dt is not None
    if "auto_cfl" in solver:
        auto, line = solver["auto_cfl"]
        if auto and dt_given:
            raise ConfigError("give either dt or auto_cfl = true, not both", line)
        if not auto and not dt_given:
            raise ConfigError("auto_cfl = false needs an explicit dt", line)
    if dt_given:
        built["solver"] = replace(built["solver"], auto_cfl=False)
    cfg = ExperimentConfig(**built)
    return resolve(cfg) if resolved else cfg


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill experiment-dependent defaults (replicas, viscosity list)."""
    ex = cfg.experiment
    name = ALIASES.get(ex.name, ex.name)
    reps = ex.replicas or DEFAULT_REPLICAS[name]
    eps = ex.eps_list
    if not eps:
        eps = SWEEP_EPS if name in SWEEP_EXPERIMENTS else VISCOSITY_EPS if name == "viscosity_sweep" \
            else (cfg.solver.eps,)
    return replace(cfg, experiment=replace(ex, name=name, replicas=reps, eps_list=tuple(eps)))


def format_config(cfg: ExperimentConfig) -> str:
    """Emit every key of every section; ``parse_config`` reads it back unchanged."""
    out = []
    for sec in SECTIONS:
        out.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f in fields(obj):
            out.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def load_config(path: str | None, resolved: bool = True) -> ExperimentConfig:
    if path is None:
        return resolve(ExperimentConfig()) if resolved else ExperimentConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), resolved)


# ------------------------------------------------------------------- results


@dataclass(frozen=True)
class Check:
    name: str
    measured: float
    tolerance: float
    relation: str  # "<=", ">=", "<", ">"
    reference: str = ""

    @property
    def passed(self) -> bool:
        m, t = self.measured, self.tolerance
        if not np.isfinite(m):
            return False
        return {"<=": m <= t, ">=": m >= t, "<": m < t, ">": m > t}[self.relation]

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark} {self.name}: measured {self.measured:.6g} {self.relation} {self.tolerance:.6g}"


@dataclass
class RunManifest:
    experiment: str
    config: ExperimentConfig
    checks: list[Check] = field(default_factory=list)
    measured: dict[str, object] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    reference: str = ""
    version: str = __version__

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def text(self) -> str:
        lines = ["[run]", f"experiment = {self.experiment}", f"reference = {self.reference}",
                 f"version = {self.version}", f"passed = {_fmt(self.passed)}",
                 f"wall_clock_s = {self.wall_clock:.3f}", f"artifacts = {', '.join(self.artifacts)}", ""]
        for c in self.checks:
            lines += [f"[check.{c.name}]", f"measured = {c.measured!r}", f"relation = {c.relation}",
                      f"tolerance = {c.tolerance!r}", f"passed = {_fmt(c.passed)}"]
            if c.reference:
                lines.append(f"reference = {c.reference}")
            lines.append("")
        if self.measured:
            lines.append("[measured]")
            lines += [f"{k} = {_fmt(v) if not isinstance(v, (list, np.ndarray)) else _fmt(tuple(map(float, v)))}"
                      for k, v in self.measured.items()]
            lines.append("")
        if self.skipped:
            lines.append("[skipped]")
            lines += [f"{k} = {v}" for k, v in self.skipped.items()]
            lines.append("")
        for sec in SECTIONS:
            obj = getattr(self.config, sec)
            lines.append(f"[config.{sec}]")
            lines += [f"{f.name} = {_fmt(getattr(obj, f.name))}" for f in fields(obj)]
            lines.append("")
        return "\n".join(lines)

    def write(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "manifest.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.text())
        return path


def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if not isinstance(v, str) else v for v in row])


def write_snapshots(out_dir: str, traj) -> list[str]:
    """Snapshots as little-endian float64 (time, replica, cell) plus a text sidecar."""
    data = np.ascontiguousarray(traj.snapshots, dtype="<f8")
    bin_path = os.path.join(out_dir, "snapshots.bin")
    data.tofile(bin_path)
    side = os.path.join(out_dir, "snapshots.txt")
    with open(side, "w", encoding="utf-8") as fh:
        fh.write(f"N = {traj.grid.N}\nreplicas = {data.shape[1]}\ncount = {data.shape[0]}\n"
                 f"layout = time, replica, cell\nendianness = little\ndtype = float64\n"
                 f"times = {', '.join(_num(t) for t in traj.snapshot_times)}\n")
    return ["snapshots.bin", "snapshots.txt"]


def read_snapshots(out_dir: str) -> tuple[np.ndarray, np.ndarray]:
    meta = {}
    with open(os.path.join(out_dir, "snapshots.txt"), encoding="utf-8") as fh:
        for line in fh:
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    shape = (int(meta["count"]), int(meta["replicas"]), int(meta["N"]))
    data = np.fromfile(os.path.join(out_dir, "snapshots.bin"), dtype="<f8").reshape(shape)
    return data, np.array(_floats(meta["times"]))


# --------------------------------------------------------------- Monte Carlo


@dataclass(frozen=True)
class EnsembleStats:
    """Per-quantity (mean, standard error); ``differences`` holds paired first-minus-second statistics."""

    replicas: int
    quantities: dict[str, tuple[float, float]]
    differences: dict[str, tuple[float, float]] = field(default_factory=dict)
    values: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def _quantities(traj) -> dict[str, np.ndarray]:
    s = traj.series
    return {"mass_drift": s["mass"][-1] - s["mass"][0], "final_l2": s["l2"][-1],
            "min": s["min"].min(axis=0), "max": s["max"].max(axis=0),
            "dissipation": np.sum(s["grad_energy"][:-1], axis=0) * traj.plan.dt}


def ensemble(cfg: ExperimentConfig, u0=None, replicas=None, noise=None, solver=None, threads=1,
             keep_states=False, observers=(), first_replica: int = 0):
    """One simulated ensemble keyed by (seed, replica index)."""
    flux = cfg.build_flux()
    noise = cfg.build_noise() if noise is None else noise
    solver = cfg.solver_config() if solver is None else solver
    R = cfg.replicas if replicas is None else replicas
    plan = solver.plan(flux)
    reps = range(first_replica, first_replica + R)
    path = sample_increments(noise, plan, cfg.experiment.seed, reps) if noise.K else zero_path(plan, R, 0)
    u0 = cfg.build_u0() if u0 is None else u0
    return simulate(u0, solver, flux, noise, path, keep_states=keep_states, threads=threads,
                    observers=observers)


def monte_carlo(cfg: ExperimentConfig, paired: bool = False, second_u0=None, threads: int = 1) -> EnsembleStats:
    """Ensemble statistics; with ``paired`` a second ensemble from ``second_u0`` reuses the same paths.

    Without pairing the second ensemble (if any) uses fresh replica indices.
    """
    first = ensemble(cfg, threads=threads)
    q1 = _quantities(first)
    stats = {k: tuple(float(x) for x in mean_and_se(v)) for k, v in q1.items()}
    diffs, vals = {}, {k: v for k, v in q1.items()}
    if paired or second_u0 is not None:
        u2 = cfg.build_u0() if second_u0 is None else second_u0
        second = ensemble(cfg, u0=u2, threads=threads, first_replica=0 if paired else cfg.replicas)
        q2 = _quantities(second)
        for k in q1:
            d = q1[k] - q2[k]
            vals["diff_" + k] = d
            diffs[k] = tuple(float(x) for x in mean_and_se(d))
    return EnsembleStats(cfg.replicas, stats, diffs, vals)


# --------------------------------------------------------------- experiments


def _slope(x, y) -> float:
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])


def resolved_grid(N: int, eps: float, scale: bool = True) -> int:
    """Smallest multiple of N whose cell width does not exceed eps (or N itself)."""
    if not scale:
        return N
    return N * max(1, math.ceil(1.0 / (eps * N) - 1e-9))


@functools.lru_cache(maxsize=2)
def _sweep(cfg: ExperimentConfig, threads: int):
    """Shared viscosity sweep (with streamed kinetic measure) behind energy, kinetic and regularity."""
    flux = cfg.build_flux()
    runs = []
    for eps in cfg.experiment.eps_list:
        N = resolved_grid(cfg.solver.N, eps, cfg.experiment.scale_grid_with_eps)
        traj = ensemble(cfg, solver=cfg.solver_config(eps=eps, N=N), threads=threads,
                        observers=[analysis.KineticObserver(flux)])
        runs.append((eps, N, traj))
    return tuple(runs)


def _sweep_key(cfg: ExperimentConfig) -> ExperimentConfig:
    # experiments sharing a sweep differ only by name and by report-only keys
    return cfg.with_(experiment={"name": "energy", "out_dir": "", "threads": 1})


class _Context:
    def __init__(self, cfg: ExperimentConfig, out_dir: str, threads: int):
        self.cfg, self.out_dir, self.threads = cfg, out_dir, threads
        self.checks: list[Check] = []
        self.measured: dict[str, object] = {}
        self.skipped: dict[str, str] = {}
        self.artifacts: list[str] = []

    def check(self, name, measured, tolerance, relation, reference=""):
        self.checks.append(Check(name, float(measured), float(tolerance), relation, reference))

    def csv(self, name, header, rows):
        write_csv(os.path.join(self.out_dir, name), header, rows)
        self.artifacts.append(name)


def _series_rows(traj):
    s = traj.series
    t = traj.times
    mean = {k: tree_mean(s[k], axis=1) for k in ("mass", "l2", "grad_energy")}
    lo, hi = s["min"].min(axis=1), s["max"].max(axis=1)
    return [(j, t[j], mean["mass"][j], mean["l2"][j], lo[j], hi[j], mean["grad_energy"][j])
            for j in range(len(t))]


SERIES_HEADER = ("step", "t", "mass", "l2", "min", "max", "grad_energy")


def _exp_simulate(ctx: _Context):
    traj = ensemble(ctx.cfg, threads=ctx.threads)
    ctx.csv("series.csv", SERIES_HEADER, _series_rows(traj))
    ctx.artifacts += write_snapshots(ctx.out_dir, traj)
    flux = ctx.cfg.build_flux()
    ctx.measured.update(dt=traj.plan.dt, n_steps=traj.plan.n_steps)
    ctx.check("min_above_lower_bound", traj.series["min"].min(), flux.a_lo - 1e-8, ">=")
    ctx.check("max_below_upper_bound", traj.series["max"].max(), flux.b_hi + 1e-8, "<=")


def _exp_max_principle(ctx: _Context):
    t0 = time.perf_counter()
    traj = ensemble(ctx.cfg, threads=ctx.threads)
    elapsed = time.perf_counter() - t0
    flux = ctx.cfg.build_flux()
    ctx.csv("series.csv", SERIES_HEADER, _series_rows(traj))
    ref = "maximum principle for the parabolic approximation"
    ctx.check("global_min", traj.series["min"].min(), flux.a_lo - 1e-8, ">=", ref)
    ctx.check("global_max", traj.series["max"].max(), flux.b_hi + 1e-8, "<=", ref)
    ctx.check("runtime_s", elapsed, 60.0, "<=")
    ctx.measured.update(overshoot_count=traj.overshoot_count, dt=traj.plan.dt, n_steps=traj.plan.n_steps)


def _exp_mass_martingale(ctx: _Context):
    cfg = ctx.cfg
    ref = "boundary weak form with a spatially constant test function"
    det = ensemble(cfg, replicas=1, noise=NoiseModel.off(), threads=ctx.threads)
    drift0 = float(np.max(np.abs(det.series["mass"] - det.series["mass"][0])))
    ctx.check("noise_off_drift", drift0, 1e-13, "<=", ref)
    noisy = ensemble(cfg, threads=ctx.threads)
    ms = analysis.mass_series(noisy)
    ctx.check("noise_on_mean_drift_in_se", abs(ms.mean_drift) / ms.se if ms.se > 0 else 0.0, 3.0, "<=", ref)
    small = ensemble(cfg, replicas=min(4, cfg.replicas), keep_states=True)
    ident = float(np.max(analysis.mass_increment_defect(small, cfg.build_noise())))
    ctx.check("increment_identity", ident, 1e-13, "<=")
    ctx.measured.update(mean_drift=ms.mean_drift, se=ms.se)
    ctx.csv("mass.csv", ("replica", "drift"), [(i, d) for i, d in enumerate(ms.drift)])


def _exp_comparison(ctx: _Context):
    cfg = ctx.cfg
    ref = "comparison principle in expectation"
    u1 = cfg.build_u0()
    u2 = InitialData(cfg.experiment.second_profile, cfg.experiment.second_params)
    flux = cfg.build_flux()
    solver = cfg.solver_config()
    plan = solver.plan(flux)
    off = NoiseModel.off()
    zp = zero_path(plan, 1, 0)
    d1 = simulate(u1, solver, flux, off, zp, keep_states=True)
    d2 = simulate(u2, solver, flux, off, zp, keep_states=True)
    det = analysis.positive_part_series(d1, d2, tol=1e-12)
    ctx.check("noise_off_step_increases", det.violations, 0, "<=", "monotone scheme comparison")
    ctx.measured["noise_off_max_step_increase"] = float(det.max_increase.max())
    a = ensemble(cfg, u0=u1, threads=ctx.threads)
    b = ensemble(cfg, u0=u2, threads=ctx.threads)
    pp = analysis.positive_part_series(a, b)
    final = pp.values[-1]
    m, se = mean_and_se(final)
    init = float(pp.values[0, 0])
    se = float(se) if np.isfinite(se) else 0.0
    ctx.check("expected_positive_part_at_T", float(m), init + 2 * se, "<=", ref)
    ctx.measured.update(initial_positive_part=init, mean_at_T=float(m), se=se,
                        pathwise_violation_fraction=float(np.mean(pp.increased)))
    mean_series = tree_mean(pp.values, axis=1)
    ctx.csv("comparison.csv", ("t", "mean_positive_part", "noise_off_positive_part"),
            [(t, mean_series[i], det.values[plan.snapshot_steps[i], 0]) for i, t in enumerate(pp.times)])


def _exp_energy(ctx: _Context):
    runs = _sweep(_sweep_key(ctx.cfg), ctx.threads)
    rows, consts = [], []
    for eps, N, traj in runs:
        rep = energy_report(traj)
        consts.append(rep.constant)
        rows.append((eps, N, rep.lhs, rep.rhs, rep.constant))
    consts = np.array(consts)
    ctx.csv("energy.csv", ("eps", "N", "lhs", "rhs", "constant"), rows)
    ctx.check("constant_finite", float(np.all(np.isfinite(consts))), 1.0, ">=")
    ctx.check("constant_variation", (consts.max() - consts.min()) / consts.min(), 0.20, "<=",
              "energy estimate uniform in the viscosity")
    ctx.measured["constants"] = consts


def _exp_kinetic_budget(ctx: _Context):
    runs = _sweep(_sweep_key(ctx.cfg), ctx.threads)
    worst, means, rows = 0.0, [], []
    for eps, N, traj in runs:
        h = traj.extra["kinetic"]
        acc = analysis.accumulated_dissipation(traj)
        worst = max(worst, float(np.max(np.abs(h.per_replica - acc) / np.maximum(acc, 1e-300))))
        means.append(float(tree_mean(h.per_replica)))
        nz = np.argwhere(h.mass > 0)
        name = f"kinetic_eps{eps:g}.csv"
        ctx.csv(name, ("t_bin", "x_bin", "xi_bin", "mass"), [(i, j, k, h.mass[i, j, k]) for i, j, k in nz])
    means = np.array(means)
    eps = np.array([r[0] for r in runs])
    h = runs[int(np.argmin(eps))][2].extra["kinetic"]  # headline file: smallest viscosity
    ctx.csv("kinetic.csv", ("t_bin", "x_bin", "xi_bin", "mass"),
            [(i, j, k, h.mass[i, j, k]) for i, j, k in np.argwhere(h.mass > 0)])
    order = np.argsort(-eps)  # decreasing viscosity
    seq = means[order]
    ctx.check("histogram_mass_identity", worst, 1e-12, "<=", "kinetic measure of the viscous problem")
    ctx.check("no_monotone_growth", float(np.all(np.diff(seq) > 0)), 0.0, "<=",
              "kinetic measure bounded in expectation")
    ctx.check("normalized_slope_abs", abs(_slope(np.log(eps), means / np.mean(means))), 0.1, "<=")
    ctx.measured["mean_mass"] = means


def _exp_regularity(ctx: _Context):
    ex = ctx.cfg.experiment
    runs = _sweep(_sweep_key(ctx.cfg), ctx.threads)
    cut = analysis.Cutoff()
    ws, hs, rows, eps_list = [], [], [], []
    for eps, N, traj in runs:
        w = analysis.gagliardo_norm(traj, ex.s, ex.r, cut, coarsen_to=ex.regularity_grid)
        h = analysis.holder_time_seminorm(traj, ex.holder_lambda, coarsen_to=ex.regularity_grid)
        ws.append(w)
        hs.append(h)
        eps_list.append(eps)
        rows += [(eps, i, w[i], h[i]) for i in range(len(w))]
    rep = analysis.RegularityReport(ex.s, ex.r, cut, ex.holder_lambda, np.array(eps_list), np.array(ws), np.array(hs))
    mw, mh = rep.means()
    ctx.csv("regularity.csv", ("eps", "replica", "w_s_r", "holder"), rows)
    le = np.log(rep.eps)
    ctx.check("w_s_r_slope_abs", abs(_slope(le, mw)), 0.1, "<=", "averaging-lemma regularity uniform in viscosity")
    ctx.check("holder_slope_abs", abs(_slope(le, mh)), 0.1, "<=", "Holder-in-time bound uniform in viscosity")
    ctx.measured.update(mean_w_s_r=mw, mean_holder=mh)


_CONTRACTION_PAIRS = ((InitialData("cosine", (0.0, 0.5, 1.0)), InitialData("constant", (0.3,))),
                      (InitialData("bump", (-0.6, 1.4, 0.5, 0.35)), InitialData("step", (-0.5, 0.5, 0.5))),
                      (InitialData("cosine", (0.1, 0.4, 2.0)), InitialData("constant", (-0.2,))))


def _exp_contraction(ctx: _Context):
    cfg = ctx.cfg
    ex = cfg.experiment
    flux, noise, u0 = cfg.build_flux(), cfg.build_noise(), cfg.build_u0()
    solver = cfg.solver_config()
    plan = solver.plan(flux)
    path = sample_increments(noise, plan, ex.seed, range(cfg.replicas)) if noise.K else \
        zero_path(plan, cfg.replicas, 0)
    pairs = []
    for a, b in _CONTRACTION_PAIRS:
        v1 = simulate(a, solver, flux, noise, path, keep_states=True, threads=ctx.threads).states
        v2 = simulate(b, solver, flux, noise, path, keep_states=True, threads=ctx.threads).states
        k1 = mild_iterate(v1, solver, flux, noise, path, u0=u0).states
        k2 = mild_iterate(v2, solver, flux, noise, path, u0=u0).states
        pairs.append((v1, v2, k1, k2))
    # the first Picard pairs enter the calibration too
    pr = min(ex.picard_replicas, cfg.replicas)
    ppath = PathRecord(path.seed, path.replicas[:pr], path.dt, path.increments[:, :pr])
    vs = [heat_history(u0, solver, plan, pr)]
    for _ in range(4):
        vs.append(mild_iterate(vs[-1], solver, flux, noise, ppath, u0=u0).states)
    calib_set = pairs + [(vs[m], vs[m + 1], vs[m + 1], vs[m + 2]) for m in range(3)]
    cal = calibrate_star_constant(calib_set, solver, plan, ex.c_star_safety)
    C = cal["C_star"]
    ctx.measured.update(C_measured=cal["measured"], C_star=C)
    rows = []
    ref = "contraction of the mild map in the weighted norm"
    for i, (v1, v2, k1, k2) in enumerate(pairs):
        num = star_norm(k1, k2, C, 0.5, solver.eps, plan.dt)
        den = star_norm(v1, v2, C, 0.5, solver.eps, plan.dt)
        ratio = num / den
        rows.append(("input", i, num, den, ratio))
        ctx.check(f"pair{i}_ratio", ratio, 1.0, "<", ref)
    try:
        _, hist = fixed_point_solve(u0, solver, flux, noise, ppath, tol=ex.picard_tol, max_iter=200, C_star=C)
    except ConvergenceError as exc:
        hist = exc.history
    ratios = [hist[i + 1] / hist[i] for i in range(len(hist) - 1)]
    rows += [("picard", i + 1, hist[i], hist[i - 1] if i else float("nan"),
              hist[i] / hist[i - 1] if i else float("nan")) for i in range(len(hist))]
    later = ratios[1:]
    ctx.check("picard_max_ratio_after_2", max(later) if later else float("nan"), 0.9, "<", ref)
    ctx.measured.update(picard_iterations=len(hist))
    ctx.csv("contraction.csv", ("kind", "index", "numerator", "denominator", "ratio"), rows)


def _exp_viscosity_sweep(ctx: _Context):
    cfg = ctx.cfg
    flux = cfg.build_flux()
    eps_all = sorted(set(cfg.experiment.eps_list) | {e / 2 for e in cfg.experiment.eps_list}, reverse=True)
    dt = min(cfg.solver_config(eps=e).plan(flux).dt for e in eps_all)
    if cfg.solver.dt is not None:
        dt = min(dt, cfg.solver.dt)
    states = {}
    for e in eps_all:
        tr = ensemble(cfg, solver=cfg.solver_config(eps=e, dt=dt), keep_states=True, threads=ctx.threads)
        states[e] = tr
    ref = "vanishing-viscosity Cauchy trend"
    dists, rows = [], []
    for e in cfg.experiment.eps_list:
        a, b = states[e], states[e / 2]
        diff = np.abs(a.states[:-1] - b.states[:-1]).sum(axis=-1) * a.grid.dx
        d = diff.sum(axis=0) * a.plan.dt
        dists.append(d)
        rows += [(e, i, d[i]) for i in range(len(d))]
    dists = np.array(dists)  # (n_eps, R), eps decreasing
    per_rep = np.all(np.diff(dists, axis=0) < 0, axis=0)
    means = tree_mean(dists, axis=1)
    ctx.check("replicas_not_decreasing", float(np.count_nonzero(~per_rep)), 0.0, "<=", ref)
    ctx.check("mean_not_decreasing", float(np.count_nonzero(np.diff(means) >= 0)), 0.0, "<=", ref)
    ctx.measured.update(mean_distances=means, dt=dt)
    ctx.csv("viscosity.csv", ("eps", "replica", "l1_distance"), rows)


def _exp_symbol(ctx: _Context):
    ex = ctx.cfg.experiment
    deltas = np.logspace(np.log10(ex.delta_min), np.log10(ex.delta_max), ex.points)
    t0 = time.perf_counter()
    flux = FluxModel.example(ex.symbol_exponents, ctx.cfg.flux.a_lo, ctx.cfg.flux.b_hi, ctx.cfg.flux.L0)
    rep = exponent_fit(flux, deltas, n_directions=ex.n_directions)
    linear = FluxModel.polynomial([0.0, 0.0, 0.5])
    lrep = exponent_fit(linear, deltas, L0=1.0, n_directions=ex.n_directions)
    elapsed = time.perf_counter() - t0
    target = 1.0 / max(ex.symbol_exponents)
    ref = "nondegeneracy exponent of the example flux family"
    ctx.check("alpha_hat", rep.alpha_hat, target - 0.05, ">=", ref)
    ctx.check("fit_residual", rep.residual, 0.05, "<=")
    ctx.check("linear_alpha_error", abs(lrep.alpha_hat - 1.0), 0.01, "<=")
    ctx.check("runtime_s", elapsed, 30.0, "<=")
    ctx.measured.update(alpha_hat=rep.alpha_hat, residual=rep.residual, linear_alpha_hat=lrep.alpha_hat,
                        argmax_kappa_smallest_delta=tuple(rep.argmax_kappa[0]), warnings=len(rep.warnings))
    rows = [(d, m, t, " ".join(_num(k) for k in kap))
            for d, m, t, kap in zip(rep.deltas, rep.sup_measures, rep.argmax_tau, rep.argmax_kappa)]
    ctx.csv("symbol.csv", ("delta", "sup_measure", "argmax_tau", "argmax_kappa"), rows)


def _trace_run(cfg, N, depths_cells, noise=None, replicas=1, threads=1):
    flux = cfg.build_flux()
    solver = cfg.solver_config(N=N)
    dx = 1.0 / N
    depths = [c * dx for c in depths_cells]
    ob = analysis.LayerObserver(depths)
    traj = ensemble(cfg, replicas=replicas, noise=noise, solver=solver, threads=threads, observers=[ob])
    return analysis.strong_trace(traj, depths), traj


def _exp_trace(ctx: _Context):
    cfg = ctx.cfg
    cells = sorted(cfg.experiment.depths, reverse=True)
    N = cfg.solver.N
    ref = "strong boundary trace along layers"
    det, _ = _trace_run(cfg, N, cells, NoiseModel.off())
    fine, _ = _trace_run(cfg, 2 * N, cells, NoiseModel.off())
    sto, _ = _trace_run(cfg, N, cells, replicas=cfg.replicas, threads=ctx.threads)
    ctx.check("deterministic_not_decreasing", float(np.count_nonzero(~det.cauchy_left) +
                                                    np.count_nonzero(~det.cauchy_right)), 0.0, "<=", ref)
    ctx.check("stochastic_not_decreasing", float(np.count_nonzero(~sto.cauchy_left) +
                                                 np.count_nonzero(~sto.cauchy_right)), 0.0, "<=", ref)
    T = cfg.solver.T
    for side in ("left", "right"):
        shift = float(analysis.l1_time_distance(det.times, getattr(det, "trace_" + side)[:, 0],
                                                fine.times, getattr(fine, "trace_" + side)[:, 0], T))
        finest = float(getattr(det, "distances_" + side)[-1, 0])
        ctx.check(f"refinement_shift_{side}_over_finest", shift / finest if finest > 0 else 0.0, 2.0, "<=")
    rows = []
    every = det.times.shape[0] // 50 or 1
    for j in range(0, det.times.shape[0], every):
        for k, d in enumerate(det.depths):
            rows.append((det.times[j], d, det.left[k, j, 0], det.right[k, j, 0]))
    ctx.csv("traces.csv", ("t", "depth", "left", "right"), rows)
    ctx.measured.update(distances_left=det.distances_left[:, 0], distances_right=det.distances_right[:, 0])


def _exp_weak_forms(ctx: _Context):
    cfg = ctx.cfg
    flux, noise, u0 = cfg.build_flux(), cfg.build_noise(), cfg.build_u0()
    T = cfg.solver.T
    tf0 = analysis.TestFunction(t_end=0.8 * T, center=0.5, width=0.3)
    tr = ensemble(cfg, keep_states=True, threads=ctx.threads)
    rk = analysis.weak_form_residual(tr, "kinetic", tf0, flux, noise)
    rc = analysis.weak_form_residual(tr, "conservation", tf0, flux, noise)
    ctx.check("kinetic_equals_conservation", float(np.max(np.abs(rk - rc))), 1e-12, "<=",
              "kinetic formulation of the viscous problem")
    off = NoiseModel.off()
    tfx = analysis.TestFunction(t_end=0.8 * T, center=0.5, width=0.3, xi_coeffs=(1.0, 0.5, -0.7))
    Ns = (100, 200, 400)
    res = []
    for N in Ns:
        s = cfg.solver_config(N=N)
        d = simulate(u0, s, flux, off, zero_path(s.plan(flux), 1, 0), keep_states=True)
        res.append(float(analysis.weak_form_residual(d, "kinetic", tfx, flux, off)[0]))
    slope = _slope(np.log(1.0 / np.array(Ns)), np.log(res))
    ctx.check("refinement_slope", slope, 0.8, ">=")
    # shocked deterministic run at small viscosity
    s = cfg.solver_config(eps=1e-3, N=resolved_grid(cfg.solver.N, 1e-3))
    shock = simulate(u0, s, flux, off, zero_path(s.plan(flux), 1, 0), keep_states=True)
    worst = math.inf
    rows = [("kinetic_xi", N, r) for N, r in zip(Ns, res)]
    for c in np.linspace(flux.a_lo + 0.05, flux.b_hi - 0.05, 19):
        for cen, w in ((0.5, 0.45), (0.3, 0.2), (0.7, 0.2), (0.85, 0.1)):
            tf = analysis.TestFunction(t_end=T, center=cen, width=w)
            dfc = float(analysis.weak_form_residual(shock, "entropy", tf, flux, off, EntropyPair.kruzhkov(c))[0])
            worst = min(worst, dfc)
    ctx.check("entropy_defect_min", worst, -1e-8, ">=", "entropy inequality")
    rows.append(("entropy_min_defect", s.N, worst))
    ctx.measured.update(kinetic_residuals=np.array(res), conservation_residual=float(rc[0]))
    ctx.csv("weak_forms.csv", ("case", "N", "value"), rows)


def _exp_smoothing(ctx: _Context):
    cfg = ctx.cfg
    eps = cfg.solver.eps
    rng = np.random.Generator(np.random.Philox(key=cfg.experiment.seed))
    # semigroup smoothing against the energy identity
    worst = -math.inf
    for _ in range(100):
        h = spectral.SpectralField(rng.standard_normal(128) / (1.0 + np.arange(128)))
        lhs = float(spectral.smoothing_integral(h, cfg.solver.T, eps))
        rhs = float(np.sum(h.coeffs[1:] ** 2) / (2 * eps))
        worst = max(worst, (lhs - rhs) / rhs)
    ctx.check("smoothing_excess", worst, 1e-10, "<=", "heat-semigroup energy estimate")
    # Duhamel order gain: operator norm per mode cap, and random forcings stay below it
    steps, T = 64, 1.0
    times = np.linspace(0.0, T, steps + 1)
    per_mode = spectral.duhamel_gain(256, times, eps)
    gains = np.array([per_mode[:cap].max() for cap in (64, 128, 256)])
    base = rng.standard_normal((steps, 256))
    excess = -math.inf
    for cap, g in zip((64, 128, 256), gains):
        vals = base[:, :cap]
        out = spectral.duhamel(spectral.SpectralPath(times, vals), eps)
        num = np.sum(spectral.ha_norm(spectral.SpectralField(out.values[1:]), 1.0) ** 2)
        den = np.sum(spectral.ha_norm(spectral.SpectralField(vals), 0.0) ** 2)
        excess = max(excess, math.sqrt(num / den) / g - 1.0)
    ctx.check("duhamel_gain_variation", (gains.max() - gains.min()) / gains.min(), 0.05, "<=",
              "Duhamel operator gains one order")
    ctx.check("random_forcing_gain_excess", excess, 1e-12, "<=")
    # stochastic convolution variance against the isometry
    n_paths = cfg.replicas
    psi = np.zeros((steps, 2, 1))
    psi[:, 1, 0] = 1.0
    inc = np.empty((steps, n_paths, 1))
    for p in range(n_paths):
        inc[:, p, 0] = standard_normals(cfg.experiment.seed, p, 0, 0, steps) * math.sqrt(T / steps)
    sc = spectral.stochastic_convolution(spectral.SpectralPath(times, np.broadcast_to(psi[:, None], (steps, n_paths, 2, 1))),
                                         inc, eps)
    coef = sc.values[-1, :, 1]
    lam = np.pi ** 2
    exact = -math.expm1(-2 * eps * lam * T) / (2 * eps * lam)
    m, _ = mean_and_se(coef * coef)
    var_se = float(np.sqrt(tree_mean((coef * coef - m) ** 2) / n_paths))
    z = abs(float(m) - exact) / var_se
    ctx.check("ito_variance_z", z, 3.0, "<=", "Ito isometry")
    ctx.measured.update(duhamel_gains=gains, mc_variance=float(m), exact_variance=exact)
    ctx.csv("smoothing.csv", ("quantity", "value"),
            [("smoothing_excess", worst), *[(f"gain_cap{c}", g) for c, g in zip((64, 128, 256), gains)],
             ("mc_variance", float(m)), ("exact_variance", exact)])


_RUNNERS = {"simulate": _exp_simulate, "max_principle": _exp_max_principle,
            "mass_martingale": _exp_mass_martingale, "comparison": _exp_comparison, "energy": _exp_energy,
            "kinetic_budget": _exp_kinetic_budget, "regularity_sweep": _exp_regularity,
            "contraction": _exp_contraction, "viscosity_sweep": _exp_viscosity_sweep,
            "symbol_scan": _exp_symbol, "trace_scan": _exp_trace, "weak_forms": _exp_weak_forms,
            "smoothing": _exp_smoothing}

_REFERENCES = {"max_principle": "maximum principle for the parabolic approximation",
               "mass_martingale": "Neumann weak form with constant test function",
               "comparison": "comparison principle", "energy": "energy estimate",
               "contraction": "contraction of the mild map", "viscosity_sweep": "vanishing viscosity",
               "symbol_scan": "nondegeneracy of the kinetic symbol", "trace_scan": "strong boundary traces",
               "kinetic_budget": "kinetic measure bound", "regularity_sweep": "averaging regularity and Holder bound",
               "smoothing": "heat semigroup smoothing", "weak_forms": "kinetic and entropy formulations",
               "simulate": "viscous approximation"}


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None, threads: int | None = None) -> RunManifest:
    """Run the named experiment, write its CSVs and manifest, and return the manifest."""
    cfg = resolve(cfg)
    name = cfg.name
    if name not in _RUNNERS:
        raise ValueError(f"unknown experiment {name!r}")
    out_dir = cfg.experiment.out_dir if out_dir is None else out_dir
    threads = cfg.experiment.threads if threads is None else threads
    os.makedirs(out_dir, exist_ok=True)
    if name != "symbol_scan":
        validate_model(cfg.build_flux(), cfg.build_noise(), cfg.build_u0())
    ctx = _Context(cfg, out_dir, threads)
    t0 = time.perf_counter()
    try:
        _RUNNERS[name](ctx)
    except (DomainError, ValueError, ArithmeticError, RuntimeError) as exc:
        raise ExperimentError(name, exc) from exc
    man = RunManifest(name, cfg, ctx.checks, ctx.measured, ctx.skipped, ctx.artifacts,
                      time.perf_counter() - t0, _REFERENCES[name])
    man.write(out_dir)
    return man


__all__ = ["EXPERIMENTS", "ALIASES", "ConfigError", "ExperimentError", "ExperimentConfig", "ExperimentSection", "FluxSection",
           "NoiseSection", "InitSection", "SolverSection", "parse_config", "format_config", "load_config",
           "resolve", "Check", "RunManifest", "EnsembleStats", "monte_carlo", "ensemble", "run_experiment",
           "resolved_grid", "write_csv", "write_snapshots", "read_snapshots"]
