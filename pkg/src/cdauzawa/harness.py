"""Experiment configuration, reference files, CSV traces and the canned studies.

A study is described by an :class:`ExperimentConfig`, usually loaded from a
YAML file with one section per concern::

    study: solve
    mesh: {n: 32}
    flow: {re: 2500, pairing: scott-vogelius}
    solver: {methods: [uzawa, cda-uzawa], gamma: [1], mu: 1, tol: 1.0e-8, max_iter: 200}
    data: {m: [16], nsr: [0.05, 0.01, 0.001], seed: 0}
    reference: {path: null, build_missing: false}
    output: {dir: out, record_wall_time: true}

Every run writes its fully resolved configuration next to its CSV output.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .cda import PRNG_ALGORITHM, NoiseSpec, add_noise, coarse_average
from .linalg import backend_name
from .mesh import build_coarse_grid, cavity_mesh
from .solvers import (
    CONVERGED,
    DEFAULT_RE_SCHEDULE,
    DIV_UPDATES,
    DIVERGED,
    METHODS,
    NEWTON_SWITCH,
    PAIRINGS,
    STALLED,
    ConfigError,
    FlowOperators,
    SolverConfig,
    State,
    Trace,
    continuation_reference,
    estimate_contraction_rate,
    residual_star_norm,
    reynolds_schedule,
    run_fixed_point,
)

log = logging.getLogger(__name__)

STUDIES = ("reference", "solve", "study-H", "study-gamma", "noise-study", "th-demo")
EXIT_CODES = {CONVERGED: 0, STALLED: 2, DIVERGED: 3}
EXIT_CONFIG_ERROR = 4

TRACE_COLUMNS = ("iter", "increment_star", "error_star", "div_norm", "wall_seconds")
SUMMARY_COLUMNS = (
    "run", "method", "pairing", "n", "m", "gamma", "nsr", "status", "iterations",
    "final_increment", "final_error", "min_error", "final_div_norm", "rate",
)
REFERENCE_MAGIC = "nse-ref"
REFERENCE_VERSION = "v1"


# -- configuration --------------------------------------------------------------
@dataclass
class ExperimentConfig:
    study: str = "solve"
    n: int = 32
    re: float = 2500.0
    pairing: str = "scott-vogelius"
    methods: list = field(default_factory=lambda: ["uzawa", "cda-uzawa"])
    m: list = field(default_factory=lambda: [16])
    gamma: list = field(default_factory=lambda: [1.0])
    mu: float = 1.0
    nsr: list = field(default_factory=lambda: [0.05, 0.01, 0.001])
    seed: int = 0
    tol: float = 1e-8
    max_iter: int = 200
    newton_switch: float = NEWTON_SWITCH
    newton_max_iter: int = 20
    schedule: list = field(default_factory=lambda: [float(r) for r in DEFAULT_RE_SCHEDULE])
    th_n: list = field(default_factory=lambda: [32, 64])
    th_update: str = "vertex-average"
    reference: str | None = None
    build_missing: bool = False
    out: str = "out"
    record_wall_time: bool = True

    @property
    def nu(self) -> float:
        return 1.0 / self.re

    def validate(self) -> "ExperimentConfig":
        if self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r}; expected one of {STUDIES}")
        if not (self.re > 0 and math.isfinite(self.re)):
            raise ConfigError(f"Re must be positive, got {self.re}")
        if self.n < 1:
            raise ConfigError(f"n must be positive, got {self.n}")
        if self.pairing not in PAIRINGS:
            raise ConfigError(f"unknown pairing {self.pairing!r}")
        if self.th_update not in DIV_UPDATES:
            raise ConfigError(f"unknown Taylor-Hood pressure update {self.th_update!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; expected a nonempty subset of {METHODS}")
        for name in ("m", "gamma", "nsr", "th_n"):
            if not getattr(self, name):
                raise ConfigError(f"{name} list must not be empty")
        meshes = {"reference": [], "th-demo": self.th_n}.get(self.study, [self.n])
        for n in meshes:
            for m in self.m:
                if m < 1 or n % m:
                    raise ConfigError(f"coarse grid m={m} must divide n={n}")
        if any(g < 0 for g in self.gamma) or self.mu < 0:
            raise ConfigError("gamma and mu must be nonnegative")
        if any(x < 0 for x in self.nsr):
            raise ConfigError("nsr must be nonnegative")
        if not self.tol > 0 or self.max_iter < 0 or self.newton_max_iter < 0:
            raise ConfigError("tol must be positive and iteration limits nonnegative")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        return self


# nested YAML key -> field name
_CONFIG_KEYS = {
    ("study",): "study",
    ("mesh", "n"): "n",
    ("flow", "re"): "re",
    ("flow", "pairing"): "pairing",
    ("solver", "methods"): "methods",
    ("solver", "gamma"): "gamma",
    ("solver", "mu"): "mu",
    ("solver", "tol"): "tol",
    ("solver", "max_iter"): "max_iter",
    ("solver", "newton_switch"): "newton_switch",
    ("solver", "newton_max_iter"): "newton_max_iter",
    ("data", "m"): "m",
    ("data", "nsr"): "nsr",
    ("data", "seed"): "seed",
    ("reference", "path"): "reference",
    ("reference", "build_missing"): "build_missing",
    ("reference", "schedule"): "schedule",
    ("th_demo", "n"): "th_n",
    ("th_demo", "pressure_update"): "th_update",
    ("output", "dir"): "out",
    ("output", "record_wall_time"): "record_wall_time",
}
_LISTS = {"methods": str, "gamma": float, "m": int, "nsr": float, "schedule": float, "th_n": int}
_SCALARS = {
    "study": str, "n": int, "re": float, "pairing": str, "mu": float, "tol": float,
    "max_iter": int, "newton_switch": float, "newton_max_iter": int, "seed": int,
    "th_update": str, "out": str,
}


def _coerce(name: str, value):
    try:
        if name in _LISTS:
            items = value if isinstance(value, (list, tuple)) else [value]
            return [_scalar(_LISTS[name], v) for v in items]
        if name in ("build_missing", "record_wall_time"):
            if not isinstance(value, bool):
                raise TypeError("expected true or false")
            return value
        if name == "reference":
            return None if value is None else str(value)
        return _scalar(_SCALARS[name], value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r} ({exc})") from exc


def _scalar(kind, v):
    if isinstance(v, bool) or isinstance(v, (dict, list)):
        raise TypeError(f"expected {kind.__name__}")
    if kind is int:
        f = float(v)
        if f != int(f):
            raise ValueError("expected an integer")
        return int(f)
    return kind(v)


def _flatten(tree: dict, prefix=()) -> dict:
    out = {}
    for key, value in tree.items():
        path = prefix + (str(key),)
        if isinstance(value, dict):
            out.update(_flatten(value, path))
        else:
            out[path] = value
    return out


def config_from_mapping(tree: dict | None, **overrides) -> ExperimentConfig:
    """Build a validated config from a nested mapping plus flat field overrides."""
    values = {}
    for path, value in _flatten(tree or {}).items():
        if path not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {'.'.join(path)!r}")
        name = _CONFIG_KEYS[path]
        values[name] = _coerce(name, value)
    for name, value in overrides.items():
        if value is not None:
            values[name] = _coerce(name, value)
    return ExperimentConfig(**values).validate()


def load_config(path: str | os.PathLike | None, **overrides) -> ExperimentConfig:
    tree = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"config {path} must be a mapping")
    return config_from_mapping(tree, **overrides)


def resolved_config(cfg: ExperimentConfig) -> dict:
    """Nested mapping of every setting, defaults included, plus provenance."""
    tree: dict = {}
    for path, name in _CONFIG_KEYS.items():
        node = tree
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = getattr(cfg, name)
    tree["provenance"] = {
        "package_version": __version__,
        "prng": PRNG_ALGORITHM,
        "linear_solver": backend_name(),
    }
    return tree


def write_sidecar(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg.study}.resolved.yaml"
    path.write_text(yaml.safe_dump(resolved_config(cfg), sort_keys=False))
    return path


# -- reference files ------------------------------------------------------------
class ReferenceFileError(ValueError):
    pass


class ReferenceVersionError(ReferenceFileError):
    pass


class ReferenceSizeError(ReferenceFileError):
    pass


class ReferenceChecksumError(ReferenceFileError):
    pass


_PAIRING_TAGS = {"scott-vogelius": "sv", "taylor-hood": "th"}


def _num(x: float) -> str:
    return format(float(x), ".17g")


def reference_text(state: State, n: int, pairing: str, re: float, gamma: float) -> str:
    lines = [
        f"{REFERENCE_MAGIC} {REFERENCE_VERSION} n={n} pairing={_PAIRING_TAGS[pairing]} "
        f"Re={_num(re)} gamma={_num(gamma)}",
        f"velocity={len(state.u)} pressure={len(state.p)}",
    ]
    lines += [_num(v) for v in state.u]
    lines += [_num(v) for v in state.p]
    body = "\n".join(lines) + "\n"
    return body + f"sha256={hashlib.sha256(body.encode()).hexdigest()}\n"


def save_reference(path, state: State, n: int, pairing: str, re: float, gamma: float = 0.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_text(reference_text(state, n, pairing, re, gamma))
    os.replace(tmp, path)
    return path


@dataclass
class ReferenceHeader:
    n: int
    pairing: str
    re: float
    gamma: float
    velocity_dofs: int
    pressure_dofs: int


def load_reference(path, expected_sizes: tuple[int, int] | None = None) -> tuple[State, ReferenceHeader]:
    """Read a reference file, verifying version, checksum and (optionally) sizes."""
    text = Path(path).read_text()
    first = text.split("\n", 1)[0].split()
    if len(first) < 2 or first[0] != REFERENCE_MAGIC:
        raise ReferenceVersionError(f"{path}: not a reference file")
    if first[1] != REFERENCE_VERSION:
        raise ReferenceVersionError(f"{path}: unsupported version {first[1]} (expected {REFERENCE_VERSION})")
    body, sep, tail = text.rstrip("\n").rpartition("\n")
    body += sep
    digest = tail[len("sha256="):] if tail.startswith("sha256=") else None
    if digest is None or hashlib.sha256(body.encode()).hexdigest() != digest:
        raise ReferenceChecksumError(f"{path}: checksum mismatch (truncated or modified file)")
    lines = body.rstrip("\n").split("\n")
    try:
        fields = dict(item.split("=", 1) for item in first[2:])
        sizes = dict(item.split("=", 1) for item in lines[1].split())
        pairing = {v: k for k, v in _PAIRING_TAGS.items()}[fields["pairing"]]
        header = ReferenceHeader(
            int(fields["n"]), pairing, float(fields["Re"]), float(fields["gamma"]),
            int(sizes["velocity"]), int(sizes["pressure"]),
        )
        values = np.array([float(v) for v in lines[2:]])
    except (KeyError, ValueError, IndexError) as exc:
        raise ReferenceFileError(f"{path}: malformed reference file ({exc})") from exc
    if len(values) != header.velocity_dofs + header.pressure_dofs:
        raise ReferenceSizeError(f"{path}: coefficient count does not match its header")
    if expected_sizes is not None and (header.velocity_dofs, header.pressure_dofs) != tuple(expected_sizes):
        raise ReferenceSizeError(
            f"{path}: holds {header.velocity_dofs}+{header.pressure_dofs} dofs (n={header.n}), "
            f"current mesh needs {expected_sizes[0]}+{expected_sizes[1]}"
        )
    nv = header.velocity_dofs
    return State(values[:nv].copy(), values[nv:].copy()), header


# -- CSV traces -----------------------------------------------------------------
def _cell(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def trace_csv(trace: Trace, record_wall_time: bool = True, with_phase: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS + (("phase",) if with_phase else ()))
    for r in trace.records:
        wall = f"{r.wall_seconds:.6f}" if record_wall_time else "0"
        row = [r.k, _cell(r.increment_star), _cell(r.error_star), _cell(r.div_norm), wall]
        writer.writerow(row + ([r.phase] if with_phase else []))
    return buf.getvalue()


def write_trace(path, trace: Trace, record_wall_time: bool = True, with_phase: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(trace_csv(trace, record_wall_time, with_phase))
    return path


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- runs -----------------------------------------------------------------------
@dataclass
class RunResult:
    name: str
    method: str
    pairing: str
    n: int
    m: int | None
    gamma: float | None
    nsr: float | None
    trace: Trace
    state: State

    @property
    def status(self) -> str:
        return self.trace.status

    def rate(self, window: int = 10) -> float | None:
        try:
            return estimate_contraction_rate(self.trace, window)
        except ValueError:
            return None

    def summary_row(self) -> list:
        t = self.trace
        last = t.records[-1] if t.records else None
        errors = t.errors
        finite = errors[np.isfinite(errors)]
        return [
            self.name, self.method, self.pairing, self.n,
            "" if self.m is None else self.m,
            "" if self.gamma is None else _num(self.gamma),
            "" if self.nsr is None else _num(self.nsr),
            self.status, len(t),
            _cell(last.increment_star if last else None),
            _cell(last.error_star if last else None),
            _cell(finite.min() if len(finite) else None),
            _cell(last.div_norm if last else None),
            _cell(self.rate()),
        ]


def write_summary(cfg: ExperimentConfig, results: list[RunResult]) -> Path:
    path = Path(cfg.out) / f"{cfg.study}_summary.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for r in results:
        writer.writerow(r.summary_row())
    path.write_text(buf.getvalue())
    return path


def exit_status(statuses) -> int:
    """0 if every run converged, 3 if any diverged, 2 otherwise."""
    statuses = list(statuses)
    if statuses and all(s == CONVERGED for s in statuses):
        return EXIT_CODES[CONVERGED]
    if DIVERGED in statuses:
        return EXIT_CODES[DIVERGED]
    return EXIT_CODES[STALLED]


_OPS_CACHE: dict = {}


def flow_operators(n: int, pairing: str = "scott-vogelius", div_update: str = "projection") -> FlowOperators:
    """Operators for the ``n x n`` cavity, shared between runs of one process."""
    key = (n, pairing, div_update)
    if key not in _OPS_CACHE:
        _OPS_CACHE[key] = FlowOperators(cavity_mesh(n), pairing, div_update=div_update)
    return _OPS_CACHE[key]


def default_reference_path(cfg: ExperimentConfig, n: int, pairing: str, gamma: float) -> Path:
    tag = _PAIRING_TAGS[pairing]
    return Path(cfg.out) / f"reference_n{n}_{tag}_Re{_num(cfg.re)}_gamma{_num(gamma)}.txt"


def _schedule(cfg: ExperimentConfig) -> list[float]:
    return [1.0 / r for r in reynolds_schedule(cfg.re, sorted(cfg.schedule))]


def compute_reference(cfg: ExperimentConfig, ops: FlowOperators, gamma: float = 0.0):
    """Continuation solve plus its certification numbers."""
    state, reports = continuation_reference(cfg.nu, _schedule(cfg), ops, coupled_graddiv=gamma)
    cert = {
        "residual_star": residual_star_norm(state, ops, cfg.nu, gamma),
        "div_norm": ops.div_norm(state.u),
        "stages": reports,
    }
    return state, cert


def obtain_reference(cfg: ExperimentConfig, ops: FlowOperators, n: int, gamma: float = 0.0) -> State:
    """Load the configured (or default-named) reference, building it if allowed."""
    if cfg.reference is not None and ops.mesh.n == cfg.n and ops.pairing == cfg.pairing:
        path = Path(cfg.reference)
    else:
        path = default_reference_path(cfg, n, ops.pairing, gamma)
    sizes = (ops.V.dof_count, ops.Q.dof_count)
    if path.exists():
        state, header = load_reference(path, sizes)
        if not math.isclose(header.re, cfg.re) or header.pairing != ops.pairing:
            raise ConfigError(f"{path} holds Re={header.re:g} {header.pairing}, "
                              f"run needs Re={cfg.re:g} {ops.pairing}")
        return state
    if not cfg.build_missing:
        raise ConfigError(f"reference file {path} not found; run the 'reference' command first "
                          "or set reference.build_missing: true")
    state, cert = compute_reference(cfg, ops, gamma)
    save_reference(path, state, n, ops.pairing, cfg.re, gamma)
    print(f"built reference {path}: residual_star={cert['residual_star']:.3e} div_norm={cert['div_norm']:.3e}")
    return state


def run_method(
    cfg: ExperimentConfig,
    ops: FlowOperators,
    method: str,
    reference: State,
    m: int | None = None,
    gamma: float = 1.0,
    name: str | None = None,
    data=None,
    nsr: float | None = None,
) -> RunResult:
    """One run of ``method`` from the zero State, tracking error against ``reference``."""
    n = ops.mesh.n
    if data is None and m is not None:
        data = coarse_average(reference.u, ops.V, build_coarse_grid(ops.mesh, m))
    uses_gamma = method in ("uzawa", "cda-uzawa", "iterated-penalty")
    scfg = SolverConfig(
        cfg.nu, method, gamma=gamma if uses_gamma else 1.0, mu=cfg.mu, data=data,
        tol=cfg.tol, max_iter=cfg.max_iter, pairing=ops.pairing,
        coupled_graddiv=0.0 if uses_gamma or ops.pairing == "scott-vogelius" else gamma,
    )
    state, trace = run_fixed_point(scfg, ops.zero_state(), ops, reference=reference)
    name = name or _run_name(method, m, gamma if uses_gamma else None)
    return RunResult(name, method, ops.pairing, n, m, gamma if uses_gamma else None, nsr, trace, state)


def _run_name(method: str, m: int | None, gamma: float | None) -> str:
    parts = [method]
    if m is not None:
        parts.append(f"m{m}")
    if gamma is not None:
        parts.append(f"gamma{_num(gamma)}")
    return "_".join(parts)


def _report(result: RunResult, csv_path: Path) -> None:
    rate = result.rate()
    t = result.trace
    err = t.records[-1].error_star if t.records else None
    print(
        f"{result.name}: {result.status} after {len(t)} iterations"
        + (f", error_star={err:.3e}" if err is not None else "")
        + (f", rate={rate:.4f}" if rate is not None else "")
        + f" -> {csv_path}"
    )


# -- commands -------------------------------------------------------------------
def cmd_reference(cfg: ExperimentConfig) -> int:
    gamma = 0.0 if cfg.pairing == "scott-vogelius" else cfg.gamma[0]
    ops = flow_operators(cfg.n, cfg.pairing)
    write_sidecar(cfg)
    t0 = time.perf_counter()
    state, cert = compute_reference(cfg, ops, gamma)
    path = Path(cfg.reference) if cfg.reference else default_reference_path(cfg, cfg.n, cfg.pairing, gamma)
    save_reference(path, state, cfg.n, cfg.pairing, cfg.re, gamma)
    for st in cert["stages"]:
        print(f"  Re={1 / st.nu:g}: {st.picard_iterations} Picard + {st.newton_iterations} Newton steps")
    print(f"reference written to {path} ({time.perf_counter() - t0:.1f} s)")
    print(f"certification: steady residual *-norm = {cert['residual_star']:.3e}, "
          f"||div u|| = {cert['div_norm']:.3e}")
    return 0


def _sweep(cfg: ExperimentConfig, combos) -> list[RunResult]:
    ops = flow_operators(cfg.n, cfg.pairing, cfg.th_update)
    gamma_ref = 0.0 if cfg.pairing == "scott-vogelius" else cfg.gamma[0]
    reference = obtain_reference(cfg, ops, cfg.n, gamma_ref)
    results = []
    for method, m, gamma in combos:
        res = run_method(cfg, ops, method, reference, m, gamma)
        path = write_trace(Path(cfg.out) / f"{cfg.study}_{res.name}.csv", res.trace, cfg.record_wall_time)
        _report(res, path)
        results.append(res)
    write_summary(cfg, results)
    return results


def _combos(methods, ms, gammas):
    seen = []
    for method in methods:
        for m in (ms if method.startswith("cda-") else [None]):
            for g in (gammas if method in ("uzawa", "cda-uzawa", "iterated-penalty") else [None]):
                key = (method, m, 1.0 if g is None else g)
                if key not in seen:
                    seen.append(key)
    return seen


def cmd_solve(cfg: ExperimentConfig) -> int:
    write_sidecar(cfg)
    results = _sweep(cfg, _combos(cfg.methods, cfg.m, cfg.gamma))
    return exit_status(r.status for r in results)


def cmd_study_h(cfg: ExperimentConfig) -> int:
    write_sidecar(cfg)
    results = _sweep(cfg, _combos(cfg.methods, cfg.m, cfg.gamma[:1]))
    return exit_status(r.status for r in results)


def cmd_study_gamma(cfg: ExperimentConfig) -> int:
    write_sidecar(cfg)
    results = _sweep(cfg, _combos(cfg.methods, cfg.m[:1], cfg.gamma))
    return exit_status(r.status for r in results)


def noise_run(cfg: ExperimentConfig, ops: FlowOperators, reference: State, m: int, gamma: float,
              nsr: float) -> tuple[RunResult, RunResult]:
    """CDA-Uzawa on noisy data, alone and with the hand-off to Newton.

    The first run iterates CDA-Uzawa to ``cfg.tol`` and shows the error
    plateau; the second stops CDA-Uzawa at ``cfg.newton_switch`` and continues
    the same trace with plain Newton.
    """
    grid = build_coarse_grid(ops.mesh, m)
    noisy = add_noise(reference.u, NoiseSpec(nsr, cfg.seed))
    data = coarse_average(noisy, ops.V, grid)
    plateau = run_method(cfg, ops, "cda-uzawa", reference, m, gamma, data=data, nsr=nsr,
                         name=f"nsr{_num(nsr)}_cda-uzawa")

    base = SolverConfig(cfg.nu, "cda-uzawa", gamma=gamma, mu=cfg.mu, data=data,
                        tol=cfg.newton_switch, max_iter=cfg.max_iter, pairing=ops.pairing)
    state, trace = run_fixed_point(base, ops.zero_state(), ops, reference=reference)
    if trace.status == CONVERGED:
        newton = dataclasses.replace(base, method="newton", tol=cfg.tol, max_iter=cfg.newton_max_iter, data=None)
        last = trace.records[-1].increment_star
        trace.status = STALLED
        state, trace = run_fixed_point(newton, state, ops, reference=reference, trace=trace,
                                       initial_increment=last if last < cfg.tol else None)
    handoff = RunResult(f"nsr{_num(nsr)}_newton-switch", "cda-uzawa+newton", ops.pairing, ops.mesh.n,
                        m, gamma, nsr, trace, state)
    return plateau, handoff


def cmd_noise_study(cfg: ExperimentConfig) -> int:
    write_sidecar(cfg)
    ops = flow_operators(cfg.n, cfg.pairing, cfg.th_update)
    gamma_ref = 0.0 if cfg.pairing == "scott-vogelius" else cfg.gamma[0]
    reference = obtain_reference(cfg, ops, cfg.n, gamma_ref)
    results = []
    for nsr in cfg.nsr:
        for res in noise_run(cfg, ops, reference, cfg.m[0], cfg.gamma[0], nsr):
            path = write_trace(Path(cfg.out) / f"noise-study_{res.name}.csv", res.trace,
                               cfg.record_wall_time, with_phase=True)
            _report(res, path)
            results.append(res)
    write_summary(cfg, results)
    return exit_status(r.status for r in results if r.method != "cda-uzawa")


def th_demo_runs(cfg: ExperimentConfig, n: int) -> tuple[RunResult, RunResult, dict]:
    """Taylor-Hood CDA-Uzawa and its Scott-Vogelius control on the ``n x n`` mesh."""
    gamma = cfg.gamma[0]
    m = cfg.m[0]
    th_ops = flow_operators(n, "taylor-hood", cfg.th_update)
    th_ref = obtain_reference(cfg, th_ops, n, gamma)
    th = run_method(cfg, th_ops, "cda-uzawa", th_ref, m, gamma, name=f"n{n}_taylor-hood")
    sv_ops = flow_operators(n, "scott-vogelius")
    sv_ref = obtain_reference(cfg, sv_ops, n, 0.0)
    sv = run_method(cfg, sv_ops, "cda-uzawa", sv_ref, m, gamma, name=f"n{n}_scott-vogelius")
    info = {"reference_div_norm": th_ops.div_norm(th_ref.u)}
    return th, sv, info


def error_floor(trace: Trace, tail: int = 10) -> float:
    """Smallest error over the final ``tail`` iterations."""
    errors = trace.errors[-tail:]
    return float(np.nanmin(errors))


def cmd_th_demo(cfg: ExperimentConfig) -> int:
    write_sidecar(cfg)
    results = []
    for n in cfg.th_n:
        th, sv, info = th_demo_runs(cfg, n)
        for res in (th, sv):
            path = write_trace(Path(cfg.out) / f"th-demo_{res.name}.csv", res.trace, cfg.record_wall_time)
            _report(res, path)
            results.append(res)
        print(f"n={n}: Taylor-Hood error floor {error_floor(th.trace):.3e}, "
              f"Scott-Vogelius final error {sv.trace.records[-1].error_star:.3e}, "
              f"Taylor-Hood reference ||div u|| {info['reference_div_norm']:.3e}")
    write_summary(cfg, results)
    return exit_status(r.status for r in results)


COMMANDS = {
    "reference": cmd_reference,
    "solve": cmd_solve,
    "study-H": cmd_study_h,
    "study-gamma": cmd_study_gamma,
    "noise-study": cmd_noise_study,
    "th-demo": cmd_th_demo,
}


def run_study(cfg: ExperimentConfig) -> int:
    return COMMANDS[cfg.study](cfg)

