"""Nonlinear iterations for the steady driven-cavity problem and their driver.

Every step maps a :class:`State` to the next one.  The Uzawa family solves a
velocity-only system and then updates the pressure from the divergence;
Picard and Newton solve the coupled velocity-pressure system.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .assembly import ForceField, assembler_for, project_div_to_pressure
from .cda import CoarseField, NudgingOperator, nudging_operator
from .linalg import Factorization, LinearSolveError, reuse_analysis, solve_linear
from .mesh import CoarseGrid, Mesh
from .spaces import DirichletBC, Family, apply_dirichlet, build_space, cavity_bc

log = logging.getLogger(__name__)

METHODS = ("uzawa", "cda-uzawa", "picard", "cda-picard", "newton", "iterated-penalty")
PAIRINGS = ("scott-vogelius", "taylor-hood")
DIV_UPDATES = ("projection", "vertex-average")

CONVERGED = "converged"
STALLED = "stalled"
DIVERGED = "diverged"

DIVERGENCE_FACTOR = 1e6
NEWTON_SWITCH = 1e-4


class ConfigError(ValueError):
    pass


class ContinuationError(RuntimeError):
    def __init__(self, nu: float, message: str):
        super().__init__(f"continuation stalled at nu={nu:g} (Re={1 / nu:g}): {message}")
        self.nu = nu


@dataclass
class State:
    u: np.ndarray
    p: np.ndarray
    accumulator: np.ndarray | None = None  # running velocity sum of the iterated penalty method

    def copy(self) -> "State":
        acc = None if self.accumulator is None else self.accumulator.copy()
        return State(self.u.copy(), self.p.copy(), acc)


@dataclass
class SolverConfig:
    nu: float
    method: str = "cda-uzawa"
    gamma: float = 1.0
    mu: float = 1.0
    data: CoarseField | None = None
    tol: float = 1e-8
    max_iter: int = 200
    pairing: str = "scott-vogelius"
    coupled_graddiv: float = 0.0  # grad-div added to Picard/Newton (Taylor-Hood references)
    convection: bool = True  # False gives the Stokes limit of the Uzawa and Picard families

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigError(f"viscosity must be positive, got {self.nu}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.pairing not in PAIRINGS:
            raise ConfigError(f"unknown element pairing {self.pairing!r}")
        if self.gamma < 0 or self.mu < 0 or self.coupled_graddiv < 0:
            raise ConfigError("gamma, mu and coupled_graddiv must be nonnegative")
        if self.method.startswith("cda-") and self.data is None:
            raise ConfigError(f"{self.method} needs coarse data")
        if self.method in ("uzawa", "cda-uzawa", "iterated-penalty") and not self.gamma > 0:
            raise ConfigError(f"{self.method} needs gamma > 0")


class FlowOperators:
    """Spaces, boundary conditions and the iteration-independent operators of one mesh."""

    def __init__(
        self,
        mesh: Mesh,
        pairing: str = "scott-vogelius",
        force: ForceField | None = None,
        div_update: str = "projection",
    ):
        if pairing not in PAIRINGS:
            raise ConfigError(f"unknown element pairing {pairing!r}")
        if div_update not in DIV_UPDATES:
            raise ConfigError(f"unknown pressure update {div_update!r}; expected one of {DIV_UPDATES}")
        self.div_update = div_update
        self.mesh = mesh
        self.pairing = pairing
        self.V = build_space(mesh, Family.VELOCITY_P2)
        qfam = Family.PRESSURE_P1_DISC if pairing == "scott-vogelius" else Family.PRESSURE_P1_CONT
        self.Q = build_space(mesh, qfam)
        self.bc = cavity_bc(self.V)
        self.asm = assembler_for(self.V)
        self.B, self.Mp, _ = self.asm.pressure_blocks(self.Q)
        self.K = self.asm.matrix(self.asm.local_diffusion(1.0))
        self.G = self.asm.matrix(self.asm.local_graddiv(1.0))
        self._local_K = self.asm.local_diffusion(1.0)
        self._local_G = self.asm.local_graddiv(1.0)
        self.f = np.zeros(self.V.dof_count) if force is None else self.asm.force(force)
        self._pressure_ones = self.Mp @ np.ones(self.Q.dof_count)
        self._area = self._pressure_ones.sum()
        self._nudging: dict = {}
        self._factors: dict = {}

    @property
    def nu_dofs(self) -> int:
        return self.V.dof_count

    @property
    def np_dofs(self) -> int:
        return self.Q.dof_count

    def zero_state(self) -> State:
        return State(np.zeros(self.V.dof_count), np.zeros(self.Q.dof_count))

    def zero_mean(self, p: np.ndarray) -> np.ndarray:
        return p - (self._pressure_ones @ p) / self._area

    def nudging(self, grid: CoarseGrid, mu: float) -> NudgingOperator:
        key = (id(grid), mu)
        if key not in self._nudging:
            self._nudging[key] = (grid, nudging_operator(self.V, grid, mu))
        return self._nudging[key][1]

    def _factor(self, name: str, build: Callable):
        if name not in self._factors:
            self._factors[name] = Factorization(build())
        return self._factors[name]

    def project_div(self, u: np.ndarray) -> np.ndarray:
        """Map div u_h into the pressure space for the Uzawa pressure update.

        Discontinuous pressures hold div u_h exactly.  For continuous
        pressures, ``div_update`` selects the L2 projection (a global mass
        solve) or the average at each vertex of the elementwise divergence.
        """
        if self.pairing == "scott-vogelius":
            return project_div_to_pressure(u, self.Q, self.V)
        if self.div_update == "projection":
            return self._factor("Mp", lambda: self.Mp).solve(self.B @ u)
        if not hasattr(self, "_Qdisc"):
            self._Qdisc = build_space(self.mesh, Family.PRESSURE_P1_DISC)
            self._vertex_count = np.bincount(self.mesh.triangles.ravel(), minlength=self.Q.dof_count)
        d = project_div_to_pressure(u, self._Qdisc, self.V)
        tri = self.mesh.triangles.ravel()
        return np.bincount(tri, weights=d, minlength=self.Q.dof_count) / self._vertex_count

    def velocity_matrix(self, nu: float, w: np.ndarray | None = None, gamma: float = 0.0, newton: bool = False):
        """nu K + C(w) [+ C'(w)] + gamma G on the shared velocity pattern."""
        local = nu * self._local_K
        if gamma:
            local = local + gamma * self._local_G
        if w is not None:
            local = local + self.asm.local_convection(w)
            if newton:
                local = local + self.asm.local_convection_reaction(w)
        return self.asm.matrix(local)

    # -- linear solves ----------------------------------------------------------
    def solve_momentum(self, A, rhs: np.ndarray, nudge: NudgingOperator | None = None) -> np.ndarray:
        n = self.V.dof_count
        if nudge is None:
            M, b = apply_dirichlet(A, rhs, self.bc)
            return solve_linear(M, b)
        S = nudge.factor
        nc = S.shape[1]
        M = sp.bmat([[A, S], [S.T, -sp.identity(nc)]], format="csr")
        M, b = apply_dirichlet(M, np.concatenate([rhs, np.zeros(nc)]), self.bc)
        return solve_linear(M, b)[:n]

    def coupled_matrix(self, A, nudge: NudgingOperator | None = None):
        blocks = [[A, -self.B.T], [-self.B, None]]
        if nudge is not None:
            S = nudge.factor
            blocks[0].append(S)
            blocks[1].append(None)
            blocks.append([S.T, None, -sp.identity(S.shape[1])])
        return sp.bmat(blocks, format="csr")

    def solve_coupled(self, A, rhs_u: np.ndarray, nudge: NudgingOperator | None = None,
                      rhs_p: np.ndarray | None = None, bc_values: np.ndarray | None = None):
        """Saddle solve with velocity Dirichlet data ``bc_values`` (default: the cavity data)."""
        n, m = self.V.dof_count, self.Q.dof_count
        M = self.coupled_matrix(A, nudge)
        b = np.zeros(M.shape[0])
        b[:n] = rhs_u
        if rhs_p is not None:
            b[n : n + m] = rhs_p
        pin = DirichletBC(
            np.concatenate([self.bc.constrained_dofs, [n]]),
            np.concatenate([self.bc.values if bc_values is None else bc_values, [0.0]]),
            M.shape[0],
        )
        M, b = apply_dirichlet(M, b, pin)
        x = solve_linear(M, b)
        return x[:n], self.zero_mean(x[n : n + m])

    # -- norms ------------------------------------------------------------------
    def star_norm(self, du: np.ndarray, dp: np.ndarray) -> float:
        return math.sqrt(max(du @ (self.K @ du), 0.0) + max(dp @ (self.Mp @ dp), 0.0))

    def div_norm(self, u: np.ndarray) -> float:
        # pointwise divergence by quadrature; sqrt(u.G.u) would lose half the digits
        div = np.einsum("tqi,ti->tq", self.asm.div_basis, u[self.asm.dofs])
        return math.sqrt(np.sum(self.asm.jxw * div**2))


# -- steps ----------------------------------------------------------------------
def _nudge_terms(cfg: SolverConfig, ops: FlowOperators):
    if cfg.data is None or cfg.mu == 0:
        return None, 0.0
    nudge = ops.nudging(cfg.data.grid, cfg.mu)
    return nudge, nudge.load(cfg.data)


def _lin(s: State, cfg: SolverConfig):
    return s.u if cfg.convection else None


def _uzawa_family(s: State, cfg: SolverConfig, ops: FlowOperators, nudge, load) -> State:
    A = ops.velocity_matrix(cfg.nu, _lin(s, cfg), cfg.gamma)
    rhs = ops.f + ops.B.T @ s.p + load
    u = ops.solve_momentum(A, rhs, nudge)
    p = ops.zero_mean(s.p - cfg.gamma * ops.project_div(u))
    return State(u, p)


def uzawa_step(s: State, cfg: SolverConfig, ops: FlowOperators) -> State:
    """Lagged-pressure momentum solve with grad-div, then p <- p - gamma div u."""
    return _uzawa_family(s, cfg, ops, None, 0.0)


def cda_uzawa_step(s: State, cfg: SolverConfig, ops: FlowOperators) -> State:
    """Uzawa step with the coarse-data nudging term in the momentum equation."""
    if cfg.data is None:
        raise ConfigError("cda-uzawa needs coarse data")
    nudge, load = _nudge_terms(cfg, ops)
    return _uzawa_family(s, cfg, ops, nudge, load)


def iterated_penalty_step(s: State, cfg: SolverConfig, ops: FlowOperators) -> State:
    """Penalty solve with the accumulated divergence of all previous iterates.

    The accumulator holds the running sum of velocity iterates; with
    ``p_0 = 0`` and divergence-free ``u_0`` the iterates coincide with Uzawa's.
    """
    acc = s.u.copy() if s.accumulator is None else s.accumulator
    A = ops.velocity_matrix(cfg.nu, _lin(s, cfg), cfg.gamma)
    rhs = ops.f - cfg.gamma * (ops.G @ acc)
    u = ops.solve_momentum(A, rhs)
    acc = acc + u
    p = ops.zero_mean(-cfg.gamma * ops.project_div(acc))
    return State(u, p, acc)


def picard_step(s: State, cfg: SolverConfig, ops: FlowOperators) -> State:
    """Coupled Oseen solve with convection frozen at the previous velocity."""
    A = ops.velocity_matrix(cfg.nu, _lin(s, cfg), cfg.coupled_graddiv)
    u, p = ops.solve_coupled(A, ops.f)
    return State(u, p)


def cda_picard_step(s: State, cfg: SolverConfig, ops: FlowOperators) -> State:
    if cfg.data is None:
        raise ConfigError("cda-picard needs coarse data")
    nudge, load = _nudge_terms(cfg, ops)
    A = ops.velocity_matrix(cfg.nu, _lin(s, cfg), cfg.coupled_graddiv)
    u, p = ops.solve_coupled(A, ops.f + load, nudge)
    return State(u, p)


def newton_step(s: State, cfg: SolverConfig, ops: FlowOperators) -> State:
    """Plain Newton: no nudging, no stabilization beyond ``cfg.coupled_graddiv``."""
    # correction form: the update shrinks with the residual instead of
    # bottoming out at the round-off of a full-state solve
    A = ops.velocity_matrix(cfg.nu, s.u, cfg.coupled_graddiv, newton=True)
    ru, rp = steady_residual(s, ops, cfg.nu, cfg.coupled_graddiv)
    du, dp = ops.solve_coupled(A, -ru, rhs_p=-rp, bc_values=ops.bc.values - s.u[ops.bc.constrained_dofs])
    return State(s.u + du, ops.zero_mean(s.p + dp))


STEPS: dict[str, Callable[[State, SolverConfig, FlowOperators], State]] = {
    "uzawa": uzawa_step,
    "cda-uzawa": cda_uzawa_step,
    "picard": picard_step,
    "cda-picard": cda_picard_step,
    "newton": newton_step,
    "iterated-penalty": iterated_penalty_step,
}


# -- residual and Jacobian ------------------------------------------------------
def steady_residual(s: State, ops: FlowOperators, nu: float, gamma: float = 0.0):
    """Discrete steady NSE residual; constrained velocity rows are zeroed."""
    ru = nu * (ops.K @ s.u) + ops.asm.convection_load(s.u) - ops.B.T @ s.p - ops.f
    if gamma:
        ru = ru + gamma * (ops.G @ s.u)
    ru[ops.bc.constrained_dofs] = 0.0
    return ru, -(ops.B @ s.u)


def newton_jacobian(s: State, ops: FlowOperators, nu: float, gamma: float = 0.0):
    """Unconstrained coupled Jacobian of :func:`steady_residual` at ``s``."""
    return ops.coupled_matrix(ops.velocity_matrix(nu, s.u, gamma, newton=True))


def residual_star_norm(s: State, ops: FlowOperators, nu: float, gamma: float = 0.0) -> float:
    """Dual *-norm of the residual: H^-1 for momentum, L2 for continuity."""
    ru, rp = steady_residual(s, ops, nu, gamma)

    def riesz():
        M, _ = apply_dirichlet(ops.K, np.zeros(ops.V.dof_count), ops.bc.homogeneous())
        return M

    zu = ops._factor("K0", riesz).solve(ru)
    zp = ops._factor("Mp", lambda: ops.Mp).solve(rp)
    return math.sqrt(max(ru @ zu, 0.0) + max(rp @ zp, 0.0))


def norms(s: State | np.ndarray, ops: FlowOperators) -> dict:
    u, p = (s.u, s.p) if isinstance(s, State) else (np.asarray(s), np.zeros(ops.Q.dof_count))
    if len(u) != ops.V.dof_count or len(p) != ops.Q.dof_count:
        raise ValueError("state size does not match the spaces")
    h1 = math.sqrt(max(u @ (ops.K @ u), 0.0))
    pl2 = math.sqrt(max(p @ (ops.Mp @ p), 0.0))
    return {
        "star_norm": math.hypot(h1, pl2),
        "h1_seminorm": h1,
        "l2_norm": math.sqrt(max(u @ (ops.asm.matrix(ops.asm.local_mass()) @ u), 0.0)),
        "pressure_l2": pl2,
        "div_norm": ops.div_norm(u),
    }


# -- driver ---------------------------------------------------------------------
@dataclass
class IterationRecord:
    k: int
    increment_star: float
    error_star: float | None
    div_norm: float | None
    wall_seconds: float
    phase: str = ""


@dataclass
class Trace:
    records: list[IterationRecord] = field(default_factory=list)
    status: str = STALLED

    def __len__(self):
        return len(self.records)

    @property
    def increments(self) -> np.ndarray:
        return np.array([r.increment_star for r in self.records])

    @property
    def errors(self) -> np.ndarray:
        return np.array([np.nan if r.error_star is None else r.error_star for r in self.records])


def iterate(
    step: Callable,
    x0,
    increment: Callable,
    tol: float,
    max_iter: int,
    error: Callable | None = None,
    div: Callable | None = None,
    initial_increment: float | None = None,
    phase: str = "",
    trace: Trace | None = None,
):
    """Generic fixed-point loop; ``increment(new, old)`` drives the stopping rule.

    A run stops as ``converged`` once the increment drops below ``tol``, as
    ``diverged`` when it is non-finite or exceeds 1e6 times the first one,
    and as ``stalled`` after ``max_iter`` steps.  Records are appended to
    ``trace`` (continuing its iteration count) when one is given.
    """
    trace = Trace() if trace is None else trace
    if initial_increment is not None and initial_increment < tol:
        trace.status = CONVERGED
        return x0, trace
    x = x0
    first = None
    start = time.perf_counter()
    k0 = len(trace)
    for k in range(1, max_iter + 1):
        try:
            new = step(x)
        except LinearSolveError:
            # a blown-up iterate can make the next linear system unsolvable
            if first is None or trace.records[-1].increment_star <= first:
                raise
            log.warning("linear solve failed after growing increments; treating as divergence")
            trace.status = DIVERGED
            return x, trace
        inc = float(increment(new, x))
        x = new
        trace.records.append(
            IterationRecord(
                k0 + k,
                inc,
                None if error is None else float(error(x)),
                None if div is None else float(div(x)),
                time.perf_counter() - start,
                phase,
            )
        )
        first = inc if first is None else first
        if not math.isfinite(inc) or (first > 0 and inc > DIVERGENCE_FACTOR * first):
            trace.status = DIVERGED
            return x, trace
        if inc < tol:
            trace.status = CONVERGED
            return x, trace
    trace.status = STALLED
    return x, trace


def run_fixed_point(
    cfg: SolverConfig,
    initial: State,
    ops: FlowOperators,
    reference: State | None = None,
    initial_increment: float | None = None,
    phase: str = "",
    trace: Trace | None = None,
) -> tuple[State, Trace]:
    """Iterate ``cfg.method`` from ``initial`` until the *-norm increment is below ``cfg.tol``."""
    if cfg.pairing != ops.pairing:
        raise ConfigError(f"config pairing {cfg.pairing} does not match operators ({ops.pairing})")
    step_fn = STEPS[cfg.method]
    if cfg.method == "iterated-penalty" and initial.accumulator is None:
        initial = replace(initial, accumulator=initial.u.copy())

    def increment(new: State, old: State) -> float:
        return ops.star_norm(new.u - old.u, new.p - old.p)

    error = None
    if reference is not None:
        error = lambda s: ops.star_norm(s.u - reference.u, s.p - reference.p)  # noqa: E731
    # one analysis pool per run keeps every run reproducible on its own
    with reuse_analysis():
        return iterate(
            lambda s: step_fn(s, cfg, ops),
            initial,
            increment,
            cfg.tol,
            cfg.max_iter,
            error=error,
            div=lambda s: ops.div_norm(s.u),
            initial_increment=initial_increment,
            phase=phase or cfg.method,
            trace=trace,
        )


def estimate_contraction_rate(trace: Trace | np.ndarray, window: int = 10) -> float:
    """Geometric mean of successive increment ratios over the last ``window`` steps."""
    inc = trace.increments if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    if len(inc) < window + 1:
        raise ValueError(f"need at least {window + 1} records, got {len(inc)}")
    tail = inc[-(window + 1) :]
    if np.any(tail <= 0):
        raise ValueError("increments must be positive to estimate a rate")
    return float(np.exp(np.mean(np.diff(np.log(tail)))))


# -- reference solutions --------------------------------------------------------
DEFAULT_RE_SCHEDULE = (100, 500, 1000, 2500, 3500, 5000, 7500, 10000)


def reynolds_schedule(re_target: float, steps=DEFAULT_RE_SCHEDULE) -> list[float]:
    return [float(r) for r in steps if r < re_target] + [float(re_target)]


@dataclass
class StageReport:
    nu: float
    picard_iterations: int
    newton_iterations: int
    final_increment: float


def _at_certified_floor(trace, state, ops, nu, gamma, tol, floor_residual) -> bool:
    if trace.status != STALLED or not np.all(np.isfinite(trace.increments)):
        return False
    if max(trace.increments[-3:]) > 100.0 * tol:
        return False
    res = residual_star_norm(state, ops, nu, gamma)
    log.info("Newton at increment floor %.2e, residual %.2e", trace.increments[-1], res)
    return res <= floor_residual


def continuation_reference(
    nu_target: float,
    schedule,
    ops: FlowOperators,
    coupled_graddiv: float = 0.0,
    picard_tol: float = NEWTON_SWITCH,
    picard_max: int = 30,
    newton_tol: float = 1e-11,
    newton_max: int = 20,
    initial: State | None = None,
    floor_residual: float = 1e-10,
) -> tuple[State, list[StageReport]]:
    """Picard-then-Newton solves along a decreasing viscosity schedule.

    Each stage warm-starts from the previous one; the last entry of
    ``schedule`` must be ``nu_target``.

    A Newton stage that stalls with increments within a factor 100 of
    ``newton_tol`` is accepted when its steady-residual *-norm is at most
    ``floor_residual``: the increments have reached the roundoff floor of
    the linear solves while the state itself is converged.
    """
    schedule = [float(v) for v in schedule]
    if not schedule or not math.isclose(schedule[-1], nu_target, rel_tol=1e-14):
        raise ConfigError("continuation schedule must end at the target viscosity")
    if any(b > a for a, b in zip(schedule, schedule[1:])):
        raise ConfigError("continuation schedule must be nonincreasing in viscosity")
    state = initial or ops.zero_state()
    reports = []
    for nu in schedule:
        pic = SolverConfig(nu, "picard", tol=picard_tol, max_iter=picard_max, pairing=ops.pairing,
                           coupled_graddiv=coupled_graddiv)
        try:
            state_p, tp = run_fixed_point(pic, state, ops)
        except LinearSolveError as exc:
            raise ContinuationError(nu, f"Picard linear solve failed ({exc})") from exc
        if tp.status != DIVERGED:
            state = state_p
        newt = replace(pic, method="newton", tol=newton_tol, max_iter=newton_max)
        try:
            state_n, tn = run_fixed_point(newt, state, ops)
        except LinearSolveError as exc:
            raise ContinuationError(nu, f"Newton linear solve failed ({exc})") from exc
        if tn.status != CONVERGED and not _at_certified_floor(
                tn, state_n, ops, nu, coupled_graddiv, newton_tol, floor_residual):
            raise ContinuationError(nu, f"Newton {tn.status} after {len(tn)} steps "
                                        f"(last increment {tn.increments[-1]:.3e})")
        state = state_n
        reports.append(StageReport(nu, len(tp), len(tn), float(tn.increments[-1])))
        log.info("continuation nu=%g: %d Picard + %d Newton steps", nu, len(tp), len(tn))
    return state, reports
