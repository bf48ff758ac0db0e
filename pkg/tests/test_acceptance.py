"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The fast tier runs by default. Criteria that need the 64x64 mesh at Re=5000
(or the 64x64 Taylor-Hood run) are marked ``slow`` and need ``--runslow``.
"""

import functools
import time

import numpy as np
import pytest

from cdauzawa.assembly import (
    assemble_convection,
    assemble_diffusion,
    assemble_div_coupling,
    assemble_force,
    assemble_graddiv,
    assemble_mass,
    assembler_for,
)
from cdauzawa.cda import assemble_nudging, coarse_average
from cdauzawa.harness import (
    config_from_mapping,
    error_floor,
    flow_operators,
    noise_run,
    run_method,
    trace_csv,
)
from cdauzawa.mesh import build_coarse_grid, cavity_mesh
from cdauzawa.solvers import (
    CONVERGED,
    FlowOperators,
    SolverConfig,
    State,
    continuation_reference,
    estimate_contraction_rate,
    iterated_penalty_step,
    newton_jacobian,
    residual_star_norm,
    reynolds_schedule,
    run_fixed_point,
    steady_residual,
    uzawa_step,
    cda_uzawa_step,
)
from cdauzawa.spaces import Family, build_space
from criteria_log import record
from oracles import DenseOracle

SV, TH = "scott-vogelius", "taylor-hood"
NSR_LEVELS = (0.05, 0.01, 0.001)


# -- shared references (one continuation solve per configuration and session) --------
_TIMINGS: dict = {}


@functools.cache
def reference(n: int, re: float, pairing: str = SV, gamma: float = 0.0) -> State:
    ops = flow_operators(n, pairing)
    t0 = time.perf_counter()
    state, _ = continuation_reference(1.0 / re, [1.0 / r for r in reynolds_schedule(re)], ops,
                                      coupled_graddiv=gamma)
    _TIMINGS[(n, re, pairing, gamma)] = time.perf_counter() - t0
    return state


def study_config(n, re, m, **extra):
    tree = {"mesh": {"n": n}, "flow": {"re": re}, "data": {"m": [m]}}
    return config_from_mapping(tree, **extra)


@functools.cache
def run(n: int, re: float, method: str, m: int | None = None, gamma: float = 1.0, pairing: str = SV,
        mu: float = 1.0):
    cfg = study_config(n, re, m or n, mu=mu)
    ops = flow_operators(n, pairing, "vertex-average" if pairing == TH else "projection")
    ref = reference(n, re, pairing, gamma if pairing == TH else 0.0)
    return run_method(cfg, ops, method, ref, m, gamma)


def converged_to(res, tol=1e-8):
    return res.status == CONVERGED and res.trace.errors[-1] <= tol


def rate(res):
    return estimate_contraction_rate(res.trace, window=10)


# -- 1 ---------------------------------------------------------------------------------
def test_criterion_01_assembly_oracle():
    t0 = time.perf_counter()
    mesh = cavity_mesh(1)
    V = build_space(mesh, Family.VELOCITY_P2)
    worst = 0.0
    for qfam in (Family.PRESSURE_P1_DISC, Family.PRESSURE_P1_CONT):
        Q = build_space(mesh, qfam)
        ora = DenseOracle(V, Q)
        w = np.random.default_rng(11).standard_normal(V.dof_count)
        grid = build_coarse_grid(mesh, 1)
        a = assembler_for(V)
        f = lambda x, y: (x**2 * y - y**3 + 2, x * y**2 - 1)  # noqa: E731
        pairs = [
            (assemble_diffusion(V, 0.7), ora.diffusion(0.7)),
            (assemble_graddiv(V, 1.3), ora.graddiv(1.3)),
            (assemble_mass(V), ora.mass()),
            (assemble_convection(V, w), ora.convection(w)),
            (a.matrix(a.local_convection_reaction(w)), ora.convection_reaction(w)),
            (assemble_div_coupling(V, Q), ora.div_coupling()),
            (assemble_mass(Q, V), ora.pressure_mass()),
            (assemble_nudging(V, grid, 2.0), ora.nudging(grid.cell_of_element, grid.num_cells, 2.0)),
        ]
        for prod, dense in pairs:
            worst = max(worst, np.abs(prod.toarray() - dense).max())
        worst = max(worst, np.abs(assemble_force(V, f) - ora.force(f)).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1.0
    assert record("1", ok, f"max entry difference {worst:.2e}, {elapsed:.2f} s")


# -- 2 and 3 -----------------------------------------------------------------------------
def _h1(ops, du):
    return np.sqrt(max(du @ (ops.K @ du), 0.0))


def _pressure_identity_residual(ops, gamma, u_new, p_new, p_old):
    """L2 norm of gamma div u_{k+1} + p_{k+1} - p_k, by quadrature on every element."""
    a = ops.asm
    div = np.einsum("tqi,ti->tq", a.div_basis, u_new[a.dofs])
    dp = np.einsum("qi,ti->tq", a.bary, (p_new - p_old).reshape(-1, 3))
    return float(np.sqrt(np.sum(a.jxw * (gamma * div + dp) ** 2)))


@pytest.fixture(scope="module")
def uzawa_ip_run():
    n, re, gamma = 16, 1000.0, 1.0
    t0 = time.perf_counter()
    ops = flow_operators(n)
    cfg_u = SolverConfig(1 / re, "uzawa", gamma=gamma)
    cfg_ip = SolverConfig(1 / re, "iterated-penalty", gamma=gamma)
    su = ops.zero_state()
    sip = State(su.u.copy(), su.p.copy(), su.u.copy())
    gaps, identity = [], []
    for _ in range(20):
        nxt = uzawa_step(su, cfg_u, ops)
        identity.append(_pressure_identity_residual(ops, gamma, nxt.u, nxt.p, su.p))
        su = nxt
        sip = iterated_penalty_step(sip, cfg_ip, ops)
        gaps.append(_h1(ops, su.u - sip.u))
    elapsed = time.perf_counter() - t0
    return ops, np.array(gaps), identity, elapsed


def test_criterion_02_uzawa_equals_iterated_penalty(uzawa_ip_run):
    _, gaps, _, elapsed = uzawa_ip_run
    ok = gaps.max() <= 1e-9 and elapsed < 60
    assert record("2", ok, f"max H1 gap over 20 steps {gaps.max():.2e}, {elapsed:.1f} s")


def test_criterion_03_pressure_update_identity(uzawa_ip_run):
    ops, _, identity, _ = uzawa_ip_run
    re, gamma = 1000.0, 1.0
    data = coarse_average(reference(16, re).u, ops.V, build_coarse_grid(ops.mesh, 8))
    cfg = SolverConfig(1 / re, "cda-uzawa", gamma=gamma, data=data)
    s = ops.zero_state()
    for _ in range(20):
        nxt = cda_uzawa_step(s, cfg, ops)
        identity.append(_pressure_identity_residual(ops, gamma, nxt.u, nxt.p, s.p))
        s = nxt
    worst = max(identity)
    assert record("3", worst <= 1e-12, f"max residual {worst:.2e} over {len(identity)} steps")


# -- 4 -------------------------------------------------------------------------------------
def _certify(key, n, re, budget):
    state = reference(n, re)
    ops = flow_operators(n)
    res = residual_star_norm(state, ops, 1 / re)
    div = ops.div_norm(state.u)
    elapsed = _TIMINGS[(n, re, SV, 0.0)]
    ok = res <= 1e-10 and div <= 1e-10 and elapsed < budget
    assert record(key, ok, f"Re={re:g} n={n}: residual {res:.2e}, div {div:.2e}, {elapsed:.0f} s")


def test_criterion_04_reference_certification_fast():
    _certify("4 fast", 64, 2500.0, 300)


@pytest.mark.slow
def test_criterion_04_reference_certification_slow():
    _certify("4 slow", 64, 5000.0, 1800)


# -- 5 -------------------------------------------------------------------------------------
def _robustness(n, re, m, with_newton):
    uz = run(n, re, "uzawa")
    pic = run(n, re, "picard")
    cda = run(n, re, "cda-uzawa", m)
    checks = {
        "uzawa fails": uz.status != CONVERGED,
        "picard fails": pic.status != CONVERGED,
        "cda-uzawa converges": converged_to(cda),
    }
    detail = (f"uzawa {uz.status}/{len(uz.trace)}, picard {pic.status}/{len(pic.trace)}, "
              f"cda-uzawa {cda.status} error {cda.trace.errors[-1]:.1e}")
    if with_newton:
        nt = run(n, re, "newton")
        checks["newton converges"] = converged_to(nt)
        detail += f", newton {nt.status}"
    return all(checks.values()), detail


@pytest.mark.xfail(strict=True, reason="plain Uzawa and Picard converge and Newton from zero diverges on this mesh")
def test_criterion_05_robustness_fast():
    ok, detail = _robustness(32, 2500.0, 16, with_newton=True)
    assert record("5 fast", ok, f"Re=2500 n=32 m=16: {detail}")


@pytest.mark.slow
def test_criterion_05_robustness_slow():
    ok, detail = _robustness(64, 5000.0, 32, with_newton=False)
    assert record("5", ok, f"Re=5000 n=64 m=32: {detail}")


# -- 6 and 7 ---------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_06_acceleration_with_data_density():
    rates = {m: rate(run(64, 5000.0, "cda-uzawa", m)) for m in (8, 16, 32)}
    ok = rates[32] < rates[16] < rates[8]
    assert record("6", ok, ", ".join(f"rate(m={m})={r:.4f}" for m, r in rates.items()))


@pytest.mark.slow
def test_criterion_07_cda_picard_parity():
    ru = rate(run(64, 5000.0, "cda-uzawa", 32))
    rp = rate(run(64, 5000.0, "cda-picard", 32))
    rel = abs(ru - rp) / max(ru, rp)
    assert record("7", rel <= 0.25, f"cda-uzawa {ru:.4f}, cda-picard {rp:.4f}, relative gap {rel:.2f}")


# -- 8 and 9 ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def noise_runs():
    n, re, m = 32, 2500.0, 16
    cfg = study_config(n, re, m)
    ops = flow_operators(n)
    ref = reference(n, re)
    return {nsr: noise_run(cfg, ops, ref, m, 1.0, nsr) for nsr in NSR_LEVELS}


def test_criterion_08_noise_floor(noise_runs):
    plateaus = [error_floor(noise_runs[nsr][0].trace) for nsr in NSR_LEVELS]
    ordered = all(a > b for a, b in zip(plateaus, plateaus[1:]))
    ratios_ok = all(
        (nsr_a / nsr_b) / 5 <= pa / pb <= 5 * (nsr_a / nsr_b)
        for (nsr_a, pa), (nsr_b, pb) in zip(zip(NSR_LEVELS, plateaus), zip(NSR_LEVELS[1:], plateaus[1:]))
    )
    switched = all(
        any(r.phase == "cda-uzawa" and r.increment_star < 1e-4 for r in noise_runs[nsr][1].trace.records)
        for nsr in NSR_LEVELS
    )
    detail = ", ".join(f"plateau(nsr={nsr:g})={p:.2e}" for nsr, p in zip(NSR_LEVELS, plateaus))
    assert record("8", ordered and ratios_ok and switched, detail)


def test_criterion_09_newton_handoff(noise_runs):
    counts, ok = [], True
    for nsr in NSR_LEVELS:
        records = noise_runs[nsr][1].trace.records
        newton = [r for r in records if r.phase == "newton"]
        hit = next((i + 1 for i, r in enumerate(newton) if r.error_star <= 1e-8), None)
        counts.append(hit)
        ok = ok and hit is not None and hit <= 10
    detail = ", ".join(f"nsr={nsr:g}: {c} Newton steps" for nsr, c in zip(NSR_LEVELS, counts))
    assert record("9", ok, detail)


# -- 10 ----------------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_10_taylor_hood_floor():
    re, gamma, m = 2500.0, 1.0, 16
    floors, details, ok = {}, [], True
    for n in (32, 64):
        th = run(n, re, "cda-uzawa", m, gamma, TH)
        sv = run(n, re, "cda-uzawa", m, gamma, SV)
        floors[n] = error_floor(th.trace)
        div = flow_operators(n, TH).div_norm(reference(n, re, TH, gamma).u)
        ok = ok and floors[n] >= 100 * sv.trace.errors[-1] and div / 10 <= floors[n] <= 10 * div
        details.append(f"n={n}: floor {floors[n]:.2e}, SV final {sv.trace.errors[-1]:.2e}, div {div:.2e}")
    ratio = floors[64] / floors[32]
    ok = ok and 1 / 3 <= ratio <= 1 / 1.3
    assert record("10", ok, "; ".join(details) + f"; ratio {ratio:.2f}")


# -- 11 ----------------------------------------------------------------------------------
def test_criterion_11_jacobian_against_finite_differences():
    t0 = time.perf_counter()
    ops = FlowOperators(cavity_mesh(2))
    nu, eps = 1 / 500, 1e-6
    rng = np.random.default_rng(2024)
    free = np.flatnonzero(~ops.bc.mask)
    nv = ops.V.dof_count
    worst = 0.0
    for _ in range(5):
        u = ops.V.interpolate(lambda x, y: (x * 0, y * 0))
        u[free] = rng.standard_normal(len(free))
        u[ops.bc.constrained_dofs] = ops.bc.values
        s = State(u, ops.zero_mean(rng.standard_normal(ops.Q.dof_count)))
        du = np.zeros(nv)
        du[free] = rng.standard_normal(len(free))
        dp = rng.standard_normal(ops.Q.dof_count)
        jv = newton_jacobian(s, ops, nu) @ np.concatenate([du, dp])
        jv[ops.bc.constrained_dofs] = 0.0
        plus = np.concatenate(steady_residual(State(u + eps * du, s.p + eps * dp), ops, nu))
        minus = np.concatenate(steady_residual(State(u - eps * du, s.p - eps * dp), ops, nu))
        fd = (plus - minus) / (2 * eps)
        worst = max(worst, np.linalg.norm(jv - fd) / np.linalg.norm(jv))
    elapsed = time.perf_counter() - t0
    assert record("11", worst <= 1e-6 and elapsed < 10, f"max relative error {worst:.2e}, {elapsed:.2f} s")


# -- 12 ----------------------------------------------------------------------------------
def test_criterion_12_determinism():
    n, re, m = 16, 1000.0, 8
    cfg = study_config(n, re, m, nsr=[0.01])
    ref = reference(n, re)
    outputs = []
    for _ in range(2):
        ops = FlowOperators(cavity_mesh(n))  # fresh operators and factorizations
        clean = run_method(cfg, ops, "cda-uzawa", ref, m, 1.0)
        plateau, handoff = noise_run(cfg, ops, ref, m, 1.0, 0.01)
        outputs.append([trace_csv(clean.trace, False), trace_csv(plateau.trace, False),
                        trace_csv(handoff.trace, False, with_phase=True)])
    same = all(a.encode() == b.encode() for a, b in zip(*outputs))
    assert record("12", same, "clean and noisy CDA-Uzawa CSVs compared byte for byte")


# -- properties measured on the acceptance runs -------------------------------------------
def _monotone_after_three(res):
    err = res.trace.errors[3:]
    return bool(np.all(np.diff(err) <= 0))


# only converging runs: at n=64, Re=5000 the m=8 and m=16 runs stall at 200 steps
@pytest.mark.parametrize("config", [
    (32, 2500.0, 16),
    pytest.param((64, 5000.0, 32), marks=pytest.mark.slow),
], ids=lambda c: f"n{c[0]}-Re{c[1]:g}-m{c[2]}")
def test_cda_uzawa_error_nonincreasing_with_exact_data(config):
    n, re, m = config
    res = run(n, re, "cda-uzawa", m)
    assert res.status == CONVERGED
    assert _monotone_after_three(res)


@pytest.mark.slow
def test_nudging_strength_barely_matters():
    r1 = rate(run(64, 5000.0, "cda-uzawa", 32))
    r100 = rate(run(64, 5000.0, "cda-uzawa", 32, mu=100.0))
    assert abs(r1 - r100) <= 0.1 * max(r1, r100)


@pytest.mark.slow
def test_newton_needs_a_good_start_at_high_reynolds():
    n, re, m = 64, 5000.0, 32
    assert run(n, re, "newton").status != CONVERGED
    ops = flow_operators(n)
    ref = reference(n, re)
    data = coarse_average(ref.u, ops.V, build_coarse_grid(ops.mesh, m))
    warm, t = run_fixed_point(SolverConfig(1 / re, "cda-uzawa", data=data, tol=1e-4), ops.zero_state(), ops)
    assert t.status == CONVERGED
    s, t = run_fixed_point(SolverConfig(1 / re, "newton", tol=1e-10, max_iter=6), warm, ops)
    assert t.status == CONVERGED
    inc = np.asarray(t.increments)
    print("newton increments from the CDA-Uzawa start:", inc)
    # a linear method would show ratios near its contraction rate (~0.85 here)
    assert np.all(inc[1:] / inc[:-1] <= 1e-3)
    # order estimate over steps that stay clear of the roundoff floor
    clear = inc[inc > 1e-9]
    if len(clear) >= 3:
        order = np.log(clear[2:] / clear[1:-1]) / np.log(clear[1:-1] / clear[:-2])
        assert np.all(order >= 1.8)
