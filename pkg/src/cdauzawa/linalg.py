"""Sparse direct solves behind one residual-checked contract.

Two backends: MKL PARDISO through ``pypardiso`` when it can be loaded, and
SciPy's SuperLU otherwise.  Select explicitly with the ``CDAUZAWA_SOLVER``
environment variable (``pardiso`` or ``superlu``).
"""

from __future__ import annotations

import contextlib
import glob
import hashlib
import logging
import os
import sys
import threading

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
# tried in order; saddle-point systems need pivot perturbation plus refinement,
# and whether scaling helps or hurts refinement depends on the matrix
_PARDISO_SETTINGS = (
    {1: 1, 2: 2, 8: 20, 10: 8, 11: 0, 13: 1},
    {1: 1, 2: 2, 8: 20, 10: 8, 11: 1, 13: 1},
)
_MAX_REFINE = 10


class LinearSolveError(RuntimeError):
    """Factorization failed or the solve did not meet the residual contract."""


def _load_pypardiso():
    if "PYPARDISO_MKL_RT" not in os.environ:
        roots = [os.path.join(sys.prefix, "lib"), "/usr/local/lib", "/usr/lib/x86_64-linux-gnu"]
        for root in roots:
            hits = sorted(glob.glob(os.path.join(root, "libmkl_rt.so*")))
            if hits:
                os.environ["PYPARDISO_MKL_RT"] = hits[0]
                break
    try:
        import pypardiso
    except Exception:  # ImportError, or a missing MKL runtime raised at import
        return None
    return pypardiso


_pypardiso = None
_backend = None


def backend_name() -> str:
    global _backend, _pypardiso
    if _backend is None:
        wanted = os.environ.get("CDAUZAWA_SOLVER", "auto").lower()
        if wanted in ("auto", "pardiso"):
            _pypardiso = _load_pypardiso()
            if _pypardiso is not None:
                _backend = "pardiso"
            elif wanted == "pardiso":
                raise LinearSolveError("pypardiso requested but not importable")
        if _backend is None:
            _backend = "superlu"
    return _backend


def _contract_holds(A, x, b) -> bool:
    if not np.all(np.isfinite(x)):
        return False
    r = np.abs(A @ x - b).max()
    scale = abs(A).sum(axis=1).max() * np.abs(x).max() + np.abs(b).max()
    return r <= RESIDUAL_TOL * scale


def _backward_error(A, absA, x, b) -> float:
    """Componentwise relative backward error max_i |r_i| / (|A||x| + |b|)_i."""
    r = np.abs(b - A @ x)
    scale = absA @ np.abs(x) + np.abs(b)
    ok = scale > 0
    if np.any(r[~ok] > 0):
        return np.inf
    return float((r[ok] / scale[ok]).max(initial=0.0))


def _pattern_key(A) -> str:
    h = hashlib.sha1(A.indptr.tobytes())
    h.update(A.indices.tobytes())
    return f"{A.shape[0]}:{A.nnz}:{h.hexdigest()}"


class _AnalysisPool:
    """Idle PARDISO solvers that keep their symbolic analysis, keyed by pattern.

    Active only inside :func:`reuse_analysis`.  The first matrix of each
    pattern in the block fixes the ordering and matching, so a rerun of the
    same block reproduces every factorization bit for bit.
    """

    def __init__(self):
        self.idle: dict = {}

    def take(self, key):
        return self.idle.pop(key, None)

    def give(self, key, solver) -> bool:
        if key in self.idle:
            return False
        self.idle[key] = solver
        return True

    def close(self):
        for solver in self.idle.values():
            solver.free_memory(everything=True)
        self.idle.clear()


class _PoolStack(threading.local):
    def __init__(self):
        self.stack: list[_AnalysisPool] = []


# per thread, so concurrent runs never share a solver
_local = _PoolStack()


@contextlib.contextmanager
def reuse_analysis():
    """Share PARDISO symbolic analyses between same-pattern solves in this block.

    Analysis dominates a sparse direct solve here, and every Picard or Newton
    matrix of one mesh has the same pattern.  Nested blocks share the
    outermost pool.
    """
    stack = _local.stack
    if stack:
        yield
        return
    pool = _AnalysisPool()
    stack.append(pool)
    try:
        yield
    finally:
        stack.pop()
        pool.close()


def _pardiso_call(solver, A, b, phase: int) -> np.ndarray:
    solver.set_phase(phase)
    return solver._call_pardiso(A, b.reshape(-1, 1)).ravel()


class _Factor:
    def __init__(self, A, backend: str, settings: dict | None = None, reuse: bool = False):
        self.A = A
        self._absA = abs(A)
        self.backend = backend
        self._key = None
        if backend == "pardiso":
            solver, phase = None, 12
            if reuse and _local.stack:
                self._key = _pattern_key(A)
                solver = _local.stack[-1].take(self._key)
                phase = 12 if solver is None else 22
            if solver is None:
                solver = _pypardiso.PyPardisoSolver()
                for k, v in settings.items():
                    solver.set_iparm(k, v)
            solver._check_A(A)  # sets the CSR/CSC flag
            try:
                _pardiso_call(solver, A, np.zeros(A.shape[0]), phase)
            except Exception as exc:
                solver.free_memory(everything=True)
                raise LinearSolveError(f"PARDISO factorization failed: {exc}") from exc
            self._solver = solver
            self._solve = lambda b: _pardiso_call(solver, A, b, 33)
        else:
            try:
                lu = spla.splu(A.tocsc(), permc_spec="COLAMD")
            except RuntimeError as exc:
                raise LinearSolveError(f"SuperLU factorization failed: {exc}") from exc
            self._solve = lu.solve

    def solve(self, b: np.ndarray) -> np.ndarray | None:
        # refine on the componentwise backward error rather than the max-norm
        # residual: rows of small scale (pressure moments) need their own digits
        with np.errstate(all="ignore"):
            x = self._solve(b)
            berr = _backward_error(self.A, self._absA, x, b)
            for _ in range(_MAX_REFINE):
                if not np.isfinite(berr) or berr <= 2 * np.finfo(float).eps:
                    break
                x_new = x + self._solve(b - self.A @ x)
                berr_new = _backward_error(self.A, self._absA, x_new, b)
                if not berr_new < berr:
                    break
                improved = berr_new < 0.5 * berr
                x, berr = x_new, berr_new
                if not improved:
                    break
        return x if _contract_holds(self.A, x, b) else None

    def free(self, keep_analysis: bool = True):
        if self.backend != "pardiso":
            return
        stack = _local.stack
        if keep_analysis and self._key is not None and stack and stack[-1].give(self._key, self._solver):
            return
        self._solver.free_memory(everything=True)


class Factorization:
    """Factor once, solve many right-hand sides with refinement to the contract.

    When a PARDISO factorization cannot meet the residual contract the next
    setting is tried, ending with SuperLU.
    """

    def __init__(self, A, backend: str | None = None):
        A = sp.csr_matrix(A, dtype=float)
        A.eliminate_zeros()
        A.sort_indices()
        if A.shape[0] != A.shape[1]:
            raise LinearSolveError(f"matrix must be square, got {A.shape}")
        if not np.all(np.diff(A.indptr)):
            raise LinearSolveError("matrix has an empty row and is singular")
        self.A = A
        backend = backend or backend_name()
        if backend == "pardiso" and _pypardiso is None:
            globals()["_pypardiso"] = _load_pypardiso()
            if _pypardiso is None:
                raise LinearSolveError("pypardiso requested but not importable")
        self._attempts = []
        if backend == "pardiso":
            if _local.stack:
                self._attempts.append(("pardiso", _PARDISO_SETTINGS[0], True))
            self._attempts += [("pardiso", st, False) for st in _PARDISO_SETTINGS]
        self._attempts.append(("superlu", None, False))
        self._current = None
        self._next()

    def _next(self):
        if self._current is not None:
            # an analysis that failed the contract is not worth keeping
            self._current.free(keep_analysis=False)
        if not self._attempts:
            raise LinearSolveError(
                "direct solve missed the residual tolerance; matrix singular or ill-conditioned"
            )
        name, settings, reuse = self._attempts.pop(0)
        self._current = _Factor(self.A, name, settings, reuse)

    @property
    def backend(self) -> str:
        return self._current.backend

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.ascontiguousarray(b, dtype=float)
        while True:
            x = self._current.solve(b)
            if x is not None:
                return x
            log.debug("%s solve missed the residual contract, trying next backend", self.backend)
            self._next()

    def free(self):
        self._current.free()


def solve_linear(A, b: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Solve ``A x = b`` with ``|Ax - b|_inf <= 1e-10 (|A|_inf |x|_inf + |b|_inf)``."""
    fact = Factorization(A, backend)
    try:
        return fact.solve(b)
    finally:
        fact.free()
