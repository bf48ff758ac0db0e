"""Coarse observations: cell averages, the nudging operator and data noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import assembler_for
from .mesh import CoarseGrid
from .spaces import FESpace

PRNG_ALGORITHM = "numpy.random.Philox (4x64, counter-based)"


@dataclass(frozen=True, eq=False)
class CoarseField:
    """Per-cell velocity averages; build it with :func:`coarse_average`."""

    grid: CoarseGrid
    values: np.ndarray  # (num_cells, 2)


@dataclass(frozen=True)
class NoiseSpec:
    nsr: float
    seed: int = 0

    def __post_init__(self):
        if self.nsr < 0:
            raise ValueError(f"noise-to-signal ratio must be nonnegative, got {self.nsr}")


def _check_grid(V: FESpace, G: CoarseGrid):
    if G.mesh is not V.mesh:
        raise ValueError("coarse grid and velocity space are built on different meshes")


def averaging_weights(V: FESpace, G: CoarseGrid) -> sp.csr_matrix:
    """Sparse W with ``(W.T @ u)[2K + c] = (1/|K|) int_K u_c``."""
    _check_grid(V, G)
    a = assembler_for(V)
    # exact for the quadratic shape functions
    integrals = np.einsum("tq,qa->ta", a.jxw, a.phi)
    cells = G.cell_of_element
    rows = a.dofs  # (T, 12), component-major
    cols = np.concatenate(
        [np.repeat(2 * cells[:, None], 6, axis=1), np.repeat(2 * cells[:, None] + 1, 6, axis=1)], axis=1
    )
    vals = np.concatenate([integrals, integrals], axis=1) / G.cell_area[cells][:, None]
    W = sp.coo_matrix(
        (vals.ravel(), (rows.ravel(), cols.ravel())), shape=(V.dof_count, 2 * G.num_cells)
    ).tocsr()
    W.sum_duplicates()
    W.eliminate_zeros()
    return W


def coarse_average(u: np.ndarray, V: FESpace, G: CoarseGrid) -> CoarseField:
    """P0 projection of u_h onto the coarse cells, by exact quadrature."""
    _check_grid(V, G)
    if len(u) != V.dof_count:
        raise ValueError("coefficient vector does not match the velocity space")
    a = assembler_for(V)
    uq = a.field_at_points(np.asarray(u, dtype=float))
    per_elem = np.einsum("tq,tqc->tc", a.jxw, uq)
    sums = np.stack(
        [np.bincount(G.cell_of_element, weights=per_elem[:, c], minlength=G.num_cells) for c in (0, 1)],
        axis=1,
    )
    return CoarseField(G, sums / G.cell_area[:, None])


@dataclass(eq=False)
class NudgingOperator:
    """Low-rank form ``N = S @ S.T`` of mu (I_H u, I_H v) with ``S = W sqrt(mu |K|)``."""

    factor: sp.csr_matrix  # (ndof, 2 * num_cells)
    weights: sp.csr_matrix  # W
    scale: np.ndarray  # mu |K| per column
    grid: CoarseGrid
    mu: float

    def matrix(self) -> sp.csr_matrix:
        return (self.factor @ self.factor.T).tocsr()

    def load(self, data: CoarseField) -> np.ndarray:
        if data.grid is not self.grid:
            raise ValueError("data lives on a different coarse grid")
        return self.weights @ (self.scale * data.values.ravel())


def nudging_operator(V: FESpace, G: CoarseGrid, mu: float) -> NudgingOperator:
    if mu < 0:
        raise ValueError(f"nudging parameter must be nonnegative, got {mu}")
    W = averaging_weights(V, G)
    scale = mu * np.repeat(G.cell_area, 2)
    S = (W @ sp.diags(np.sqrt(scale))).tocsr()
    return NudgingOperator(S, W, scale, G, mu)


def assemble_nudging(V: FESpace, G: CoarseGrid, mu: float) -> sp.csr_matrix:
    """mu (I_H u, I_H v) as an explicit sparse matrix (dense within each cell)."""
    if mu < 0:
        raise ValueError(f"nudging parameter must be nonnegative, got {mu}")
    if mu == 0:
        return sp.csr_matrix((V.dof_count, V.dof_count))
    return nudging_operator(V, G, mu).matrix()


def nudging_load(data: CoarseField, V: FESpace, mu: float) -> np.ndarray:
    """Right-hand side mu (I_H u_data, I_H v_i)."""
    if mu < 0:
        raise ValueError(f"nudging parameter must be nonnegative, got {mu}")
    return nudging_operator(V, data.grid, mu).load(data)


def add_noise(u_ref: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Uniform [-1, 1] perturbation per nodal component, scaled by NSR * max nodal speed.

    ``u_ref`` uses the interleaved (x, y) node layout of the velocity space.
    """
    u_ref = np.asarray(u_ref, dtype=float)
    if spec.nsr == 0:
        return u_ref.copy()
    speed = np.hypot(u_ref[0::2], u_ref[1::2]).max()
    rng = np.random.Generator(np.random.Philox(spec.seed))
    eps = rng.uniform(-1.0, 1.0, size=u_ref.shape)
    return u_ref + spec.nsr * speed * eps
