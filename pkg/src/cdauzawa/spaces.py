"""Degree-of-freedom layouts for the velocity and pressure families.

Velocity is continuous vector P2 with nodes at the vertices followed by the
edge midpoints; node ``k`` owns dofs ``2k`` (x) and ``2k + 1`` (y).  Local
velocity dofs are ordered component-major: local index ``6c + a`` is
component ``c`` of local P2 node ``a``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh


class Family(str, Enum):
    VELOCITY_P2 = "velocity-P2-vector"
    PRESSURE_P1_DISC = "pressure-P1-disc"
    PRESSURE_P1_CONT = "pressure-P1-cont"


@dataclass(eq=False)
class FESpace:
    family: Family
    mesh: Mesh
    dof_count: int
    element_dof_map: np.ndarray
    dof_coords: np.ndarray | None = None

    @property
    def is_velocity(self) -> bool:
        return self.family is Family.VELOCITY_P2

    @property
    def num_nodes(self) -> int:
        return self.dof_count // 2 if self.is_velocity else self.dof_count

    def interpolate(self, func) -> np.ndarray:
        """Nodal interpolant of ``func(x, y)``.

        For the velocity space ``func`` returns a pair of arrays.  For the
        discontinuous family nodal values are taken per element vertex.
        """
        x, y = self.dof_coords.T
        if self.is_velocity:
            fx, fy = func(x, y)
            out = np.empty(self.dof_count)
            out[0::2] = np.broadcast_to(fx, x.shape)
            out[1::2] = np.broadcast_to(fy, x.shape)
            return out
        return np.broadcast_to(func(x, y), x.shape).astype(float)


def build_space(mesh: Mesh, family: Family | str) -> FESpace:
    family = Family(family)
    t = mesh.triangles
    if family is Family.VELOCITY_P2:
        nv = mesh.num_vertices
        nodes = np.concatenate([t, nv + mesh.element_edges], axis=1)
        coords = np.concatenate([mesh.vertices, mesh.vertices[mesh.edges].mean(axis=1)])
        dofs = np.concatenate([2 * nodes, 2 * nodes + 1], axis=1)
        return FESpace(family, mesh, 2 * len(coords), dofs, coords)
    if family is Family.PRESSURE_P1_DISC:
        dofs = np.arange(3 * len(t)).reshape(-1, 3)
        return FESpace(family, mesh, 3 * len(t), dofs, mesh.vertices[t].reshape(-1, 2))
    return FESpace(family, mesh, mesh.num_vertices, t.copy(), mesh.vertices.copy())


@dataclass(eq=False)
class DirichletBC:
    constrained_dofs: np.ndarray  # sorted dof indices
    values: np.ndarray  # prescribed value per constrained dof
    size: int

    def full_vector(self) -> np.ndarray:
        g = np.zeros(self.size)
        g[self.constrained_dofs] = self.values
        return g

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        m[self.constrained_dofs] = True
        return m

    def homogeneous(self) -> "DirichletBC":
        return DirichletBC(self.constrained_dofs, np.zeros_like(self.values), self.size)


def boundary_nodes(space: FESpace) -> np.ndarray:
    mesh = space.mesh
    edge_index = {tuple(e): k for k, e in enumerate(mesh.edges.tolist())}
    bedges = np.array([edge_index[tuple(sorted(e))] for e in mesh.boundary_edges.tolist()])
    return np.unique(np.concatenate([mesh.boundary_edges.ravel(), mesh.num_vertices + bedges]))


def cavity_bc(space: FESpace) -> DirichletBC:
    """All boundary velocity dofs constrained; nodes on y = 1 (corners too) carry (1, 0)."""
    if not space.is_velocity:
        raise ValueError("cavity boundary conditions apply to the velocity space")
    nodes = boundary_nodes(space)
    dofs = np.sort(np.concatenate([2 * nodes, 2 * nodes + 1]))
    on_lid = space.dof_coords[dofs // 2, 1] == 1.0
    values = np.where(on_lid & (dofs % 2 == 0), 1.0, 0.0)
    return DirichletBC(dofs, values, space.dof_count)


def apply_dirichlet(matrix, rhs: np.ndarray, bc: DirichletBC):
    """Replace constrained rows by identity rows and eliminate the matching columns.

    ``bc`` may address only the leading block of a larger coupled system; the
    constrained column contributions of every row are moved to the right-hand
    side, so the modified system stays symmetric wherever the original was.
    """
    matrix = sp.csr_matrix(matrix)
    n = matrix.shape[0]
    dofs = bc.constrained_dofs
    if matrix.shape[0] != matrix.shape[1]:
        raise ValueError("apply_dirichlet needs a square matrix")
    if len(dofs) and (dofs.min() < 0 or dofs.max() >= n or bc.size > n):
        raise IndexError("constrained dof index out of range")
    g = np.zeros(n)
    g[dofs] = bc.values
    rhs = np.asarray(rhs, dtype=float) - matrix @ g
    rhs[dofs] = bc.values
    keep = np.ones(n)
    keep[dofs] = 0.0
    K = sp.diags(keep)
    out = (K @ matrix @ K + sp.diags(1.0 - keep)).tocsr()
    out.eliminate_zeros()
    return out, rhs
