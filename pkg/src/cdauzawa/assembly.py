"""Vectorized element kernels and sparse assembly of the flow operators.

All velocity-velocity operators share one sparsity pattern (the 12 x 12
element blocks), so their values can be summed on the pattern before a
single compression.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .quadrature import Quadrature, default_rule
from .spaces import Family, FESpace

ForceField = Callable[[np.ndarray, np.ndarray], tuple]


def p2_values(bary: np.ndarray) -> np.ndarray:
    """Scalar P2 shape functions at barycentric points, shape (nq, 6)."""
    l0, l1, l2 = bary.T
    return np.column_stack(
        [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1]
    )


def p2_bary_derivatives(bary: np.ndarray) -> np.ndarray:
    """d(phi_a)/d(lambda_j), shape (nq, 6, 3)."""
    nq = len(bary)
    d = np.zeros((nq, 6, 3))
    for k in range(3):
        d[:, k, k] = 4 * bary[:, k] - 1
        k1, k2 = (k + 1) % 3, (k + 2) % 3
        d[:, 3 + k, k1] = 4 * bary[:, k2]
        d[:, 3 + k, k2] = 4 * bary[:, k1]
    return d


class SparsityPattern:
    """Deterministic COO -> CSR map for element blocks ``rows[t, i] x cols[t, j]``."""

    def __init__(self, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]):
        self.shape = shape
        r = np.repeat(rows[:, :, None], cols.shape[1], axis=2).ravel()
        c = np.repeat(cols[:, None, :], rows.shape[1], axis=1).ravel()
        keys = r.astype(np.int64) * shape[1] + c
        uniq, self._inverse = np.unique(keys, return_inverse=True)
        self.nnz = len(uniq)
        self.indices = (uniq % shape[1]).astype(np.int32)
        counts = np.bincount(uniq // shape[1], minlength=shape[0])
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)

    def assemble(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self._inverse, weights=local.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


@dataclass(eq=False)
class ElementGeometry:
    area: np.ndarray  # (T,)
    grad_lambda: np.ndarray  # (T, 3, 2)
    corners: np.ndarray  # (T, 3, 2)


def element_geometry(mesh) -> ElementGeometry:
    p = mesh.vertices[mesh.triangles]
    area = mesh.signed_areas
    g = np.empty((len(p), 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        g[:, i, 0] = (p[:, j, 1] - p[:, k, 1]) / (2 * area)
        g[:, i, 1] = (p[:, k, 0] - p[:, j, 0]) / (2 * area)
    return ElementGeometry(area, g, p)


class Assembler:
    """Precomputed quadrature data for one velocity space."""

    def __init__(self, V: FESpace, rule: Quadrature | None = None):
        if not V.is_velocity:
            raise ValueError("Assembler is built on the velocity space")
        self.V = V
        self.mesh = V.mesh
        self.rule = rule or default_rule()
        self.geom = element_geometry(self.mesh)
        bary = self.rule.barycentric
        self.bary = bary
        self.phi = p2_values(bary)  # (nq, 6)
        dphi_bary = p2_bary_derivatives(bary)
        self.dphi = np.einsum("qaj,tjd->tqad", dphi_bary, self.geom.grad_lambda)
        self.jxw = 2.0 * self.geom.area[:, None] * self.rule.weights[None, :]  # (T, nq)
        self.points = np.einsum("qk,tkd->tqd", bary, self.geom.corners)
        self.dofs = V.element_dof_map
        self.pattern = SparsityPattern(self.dofs, self.dofs, (V.dof_count, V.dof_count))
        # divergence of vector basis function 6c + a is d(phi_a)/dx_c
        self.div_basis = np.concatenate([self.dphi[..., 0], self.dphi[..., 1]], axis=2)
        self._scalar_stiffness = np.einsum("tq,tqad,tqbd->tab", self.jxw, self.dphi, self.dphi)
        self._scalar_mass = np.einsum("tq,qa,qb->tab", self.jxw, self.phi, self.phi)
        self._graddiv = np.einsum("tq,tqi,tqj->tij", self.jxw, self.div_basis, self.div_basis)
        # exact symmetry as stored: round-off in the contractions is not symmetric
        for name in ("_scalar_stiffness", "_scalar_mass", "_graddiv"):
            block = getattr(self, name)
            setattr(self, name, 0.5 * (block + block.transpose(0, 2, 1)))
        self._pressure = {}

    # -- local element blocks -------------------------------------------------
    @staticmethod
    def _blockdiag(scalar: np.ndarray) -> np.ndarray:
        out = np.zeros((len(scalar), 12, 12))
        out[:, :6, :6] = scalar
        out[:, 6:, 6:] = scalar
        return out

    def local_diffusion(self, nu: float) -> np.ndarray:
        return self._blockdiag(nu * self._scalar_stiffness)

    def local_graddiv(self, gamma: float) -> np.ndarray:
        return gamma * self._graddiv

    def local_mass(self) -> np.ndarray:
        return self._blockdiag(self._scalar_mass)

    def field_at_points(self, u: np.ndarray) -> np.ndarray:
        """Velocity at quadrature points, shape (T, nq, 2)."""
        loc = u[self.dofs].reshape(-1, 2, 6)
        return np.einsum("qa,tca->tqc", self.phi, loc)

    def gradient_at_points(self, u: np.ndarray) -> np.ndarray:
        """grad u at quadrature points, ``[t, q, c, d] = d u_c / d x_d``."""
        loc = u[self.dofs].reshape(-1, 2, 6)
        return np.einsum("tqad,tca->tqcd", self.dphi, loc)

    def local_convection(self, w: np.ndarray) -> np.ndarray:
        """Blocks of (w . grad u, v) with u the trial and v the test function."""
        wq = self.field_at_points(w)
        adv = np.einsum("tqd,tqbd->tqb", wq, self.dphi)
        scalar = np.einsum("tq,qa,tqb->tab", self.jxw, self.phi, adv)
        return self._blockdiag(scalar)

    def local_convection_reaction(self, w: np.ndarray) -> np.ndarray:
        """Blocks of (u . grad w, v), the second Newton linearization term."""
        gw = self.gradient_at_points(w)
        scalar = np.einsum("tq,qa,qb->tqab", self.jxw, self.phi, self.phi)
        out = np.einsum("tqab,tqcd->tcadb", scalar, gw)
        return out.reshape(-1, 12, 12)

    # -- global operators -----------------------------------------------------
    def matrix(self, local: np.ndarray) -> sp.csr_matrix:
        return self.pattern.assemble(local)

    def force(self, f: ForceField) -> np.ndarray:
        x, y = self.points[..., 0], self.points[..., 1]
        fx, fy = f(x, y)
        fq = np.stack([np.broadcast_to(fx, x.shape), np.broadcast_to(fy, x.shape)], axis=-1)
        local = np.einsum("tq,qa,tqc->tca", self.jxw, self.phi, fq).reshape(-1, 12)
        return np.bincount(self.dofs.ravel(), weights=local.ravel(), minlength=self.V.dof_count)

    def convection_load(self, w: np.ndarray) -> np.ndarray:
        """Vector of (w . grad w, v_i)."""
        wq = self.field_at_points(w)
        gw = self.gradient_at_points(w)
        conv = np.einsum("tqd,tqcd->tqc", wq, gw)
        local = np.einsum("tq,qa,tqc->tca", self.jxw, self.phi, conv).reshape(-1, 12)
        return np.bincount(self.dofs.ravel(), weights=local.ravel(), minlength=self.V.dof_count)

    def divergence_moments(self, u: np.ndarray) -> np.ndarray:
        """Per element (div u_h, lambda_i), shape (T, 3)."""
        div = np.einsum("tqi,ti->tq", self.div_basis, u[self.dofs])
        return np.einsum("tq,qi,tq->ti", self.jxw, self.bary, div)

    def pressure_blocks(self, Q: FESpace):
        key = Q.family
        if key not in self._pressure:
            if Q.mesh is not self.mesh:
                raise ValueError("velocity and pressure spaces live on different meshes")
            b = np.einsum("tq,qi,tqj->tij", self.jxw, self.bary, self.div_basis)
            m = np.einsum("tq,qi,qj->tij", self.jxw, self.bary, self.bary)
            m = 0.5 * (m + m.transpose(0, 2, 1))
            pdofs = Q.element_dof_map
            bpat = SparsityPattern(pdofs, self.dofs, (Q.dof_count, self.V.dof_count))
            mpat = SparsityPattern(pdofs, pdofs, (Q.dof_count, Q.dof_count))
            self._pressure[key] = (bpat.assemble(b), mpat.assemble(m), m)
        return self._pressure[key]


_ASSEMBLERS: "weakref.WeakKeyDictionary[FESpace, Assembler]" = weakref.WeakKeyDictionary()


def assembler_for(V: FESpace) -> Assembler:
    if V not in _ASSEMBLERS:
        _ASSEMBLERS[V] = Assembler(V)
    return _ASSEMBLERS[V]


def _check_velocity(V: FESpace, u: np.ndarray | None = None):
    if not V.is_velocity:
        raise ValueError(f"expected the velocity space, got {V.family.value}")
    if u is not None and len(u) != V.dof_count:
        raise ValueError(f"coefficient vector has length {len(u)}, space has {V.dof_count} dofs")


def assemble_diffusion(V: FESpace, nu: float) -> sp.csr_matrix:
    """nu (grad u, grad v)."""
    _check_velocity(V)
    if not nu > 0:
        raise ValueError(f"viscosity must be positive, got {nu}")
    a = assembler_for(V)
    return a.matrix(a.local_diffusion(nu))


def assemble_convection(V: FESpace, w: np.ndarray) -> sp.csr_matrix:
    """(w . grad u, v) in its raw, non-skew-symmetrized form."""
    _check_velocity(V, w)
    a = assembler_for(V)
    return a.matrix(a.local_convection(np.asarray(w, dtype=float)))


def assemble_graddiv(V: FESpace, gamma: float) -> sp.csr_matrix:
    """gamma (div u, div v)."""
    _check_velocity(V)
    if gamma < 0:
        raise ValueError(f"grad-div parameter must be nonnegative, got {gamma}")
    a = assembler_for(V)
    return a.matrix(a.local_graddiv(gamma))


def assemble_div_coupling(V: FESpace, Q: FESpace) -> sp.csr_matrix:
    """Rectangular B with entries (div phi_j, psi_i)."""
    _check_velocity(V)
    if Q.mesh is not V.mesh:
        raise ValueError("velocity and pressure spaces live on different meshes")
    return assembler_for(V).pressure_blocks(Q)[0].copy()


def assemble_mass(S: FESpace, V: FESpace | None = None) -> sp.csr_matrix:
    """L2 mass matrix of any family.

    Pressure masses are assembled through the velocity assembler of the same
    mesh; pass ``V`` to reuse an existing one.
    """
    if S.is_velocity:
        a = assembler_for(S)
        return a.matrix(a.local_mass())
    if V is None:
        from .spaces import build_space

        V = build_space(S.mesh, Family.VELOCITY_P2)
    return assembler_for(V).pressure_blocks(S)[1].copy()


def assemble_force(V: FESpace, f: ForceField) -> np.ndarray:
    """Load vector <f, phi_i>."""
    _check_velocity(V)
    return assembler_for(V).force(f)


def project_div_to_pressure(u: np.ndarray, Q: FESpace, V: FESpace) -> np.ndarray:
    """L2 projection of div u_h into discontinuous P1, by 3 x 3 element solves.

    Exact whenever div X_h is contained in Q_h (Scott-Vogelius pairing).
    """
    if Q.family is not Family.PRESSURE_P1_DISC:
        raise ValueError("element-local divergence projection needs discontinuous P1 pressure")
    _check_velocity(V, u)
    a = assembler_for(V)
    moments = a.divergence_moments(np.asarray(u, dtype=float))
    # inverse of the P1 element mass (area / 12) [[2,1,1],[1,2,1],[1,1,2]]
    inv = np.array([[3.0, -1.0, -1.0], [-1.0, 3.0, -1.0], [-1.0, -1.0, 3.0]])
    local = (3.0 / a.geom.area)[:, None] * (moments @ inv.T)
    return local.ravel()
