"""Triangulations of the unit square, Alfeld refinement and coarse data grids."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

LID = "lid"
WALL = "wall"


class MeshError(ValueError):
    pass


@dataclass(eq=False)
class Mesh:
    """Conforming triangulation of (0, 1)^2.

    ``n`` is the number of lattice subdivisions per side of the base grid;
    it is kept through :func:`alfeld_split` so that coarse grids can be
    nested against it.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: tuple
    n: int
    split: bool = False

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def _edge_data(self):
        # local edge k joins local vertices (k+1, k+2), i.e. it is opposite vertex k
        t = self.triangles
        local = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1)
        flat = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse = np.unique(flat, axis=0, return_inverse=True)
        return edges, inverse.reshape(-1, 3)

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs, lexicographically ordered."""
        return self._edge_data[0]

    @property
    def element_edges(self) -> np.ndarray:
        """Edge index of local edge k (opposite local vertex k) for each triangle."""
        return self._edge_data[1]

    @cached_property
    def boundary_vertex_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        return mask

    def dump(self) -> str:
        """Plain-text dump: header, ``v x y``, ``t i j k`` and ``b i j tag`` lines."""
        lines = [f"mesh n={self.n} split={'alfeld' if self.split else 'none'}"]
        lines += [f"v {x!r} {y!r}" for x, y in self.vertices.tolist()]
        lines += [f"t {i} {j} {k}" for i, j, k in self.triangles.tolist()]
        lines += [
            f"b {i} {j} {tag}"
            for (i, j), tag in zip(self.boundary_edges.tolist(), self.boundary_tags)
        ]
        return "\n".join(lines) + "\n"


def _tag_boundary(vertices: np.ndarray, edges: np.ndarray) -> tuple:
    y = vertices[edges, 1]
    return tuple(LID if top else WALL for top in np.all(y == 1.0, axis=1))


def build_uniform_square_mesh(n: int) -> Mesh:
    """Uniform ``n x n`` lattice, each square cut along its SW-NE diagonal."""
    if int(n) != n or n < 1:
        raise MeshError(f"number of subdivisions must be a positive integer, got {n!r}")
    n = int(n)
    s = np.arange(n + 1) / n
    xx, yy = np.meshgrid(s, s, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)  # idx[j, i] for point (i/n, j/n)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v11 = idx[1:, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)

    bottom = np.column_stack([idx[0, :-1], idx[0, 1:]])
    right = np.column_stack([idx[:-1, -1], idx[1:, -1]])
    top = np.column_stack([idx[-1, 1:], idx[-1, :-1]])
    left = np.column_stack([idx[1:, 0], idx[:-1, 0]])
    bedges = np.concatenate([bottom, right, top, left])
    return Mesh(vertices, triangles, bedges, _tag_boundary(vertices, bedges), n)


def alfeld_split(mesh: Mesh) -> Mesh:
    """Barycentric refinement: every triangle becomes three sharing its barycenter."""
    nv = mesh.num_vertices
    g = nv + np.arange(mesh.num_triangles)
    a, b, c = mesh.triangles.T
    triangles = np.stack(
        [np.column_stack([a, b, g]), np.column_stack([b, c, g]), np.column_stack([c, a, g])],
        axis=1,
    ).reshape(-1, 3)
    vertices = np.concatenate([mesh.vertices, mesh.barycenters])
    return Mesh(
        vertices,
        triangles,
        mesh.boundary_edges.copy(),
        mesh.boundary_tags,
        mesh.n,
        split=True,
    )


def cavity_mesh(n: int) -> Mesh:
    return alfeld_split(build_uniform_square_mesh(n))


@dataclass(eq=False)
class CoarseGrid:
    """Axis-aligned ``m x m`` grid of observation cells nested in a fine mesh."""

    mesh: Mesh
    m: int
    cell_of_element: np.ndarray
    cell_area: np.ndarray = field(repr=False)

    @property
    def H(self) -> float:
        return 1.0 / self.m

    @property
    def num_cells(self) -> int:
        return self.m * self.m

    def cell_bounds(self, cell: int) -> tuple[float, float, float, float]:
        j, i = divmod(cell, self.m)
        return i / self.m, (i + 1) / self.m, j / self.m, (j + 1) / self.m


def build_coarse_grid(mesh: Mesh, m: int) -> CoarseGrid:
    """Classify each fine triangle by the coarse square containing its barycenter."""
    if int(m) != m or m < 1:
        raise MeshError(f"coarse cells per side must be a positive integer, got {m!r}")
    m = int(m)
    if mesh.n % m:
        raise MeshError(f"coarse grid m={m} is not nested in fine grid n={mesh.n}")
    ij = np.floor(mesh.barycenters * m).astype(np.int64)
    ij = np.clip(ij, 0, m - 1)
    cells = ij[:, 1] * m + ij[:, 0]
    area = np.bincount(cells, weights=mesh.signed_areas, minlength=m * m)
    return CoarseGrid(mesh, m, cells, area)
