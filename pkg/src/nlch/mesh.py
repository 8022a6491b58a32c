"""Structured P1 triangulations of rectangles with lumped mass data.

Every grid cell is split into two right triangles along the
lower-left-to-upper-right diagonal, so the mesh is translation invariant
and node numbering is row-major over the grid (deterministic output).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Domain2D:
    """Axis-aligned rectangle [xmin, xmax] x [ymin, ymax]."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(
                f"degenerate domain: [{self.xmin}, {self.xmax}] x [{self.ymin}, {self.ymax}]"
            )

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass
class Mesh:
    """Uniform triangulation of a rectangle with P1 geometry caches.

    Attributes
    ----------
    nodes : (n, 2) array of node coordinates, row-major over the grid.
    elements : (ne, 3) int array, counter-clockwise vertex indices.
    lumped_mass : (n,) array, m_j = sum over incident triangles of |K|/3.
    adjacency : list of sorted int arrays; nodes sharing an element with j,
        excluding j itself.
    """

    domain: Domain2D
    nx: int
    ny: int
    nodes: np.ndarray
    elements: np.ndarray
    lumped_mass: np.ndarray
    adjacency: list = field(repr=False)
    # geometry caches used by assembly and the solver
    hx: float = field(repr=False, default=0.0)
    hy: float = field(repr=False, default=0.0)
    element_areas: np.ndarray = field(repr=False, default=None)
    element_grads: np.ndarray = field(repr=False, default=None)  # (ne, 2, 3)
    adjacency_matrix: sp.csr_matrix = field(repr=False, default=None)
    _local_geo: np.ndarray = field(repr=False, default=None)  # (ne, 3, 3) area*G^T G
    _unit_stiffness: sp.csr_matrix = field(repr=False, default=None)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def min_element_diameter(self) -> float:
        """Smallest element diameter (longest edge); uniform here."""
        return float(np.hypot(self.hx, self.hy))

    def unit_stiffness(self) -> sp.csr_matrix:
        """Constant-coefficient stiffness matrix, assembled once and cached."""
        if self._unit_stiffness is None:
            self._unit_stiffness = assemble_stiffness(
                self, np.ones(self.n_elements)
            )
        return self._unit_stiffness


def build_uniform_mesh(domain: Domain2D, nx: int, ny: int) -> Mesh:
    """Build the uniform diagonal-split triangulation with nx x ny cells.

    Produces (nx+1)(ny+1) nodes and 2*nx*ny elements. Node id of grid
    point (ix, iy) is iy*(nx+1) + ix.
    """
    if nx < 1 or ny < 1:
        raise ValueError(f"subdivision counts must be >= 1, got nx={nx}, ny={ny}")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(domain.xmin, domain.xmax, nx + 1)
    ys = np.linspace(domain.ymin, domain.ymax, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    hx = (domain.xmax - domain.xmin) / nx
    hy = (domain.ymax - domain.ymin) / ny

    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    a = (iy * (nx + 1) + ix).ravel()
    b = a + 1
    c = b + (nx + 1)
    d = a + (nx + 1)
    # cell split along the a-c diagonal, both triangles counter-clockwise
    lower = np.column_stack([a, b, c])
    upper = np.column_stack([a, c, d])
    elements = np.empty((2 * nx * ny, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper

    area = hx * hy / 2.0
    areas = np.full(elements.shape[0], area)
    lumped = np.zeros(nodes.shape[0])
    np.add.at(lumped, elements.ravel(), area / 3.0)

    # constant P1 gradients per element: solve the 2x2 edge system once
    p = nodes[elements]  # (ne, 3, 2)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    grads = np.empty((elements.shape[0], 2, 3))
    grads[:, 0, 1] = e2[:, 1] / det
    grads[:, 1, 1] = -e2[:, 0] / det
    grads[:, 0, 2] = -e1[:, 1] / det
    grads[:, 1, 2] = e1[:, 0] / det
    grads[:, :, 0] = -grads[:, :, 1] - grads[:, :, 2]

    local_geo = areas[:, None, None] * np.einsum("eki,ekj->eij", grads, grads)

    # symmetric boolean adjacency from element connectivity
    rows = np.repeat(elements, 3, axis=1).ravel()
    cols = np.tile(elements, (1, 3)).ravel()
    adj = sp.csr_matrix(
        (np.ones(rows.size, dtype=bool), (rows, cols)),
        shape=(nodes.shape[0], nodes.shape[0]),
    )
    adj.setdiag(False)
    adj.eliminate_zeros()
    adj.sort_indices()
    adjacency = [adj.indices[adj.indptr[j]:adj.indptr[j + 1]].copy()
                 for j in range(nodes.shape[0])]

    return Mesh(
        domain=domain,
        nx=nx,
        ny=ny,
        nodes=nodes,
        elements=elements,
        lumped_mass=lumped,
        adjacency=adjacency,
        hx=hx,
        hy=hy,
        element_areas=areas,
        element_grads=grads,
        adjacency_matrix=adj,
        _local_geo=local_geo,
    )


def lumped_inner_product(f: np.ndarray, g: np.ndarray, mesh: Mesh) -> float:
    """Lumped scalar product sum_j m_j f_j g_j."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != (mesh.n_nodes,) or g.shape != (mesh.n_nodes,):
        raise ValueError(
            f"field size mismatch: {f.shape}, {g.shape} vs {mesh.n_nodes} nodes"
        )
    return float(np.dot(mesh.lumped_mass * f, g))


def assemble_stiffness(mesh: Mesh, coeff: np.ndarray) -> sp.csr_matrix:
    """Assemble A_ij = sum_K coeff_K int_K grad(chi_j) . grad(chi_i).

    coeff holds one nonnegative value per element; rows of the result sum
    to zero (gradients of constants vanish).
    """
    coeff = np.asarray(coeff, dtype=float)
    if coeff.shape != (mesh.n_elements,):
        raise ValueError(
            f"coefficient size mismatch: {coeff.shape} vs {mesh.n_elements} elements"
        )
    if np.any(coeff < 0):
        raise ValueError("negative element coefficient")
    data = (coeff[:, None, None] * mesh._local_geo).ravel()
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    A = sp.csr_matrix((data, (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    A.sum_duplicates()
    A.sort_indices()
    return A
