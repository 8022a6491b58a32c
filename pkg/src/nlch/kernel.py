"""Gaussian convolution kernel and the sparse non-local matrices J1, J2.

J2[i,j] = J(x_i - x_j) m_i m_j holds the mass-weighted kernel samples and
J1 is its exact row-sum vector, so the discrete identity
J1[i] = sum_j J2[i,j] holds bit-for-bit. The nodal convolution is then
(J * eta)_h (x_i) = (J2 @ eta)_i / m_i  and  (J * 1)_h (x_i) = J1[i] / m_i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh


@dataclass(frozen=True)
class KernelSpec:
    """Width parameter epsilon > 0 and sparsification tolerance.

    Entries are kept only where the raw kernel value exceeds ``cutoff``
    (the comparison is on J itself, not on the mass-weighted entry).
    """

    epsilon: float
    cutoff: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise ValueError(f"kernel epsilon must be positive, got {self.epsilon}")
        if self.cutoff < 0.0:
            raise ValueError(f"cutoff must be >= 0, got {self.cutoff}")


@dataclass
class KernelMatrices:
    """Diagonal J1 (as a vector) and sparse symmetric J2."""

    J1: np.ndarray
    J2: sp.csr_matrix


def kernel_eval(dx, dy, spec: KernelSpec):
    """Kernel value (1/eps^4) * exp(-(dx^2 + dy^2) / (2 eps^2))."""
    e2 = spec.epsilon * spec.epsilon
    return np.exp(-(np.asarray(dx) ** 2 + np.asarray(dy) ** 2) / (2.0 * e2)) / (e2 * e2)


def assemble_kernel_matrices(mesh: Mesh, spec: KernelSpec) -> KernelMatrices:
    """Assemble J2 (and J1 as its row sums) on a uniform mesh.

    On the structured grid J(x_i - x_j) depends only on the index offset,
    so kernel values are computed once per offset of a precomputed stencil
    and replicated over all node pairs with that offset.
    """
    nx, ny = mesh.nx, mesh.ny
    hx, hy = mesh.hx, mesh.hy
    m = mesh.lumped_mass
    n = mesh.n_nodes

    if spec.cutoff > 0.0:
        # J(r) > cutoff  <=>  r^2 < -2 eps^2 log(cutoff * eps^4)
        arg = spec.cutoff * spec.epsilon ** 4
        if arg >= 1.0:
            r2max = -1.0  # cutoff removes everything, including the diagonal
        else:
            r2max = -2.0 * spec.epsilon ** 2 * np.log(arg)
        amax = int(np.floor(np.sqrt(max(r2max, 0.0)) / hx)) if r2max > 0 else -1
        bmax = int(np.floor(np.sqrt(max(r2max, 0.0)) / hy)) if r2max > 0 else -1
        amax = min(amax, nx)
        bmax = min(bmax, ny)
    else:
        amax, bmax = nx, ny

    rows, cols, vals = [], [], []
    ix = np.arange(nx + 1)
    iy = np.arange(ny + 1)
    for b in range(-bmax, bmax + 1):
        for a in range(-amax, amax + 1):
            kval = float(kernel_eval(a * hx, b * hy, spec))
            if spec.cutoff > 0.0 and not kval > spec.cutoff:
                continue
            ix0 = ix[max(0, -a):nx + 1 - max(0, a)]
            iy0 = iy[max(0, -b):ny + 1 - max(0, b)]
            IX, IY = np.meshgrid(ix0, iy0, indexing="xy")
            i = (IY * (nx + 1) + IX).ravel()
            j = ((IY + b) * (nx + 1) + (IX + a)).ravel()
            rows.append(i)
            cols.append(j)
            vals.append(kval * m[i] * m[j])

    if rows:
        J2 = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
    else:
        J2 = sp.csr_matrix((n, n))
    J2.sum_duplicates()
    J2.sort_indices()
    J1 = np.asarray(J2.sum(axis=1)).ravel()
    return KernelMatrices(J1=J1, J2=J2)


def conv_lumped(eta: np.ndarray, km: KernelMatrices, mesh: Mesh) -> np.ndarray:
    """Nodal values of the discrete convolution (J * eta)_h."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (mesh.n_nodes,):
        raise ValueError(f"field size mismatch: {eta.shape} vs {mesh.n_nodes} nodes")
    return (km.J2 @ eta) / mesh.lumped_mass
