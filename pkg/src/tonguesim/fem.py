"""Linear elasticity on constant-strain tetrahedra.

Assembles the stiffness operator K and lumped mass M over the free degrees
of freedom of a mesh. Anchored nodes are removed entirely (all three
components), so a reduced vector always reshapes to ``(n_free, 3)``.
Damping is Rayleigh-type and only ever applied in modal coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateElementError, DimensionError, EmptySystemError, ParameterError
from .mesh import NodeSelection, TetMesh

MIN_TET_VOLUME = 1e-18

DEFAULT_YOUNG_MODULUS = 15e3
DEFAULT_POISSON_RATIO = 0.49
DEFAULT_DENSITY = 1040.0
DEFAULT_RAYLEIGH_MASS = 2.0
DEFAULT_RAYLEIGH_STIFFNESS = 1e-3


@dataclass(frozen=True)
class MaterialParams:
    young_modulus: float = DEFAULT_YOUNG_MODULUS
    poisson_ratio: float = DEFAULT_POISSON_RATIO
    density: float = DEFAULT_DENSITY
    rayleigh_mass: float = DEFAULT_RAYLEIGH_MASS
    rayleigh_stiffness: float = DEFAULT_RAYLEIGH_STIFFNESS

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ParameterError("young_modulus must be > 0")
        if not 0 <= self.poisson_ratio < 0.5:
            raise ParameterError("poisson_ratio must lie in [0, 0.5)")
        if not self.density > 0:
            raise ParameterError("density must be > 0")
        if self.rayleigh_mass < 0 or self.rayleigh_stiffness < 0:
            raise ParameterError("Rayleigh coefficients must be >= 0")

    @property
    def lame(self):
        E, nu = self.young_modulus, self.poisson_ratio
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        return lam, mu


@dataclass(frozen=True, eq=False)
class SystemMatrices:
    K: sp.csr_matrix          # (3 n_free, 3 n_free)
    M: np.ndarray             # lumped mass diagonal, (3 n_free,)
    free_nodes: np.ndarray    # node id of each free node, ascending
    dof_index: np.ndarray     # full dof -> reduced dof, -1 where anchored
    n_nodes: int

    @property
    def n_free(self) -> int:
        return len(self.free_nodes)

    @property
    def ndof(self) -> int:
        return len(self.M)

    @property
    def free_dofs(self):
        return (3 * self.free_nodes[:, None] + np.arange(3)).ravel()

    @property
    def M_sparse(self):
        return sp.diags(self.M, format="csr")

    def node_rows(self, node_ids):
        """Reduced dof indices (3 per node) of the given nodes; -1 for anchored components."""
        ids = np.asarray(node_ids, dtype=np.int64)
        return self.dof_index[(3 * ids[:, None] + np.arange(3)).ravel()]


def shape_gradients(mesh: TetMesh):
    """Per-tet gradients of the four linear shape functions, shape (m, 4, 3), and volumes."""
    p = mesh.nodes[mesh.tets]
    Dm = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
    vol = np.linalg.det(Dm) / 6.0
    small = np.nonzero(np.abs(vol) < MIN_TET_VOLUME)[0]
    if len(small):
        raise DegenerateElementError(
            f"{len(small)} tets below {MIN_TET_VOLUME} m^3 (first: {int(small[0])})", small)
    inv = np.linalg.inv(Dm)
    grads = np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)
    return grads, vol


def element_stiffness(grads, vol, material: MaterialParams):
    """Stacked 12x12 element matrices, dof order (node a, component i) -> 3a+i."""
    lam, mu = material.lame
    gg = np.einsum("eak,ebk->eab", grads, grads)
    Ke = (lam * np.einsum("eai,ebj->eaibj", grads, grads)
          + mu * np.einsum("eaj,ebi->eaibj", grads, grads)
          + mu * np.einsum("eab,ij->eaibj", gg, np.eye(3)))
    return (vol[:, None, None, None, None] * Ke).reshape(-1, 12, 12)


def assemble_full(mesh: TetMesh, material: MaterialParams):
    """Unreduced stiffness (CSR) and lumped mass diagonal over all 3n dofs."""
    grads, vol = shape_gradients(mesh)
    Ke = element_stiffness(grads, vol, material)
    dofs = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    n = 3 * mesh.node_count
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    K.sort_indices()
    node_mass = np.zeros(mesh.node_count)
    np.add.at(node_mass, mesh.tets.ravel(), np.repeat(material.density * vol / 4.0, 4))
    return K, np.repeat(node_mass, 3)


def assemble(mesh: TetMesh, material: MaterialParams,
             anchors: NodeSelection | None = None) -> SystemMatrices:
    anchor_ids = np.array([], dtype=np.int64) if anchors is None else anchors.as_array()
    if anchors is not None:
        anchors.validate(mesh)
    is_free = np.ones(mesh.node_count, dtype=bool)
    is_free[anchor_ids] = False
    free_nodes = np.nonzero(is_free)[0]
    if len(free_nodes) == 0:
        raise EmptySystemError("every node is anchored; nothing to simulate")

    K_full, m_full = assemble_full(mesh, material)
    dof_index = np.full(3 * mesh.node_count, -1, dtype=np.int64)
    free_dofs = (3 * free_nodes[:, None] + np.arange(3)).ravel()
    dof_index[free_dofs] = np.arange(len(free_dofs))
    K = K_full[free_dofs][:, free_dofs].tocsr()
    K.sort_indices()
    return SystemMatrices(K=K, M=m_full[free_dofs].copy(), free_nodes=free_nodes,
                          dof_index=dof_index, n_nodes=mesh.node_count)


def damping_coefficients(material: MaterialParams, eigenvalues):
    """Modal damping rates xi + zeta * lambda_i."""
    lam = np.asarray(eigenvalues, dtype=float)
    if np.any(lam < 0):
        raise ParameterError("eigenvalues must be >= 0")
    return material.rayleigh_mass + material.rayleigh_stiffness * lam


def expand_free_vector(matrices: SystemMatrices, reduced):
    """Scatter a reduced vector back to an (n_nodes, 3) field with zeros at anchors."""
    v = np.asarray(reduced)
    if v.shape != (matrices.ndof,):
        raise DimensionError(f"expected reduced vector of length {matrices.ndof}, got {v.shape}")
    full = np.zeros((matrices.n_nodes, 3), dtype=v.dtype)
    full[matrices.free_nodes] = v.reshape(-1, 3)
    return full


def restrict_field(matrices: SystemMatrices, field):
    """Inverse of :func:`expand_free_vector` (anchored entries are dropped)."""
    f = np.asarray(field, dtype=float).reshape(matrices.n_nodes, 3)
    return f[matrices.free_nodes].ravel()
