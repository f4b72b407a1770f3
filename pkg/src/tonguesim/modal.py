"""Truncated modal basis of the (K, M) pencil and reduced-coordinate maps.

Because M is diagonal, the generalized problem K phi = lambda M phi is
rewritten as the standard symmetric problem
``M^-1/2 K M^-1/2 v = lambda v`` with ``phi = M^-1/2 v``, which makes the
basis mass-orthonormal by construction.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionError, InputError, ModalSolverError
from .fem import MaterialParams, SystemMatrices
from .mesh import NodeSelection, TetMesh

log = logging.getLogger(__name__)

DENSE_DOF_LIMIT = 3000
ZERO_EIG_RTOL = 1e-9
DEFAULT_MODES = 150

CACHE_MAGIC = b"TSMODAL\0"
CACHE_VERSION = 1


@dataclass(frozen=True, eq=False)
class ModalBasis:
    Phi: np.ndarray           # (3 n_free, r)
    Lambda: np.ndarray        # (r,), ascending
    free_nodes: Optional[np.ndarray] = None
    dof_index: Optional[np.ndarray] = None
    n_nodes: int = 0
    clamped: int = 0          # eigenvalues snapped to zero (rigid / under-anchored modes)

    @property
    def r(self) -> int:
        return self.Phi.shape[1]

    @property
    def ndof(self) -> int:
        return self.Phi.shape[0]

    def node_rows(self, node_ids):
        ids = np.asarray(node_ids, dtype=np.int64)
        return self.dof_index[(3 * ids[:, None] + np.arange(3)).ravel()]


def _finalize(matrices, lam, vecs, r, norm_scale):
    order = np.argsort(lam, kind="stable")[:r]
    lam = lam[order].copy()
    phi = vecs[:, order] / np.sqrt(matrices.M)[:, None]

    # largest-magnitude entry of each column made positive; symmetric meshes give
    # exact ties broken only by rounding, so take the first entry within a hair of the max
    mag = np.abs(phi)
    pivot = np.argmax(mag >= (1.0 - 1e-8) * mag.max(axis=0), axis=0)
    signs = np.sign(phi[pivot, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    phi *= signs

    # rounding noise of a rigid mode is ~eps * ||A||, which can exceed the relative bar
    tol = max(ZERO_EIG_RTOL * abs(lam).max(), 1e3 * np.finfo(float).eps * norm_scale)
    near_zero = np.abs(lam) < tol
    lam[near_zero] = 0.0
    if near_zero.any():
        log.warning("%d near-zero eigenvalues clamped; structure is under-anchored",
                    int(near_zero.sum()))
    if np.any(lam < 0):
        raise ModalSolverError("negative eigenvalue in stiffness pencil",
                               {"min_eigenvalue": float(lam.min())})
    return ModalBasis(Phi=np.ascontiguousarray(phi), Lambda=lam,
                      free_nodes=matrices.free_nodes, dof_index=matrices.dof_index,
                      n_nodes=matrices.n_nodes, clamped=int(near_zero.sum()))


def compute_modal_basis(matrices: SystemMatrices, r: int = DEFAULT_MODES, *,
                        dense_limit: int = DENSE_DOF_LIMIT, maxiter=None, tol=0.0) -> ModalBasis:
    """The r smallest-eigenvalue modes, mass-normalized and sign-fixed."""
    ndof = matrices.ndof
    if not 1 <= r <= ndof:
        raise DimensionError(f"mode count r={r} outside [1, {ndof}] for this system")
    s = 1.0 / np.sqrt(matrices.M)
    S = sp.diags(s)
    A = (S @ matrices.K @ S).tocsc()
    norm_scale = float(np.abs(A).sum(axis=1).max())

    if ndof <= dense_limit:
        Ad = A.toarray()
        Ad = 0.5 * (Ad + Ad.T)
        lam, vecs = la.eigh(Ad, subset_by_index=[0, r - 1])
        return _finalize(matrices, lam, vecs, r, norm_scale)

    # shift slightly below zero so rigid modes (if any) keep the factorization regular
    sigma = -1e-8 * float(A.diagonal().mean())
    ncv = min(ndof, max(2 * r + 1, r + 32))
    try:
        lam, vecs = spla.eigsh(A, k=r, sigma=sigma, which="LM", ncv=ncv,
                               maxiter=maxiter, tol=tol)
    except spla.ArpackNoConvergence as exc:
        raise ModalSolverError(
            f"shift-invert Lanczos did not converge ({len(exc.eigenvalues)} of {r} modes)",
            {"converged": len(exc.eigenvalues), "requested": r, "ncv": ncv,
             "maxiter": maxiter, "sigma": sigma}) from exc
    except (RuntimeError, spla.ArpackError) as exc:
        raise ModalSolverError(f"eigensolver failed: {exc}",
                               {"requested": r, "ncv": ncv, "sigma": sigma}) from exc
    return _finalize(matrices, lam, vecs, r, norm_scale)


def reconstruct_displacement(basis: ModalBasis, q):
    """Free-dof displacement u = Phi q."""
    q = np.asarray(q, dtype=float)
    if q.shape != (basis.r,):
        raise DimensionError(f"q must have length {basis.r}, got {q.shape}")
    return basis.Phi @ q


def reduce_force(basis: ModalBasis, f):
    """Modal force Phi^T f."""
    f = np.asarray(f, dtype=float)
    if f.shape != (basis.ndof,):
        raise DimensionError(f"force must have length {basis.ndof}, got {f.shape}")
    return basis.Phi.T @ f


# -- cache ------------------------------------------------------------------

def basis_cache_key(mesh: TetMesh, material: MaterialParams, anchors: NodeSelection | None, r: int) -> str:
    h = hashlib.sha256()
    h.update(CACHE_MAGIC + struct.pack("<I", CACHE_VERSION))
    h.update(np.ascontiguousarray(mesh.nodes, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mesh.tets, dtype="<i8").tobytes())
    h.update(struct.pack("<3d", material.young_modulus, material.poisson_ratio, material.density))
    ids = np.array([] if anchors is None else sorted(anchors.node_ids), dtype="<i8")
    h.update(ids.tobytes())
    h.update(struct.pack("<q", int(r)))
    return h.hexdigest()


def save_basis(basis: ModalBasis, path):
    """Binary blob: magic, version, (ndof, r, n_nodes, clamped), Lambda, Phi, free node ids."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", CACHE_VERSION))
        fh.write(struct.pack("<4q", basis.ndof, basis.r, basis.n_nodes, basis.clamped))
        fh.write(np.ascontiguousarray(basis.Lambda, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.Phi, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.free_nodes, dtype="<i8").tobytes())
    return path


def load_basis(path) -> ModalBasis:
    with open(path, "rb") as fh:
        data = fh.read()
    head = len(CACHE_MAGIC) + 4 + 32
    if len(data) < head or not data.startswith(CACHE_MAGIC):
        raise InputError(f"{path}: not a modal basis cache file")
    (version,) = struct.unpack_from("<I", data, len(CACHE_MAGIC))
    if version != CACHE_VERSION:
        raise InputError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    ndof, r, n_nodes, clamped = struct.unpack_from("<4q", data, len(CACHE_MAGIC) + 4)
    expect = head + 8 * (r + ndof * r + ndof // 3)
    if len(data) != expect:
        raise InputError(f"{path}: truncated cache ({len(data)} of {expect} bytes)")
    off = head
    lam = np.frombuffer(data, "<f8", r, off).copy()
    off += 8 * r
    phi = np.frombuffer(data, "<f8", ndof * r, off).reshape(ndof, r).copy()
    off += 8 * ndof * r
    free_nodes = np.frombuffer(data, "<i8", ndof // 3, off).astype(np.int64)
    dof_index = np.full(3 * n_nodes, -1, dtype=np.int64)
    dof_index[(3 * free_nodes[:, None] + np.arange(3)).ravel()] = np.arange(ndof)
    return ModalBasis(Phi=phi, Lambda=lam, free_nodes=free_nodes, dof_index=dof_index,
                      n_nodes=int(n_nodes), clamped=int(clamped))


def cached_modal_basis(mesh, material, anchors, matrices, r, cache_dir=None) -> ModalBasis:
    if cache_dir is None:
        return compute_modal_basis(matrices, r)
    path = Path(cache_dir) / f"basis-{basis_cache_key(mesh, material, anchors, r)[:24]}.bin"
    if path.exists():
        log.info("loading modal basis from %s", path)
        return load_basis(path)
    basis = compute_modal_basis(matrices, r)
    save_basis(basis, path)
    return basis
