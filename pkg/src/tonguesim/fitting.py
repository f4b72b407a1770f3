"""Subject-specific rest-shape editing.

Model surface nodes lying in an imaging plane act as control points of an
active contour that is pulled onto a manually traced contour. The
resulting in-plane displacements become Dirichlet targets of a static
elastic solve that carries the surface edit into the volume.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ConstraintRankError,
    InputError,
    InvertedElementError,
    PairingError,
    ParameterError,
    SnakeEnergyError,
    SnakeNumericError,
)
from .fem import SystemMatrices
from .mesh import NodeSelection, TetMesh, signed_tet_volumes
from .tracking import PlaneCalibration

log = logging.getLogger(__name__)

PLANES = ("midsagittal", "coronal")
SINGULAR_PIVOT_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class ContourPolyline:
    plane: str
    points: np.ndarray     # (N, 2), mm in the image plane
    closed: bool = False

    def __post_init__(self):
        if self.plane not in PLANES:
            raise ParameterError(f"unknown plane {self.plane!r}")
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ParameterError("a contour needs at least two 2D points")
        if not np.all(np.isfinite(pts)):
            raise SnakeNumericError("contour has non-finite coordinates")
        if np.any(np.all(pts[1:] == pts[:-1], axis=1)):
            raise ParameterError("contour has repeated consecutive points")
        object.__setattr__(self, "points", pts)

    def segments(self):
        a = self.points
        b = np.roll(a, -1, axis=0)
        if not self.closed:
            a, b = a[:-1], b[:-1]
        return a, b


@dataclass(frozen=True)
class SnakeParams:
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.25
    attraction_weight: float = 1.0
    max_iterations: int = 200
    convergence_tol: float = 1e-3
    scheme: str = "semi-implicit"   # or "explicit"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.attraction_weight) < 0:
            raise ParameterError("snake weights must be >= 0")
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise ParameterError("convergence_tol must be > 0")
        if self.scheme not in ("semi-implicit", "explicit"):
            raise ParameterError(f"unknown snake scheme {self.scheme!r}")


@dataclass(eq=False)
class SnakeResult:
    points: np.ndarray
    displacements: np.ndarray
    residuals: np.ndarray          # final point-to-target distances
    energies: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def closest_points(points, contour: ContourPolyline):
    """Nearest point on the polyline and distance, for each query point."""
    a, b = contour.segments()
    ab = b - a
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("psk,sk->ps", ap, ab) / np.einsum("sk,sk->s", ab, ab), 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    d2 = np.sum((points[:, None, :] - proj) ** 2, axis=2)
    best = np.argmin(d2, axis=1)
    idx = np.arange(len(points))
    return proj[idx, best], np.sqrt(d2[idx, best])


def _difference_operators(n, closed):
    eye = np.eye(n)
    if closed:
        d1 = np.roll(eye, 1, axis=1) - eye
        d2 = np.roll(eye, 1, axis=1) - 2 * eye + np.roll(eye, -1, axis=1)
    else:
        d1 = eye[1:] - eye[:-1]
        d2 = eye[2:] - 2 * eye[1:-1] + eye[:-2] if n >= 3 else np.zeros((0, n))
    return d1, d2


def snake_energy(points, target: ContourPolyline, params: SnakeParams, closed=None):
    closed = target.closed if closed is None else closed
    d1, d2 = _difference_operators(len(points), closed)
    _, dist = closest_points(points, target)
    return float(params.alpha * np.sum((d1 @ points) ** 2)
                 + params.beta * np.sum((d2 @ points) ** 2)
                 + params.attraction_weight * np.sum(dist ** 2))


def snake_fit(control_points, target: ContourPolyline, params: SnakeParams = SnakeParams()) -> SnakeResult:
    """Pull ordered control points onto a target contour.

    Minimizes tension + bending energy of the control polygon plus the
    weighted squared distance of every point to the target. The internal
    terms are linear, so the semi-implicit scheme factors
    ``I + gamma * H_int`` once and treats the attraction explicitly.
    """
    p0 = np.asarray(control_points, dtype=float)
    if p0.ndim != 2 or p0.shape[1] != 2 or len(p0) < 2:
        raise ParameterError("snake_fit needs at least two 2D control points")
    if not np.all(np.isfinite(p0)):
        raise SnakeNumericError("control points have non-finite coordinates")

    n = len(p0)
    d1, d2 = _difference_operators(n, target.closed)
    H = 2.0 * (params.alpha * d1.T @ d1 + params.beta * d2.T @ d2)
    g, w = params.gamma, params.attraction_weight
    lu = la.lu_factor(np.eye(n) + g * H) if params.scheme == "semi-implicit" else None

    p = p0.copy()
    energies = [snake_energy(p, target, params)]
    converged = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        proj, _ = closest_points(p, target)
        grad_ext = 2.0 * w * (p - proj)
        if lu is not None:
            p_new = la.lu_solve(lu, p - g * grad_ext)
        else:
            p_new = p - g * (H @ p + grad_ext)
        if not np.all(np.isfinite(p_new)):
            raise SnakeNumericError(f"snake diverged at iteration {it}")
        e = snake_energy(p_new, target, params)
        if e > energies[-1] + 1e-12 * max(1.0, abs(energies[-1])):
            raise SnakeEnergyError(
                f"snake energy increased at iteration {it} ({energies[-1]:.6g} -> {e:.6g}); "
                f"reduce gamma")
        energies.append(e)
        move = np.max(np.linalg.norm(p_new - p, axis=1))
        p = p_new
        if move < params.convergence_tol:
            converged = True
            break
    _, dist = closest_points(p, target)
    return SnakeResult(points=p, displacements=p - p0, residuals=dist, energies=energies,
                       iterations=it, converged=converged)


# -- plane <-> model ---------------------------------------------------------

def plane_coordinates(mesh: TetMesh, node_ids, calibration: PlaneCalibration):
    """In-plane mm coordinates of model nodes."""
    return calibration.model_to_plane_mm(mesh.nodes[np.asarray(node_ids, dtype=np.int64)])


def order_plane_nodes(selection: NodeSelection, mesh: TetMesh,
                      calibration: PlaneCalibration, closed: bool):
    """Order plane nodes along their section outline.

    Nodes are ordered by polar angle about the 2D centroid. An open outline
    starts after the widest angular gap (e.g. a section whose base is
    anchored); nearly collinear nodes are ordered along their principal
    direction instead. Returns (ordered node ids, plane coordinates in mm).
    """
    ids = selection.as_array()
    pts = plane_coordinates(mesh, ids, calibration)
    c = pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(pts - c, full_matrices=False)
    if not closed and (len(sv) < 2 or sv[1] <= 1e-6 * max(sv[0], 1e-300)):
        order = np.lexsort((ids, (pts - c) @ vt[0]))
        return ids[order], pts[order]
    ang = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
    order = np.lexsort((ids, ang))
    if not closed and len(order) > 1:
        a = ang[order]
        gaps = np.diff(np.append(a, a[0] + 2 * np.pi))
        order = np.roll(order, -(int(np.argmax(gaps)) + 1))
    return ids[order], pts[order]


def lift_contour_displacements(plane_nodes: NodeSelection, mesh: TetMesh, snake_displacements,
                               calibration: PlaneCalibration):
    """Map in-plane (mm) displacements of plane nodes to 3D targets in meters."""
    ids = plane_nodes.as_array()
    d = np.asarray(snake_displacements, dtype=float)
    if d.ndim != 2 or d.shape[1] != 2 or len(d) != len(ids):
        raise PairingError(
            f"{len(ids)} plane nodes but {len(d) if d.ndim == 2 else d.shape} snake displacements")
    if ids.size and (ids.min() < 0 or ids.max() >= mesh.node_count):
        raise PairingError("plane node id outside mesh")
    return ids, calibration.plane_mm_to_model_displacement(d)


def combine_edits(edits):
    """Join per-plane (ids, targets) sets; nodes listed twice get the mean target."""
    if not edits:
        return np.array([], dtype=np.int64), np.zeros((0, 3))
    ids = np.concatenate([np.asarray(e[0], dtype=np.int64) for e in edits])
    tg = np.concatenate([np.asarray(e[1], dtype=float).reshape(-1, 3) for e in edits])
    uniq, inv = np.unique(ids, return_inverse=True)
    acc = np.zeros((len(uniq), 3))
    np.add.at(acc, inv, tg)
    cnt = np.bincount(inv, minlength=len(uniq))
    return uniq, acc / cnt[:, None]


# -- static propagation ------------------------------------------------------

def solve_static_edit(matrices: SystemMatrices, node_ids, targets):
    """min 1/2 u^T K u subject to u = target on the listed nodes (anchors stay 0).

    Solved as the saddle-point system [[K, S^T], [S, 0]]. Returns the full
    (n_nodes, 3) displacement field.
    """
    ids = np.asarray(node_ids, dtype=np.int64).reshape(-1)
    tg = np.asarray(targets, dtype=float).reshape(len(ids), 3)
    if len(ids) == 0:
        return np.zeros((matrices.n_nodes, 3))
    uniq, counts = np.unique(ids, return_counts=True)
    if (counts > 1).any():
        raise ConstraintRankError(uniq[counts > 1], "nodes listed more than once in the edit")
    rows = matrices.node_rows(ids)
    anchored = sorted(set(ids[(rows.reshape(-1, 3) < 0).any(axis=1)].tolist()))
    if anchored:
        raise ConstraintRankError(anchored, f"edited nodes {anchored} are anchored")

    n, m = matrices.ndof, len(rows)
    S = sp.csr_matrix((np.ones(m), (np.arange(m), rows)), shape=(m, n))
    kkt = sp.bmat([[matrices.K, S.T], [S, None]], format="csc")
    rhs = np.concatenate([np.zeros(n), tg.reshape(-1)])
    try:
        lu = spla.splu(kkt)
    except RuntimeError as exc:
        raise ConstraintRankError(ids, f"edit constraint system is singular: {exc}") from exc
    piv = np.abs(lu.U.diagonal())
    if piv.min() <= SINGULAR_PIVOT_RTOL * piv.max():
        raise ConstraintRankError(ids, "edit constraint system is singular; the edited nodes "
                                       "do not pin every rigid motion of the unanchored body")
    sol = lu.solve(rhs)
    res = np.linalg.norm(kkt @ sol - rhs)
    if not np.all(np.isfinite(sol)) or res > 1e-8 * max(np.linalg.norm(rhs), 1e-300):
        raise ConstraintRankError(ids, "edit constraint system is singular "
                                       f"(residual {res:.3g}); the edit does not fix rigid motion")
    u = np.zeros((matrices.n_nodes, 3))
    u[matrices.free_nodes] = sol[:n].reshape(-1, 3)
    return u


def propagate_edit(mesh: TetMesh, matrices: SystemMatrices, surface_displacements) -> TetMesh:
    """New rest mesh after carrying surface targets through the volume."""
    node_ids, targets = surface_displacements
    u = solve_static_edit(matrices, node_ids, targets)
    new_nodes = mesh.nodes + u
    vol = signed_tet_volumes(new_nodes, mesh.tets)
    bad = np.nonzero(vol <= 0)[0]
    if len(bad):
        raise InvertedElementError(bad)
    return TetMesh(new_nodes, mesh.tets)


# -- contour files -------------------------------------------------------------

def read_contour(path) -> ContourPolyline:
    """Contour CSV: '# plane: <name>' and optional '# closed: true' header lines,
    a 'x_mm,y_mm' column header, then one point per line."""
    path = Path(path)
    meta = {}
    pts = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                if ":" in s:
                    k, v = s[1:].split(":", 1)
                    meta[k.strip().lower()] = v.strip().lower()
                continue
            row = next(csv.reader([s]))
            if row[0].strip().lower() in ("x_mm", "x"):
                continue
            try:
                pts.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                raise InputError(f"{path}:{lineno}: expected 'x_mm,y_mm', got {s!r}") from None
    if "plane" not in meta:
        raise InputError(f"{path}: missing '# plane: midsagittal|coronal' header")
    closed = meta.get("closed", "false") in ("1", "true", "yes")
    try:
        return ContourPolyline(meta["plane"], np.array(pts), closed)
    except ParameterError as exc:
        raise InputError(f"{path}: {exc}") from exc


def write_contour(contour: ContourPolyline, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"# plane: {contour.plane}\n")
        fh.write(f"# closed: {'true' if contour.closed else 'false'}\n")
        fh.write("x_mm,y_mm\n")
        for x, y in contour.points:
            fh.write(f"{float(x)!r},{float(y)!r}\n")
    return Path(path)
