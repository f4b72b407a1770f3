"""Tetrahedral mesh container, TetGen-style text I/O and geometric measures.

Model axes follow an anatomical convention used throughout the package:
x runs anterior-posterior, y is left-right (the midsagittal plane has a
y normal) and z is vertical. The coronal plane has an x normal.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateElementError,
    DimensionError,
    EmptySelectionError,
    MeshParseError,
    MeshStructureError,
    ParameterError,
)

PLANE_NORMAL_AXIS = {"coronal": 0, "midsagittal": 1, "x": 0, "y": 1, "z": 2}

ROLES = ("anchor", "constraint", "free")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def signed_tet_volumes(points, tets):
    """Signed volume of every tet, positive for the canonical orientation."""
    p = np.asarray(points, dtype=float)
    t = np.asarray(tets)
    a = p[t[:, 1]] - p[t[:, 0]]
    b = p[t[:, 2]] - p[t[:, 0]]
    c = p[t[:, 3]] - p[t[:, 0]]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


@dataclass(frozen=True, eq=False)
class TetMesh:
    nodes: np.ndarray
    tets: np.ndarray
    _surface: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        tets = np.asarray(self.tets)
        if nodes.ndim != 2 or nodes.shape[1] != 3 or len(nodes) == 0:
            raise MeshStructureError(f"nodes must be a non-empty (n, 3) array, got {nodes.shape}")
        if tets.ndim != 2 or tets.shape[1] != 4 or len(tets) == 0:
            raise MeshStructureError(f"tets must be a non-empty (m, 4) array, got {tets.shape}")
        if not np.issubdtype(tets.dtype, np.integer):
            if not np.all(tets == np.round(tets)):
                raise MeshStructureError("tet indices must be integers")
        tets = tets.astype(np.int64)
        n = len(nodes)
        bad = np.nonzero((tets < 0).any(axis=1) | (tets >= n).any(axis=1))[0]
        if len(bad):
            raise MeshStructureError(
                f"tet {int(bad[0])} references node index outside [0, {n})")
        srt = np.sort(tets, axis=1)
        dup = np.nonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))[0]
        if len(dup):
            raise MeshStructureError(f"tet {int(dup[0])} repeats a node index")
        if not np.all(np.isfinite(nodes)):
            raise MeshStructureError("non-finite node coordinate")

        vol = signed_tet_volumes(nodes, tets)
        zero = np.nonzero(vol == 0.0)[0]
        if len(zero):
            raise DegenerateElementError(
                f"{len(zero)} zero-volume tets (first: {int(zero[0])})", zero)
        neg = vol < 0
        if neg.any():
            tets = tets.copy()
            tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()

        object.__setattr__(self, "nodes", _frozen(nodes, float))
        object.__setattr__(self, "tets", _frozen(tets, np.int64))

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def tet_count(self) -> int:
        return len(self.tets)

    @property
    def bounds(self):
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    def tet_volumes(self, displacements=None):
        pts = self.nodes if displacements is None else self.nodes + _as_field(displacements, self.node_count)
        return signed_tet_volumes(pts, self.tets)

    def boundary_faces(self):
        """Faces shared by exactly one tet, wound so normals point outward."""
        if "faces" not in self._surface:
            # opposite vertex is listed last; ordering gives outward normals
            # for positively oriented tets
            local = np.array([[1, 2, 3, 0], [0, 3, 2, 1], [0, 1, 3, 2], [0, 2, 1, 3]])
            faces = self.tets[:, local[:, :3]].reshape(-1, 3)
            key = np.sort(faces, axis=1)
            _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
            once = counts[inv.ravel()] == 1
            self._surface["faces"] = faces[once]
        return self._surface["faces"]

    def surface_node_ids(self):
        if "nodes" not in self._surface:
            self._surface["nodes"] = np.unique(self.boundary_faces())
        return self._surface["nodes"]

    def with_nodes(self, nodes) -> "TetMesh":
        return TetMesh(nodes, self.tets)


@dataclass(frozen=True)
class NodeSelection:
    role: str
    node_ids: tuple

    def __post_init__(self):
        if self.role not in ROLES:
            raise ParameterError(f"unknown node role {self.role!r}")
        ids = tuple(int(i) for i in self.node_ids)
        object.__setattr__(self, "node_ids", ids)

    def __len__(self):
        return len(self.node_ids)

    def as_array(self):
        return np.asarray(self.node_ids, dtype=np.int64)

    def validate(self, mesh: TetMesh, other: "NodeSelection | None" = None):
        ids = self.as_array()
        if len(ids) and (ids.min() < 0 or ids.max() >= mesh.node_count):
            raise MeshStructureError(f"{self.role} selection has ids outside [0, {mesh.node_count})")
        if other is not None and {self.role, other.role} == {"anchor", "constraint"}:
            both = sorted(set(self.node_ids) & set(other.node_ids))
            if both:
                raise ParameterError(f"nodes {both} are both anchored and constrained")
        return self


def _as_field(displacements, n):
    u = np.asarray(displacements, dtype=float)
    if u.shape == (3 * n,):
        u = u.reshape(n, 3)
    if u.shape != (n, 3):
        raise DimensionError(f"displacement field must have shape ({n}, 3), got {u.shape}")
    return u


def total_volume(mesh: TetMesh, displacements=None) -> float:
    """Sum of signed tet volumes of the rest (or displaced) configuration."""
    return float(np.sum(mesh.tet_volumes(displacements)))


# -- procedural meshes ------------------------------------------------------

def make_bar_mesh(nx, ny, nz, dx, dy, dz) -> TetMesh:
    """Regular box of nx*ny*nz hexahedra of size dx*dy*dz, each split into 6 tets.

    The split follows every cell's (0,0,0)-(1,1,1) diagonal so neighbouring
    cells share conforming faces.
    """
    if min(nx, ny, nz) < 1:
        raise ParameterError("cell counts must be >= 1")
    if min(dx, dy, dz) <= 0:
        raise ParameterError("cell sizes must be > 0")
    xs = np.arange(nx + 1) * dx
    ys = np.arange(ny + 1) * dy
    zs = np.arange(nz + 1) * dz
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def nid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    unit = np.eye(3, dtype=int)
    tets = []
    for perm in itertools.permutations(range(3)):
        corners = [np.zeros(3, int)]
        for ax in perm:
            corners.append(corners[-1] + unit[ax])
        tets.append(np.column_stack([nid(I + c[0], J + c[1], K + c[2]) for c in corners]))
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    return TetMesh(nodes, tets)


# -- selections -------------------------------------------------------------

def select_nodes_near_plane(mesh: TetMesh, axis, coordinate, tolerance,
                            surface_only=True, role="constraint") -> NodeSelection:
    if tolerance < 0:
        raise ParameterError("tolerance must be >= 0")
    ax = PLANE_NORMAL_AXIS[axis] if isinstance(axis, str) else int(axis)
    candidates = mesh.surface_node_ids() if surface_only else np.arange(mesh.node_count)
    hit = np.abs(mesh.nodes[candidates, ax] - coordinate) <= tolerance
    ids = candidates[hit]
    if len(ids) == 0:
        raise EmptySelectionError(
            f"no {'surface ' if surface_only else ''}nodes within {tolerance} of "
            f"{axis}={coordinate}")
    return NodeSelection(role, tuple(np.sort(ids)))


def select_plane_nodes(mesh: TetMesh, plane: str, plane_coordinate: float,
                       tolerance: float) -> NodeSelection:
    """Surface nodes lying within ``tolerance`` of a midsagittal or coronal plane."""
    if plane not in ("midsagittal", "coronal"):
        raise ParameterError(f"plane must be 'midsagittal' or 'coronal', got {plane!r}")
    return select_nodes_near_plane(mesh, plane, plane_coordinate, tolerance, True, "constraint")


# -- TetGen-style text files ------------------------------------------------

def _content_lines(path):
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                yield lineno, text.split()


def _read_table(path, width, what):
    lines = _content_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise MeshParseError(path, 0, f"empty {what} file") from None
    try:
        count = int(header[0])
    except (ValueError, IndexError):
        raise MeshParseError(path, lineno, f"bad header {' '.join(header)!r}") from None
    if count < 0:
        raise MeshParseError(path, lineno, "negative entry count")
    index = np.empty(count, dtype=np.int64)
    rows = []
    conv = float if what == "node" else int
    for k in range(count):
        try:
            lineno, parts = next(lines)
        except StopIteration:
            raise MeshParseError(path, "EOF", f"expected {count} {what} lines, found {k}") from None
        if len(parts) < width + 1:
            raise MeshParseError(path, lineno, f"expected index and {width} values")
        try:
            index[k] = int(parts[0])
            rows.append([conv(v) for v in parts[1:width + 1]])
        except ValueError:
            raise MeshParseError(path, lineno, f"cannot parse {' '.join(parts)!r}") from None
    for lineno, parts in lines:
        raise MeshParseError(path, lineno, f"trailing data after {count} {what} lines")
    return index, np.array(rows, dtype=conv).reshape(count, width)


def load_tet_mesh(node_path, ele_path) -> TetMesh:
    """Read a ``.node``/``.ele`` pair; indices may be 0- or 1-based."""
    node_idx, coords = _read_table(node_path, 3, "node")
    _, conn = _read_table(ele_path, 4, "ele")
    if len(coords) == 0:
        raise MeshStructureError(f"{node_path}: no nodes")
    base = int(node_idx.min())
    if base not in (0, 1):
        raise MeshStructureError(f"{node_path}: node numbering must start at 0 or 1, got {base}")
    order = node_idx - base
    if not np.array_equal(np.sort(order), np.arange(len(order))):
        raise MeshStructureError(f"{node_path}: node indices are not contiguous")
    nodes = np.empty_like(coords)
    nodes[order] = coords
    tets = conn - base
    n = len(nodes)
    bad = np.nonzero((tets < 0).any(axis=1) | (tets >= n).any(axis=1))[0]
    if len(bad):
        raise MeshStructureError(
            f"{ele_path}: element {int(bad[0]) + base} references a node outside "
            f"[{base}, {n - 1 + base}]")
    return TetMesh(nodes, tets)


def write_tet_mesh(mesh: TetMesh, node_path, ele_path, displacements=None):
    """Write a ``.node``/``.ele`` pair (0-based). Coordinates round-trip exactly."""
    pts = mesh.nodes if displacements is None else mesh.nodes + _as_field(displacements, mesh.node_count)
    node_path, ele_path = Path(node_path), Path(ele_path)
    with open(node_path, "w") as fh:
        fh.write(f"{len(pts)} 3 0 0\n")
        for i, (x, y, z) in enumerate(pts):
            fh.write(f"{i} {float(x)!r} {float(y)!r} {float(z)!r}\n")
    with open(ele_path, "w") as fh:
        fh.write(f"{mesh.tet_count} 4 0\n")
        for i, t in enumerate(mesh.tets):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")
    return node_path, ele_path
