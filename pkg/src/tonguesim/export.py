"""Deformed-mesh and report writers (plain text)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .mesh import TetMesh, write_tet_mesh

REPORT_COLUMNS = [
    "frame", "time_s", "volume_m3", "volume_change_ratio", "step_time_ms",
    "solve_time_ms", "reconstruct_time_ms", "constraint_residual_m", "lost_constraints",
]


def write_vtk(path, mesh: TetMesh, displacements=None, title="tonguesim frame"):
    """Legacy ASCII VTK unstructured grid with tets and per-node displacement vectors."""
    u = np.zeros_like(mesh.nodes) if displacements is None else np.asarray(displacements, float)
    pts = mesh.nodes + u
    n, m = mesh.node_count, mesh.tet_count
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {n} double\n")
        np.savetxt(fh, pts, fmt="%.17g")
        fh.write(f"CELLS {m} {5 * m}\n")
        np.savetxt(fh, np.column_stack([np.full(m, 4), mesh.tets]), fmt="%d")
        fh.write(f"CELL_TYPES {m}\n")
        np.savetxt(fh, np.full(m, 10), fmt="%d")
        fh.write(f"POINT_DATA {n}\nVECTORS displacement double\n")
        np.savetxt(fh, u, fmt="%.17g")
    return Path(path)


def read_vtk_points(path):
    """Points, tets and displacement vectors from a file written by :func:`write_vtk`."""
    with open(path) as fh:
        lines = fh.read().split("\n")
    i = next(k for k, l in enumerate(lines) if l.startswith("POINTS"))
    n = int(lines[i].split()[1])
    pts = np.loadtxt(lines[i + 1:i + 1 + n]).reshape(n, 3)
    j = next(k for k, l in enumerate(lines) if l.startswith("CELLS"))
    m = int(lines[j].split()[1])
    cells = np.loadtxt(lines[j + 1:j + 1 + m], dtype=np.int64).reshape(m, 5)[:, 1:]
    v = next(k for k, l in enumerate(lines) if l.startswith("VECTORS"))
    disp = np.loadtxt(lines[v + 1:v + 1 + n]).reshape(n, 3)
    return pts, cells, disp


def write_obj(path, mesh: TetMesh, displacements=None):
    """Surface-only Wavefront OBJ of the (displaced) mesh, outward-wound triangles."""
    faces = mesh.boundary_faces()
    used = np.unique(faces)
    remap = np.full(mesh.node_count, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    pts = mesh.nodes if displacements is None else mesh.nodes + np.asarray(displacements, float)
    with open(path, "w") as fh:
        fh.write(f"# {len(used)} vertices, {len(faces)} faces\n")
        for x, y, z in pts[used]:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in remap[faces] + 1:
            fh.write(f"f {a} {b} {c}\n")
    return Path(path)


def write_frame(out_dir, k, mesh, field, fmt, width=5):
    out_dir = Path(out_dir)
    stem = out_dir / f"frame_{k:0{width}d}"
    if fmt == "vtk":
        return write_vtk(stem.with_suffix(".vtk"), mesh, field, f"frame {k}")
    if fmt == "obj":
        return write_obj(stem.with_suffix(".obj"), mesh, field)
    if fmt == "node":
        return write_tet_mesh(mesh, stem.with_suffix(".node"), stem.with_suffix(".ele"), field)[0]
    return None


def write_report(path, seq):
    lost = seq.lost.sum(axis=1) if seq.lost is not None else np.zeros(len(seq), int)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for k in range(len(seq)):
            w.writerow([k, repr(float(seq.times[k])), repr(float(seq.volume[k])),
                        repr(float(seq.volume_change[k])), f"{seq.step_time_ms[k]:.6f}",
                        f"{seq.solve_time_ms[k]:.6f}", f"{seq.reconstruct_time_ms[k]:.6f}",
                        repr(float(seq.constraint_residual[k])), int(lost[k])])
    return Path(path)
