"""Command implementations: fit, track, simulate, bench (plus a demo generator)."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import dynamics, fitting, tracking
from .config import RunConfig, require
from .errors import ConfigError, ConstraintRankError, TongueSimError
from .export import write_frame, write_report
from .fem import MaterialParams, SystemMatrices, assemble
from .mesh import (
    NodeSelection,
    TetMesh,
    load_tet_mesh,
    make_bar_mesh,
    select_nodes_near_plane,
    total_volume,
    write_tet_mesh,
)
from .modal import ModalBasis, cached_modal_basis

log = logging.getLogger(__name__)

REFERENCE_FPS = 43.2
REFERENCE_MODES = 150


@dataclass(eq=False)
class Model:
    mesh: TetMesh
    anchors: NodeSelection
    constraints: Optional[NodeSelection]
    matrices: SystemMatrices


def build_mesh(cfg: RunConfig) -> TetMesh:
    if cfg.mesh_files is not None:
        return load_tet_mesh(*cfg.mesh_files)
    (nx, ny, nz), (lx, ly, lz) = cfg.bar
    return make_bar_mesh(nx, ny, nz, lx / nx, ly / ny, lz / nz)


def _selection(mesh, ids, plane, role, surface_only):
    found = set(int(i) for i in ids)
    if plane is not None:
        sel = select_nodes_near_plane(mesh, plane.axis, plane.coordinate, plane.tolerance,
                                      surface_only=surface_only, role=role)
        found.update(sel.node_ids)
    return NodeSelection(role, tuple(sorted(found))).validate(mesh)


def prepare_model(cfg: RunConfig, command: str, mesh: TetMesh | None = None) -> Model:
    """Load the mesh and finish config validation; no eigensolve yet."""
    require(cfg, command)
    mesh = mesh if mesh is not None else build_mesh(cfg)
    try:
        anchors = _selection(mesh, cfg.anchor_ids, cfg.anchor_plane, "anchor", False)
        constraints = None
        if cfg.constraint_ids or cfg.constraint_plane:
            constraints = _selection(mesh, cfg.constraint_ids, cfg.constraint_plane, "constraint", True)
            constraints.validate(mesh, anchors)
    except TongueSimError as exc:
        raise ConfigError(f"node selection: {exc}") from exc
    n_free = mesh.node_count - len(anchors)
    if n_free < 1:
        raise ConfigError("every node is anchored")
    if command in ("simulate", "bench") and cfg.modes > 3 * n_free:
        raise ConfigError(f"modal.modes = {cfg.modes} exceeds the {3 * n_free} free dofs")
    if command == "simulate" and cfg.drive in ("trajectories", "images"):
        bad = [n for n in cfg.node_binding if not 0 <= n < mesh.node_count]
        if bad:
            raise ConfigError(f"drive.node_ids {bad} outside mesh")
        anchored = sorted(set(cfg.node_binding) & set(anchors.node_ids))
        if anchored:
            raise ConfigError(f"drive.node_ids {anchored} are anchored")
        if len(set(cfg.node_binding)) != len(cfg.node_binding):
            raise ConfigError("drive.node_ids has duplicates")
    if command == "fit":
        for plane in {fitting.read_contour(p).plane for p in cfg.contours}:
            if plane not in cfg.fit_planes:
                raise ConfigError(f"contour for plane {plane!r} but no fit.{plane} selector")
    matrices = assemble(mesh, cfg.material, anchors)
    return Model(mesh, anchors, constraints, matrices)


def load_basis(cfg: RunConfig, model: Model) -> ModalBasis:
    return cached_modal_basis(model.mesh, cfg.material, model.anchors, model.matrices,
                              cfg.modes, cfg.cache_dir)


def _load_images(path, frame_rate):
    path = Path(path)
    if path.is_dir():
        return tracking.read_pgm_sequence(path, frame_rate)
    return tracking.read_raw_sequence(path)


def _material_note(cfg):
    if cfg.material_defaults:
        return f"material defaults used for: {', '.join(cfg.material_defaults)}"
    return "material fully specified"


# -- track ----------------------------------------------------------------------

def cmd_track(cfg: RunConfig, echo=print):
    require(cfg, "track")
    seq = _load_images(cfg.images, cfg.frame_rate)
    tracks = tracking.track_points(seq, np.array(cfg.seeds), cfg.tracking)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = tracking.write_trajectories(tracks, cfg.out_dir / "trajectories.csv")
    for i in range(tracks.n_seeds):
        n_lost = int(tracks.lost[i].sum())
        echo(f"seed {i}: lost {n_lost}/{tracks.n_frames - 1} frames, "
             f"min confidence {tracks.confidence[i, 1:].min() if tracks.n_frames > 1 else 1.0:.3f}")
    echo(f"wrote {out}")
    return tracks


# -- simulate -------------------------------------------------------------------

def build_timeline(cfg: RunConfig, model: Model) -> dynamics.ConstraintTimeline:
    if cfg.drive == "bump":
        nodes = model.constraints.node_ids
        height = np.ptp(model.mesh.nodes[:, 2])
        amp = cfg.bump_amplitude if cfg.bump_amplitude is not None else 0.1 * height
        return dynamics.bump_timeline(nodes, cfg.bump_frames, amp, cfg.bump_direction,
                                      cfg.frame_rate, cfg.bump_stagger)
    if cfg.drive == "trajectories":
        tracks = tracking.read_trajectories(cfg.trajectories, cfg.frame_rate, cfg.drive_min_confidence)
    else:
        seq = _load_images(cfg.images, cfg.frame_rate)
        tracks = tracking.track_points(seq, np.array(cfg.seeds), cfg.tracking)
    if tracks.n_seeds != len(cfg.node_binding):
        raise ConfigError(f"{tracks.n_seeds} trajectories but {len(cfg.node_binding)} bound nodes")
    return tracking.trajectories_to_timeline(tracks, cfg.calibration, list(cfg.node_binding),
                                             cfg.reference_frame)


def cmd_simulate(cfg: RunConfig, echo=print):
    model = prepare_model(cfg, "simulate")
    timeline = build_timeline(cfg, model)
    basis = load_basis(cfg, model)
    warp = dynamics.build_warp_operator(model.mesh, model.matrices) if cfg.warp else None
    force = dynamics.gravity_force(model.matrices, cfg.gravity) if cfg.gravity else None
    sim_cfg = dynamics.SimulationConfig(substeps=cfg.substeps, warp=cfg.warp,
                                        snap_constraints=cfg.snap_constraints,
                                        external_force=force, keep_fields=False)
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(timeline))))

    def on_frame(k, field_):
        write_frame(out_dir, k, model.mesh, field_, cfg.export, width)

    seq = dynamics.simulate(model.mesh, basis, warp, cfg.material, timeline, sim_cfg,
                            on_frame if cfg.export != "none" else None)
    report = write_report(out_dir / "report.csv", seq)
    summary = summarize(seq, cfg)
    with open(out_dir / "summary.txt", "w") as fh:
        for k, v in summary.items():
            fh.write(f"{k} = {v}\n")
    echo(f"frames: {len(seq)}  modes: {seq.mode_count}")
    echo(f"max |dV/V0|: {seq.max_abs_volume_change:.6f}")
    echo(f"mean fps: {seq.mean_fps:.1f} (reference {REFERENCE_FPS} fps at {REFERENCE_MODES} modes)")
    echo(_material_note(cfg))
    echo(f"wrote {report}")
    return seq


def summarize(seq, cfg: RunConfig | None = None):
    out = {
        "frames": len(seq),
        "modes": seq.mode_count,
        "rest_volume_m3": repr(seq.rest_volume),
        "max_abs_volume_change": repr(seq.max_abs_volume_change),
        "mean_fps": f"{seq.mean_fps:.3f}",
        "reference_fps": f"{REFERENCE_FPS} @ {REFERENCE_MODES} modes",
        "max_constraint_residual_m": repr(float(seq.constraint_residual.max())),
        "volume_change_definition": "(V_t - V_0) / V_0",
    }
    if cfg is not None:
        out["material"] = _material_note(cfg)
    return out


# -- fit --------------------------------------------------------------------------

def cmd_fit(cfg: RunConfig, echo=print):
    model = prepare_model(cfg, "fit")
    mesh = model.mesh
    edits = []
    rows = []
    for path in cfg.contours:
        contour = fitting.read_contour(path)
        sel_cfg = cfg.fit_planes[contour.plane]
        calib = cfg.calibration_for(contour.plane)
        selection = select_nodes_near_plane(mesh, contour.plane, sel_cfg.coordinate,
                                            sel_cfg.tolerance, True, "constraint")
        anchored = set(model.anchors.node_ids)
        selection = NodeSelection("constraint", tuple(i for i in selection.node_ids if i not in anchored))
        if len(selection) == 0:
            raise ConfigError(f"all {contour.plane} plane nodes are anchored")
        ids, pts = fitting.order_plane_nodes(selection, mesh, calib, contour.closed)
        result = fitting.snake_fit(pts, contour, cfg.snake)
        edits.append(fitting.lift_contour_displacements(
            NodeSelection("constraint", tuple(ids)), mesh, result.displacements, calib))
        for i, node in enumerate(ids):
            rows.append([contour.plane, int(node), repr(float(result.points[i, 0])),
                         repr(float(result.points[i, 1])), repr(float(result.displacements[i, 0])),
                         repr(float(result.displacements[i, 1])), repr(float(result.residuals[i]))])
        echo(f"{contour.plane}: {len(ids)} control points, {result.iterations} iterations, "
             f"mean residual {result.residuals.mean():.4f} mm")
    node_ids, targets = fitting.combine_edits(edits)
    edited = fitting.propagate_edit(mesh, model.matrices, (node_ids, targets))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    node_path, ele_path = write_tet_mesh(edited, cfg.out_dir / "fitted.node", cfg.out_dir / "fitted.ele")
    report = cfg.out_dir / "fit_report.csv"
    with open(report, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["plane", "node_id", "x_mm", "y_mm", "dx_mm", "dy_mm", "residual_mm"])
        w.writerows(rows)
    move = np.linalg.norm(edited.nodes - mesh.nodes, axis=1).max()
    echo(f"max node move {move * 1e3:.4f} mm; volume {total_volume(mesh):.6g} -> {total_volume(edited):.6g} m^3")
    echo(f"wrote {node_path}, {ele_path}, {report}")
    residuals = np.array([float(r[-1]) for r in rows])
    return edited, residuals


# -- bench ------------------------------------------------------------------------

def pick_drive_nodes(mesh: TetMesh, anchors: NodeSelection, count=4):
    """Surface nodes on the top face along the mid-width line, spread along x."""
    top = mesh.nodes[:, 2].max()
    mid_y = 0.5 * (mesh.nodes[:, 1].min() + mesh.nodes[:, 1].max())
    surf = np.setdiff1d(mesh.surface_node_ids(), anchors.as_array())
    pts = mesh.nodes[surf]
    score = np.abs(pts[:, 2] - top) + np.abs(pts[:, 1] - mid_y)
    cand = surf[score <= score.min() + 1e-12]
    cand = cand[np.argsort(mesh.nodes[cand, 0])]
    if len(cand) < count:
        cand = surf[np.argsort(score)][:max(count, len(cand))]
        cand = cand[np.argsort(mesh.nodes[cand, 0])]
    picks = np.linspace(0, len(cand) - 1, count + 2)[1:-1].round().astype(int)
    return np.unique(cand[picks])


def measure_step_costs(mesh, basis, warp, material, node_ids, steps=200, warmup=20,
                       repeats=3, frame_rate=60.0):
    """Per-step cost split (ms): reduced KKT solve, reconstruction (+ warping), volume."""
    tl = dynamics.bump_timeline(node_ids, steps + warmup, 0.05 * np.ptp(mesh.nodes[:, 2]),
                                frame_rate=frame_rate)
    integ = dynamics.NewmarkIntegrator(basis, material, 1.0 / frame_rate, node_ids)
    if warp is not None and (warp.WPhi is None or warp.WPhi.shape != basis.Phi.shape):
        warp = warp.precompose(basis)
    solve, recon, vol = [], [], []
    for _ in range(repeats):
        state = dynamics.ReducedState.rest(basis.r)
        ts = tr = tv = 0.0
        for k in range(steps + warmup):
            t0 = time.perf_counter()
            state = integ.step(state, None, tl.frames[k])
            t1 = time.perf_counter()
            u = basis.Phi @ state.q
            field_ = np.zeros((mesh.node_count, 3))
            if warp is not None:
                w = warp.WPhi @ state.q
                field_[basis.free_nodes] = dynamics.rotate_vectors(w.reshape(-1, 3), u.reshape(-1, 3))
            else:
                field_[basis.free_nodes] = u.reshape(-1, 3)
            t2 = time.perf_counter()
            total_volume(mesh, field_)
            t3 = time.perf_counter()
            if k >= warmup:
                ts += t1 - t0
                tr += t2 - t1
                tv += t3 - t2
        solve.append(1e3 * ts / steps)
        recon.append(1e3 * tr / steps)
        vol.append(1e3 * tv / steps)
    s, r, v = min(solve), min(recon), min(vol)
    return {"steps": steps, "modes": basis.r, "nodes": mesh.node_count,
            "solve_ms": s, "reconstruct_ms": r, "volume_ms": v,
            "steps_per_s": 1e3 / (s + r + v)}


def cmd_bench(cfg: RunConfig, echo=print):
    model = prepare_model(cfg, "bench")
    basis = load_basis(cfg, model)
    warp = dynamics.build_warp_operator(model.mesh, model.matrices) if cfg.warp else None
    nodes = (np.array(model.constraints.node_ids) if model.constraints is not None
             else pick_drive_nodes(model.mesh, model.anchors))
    res = measure_step_costs(model.mesh, basis, warp, cfg.material, nodes,
                             cfg.bench_steps, cfg.bench_warmup, cfg.bench_repeats, cfg.frame_rate)
    echo(f"nodes {res['nodes']}  modes {res['modes']}  steps {res['steps']}")
    echo(f"reduced solve   {res['solve_ms']:.4f} ms/step")
    echo(f"reconstruction  {res['reconstruct_ms']:.4f} ms/step")
    echo(f"volume          {res['volume_ms']:.4f} ms/step")
    echo(f"throughput      {res['steps_per_s']:.1f} steps/s "
         f"(reference {REFERENCE_FPS} fps at {REFERENCE_MODES} modes)")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.out_dir / "bench.txt", "w") as fh:
        for k, v in res.items():
            fh.write(f"{k} = {v}\n")
    return res


# -- demo data ----------------------------------------------------------------------

DEMO_CONFIG = """\
[mesh]
node = bar.node
ele = bar.ele

[material]
young_modulus = 15000
poisson_ratio = 0.49
density = 1040
rayleigh_mass = 2.0
rayleigh_stiffness = 0.001

[anchors]
plane = z:0.0:1e-9

[constraints]
ids = {constraint_ids}

[modal]
modes = 60
cache_dir = cache

[simulate]
substeps = 1
warp = true
export = vtk

[drive]
{drive}
frame_rate = 60
node_ids = {constraint_ids}

[tracking]
images = frames
seeds = {seeds}
patch_radius = 8
search_radius = 12
pyramid_levels = 2
min_confidence = 0.4

[calibration]
mm_per_pixel = 0.1
axis_u = 1,0,0
axis_v = 0,0,-1

[fit]
contours = midsagittal.csv
midsagittal = {mid_y}:1e-9
alpha = 0.0
beta = 0.01
attraction_weight = 1.0

[calibration.midsagittal]
mm_per_pixel = 1.0
axis_u = 1,0,0
axis_v = 0,0,1

[output]
dir = out_{name}

[run]
seed = {seed}
"""


def make_demo(out_dir, seed=0, echo=print):
    """Bar mesh, a synthetic speckle sequence and ready-to-run configs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = make_bar_mesh(12, 4, 4, 0.005, 0.005, 0.005)
    write_tet_mesh(mesh, out / "bar.node", out / "bar.ele")
    anchors = select_nodes_near_plane(mesh, "z", 0.0, 1e-9, surface_only=False, role="anchor")
    nodes = pick_drive_nodes(mesh, anchors)

    # speckle moving up and back (image y points down, so up is negative y)
    n_frames = 120
    amp_px = 20.0

    def disp(k, x, y):
        s = np.sin(np.pi * k / n_frames) ** 2
        return 0.0 * x, -amp_px * s * np.exp(-((x - 64.0) / 60.0) ** 2) + 0.0 * y

    seq = tracking.synth_speckle_sequence(128, 128, n_frames, tracking.FieldMotion(disp),
                                          noise_sigma=2.0, rng_seed=seed)
    tracking.write_pgm_sequence(seq, out / "frames")
    seeds = [(34.0 + 20.0 * i, 64.0) for i in range(len(nodes))]

    mid_y = 0.5 * np.ptp(mesh.nodes[:, 1])
    calib = tracking.PlaneCalibration.identity("midsagittal")
    sel = NodeSelection("constraint", tuple(
        i for i in select_nodes_near_plane(mesh, "midsagittal", mid_y, 1e-9).node_ids
        if i not in set(anchors.node_ids)))
    _, pts = fitting.order_plane_nodes(sel, mesh, calib, closed=False)
    # traced outline (open, base is anchored): top pushed up 2 mm at the centre
    bumped = pts.copy()
    bumped[:, 1] += 2.0 * np.exp(-((pts[:, 0] - 30.0) / 12.0) ** 2) * (pts[:, 1] / 20.0)
    fitting.write_contour(fitting.ContourPolyline("midsagittal", bumped, closed=False),
                          out / "midsagittal.csv")

    fmt = dict(constraint_ids=", ".join(str(int(n)) for n in nodes),
               seeds="; ".join(f"{x:g} {y:g}" for x, y in seeds), mid_y=repr(float(mid_y)),
               seed=seed)
    configs = {
        "track": "images = frames",
        "simulate": "images = frames",
        "bump": "bump = true\nbump_frames = 120",
        "fit": "",
    }
    paths = []
    for name, drive in configs.items():
        p = out / f"{name}.ini"
        p.write_text(DEMO_CONFIG.format(drive=drive, name=name, **fmt))
        paths.append(p)
    echo(f"demo written to {out}: {', '.join(p.name for p in paths)}")
    return paths
