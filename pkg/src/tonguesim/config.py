"""Run configuration: an INI-style ``key = value`` file with sections.

Relative paths are resolved against the directory holding the config
file. :func:`load_config` performs every check that does not need the
mesh; :func:`prepare_model` finishes validation against the loaded mesh
(selection ids, mode count, drive/constraint pairing) before any heavy
computation starts.

Sections::

    [mesh]          node, ele  |  bar = nx,ny,nz + bar_size = Lx,Ly,Lz (m)
    [material]      young_modulus, poisson_ratio, density, rayleigh_mass, rayleigh_stiffness
    [anchors]       ids = 1,2,3  and/or  plane = axis:coordinate:tolerance
    [constraints]   ids, plane  (surface nodes; plane axis may be midsagittal/coronal/x/y/z)
    [modal]         modes, cache_dir
    [simulate]      substeps, warp, snap_constraints, gravity = gx,gy,gz, export = vtk|obj|node|none
    [drive]         exactly one of: trajectories = file.csv | images = dir-or-.raw | bump = true
                    frame_rate, reference_frame, node_ids (seed -> node binding)
                    bump_frames, bump_amplitude, bump_direction, bump_stagger
    [tracking]      images, seeds = x y; x y; ..., patch_radius, search_radius,
                    pyramid_levels, min_confidence, frame_rate
    [calibration]   mm_per_pixel, origin_mm, axis_u, axis_v
                    ([calibration.midsagittal] / [calibration.coronal] override per plane)
    [fit]           contours = a.csv, b.csv; midsagittal = coordinate:tolerance;
                    coronal = coordinate:tolerance; alpha, beta, gamma,
                    attraction_weight, max_iterations, convergence_tol, scheme
    [bench]         warmup, steps, repeats
    [output]        dir
    [run]           seed
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, TongueSimError
from .fem import MaterialParams
from .fitting import SnakeParams
from .tracking import PlaneCalibration, TrackingParams

KNOWN = {
    "mesh": {"node", "ele", "bar", "bar_size"},
    "material": {"young_modulus", "poisson_ratio", "density", "rayleigh_mass", "rayleigh_stiffness"},
    "anchors": {"ids", "plane"},
    "constraints": {"ids", "plane"},
    "modal": {"modes", "cache_dir"},
    "simulate": {"substeps", "warp", "snap_constraints", "gravity", "export"},
    "drive": {"trajectories", "images", "bump", "frame_rate", "reference_frame", "node_ids",
              "bump_frames", "bump_amplitude", "bump_direction", "bump_stagger", "min_confidence"},
    "tracking": {"images", "seeds", "patch_radius", "search_radius", "pyramid_levels",
                 "min_confidence", "frame_rate"},
    "calibration": {"mm_per_pixel", "origin_mm", "axis_u", "axis_v"},
    "fit": {"contours", "midsagittal", "coronal", "alpha", "beta", "gamma", "attraction_weight",
            "max_iterations", "convergence_tol", "scheme"},
    "bench": {"warmup", "steps", "repeats"},
    "output": {"dir"},
    "run": {"seed"},
}


@dataclass
class PlaneSelector:
    axis: str
    coordinate: float
    tolerance: float


@dataclass
class RunConfig:
    path: Optional[Path]
    mesh_files: Optional[tuple] = None
    bar: Optional[tuple] = None
    material: MaterialParams = field(default_factory=MaterialParams)
    material_defaults: tuple = ()
    anchor_ids: tuple = ()
    anchor_plane: Optional[PlaneSelector] = None
    constraint_ids: tuple = ()
    constraint_plane: Optional[PlaneSelector] = None
    modes: int = 150
    cache_dir: Optional[Path] = None
    substeps: int = 1
    warp: bool = True
    snap_constraints: bool = False
    gravity: Optional[tuple] = None
    export: str = "vtk"
    drive: Optional[str] = None
    trajectories: Optional[Path] = None
    images: Optional[Path] = None
    frame_rate: float = 60.0
    reference_frame: int = 0
    node_binding: tuple = ()
    drive_min_confidence: Optional[float] = None
    bump_frames: int = 120
    bump_amplitude: Optional[float] = None
    bump_direction: tuple = (0.0, 0.0, 1.0)
    bump_stagger: float = 0.0
    tracking: TrackingParams = field(default_factory=TrackingParams)
    seeds: tuple = ()
    calibration: PlaneCalibration = field(default_factory=PlaneCalibration)
    plane_calibration: dict = field(default_factory=dict)
    contours: tuple = ()
    fit_planes: dict = field(default_factory=dict)
    snake: SnakeParams = field(default_factory=SnakeParams)
    bench_warmup: int = 20
    bench_steps: int = 200
    bench_repeats: int = 3
    out_dir: Path = Path("out")
    seed: int = 0

    def calibration_for(self, plane):
        return self.plane_calibration.get(plane, self.calibration)


# -- value parsers ------------------------------------------------------------

def _floats(s, n=None, what="value"):
    try:
        vals = tuple(float(v) for v in s.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{what}: expected numbers, got {s!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


def _ints(s, what="value"):
    try:
        return tuple(int(v) for v in s.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{what}: expected integers, got {s!r}") from None


def _bool(s, what):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{what}: expected a boolean, got {s!r}")


def _plane(s, what):
    parts = s.split(":")
    if len(parts) != 3 or parts[0].strip() not in ("x", "y", "z", "midsagittal", "coronal"):
        raise ConfigError(f"{what}: expected axis:coordinate:tolerance, got {s!r}")
    try:
        sel = PlaneSelector(parts[0].strip(), float(parts[1]), float(parts[2]))
    except ValueError:
        raise ConfigError(f"{what}: expected axis:coordinate:tolerance, got {s!r}") from None
    if sel.tolerance < 0:
        raise ConfigError(f"{what}: tolerance must be >= 0")
    return sel


def _seeds(s):
    pts = []
    for chunk in s.split(";"):
        if chunk.strip():
            pts.append(_floats(chunk, 2, "tracking.seeds"))
    return tuple(pts)


def _calibration(sec, base: PlaneCalibration | None = None):
    base = base or PlaneCalibration()
    try:
        return PlaneCalibration(
            mm_per_pixel=float(sec.get("mm_per_pixel", base.mm_per_pixel)),
            origin_mm=_floats(sec["origin_mm"], 2, "origin_mm") if "origin_mm" in sec else base.origin_mm,
            axis_u=_floats(sec["axis_u"], 3, "axis_u") if "axis_u" in sec else base.axis_u,
            axis_v=_floats(sec["axis_v"], 3, "axis_v") if "axis_v" in sec else base.axis_v,
        )
    except (ValueError, TongueSimError) as exc:
        raise ConfigError(f"calibration: {exc}") from exc


def load_config(path, overrides=None) -> RunConfig:
    """Parse and validate a config file. ``overrides``: modes, out, seed."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(cp, path.parent, path, overrides)


def parse_config(cp: configparser.ConfigParser, root: Path, path=None, overrides=None) -> RunConfig:
    root = Path(root)
    for name in cp.sections():
        base = name.split(".", 1)[0]
        if base not in KNOWN or (base != name and base != "calibration"):
            raise ConfigError(f"unknown section [{name}]")
        unknown = set(cp[name]) - KNOWN[base]
        if unknown:
            raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")

    def sec(name):
        return cp[name] if cp.has_section(name) else {}

    def file(p, what, directory_ok=False):
        f = (root / p.strip()).resolve() if not Path(p.strip()).is_absolute() else Path(p.strip())
        if not (f.is_file() or (directory_ok and f.is_dir())):
            raise ConfigError(f"{what}: {f} does not exist")
        return f

    def num(section, key, kind, default):
        s = sec(section)
        if key not in s:
            return default
        try:
            return kind(s[key])
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot parse {s[key]!r}") from None

    cfg = RunConfig(path=path)
    m = sec("mesh")
    if "node" in m or "ele" in m:
        if "bar" in m:
            raise ConfigError("[mesh]: give either node/ele files or a procedural bar, not both")
        if "node" not in m or "ele" not in m:
            raise ConfigError("[mesh]: node and ele must both be given")
        cfg.mesh_files = (file(m["node"], "mesh.node"), file(m["ele"], "mesh.ele"))
    elif "bar" in m:
        cells = _ints(m["bar"], "mesh.bar")
        size = _floats(m.get("bar_size", "1 1 1"), 3, "mesh.bar_size")
        if len(cells) != 3 or min(cells) < 1 or min(size) <= 0:
            raise ConfigError("[mesh]: bar needs 3 positive cell counts and positive sizes")
        cfg.bar = (cells, size)
    else:
        raise ConfigError("[mesh]: no mesh given (node/ele or bar)")

    mat = sec("material")
    kwargs = {}
    for key in KNOWN["material"]:
        if key in mat:
            kwargs[key] = num("material", key, float, None)
    try:
        cfg.material = MaterialParams(**kwargs)
    except TongueSimError as exc:
        raise ConfigError(f"[material]: {exc}") from exc
    cfg.material_defaults = tuple(sorted(KNOWN["material"] - set(kwargs)))

    for role in ("anchors", "constraints"):
        s = sec(role)
        ids = _ints(s["ids"], f"{role}.ids") if "ids" in s else ()
        plane = _plane(s["plane"], f"{role}.plane") if "plane" in s else None
        if role == "anchors":
            cfg.anchor_ids, cfg.anchor_plane = ids, plane
        else:
            cfg.constraint_ids, cfg.constraint_plane = ids, plane

    cfg.modes = num("modal", "modes", int, cfg.modes)
    if "cache_dir" in sec("modal"):
        cfg.cache_dir = root / sec("modal")["cache_dir"].strip()

    cfg.substeps = num("simulate", "substeps", int, 1)
    if "warp" in sec("simulate"):
        cfg.warp = _bool(sec("simulate")["warp"], "simulate.warp")
    if "snap_constraints" in sec("simulate"):
        cfg.snap_constraints = _bool(sec("simulate")["snap_constraints"], "simulate.snap_constraints")
    if "gravity" in sec("simulate"):
        cfg.gravity = _floats(sec("simulate")["gravity"], 3, "simulate.gravity")
    cfg.export = sec("simulate").get("export", "vtk").strip().lower()
    if cfg.export not in ("vtk", "obj", "node", "none"):
        raise ConfigError(f"simulate.export must be vtk, obj, node or none, got {cfg.export!r}")

    d = sec("drive")
    sources = [k for k in ("trajectories", "images", "bump") if k in d
               and not (k == "bump" and not _bool(d[k], "drive.bump"))]
    if len(sources) > 1:
        raise ConfigError(f"[drive]: exactly one drive source allowed, got {sources}")
    cfg.drive = sources[0] if sources else None
    if cfg.drive == "trajectories":
        cfg.trajectories = file(d["trajectories"], "drive.trajectories")
    elif cfg.drive == "images":
        cfg.images = file(d["images"], "drive.images", directory_ok=True)
    cfg.frame_rate = num("drive", "frame_rate", float, num("tracking", "frame_rate", float, 60.0))
    cfg.reference_frame = num("drive", "reference_frame", int, 0)
    cfg.node_binding = _ints(d["node_ids"], "drive.node_ids") if "node_ids" in d else ()
    cfg.drive_min_confidence = num("drive", "min_confidence", float, None)
    cfg.bump_frames = num("drive", "bump_frames", int, 120)
    cfg.bump_amplitude = num("drive", "bump_amplitude", float, None)
    if "bump_direction" in d:
        cfg.bump_direction = _floats(d["bump_direction"], 3, "drive.bump_direction")
    cfg.bump_stagger = num("drive", "bump_stagger", float, 0.0)

    t = sec("tracking")
    try:
        cfg.tracking = TrackingParams(
            patch_radius=num("tracking", "patch_radius", int, 8),
            search_radius=num("tracking", "search_radius", int, 12),
            pyramid_levels=num("tracking", "pyramid_levels", int, 2),
            min_confidence=num("tracking", "min_confidence", float, 0.4))
    except TongueSimError as exc:
        raise ConfigError(f"[tracking]: {exc}") from exc
    if "images" in t:
        if cfg.images is None:
            cfg.images = file(t["images"], "tracking.images", directory_ok=True)
    cfg.seeds = _seeds(t["seeds"]) if "seeds" in t else ()

    cfg.calibration = _calibration(sec("calibration"))
    for plane in ("midsagittal", "coronal"):
        name = f"calibration.{plane}"
        if cp.has_section(name):
            cfg.plane_calibration[plane] = _calibration(cp[name], cfg.calibration)

    f = sec("fit")
    if "contours" in f:
        cfg.contours = tuple(file(p, "fit.contours") for p in f["contours"].split(",") if p.strip())
    for plane in ("midsagittal", "coronal"):
        if plane in f:
            c, tol = _floats(f[plane].replace(":", " "), 2, f"fit.{plane}")
            cfg.fit_planes[plane] = PlaneSelector(plane, c, tol)
    try:
        cfg.snake = SnakeParams(
            alpha=num("fit", "alpha", float, 0.1), beta=num("fit", "beta", float, 0.1),
            gamma=num("fit", "gamma", float, 0.25),
            attraction_weight=num("fit", "attraction_weight", float, 1.0),
            max_iterations=num("fit", "max_iterations", int, 200),
            convergence_tol=num("fit", "convergence_tol", float, 1e-3),
            scheme=f.get("scheme", "semi-implicit").strip())
    except TongueSimError as exc:
        raise ConfigError(f"[fit]: {exc}") from exc

    cfg.bench_warmup = num("bench", "warmup", int, 20)
    cfg.bench_steps = num("bench", "steps", int, 200)
    cfg.bench_repeats = num("bench", "repeats", int, 3)
    cfg.out_dir = root / sec("output").get("dir", "out").strip()
    cfg.seed = num("run", "seed", int, 0)

    overrides = overrides or {}
    if overrides.get("modes") is not None:
        cfg.modes = int(overrides["modes"])
    if overrides.get("out") is not None:
        cfg.out_dir = Path(overrides["out"])
    if overrides.get("seed") is not None:
        cfg.seed = int(overrides["seed"])

    if cfg.modes < 1:
        raise ConfigError("modal.modes must be >= 1")
    if cfg.substeps < 1:
        raise ConfigError("simulate.substeps must be >= 1")
    if not cfg.frame_rate > 0:
        raise ConfigError("frame rate must be > 0")
    if cfg.bump_frames < 1:
        raise ConfigError("drive.bump_frames must be >= 1")
    if min(cfg.bench_warmup, cfg.bench_steps - 1, cfg.bench_repeats - 1) < 0:
        raise ConfigError("[bench]: warmup >= 0, steps >= 1, repeats >= 1")
    return cfg


def require(cfg: RunConfig, command: str):
    """Command-specific completeness checks."""
    if command == "simulate":
        if cfg.drive is None:
            raise ConfigError("simulate needs one drive source in [drive]")
        if cfg.drive in ("trajectories", "images") and not cfg.node_binding:
            raise ConfigError("drive.node_ids must bind every tracked seed to a node")
        if cfg.drive == "images" and not cfg.seeds:
            raise ConfigError("image drive needs tracking.seeds")
        if cfg.drive == "images" and len(cfg.seeds) != len(cfg.node_binding):
            raise ConfigError(f"{len(cfg.seeds)} seeds but {len(cfg.node_binding)} bound nodes")
        if cfg.drive == "bump" and not (cfg.constraint_ids or cfg.constraint_plane):
            raise ConfigError("bump drive needs [constraints] ids or plane")
    elif command == "track":
        if cfg.images is None:
            raise ConfigError("track needs tracking.images (PGM directory or .raw file)")
        if not cfg.seeds:
            raise ConfigError("track needs tracking.seeds")
    elif command == "fit":
        if not cfg.contours:
            raise ConfigError("fit needs fit.contours")
    elif command == "bench":
        pass
    else:
        raise ConfigError(f"unknown command {command!r}")
    return cfg
