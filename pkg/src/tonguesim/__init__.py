"""Real-time modal FEM tongue model driven by tracked ultrasound speckle."""

from .errors import TongueSimError
from .mesh import (NodeSelection, TetMesh, load_tet_mesh, make_bar_mesh, select_nodes_near_plane,
                   select_plane_nodes, total_volume, write_tet_mesh)
from .fem import MaterialParams, SystemMatrices, assemble
from .modal import ModalBasis, compute_modal_basis
from .dynamics import (ConstraintTimeline, NewmarkIntegrator, ReducedState, SimulationConfig,
                       build_warp_operator, bump_timeline, newmark_step, simulate)
from .fitting import ContourPolyline, SnakeParams, propagate_edit, snake_fit
from .tracking import (ImageSequence, PlaneCalibration, TrackingParams, track_points,
                       trajectories_to_timeline)

__version__ = "0.1.0"

__all__ = [
    "TongueSimError", "NodeSelection", "TetMesh", "load_tet_mesh", "make_bar_mesh",
    "select_nodes_near_plane", "select_plane_nodes", "total_volume", "write_tet_mesh",
    "MaterialParams", "SystemMatrices", "assemble", "ModalBasis", "compute_modal_basis",
    "ConstraintTimeline", "NewmarkIntegrator", "ReducedState", "SimulationConfig",
    "build_warp_operator", "bump_timeline", "newmark_step", "simulate",
    "ContourPolyline", "SnakeParams", "propagate_edit", "snake_fit",
    "ImageSequence", "PlaneCalibration", "TrackingParams", "track_points",
    "trajectories_to_timeline",
]
