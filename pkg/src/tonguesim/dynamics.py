"""Reduced dynamics: Newmark average-acceleration with displacement constraints.

The modal equations ``q'' + D q' + Lambda q = Phi^T f`` (D = xi I + zeta
Lambda, all diagonal) are advanced in acceleration form. Per step the
unknown new acceleration solves::

    A q''_{n+1} = b,   A = I + gamma dt D + beta dt^2 Lambda

and when nodes are constrained the saddle-point system::

    [ A   G^T ] [ q''_{n+1} ]   [ b ]
    [ G    0  ] [    mu     ] = [ c ]

with ``G = S Phi`` (rows of the basis at the constrained nodes) and ``c``
chosen so the Newmark displacement update lands those nodes on their
targets. A is diagonal, so the system is solved through its
``G A^-1 G^T`` Schur complement, which is factorized once per node set.

Modal warping applies, per node, the rotation exp([w_i]x) built from the
local infinitesimal rotation ``w = W Phi q`` (half the curl of the linear
displacement) to that node's linear displacement. This is the simplest
per-node member of the modal warping family: rotations are not integrated
along the body, so it corrects local rotation artefacts (spurious
stretching under bending) but not large global rotations of long chains.
Constraint targets are enforced on the linear field; the warped field may
miss them by O(|w|^2) unless ``snap_constraints`` is set.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .errors import ConstraintRankError, DimensionError, DivergenceError, ParameterError
from .fem import MaterialParams, SystemMatrices, damping_coefficients, shape_gradients
from .mesh import TetMesh, total_volume
from .modal import ModalBasis, reconstruct_displacement, reduce_force

log = logging.getLogger(__name__)

GAMMA = 0.5
BETA = 0.25
RANK_RTOL = 1e-10


@dataclass
class ReducedState:
    q: np.ndarray
    q_dot: np.ndarray
    q_ddot: np.ndarray
    time: float = 0.0

    @classmethod
    def rest(cls, r):
        return cls(np.zeros(r), np.zeros(r), np.zeros(r), 0.0)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.q_dot))
                    and np.all(np.isfinite(self.q_ddot)))

    def modal_energy(self, basis: ModalBasis):
        return 0.5 * (self.q_dot @ self.q_dot + self.q @ (basis.Lambda * self.q))


@dataclass(frozen=True, eq=False)
class ConstraintTimeline:
    node_ids: np.ndarray          # (m,)
    frames: np.ndarray            # (F, m, 3) target displacements, m
    frame_rate: float
    lost: Optional[np.ndarray] = None   # (F, m) tracker-lost flags, diagnostics only

    def __post_init__(self):
        ids = np.asarray(self.node_ids, dtype=np.int64).reshape(-1)
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 3 or frames.shape[1:] != (len(ids), 3):
            raise DimensionError(
                f"frames must have shape (F, {len(ids)}, 3), got {frames.shape}")
        if not self.frame_rate > 0:
            raise ParameterError("frame_rate must be > 0")
        lost = self.lost
        if lost is not None:
            lost = np.asarray(lost, dtype=bool)
            if lost.shape != frames.shape[:2]:
                raise DimensionError("lost mask must have shape (F, m)")
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_rate", float(self.frame_rate))
        object.__setattr__(self, "lost", lost)

    def __len__(self):
        return len(self.frames)


# -- modal warping ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WarpOperator:
    W: sp.csr_matrix                  # (3 n_free, 3 n_free): free dofs -> per-node rotation
    WPhi: Optional[np.ndarray] = None  # W @ Phi, precomposed for a particular basis

    def precompose(self, basis: ModalBasis) -> "WarpOperator":
        return replace(self, WPhi=np.ascontiguousarray(self.W @ basis.Phi))

    def rotations(self, basis: ModalBasis, q):
        if self.WPhi is not None and self.WPhi.shape == basis.Phi.shape:
            return self.WPhi @ q
        return self.W @ (basis.Phi @ q)


def _cross_matrices(g):
    """[g]x for a stack of vectors, shape (..., 3, 3)."""
    z = np.zeros(g.shape[:-1])
    gx, gy, gz = g[..., 0], g[..., 1], g[..., 2]
    return np.stack([np.stack([z, -gz, gy], -1),
                     np.stack([gz, z, -gx], -1),
                     np.stack([-gy, gx, z], -1)], -2)


def build_warp_operator(mesh: TetMesh, matrices: SystemMatrices) -> WarpOperator:
    """Nodal rotation proxy w_i = 1/2 curl(u), volume-averaged over incident tets."""
    grads, vol = shape_gradients(mesh)
    # per tet: w_e = sum_a 1/2 [grad N_a]x u_a, weighted by tet volume
    blocks = 0.5 * _cross_matrices(grads) * vol[:, None, None, None]   # (m, 4, 3, 3)
    n = mesh.node_count
    node_vol = np.zeros(n)
    np.add.at(node_vol, mesh.tets.ravel(), np.repeat(vol, 4))

    # scatter to (receiving node i, source node a): rows 3i+k, cols 3a+l
    m = mesh.tet_count
    recv = np.repeat(mesh.tets, 4, axis=1)          # (m, 16) i for each (i, a)
    src = np.tile(mesh.tets, (1, 4))                # (m, 16) a for each (i, a)
    vals = np.broadcast_to(blocks[:, None], (m, 4, 4, 3, 3)).reshape(m, 16, 3, 3)
    rows = (3 * recv[:, :, None, None] + np.arange(3)[:, None]) * np.ones((1, 1, 1, 3), int)
    cols = (3 * src[:, :, None, None] + np.arange(3)[None, :]) * np.ones((1, 1, 3, 1), int)
    W = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * n, 3 * n)).tocsr()
    W.sum_duplicates()
    W = sp.diags(np.repeat(1.0 / node_vol, 3)) @ W
    free = matrices.free_dofs
    W = W[free][:, free].tocsr()
    W.sort_indices()
    return WarpOperator(W=W)


def rotate_vectors(w, v):
    """Apply exp([w]x) to v row-wise (Rodrigues); exact identity where w == 0."""
    theta2 = np.einsum("ij,ij->i", w, w)
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / np.where(small, 1.0, theta2))
    wv = np.cross(w, v)
    return v + a[:, None] * wv + b[:, None] * np.cross(w, wv)


def warp_displacements(basis: ModalBasis, warp: WarpOperator, q):
    """Warped per-node displacement field, shape (n_nodes, 3)."""
    u = reconstruct_displacement(basis, q).reshape(-1, 3)
    w = np.asarray(warp.rotations(basis, np.asarray(q, dtype=float))).reshape(-1, 3)
    out = np.zeros((basis.n_nodes, 3))
    out[basis.free_nodes] = rotate_vectors(w, u)
    return out


def linear_displacements(basis: ModalBasis, q):
    out = np.zeros((basis.n_nodes, 3))
    out[basis.free_nodes] = reconstruct_displacement(basis, q).reshape(-1, 3)
    return out


# -- time integration -------------------------------------------------------

def _dependent_nodes(G, node_ids, rtol=RANK_RTOL):
    """Nodes whose constraint rows add no new rank, in listed order."""
    scale = np.linalg.norm(G, 2) if G.size else 0.0
    kept = np.zeros((0, G.shape[1]))
    bad = []
    for k, node in enumerate(node_ids):
        trial = np.vstack([kept, G[3 * k:3 * k + 3]])
        if scale == 0.0 or np.linalg.matrix_rank(trial, tol=rtol * scale) < len(trial):
            bad.append(int(node))
        else:
            kept = trial
    return bad


class NewmarkIntegrator:
    """Newmark average-acceleration stepper for fixed basis, dt and constrained node set."""

    def __init__(self, basis: ModalBasis, material: MaterialParams, dt: float,
                 constraint_nodes=None, gamma=GAMMA, beta=BETA):
        if not dt > 0:
            raise ParameterError(f"time step must be > 0, got {dt}")
        self.basis = basis
        self.dt = float(dt)
        self.gamma = gamma
        self.beta = beta
        lam = basis.Lambda
        self.damping = damping_coefficients(material, lam)
        self.A = 1.0 + gamma * dt * self.damping + beta * dt * dt * lam
        self.Ainv = 1.0 / self.A

        nodes = np.array([] if constraint_nodes is None else constraint_nodes, dtype=np.int64)
        self.nodes = nodes
        self.G = None
        if len(nodes):
            uniq, counts = np.unique(nodes, return_counts=True)
            if (counts > 1).any():
                dup = uniq[counts > 1].tolist()
                raise ConstraintRankError(dup, f"nodes constrained more than once: {dup}")
            if basis.dof_index is None:
                raise ParameterError("basis carries no dof map; cannot constrain nodes")
            if nodes.min() < 0 or nodes.max() >= basis.n_nodes:
                raise ParameterError("constraint node id out of range")
            rows = basis.node_rows(nodes)
            anchored = sorted(set(nodes[(rows.reshape(-1, 3) < 0).any(axis=1)].tolist()))
            if anchored:
                raise ConstraintRankError(anchored, f"constrained nodes {anchored} are anchored")
            self.rows = rows
            G = basis.Phi[rows]
            schur = (G * self.Ainv) @ G.T
            ev = np.linalg.eigvalsh(schur)
            if ev.max() <= 0 or ev.min() <= RANK_RTOL * ev.max():
                bad = _dependent_nodes(G * np.sqrt(self.Ainv), nodes) or [int(n) for n in nodes]
                raise ConstraintRankError(
                    bad, f"constraint system is singular (r={basis.r}, "
                         f"{3 * len(nodes)} constrained components); offending nodes {bad}")
            self.G = G
            self.schur = la.cho_factor(schur)

    def predictor(self, state: ReducedState):
        dt = self.dt
        q_pred = state.q + dt * state.q_dot + dt * dt * (0.5 - self.beta) * state.q_ddot
        v_pred = state.q_dot + dt * (1.0 - self.gamma) * state.q_ddot
        return q_pred, v_pred

    def step(self, state: ReducedState, modal_force=None, targets=None) -> ReducedState:
        dt = self.dt
        q_pred, v_pred = self.predictor(state)
        b = -self.damping * v_pred - self.basis.Lambda * q_pred
        if modal_force is not None:
            b = b + modal_force
        acc = self.Ainv * b
        if self.G is not None:
            if targets is None:
                raise ParameterError("integrator has constrained nodes but no targets were given")
            t = np.asarray(targets, dtype=float).reshape(-1)
            c = (t - self.G @ q_pred) / (self.beta * dt * dt)
            mu = la.cho_solve(self.schur, self.G @ acc - c, check_finite=False)
            acc = acc - self.Ainv * (self.G.T @ mu)
            # one refinement sweep keeps the constraint residual at rounding level
            res = self.G @ acc - c
            acc = acc - self.Ainv * (self.G.T @ la.cho_solve(self.schur, res, check_finite=False))
        q = q_pred + self.beta * dt * dt * acc
        q_dot = v_pred + self.gamma * dt * acc
        return ReducedState(q, q_dot, acc, state.time + dt)


def newmark_step(state: ReducedState, basis: ModalBasis, material: MaterialParams,
                 f_ext=None, constraints=None, dt=1.0 / 60.0) -> ReducedState:
    """One average-acceleration step.

    ``f_ext`` is a free-dof force vector (or None), ``constraints`` a pair
    ``(node_ids, targets)`` with targets of shape (m, 3) in meters.
    """
    nodes, targets = (None, None) if constraints is None else constraints
    integ = NewmarkIntegrator(basis, material, dt, nodes)
    fm = None if f_ext is None else reduce_force(basis, f_ext)
    return integ.step(state, fm, targets)


# -- simulation driver ------------------------------------------------------

@dataclass
class SimulationConfig:
    substeps: int = 1
    warp: bool = True
    snap_constraints: bool = False
    external_force: Optional[np.ndarray] = None   # free-dof vector, N
    keep_fields: bool = True


@dataclass(eq=False)
class DeformationSequence:
    times: np.ndarray
    q: np.ndarray                    # (F, r)
    displacements: Optional[np.ndarray]   # (F, n, 3) output field (warped if enabled)
    volume: np.ndarray
    rest_volume: float
    constraint_residual: np.ndarray  # max |linear u - target| at constrained nodes, m
    step_time_ms: np.ndarray
    solve_time_ms: np.ndarray
    reconstruct_time_ms: np.ndarray
    mode_count: int
    lost: Optional[np.ndarray] = None

    @property
    def volume_change(self):
        return (self.volume - self.rest_volume) / self.rest_volume

    @property
    def max_abs_volume_change(self):
        return float(np.max(np.abs(self.volume_change)))

    @property
    def mean_fps(self):
        return float(1000.0 / np.mean(self.step_time_ms))

    def __len__(self):
        return len(self.times)


def gravity_force(matrices: SystemMatrices, g=(0.0, 0.0, -9.81)):
    return matrices.M * np.tile(np.asarray(g, dtype=float), matrices.n_free)


def simulate(mesh: TetMesh, basis: ModalBasis, warp: Optional[WarpOperator],
             material: MaterialParams, timeline: ConstraintTimeline,
             config: SimulationConfig | None = None,
             on_frame: Callable[[int, np.ndarray], None] | None = None) -> DeformationSequence:
    """Drive the reduced model through a constraint timeline.

    The body starts at rest with zero targets; output frame k is the state
    at t = (k + 1) / frame_rate, reached after ``substeps`` steps during
    which the targets are interpolated linearly from frame k-1 to frame k.
    """
    config = config or SimulationConfig()
    if len(timeline) == 0:
        raise ParameterError("constraint timeline is empty")
    if config.substeps < 1:
        raise ParameterError("substeps must be >= 1")
    if config.warp and warp is None:
        raise ParameterError("warping enabled but no warp operator given")
    if warp is not None and config.warp and (warp.WPhi is None or warp.WPhi.shape != basis.Phi.shape):
        warp = warp.precompose(basis)

    dt = 1.0 / (timeline.frame_rate * config.substeps)
    nodes = timeline.node_ids
    integ = NewmarkIntegrator(basis, material, dt, nodes if len(nodes) else None)
    fm = None if config.external_force is None else reduce_force(basis, config.external_force)

    F = len(timeline)
    rest = total_volume(mesh)
    out = DeformationSequence(
        times=np.zeros(F), q=np.zeros((F, basis.r)),
        displacements=np.zeros((F, mesh.node_count, 3)) if config.keep_fields else None,
        volume=np.zeros(F), rest_volume=rest, constraint_residual=np.zeros(F),
        step_time_ms=np.zeros(F), solve_time_ms=np.zeros(F), reconstruct_time_ms=np.zeros(F),
        mode_count=basis.r, lost=timeline.lost)

    state = ReducedState.rest(basis.r)
    prev = np.zeros((len(nodes), 3))
    rows = integ.rows if len(nodes) else None
    for k in range(F):
        t0 = time.perf_counter()
        cur = timeline.frames[k]
        for s in range(1, config.substeps + 1):
            target = prev + (s / config.substeps) * (cur - prev)
            state = integ.step(state, fm, target if len(nodes) else None)
        if not state.is_finite():
            raise DivergenceError(k)
        t1 = time.perf_counter()

        u_lin = basis.Phi @ state.q
        if config.warp:
            w = warp.WPhi @ state.q
            field_ = np.zeros((mesh.node_count, 3))
            field_[basis.free_nodes] = rotate_vectors(w.reshape(-1, 3), u_lin.reshape(-1, 3))
        else:
            field_ = np.zeros((mesh.node_count, 3))
            field_[basis.free_nodes] = u_lin.reshape(-1, 3)
        if len(nodes):
            out.constraint_residual[k] = np.max(np.abs(u_lin[rows] - cur.reshape(-1)))
            if config.snap_constraints:
                field_[nodes] = cur
        if not np.all(np.isfinite(field_)):
            raise DivergenceError(k)
        t2 = time.perf_counter()

        out.volume[k] = total_volume(mesh, field_)
        out.times[k] = state.time
        out.q[k] = state.q
        if out.displacements is not None:
            out.displacements[k] = field_
        prev = cur
        t3 = time.perf_counter()
        out.solve_time_ms[k] = 1e3 * (t1 - t0)
        out.reconstruct_time_ms[k] = 1e3 * (t2 - t1)
        out.step_time_ms[k] = 1e3 * (t3 - t0)
        if on_frame is not None:   # export is not part of the step timing
            on_frame(k, field_)
    return out


def bump_timeline(node_ids, n_frames, amplitude, direction=(0.0, 0.0, 1.0),
                  frame_rate=60.0, stagger=0.0) -> ConstraintTimeline:
    """Smooth raise-and-return drive: amplitude * sin^2(pi * s), s in [0, 1].

    ``stagger`` delays successive nodes by that fraction of the sequence,
    turning the bump into a travelling wave along the listed nodes.
    """
    ids = np.asarray(node_ids, dtype=np.int64)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    s = np.arange(1, n_frames + 1) / n_frames
    s = s[:, None] - stagger * np.arange(len(ids))[None, :]
    s = np.clip(s / max(1.0 - stagger * max(len(ids) - 1, 0), 1e-12), 0.0, 1.0)
    mag = amplitude * np.sin(np.pi * s) ** 2
    return ConstraintTimeline(ids, mag[:, :, None] * d, frame_rate)
