import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import full_space_newmark
from tonguesim.dynamics import (ConstraintTimeline, DeformationSequence, NewmarkIntegrator,
                                ReducedState, SimulationConfig, build_warp_operator,
                                bump_timeline, gravity_force, linear_displacements, newmark_step,
                                rotate_vectors, simulate, warp_displacements)
from tonguesim.errors import ConstraintRankError, DimensionError, DivergenceError, ParameterError
from tonguesim.fem import MaterialParams, assemble, restrict_field
from tonguesim.mesh import NodeSelection, make_bar_mesh, select_nodes_near_plane, total_volume
from tonguesim.modal import ModalBasis, compute_modal_basis

UNDAMPED = MaterialParams(rayleigh_mass=0.0, rayleigh_stiffness=0.0)


def oscillator(omega):
    return ModalBasis(Phi=np.ones((1, 1)), Lambda=np.array([omega ** 2]))


def run_oscillator(omega, periods=10, per_period=100):
    T = 2 * np.pi / omega
    dt = T / per_period
    integ = NewmarkIntegrator(oscillator(omega), UNDAMPED, dt)
    s = ReducedState(np.array([1.0]), np.array([0.0]), np.array([-omega ** 2]))
    t, q = [0.0], [1.0]
    for _ in range(periods * per_period):
        s = integ.step(s)
        t.append(s.time)
        q.append(s.q[0])
    return np.array(t), np.array(q), T


def test_oscillator_tracks_cosine():
    omega = 2 * np.pi * 3.0
    t, q, T = run_oscillator(omega)
    assert np.abs(np.abs(q).max() - 1.0) < 0.01
    # period from upward zero crossings (linear interpolation)
    i = np.nonzero((q[:-1] < 0) & (q[1:] >= 0))[0]
    tc = t[i] - q[i] * (t[i + 1] - t[i]) / (q[i + 1] - q[i])
    period = np.diff(tc).mean()
    assert abs(period - T) / T < 0.005
    assert np.abs(q - np.cos(omega * t)).max() < 0.05


def test_equilibrium_is_fixed_point(small_basis):
    basis, _, _ = small_basis
    s = ReducedState.rest(basis.r)
    out = newmark_step(s, basis, MaterialParams(), dt=1 / 60)
    assert not out.q.any() and not out.q_dot.any() and not out.q_ddot.any()
    assert out.time == pytest.approx(1 / 60)


def test_bad_time_step(small_basis):
    basis, _, _ = small_basis
    for dt in (0.0, -1e-3):
        with pytest.raises(ParameterError):
            NewmarkIntegrator(basis, MaterialParams(), dt)


@pytest.fixture(scope="module")
def small_basis():
    mesh = make_bar_mesh(3, 1, 1, 0.01, 0.01, 0.01)
    anchors = select_nodes_near_plane(mesh, "x", 0.0, 1e-9, surface_only=False, role="anchor")
    sm = assemble(mesh, MaterialParams(), anchors)
    return compute_modal_basis(sm, sm.ndof), sm, mesh


def test_reduced_matches_full_space_oracle(small_basis):
    basis, sm, mesh = small_basis
    mat = MaterialParams()
    dt, steps, node = 1 / 60, 200, 15
    ramp = 0.002 * np.minimum(np.arange(1, steps + 1) / 50.0, 1.0)
    direction = np.array([0.0, 0.3, 1.0])
    rows = sm.node_rows([node])
    ref = full_space_newmark(sm.K, sm.M, mat.rayleigh_mass, mat.rayleigh_stiffness, dt, steps,
                             rows, lambda k: ramp[k] * direction)
    integ = NewmarkIntegrator(basis, mat, dt, [node])
    s = ReducedState.rest(basis.r)
    dev = 0.0
    for k in range(steps):
        s = integ.step(s, None, (ramp[k] * direction)[None, :])
        u = basis.Phi @ s.q
        dev = max(dev, np.abs(u - ref[k]).reshape(-1, 3).max())
        assert np.abs(u[rows] - ramp[k] * direction).max() < 1e-9
    assert dev < 1e-6


def test_undamped_energy_conserved(small_basis, rng):
    basis, _, _ = small_basis
    dt = (2 * np.pi / np.sqrt(basis.Lambda.max())) / 20
    integ = NewmarkIntegrator(basis, UNDAMPED, dt)
    q0 = rng.standard_normal(basis.r) * 1e-4
    s = ReducedState(q0, np.zeros(basis.r), -basis.Lambda * q0)
    e0 = s.modal_energy(basis)
    worst = 0.0
    for _ in range(1000):
        s = integ.step(s)
        worst = max(worst, abs(s.modal_energy(basis) - e0) / e0)
    assert worst < 1e-3


def test_constraint_rank_errors(small_basis):
    basis, _, _ = small_basis
    mat = MaterialParams()
    with pytest.raises(ConstraintRankError) as exc:
        NewmarkIntegrator(basis, mat, 0.01, [13, 13])
    assert exc.value.node_ids == [13]
    with pytest.raises(ConstraintRankError) as exc:
        NewmarkIntegrator(basis, mat, 0.01, [0, 13])
    assert exc.value.node_ids == [0]
    few = ModalBasis(basis.Phi[:, :4], basis.Lambda[:4], basis.free_nodes, basis.dof_index,
                     basis.n_nodes)
    with pytest.raises(ConstraintRankError) as exc:
        NewmarkIntegrator(few, mat, 0.01, [13, 15])
    assert exc.value.node_ids
    assert set(exc.value.node_ids) <= {13, 15}


def test_constrained_step_needs_targets(small_basis):
    basis, _, _ = small_basis
    integ = NewmarkIntegrator(basis, MaterialParams(), 0.01, [15])
    with pytest.raises(ParameterError):
        integ.step(ReducedState.rest(basis.r))


# -- warping -----------------------------------------------------------------

@pytest.fixture(scope="module")
def free_bar():
    mesh = make_bar_mesh(3, 2, 2, 0.01, 0.01, 0.01)
    sm = assemble(mesh, MaterialParams())
    return mesh, sm, build_warp_operator(mesh, sm)


def test_translation_has_no_curl(free_bar):
    mesh, sm, warp = free_bar
    for t in ([1.0, 0, 0], [0, -2.0, 0], [0.3, 0.1, 5.0]):
        u = np.tile(t, mesh.node_count)
        assert np.abs(warp.W @ u).max() < 1e-10


def test_infinitesimal_rotation_recovers_axis(free_bar):
    mesh, sm, warp = free_bar
    theta = 0.02
    for omega in (np.array([0, 0, theta]), np.array([theta, -theta, 0.5 * theta])):
        u = np.cross(omega, mesh.nodes).ravel()
        w = (warp.W @ u).reshape(-1, 3)
        assert np.abs(w - omega).max() < 1e-10


def test_dilation_has_no_curl(free_bar):
    mesh, sm, warp = free_bar
    assert np.abs(warp.W @ (0.05 * mesh.nodes).ravel()).max() < 1e-10


def test_warp_identities(free_bar):
    mesh, sm, warp = free_bar
    dil = restrict_field(sm, 0.01 * mesh.nodes)
    phi = dil / np.sqrt(dil @ (sm.M * dil))
    basis = ModalBasis(phi[:, None], np.array([1.0]), sm.free_nodes, sm.dof_index, sm.n_nodes)
    assert not warp_displacements(basis, warp, np.zeros(1)).any()
    q = np.array([0.7])
    assert np.abs(warp_displacements(basis, warp, q) - linear_displacements(basis, q)).max() < 1e-12


def test_rodrigues():
    v = np.array([[1.0, 0.0, 0.0]] * 3)
    w = np.array([[0, 0, np.pi / 2], [0, 0, 0.0], [0, 0, 1e-6]])
    out = rotate_vectors(w, v)
    assert np.allclose(out[0], [0, 1, 0], atol=1e-15)
    assert np.array_equal(out[1], v[1])
    assert np.allclose(out[2], [np.cos(1e-6), np.sin(1e-6), 0], atol=1e-18)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_rodrigues_is_a_rotation(w, v):
    w, v = np.array([w]), np.array([v])
    out = rotate_vectors(w, v)
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(v), rel=1e-12, abs=1e-12)
    assert out[0] @ w[0] == pytest.approx(v[0] @ w[0], rel=1e-9, abs=1e-9)


# -- simulate ----------------------------------------------------------------

@pytest.fixture(scope="module")
def drive_setup():
    mesh = make_bar_mesh(8, 2, 2, 0.005, 0.005, 0.005)
    anchors = select_nodes_near_plane(mesh, "z", 0.0, 1e-9, surface_only=False, role="anchor")
    mat = MaterialParams()
    sm = assemble(mesh, mat, anchors)
    basis = compute_modal_basis(sm, 40)
    warp = build_warp_operator(mesh, sm)
    top = np.nonzero(np.isclose(mesh.nodes[:, 2], 0.01) & np.isclose(mesh.nodes[:, 1], 0.005))[0]
    nodes = top[[2, 4, 6]]
    return mesh, mat, sm, basis, warp, nodes


def test_zero_timeline_gives_rest(drive_setup):
    mesh, mat, sm, basis, warp, nodes = drive_setup
    tl = ConstraintTimeline(nodes, np.zeros((10, len(nodes), 3)), 60.0)
    seq = simulate(mesh, basis, warp, mat, tl)
    assert len(seq) == 10
    assert not seq.displacements.any()
    assert np.all(seq.volume_change == 0.0)
    assert seq.max_abs_volume_change == 0.0


def test_single_frame(drive_setup):
    mesh, mat, sm, basis, warp, nodes = drive_setup
    tl = bump_timeline(nodes, 1, 1e-3)
    seq = simulate(mesh, basis, warp, mat, tl)
    assert len(seq) == 1 and seq.times[0] == pytest.approx(1 / 60)


def test_empty_timeline_rejected(drive_setup):
    mesh, mat, sm, basis, warp, nodes = drive_setup
    with pytest.raises(ParameterError):
        simulate(mesh, basis, warp, mat, ConstraintTimeline(nodes, np.zeros((0, 3, 3)), 60.0))


def test_timeline_shape_checked(drive_setup):
    *_, nodes = drive_setup
    with pytest.raises(DimensionError):
        ConstraintTimeline(nodes, np.zeros((4, len(nodes) + 1, 3)), 60.0)
    with pytest.raises(ParameterError):
        ConstraintTimeline(nodes, np.zeros((4, len(nodes), 3)), 0.0)


@pytest.mark.parametrize("substeps", [1, 3])
def test_constraints_hit_every_frame(drive_setup, substeps):
    mesh, mat, sm, basis, warp, nodes = drive_setup
    tl = bump_timeline(nodes, 60, 1e-3, direction=(0.2, 0.0, 1.0), stagger=0.1)
    seq = simulate(mesh, basis, warp, mat, tl, SimulationConfig(substeps=substeps, warp=False))
    assert seq.constraint_residual.max() < 1e-9
    # warping off: output field is linear, so constrained nodes sit on target
    assert np.abs(seq.displacements[:, nodes] - tl.frames).max() < 1e-9


def test_snap_constraints(drive_setup):
    mesh, mat, sm, basis, warp, nodes = drive_setup
    tl = bump_timeline(nodes, 30, 2e-3)
    seq = simulate(mesh, basis, warp, mat, tl, SimulationConfig(snap_constraints=True))
    assert np.array_equal(seq.displacements[:, nodes], tl.frames)


def test_deterministic(drive_setup):
    mesh, mat, sm, basis, warp, nodes = drive_setup
    tl = bump_timeline(nodes, 30, 1e-3)
    a = simulate(mesh, basis, warp, mat, tl)
    b = simulate(mesh, basis, warp, mat, tl)
    assert np.array_equal(a.q, b.q)
    assert np.array_equal(a.displacements, b.displacements)
    assert np.array_equal(a.volume, b.volume)


def test_divergence_names_frame(drive_setup):
    mesh, mat, sm, basis, warp, nodes = drive_setup
    frames = np.zeros((8, len(nodes), 3))
    frames[5, 0, 2] = np.nan
    with pytest.raises(DivergenceError) as exc:
        simulate(mesh, basis, warp, mat, ConstraintTimeline(nodes, frames, 60.0))
    assert exc.value.frame == 5


def test_gravity_sags_unconstrained(drive_setup):
    mesh, mat, sm, basis, warp, nodes = drive_setup
    side = select_nodes_near_plane(mesh, "x", 0.0, 1e-9, surface_only=False, role="anchor")
    sm2 = assemble(mesh, mat, side)
    b2 = compute_modal_basis(sm2, 20)
    tl = ConstraintTimeline(np.array([], int), np.zeros((30, 0, 3)), 60.0)
    cfg = SimulationConfig(warp=False, external_force=gravity_force(sm2))
    seq = simulate(mesh, b2, None, mat, tl, cfg)
    tip = np.argmax(mesh.nodes[:, 0])
    assert seq.displacements[-1, tip, 2] < 0


def test_warping_needs_operator(drive_setup):
    mesh, mat, sm, basis, warp, nodes = drive_setup
    with pytest.raises(ParameterError):
        simulate(mesh, basis, None, mat, bump_timeline(nodes, 2, 1e-3))


def test_bump_shape():
    tl = bump_timeline([1, 2], 120, 0.01, direction=(0, 0, 2))
    z = tl.frames[:, 0, 2]
    assert z.max() == pytest.approx(0.01)
    assert z[-1] == pytest.approx(0.0, abs=1e-15)
    assert np.all(tl.frames[:, :, :2] == 0)
    tl = bump_timeline([1, 2, 3], 100, 1.0, stagger=0.2)
    peaks = tl.frames[:, :, 2].argmax(axis=0)
    assert np.all(np.diff(peaks) > 0)
