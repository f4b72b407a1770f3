import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import point_polyline_distance
from tonguesim.errors import (ConstraintRankError, InputError, InvertedElementError, PairingError,
                              ParameterError, SnakeEnergyError, SnakeNumericError)
from tonguesim.fem import MaterialParams, assemble
from tonguesim.fitting import (ContourPolyline, SnakeParams, closest_points, combine_edits,
                               lift_contour_displacements, order_plane_nodes, propagate_edit,
                               read_contour, snake_energy, snake_fit, solve_static_edit,
                               write_contour)
from tonguesim.mesh import NodeSelection, make_bar_mesh, select_nodes_near_plane
from tonguesim.tracking import PlaneCalibration


def circle(n, radius, centre=(0.0, 0.0), phase=0.0):
    t = phase + 2 * np.pi * np.arange(n) / n
    return np.column_stack([centre[0] + radius * np.cos(t), centre[1] + radius * np.sin(t)])


# -- snake -----------------------------------------------------------------

def test_points_on_target_stay_put():
    pts = circle(24, 12.0)
    res = snake_fit(pts, ContourPolyline("midsagittal", pts, closed=True),
                    SnakeParams(alpha=0.0, beta=0.0))
    assert np.abs(res.displacements).max() == 0.0
    assert res.converged and res.iterations == 1


def test_round_trip_open_contour_without_smoothing():
    pts = np.column_stack([np.linspace(0, 30, 11), 3 * np.sin(np.linspace(0, 3, 11))])
    res = snake_fit(pts, ContourPolyline("coronal", pts), SnakeParams(alpha=0, beta=0, gamma=0.4))
    assert np.abs(res.displacements).max() < 1e-12


@pytest.mark.parametrize("scheme,gamma", [("semi-implicit", 0.25), ("explicit", 0.1)])
def test_shifted_circle(scheme, gamma):
    start = circle(40, 12.0)
    target = ContourPolyline("midsagittal", circle(64, 12.0, (5.0, 0.0)), closed=True)
    res = snake_fit(start, target, SnakeParams(alpha=0.1, beta=0.1, gamma=gamma,
                                               attraction_weight=1.0, max_iterations=200,
                                               scheme=scheme))
    assert res.iterations <= 200
    assert res.residuals.mean() < 0.5
    assert np.all(np.diff(res.energies) <= 1e-12)
    dist = [point_polyline_distance(p, target.points, True) for p in res.points]
    assert np.allclose(dist, res.residuals, atol=1e-4)


def test_pure_tension_contracts():
    start = circle(30, 10.0, (2.0, -1.0))
    far = ContourPolyline("midsagittal", circle(8, 50.0), closed=True)
    res = snake_fit(start, far, SnakeParams(alpha=0.2, beta=0.0, attraction_weight=0.0,
                                            max_iterations=30, convergence_tol=1e-9))
    e = np.array(res.energies)
    assert np.all(np.diff(e) < 0)
    c = start.mean(axis=0)
    r0 = np.linalg.norm(start - c, axis=1)
    r1 = np.linalg.norm(res.points - c, axis=1)
    assert np.all(r1 < r0)
    assert np.allclose(res.points.mean(axis=0), c, atol=1e-12)


def test_energy_increase_is_detected():
    start = circle(30, 10.0)
    target = ContourPolyline("midsagittal", circle(30, 12.0), closed=True)
    with pytest.raises(SnakeEnergyError):
        snake_fit(start, target, SnakeParams(alpha=1.0, beta=1.0, gamma=2.0, scheme="explicit"))


def test_non_finite_points():
    target = ContourPolyline("midsagittal", circle(10, 5.0), closed=True)
    pts = circle(10, 5.0)
    pts[3, 0] = np.nan
    with pytest.raises(SnakeNumericError):
        snake_fit(pts, target)
    with pytest.raises(ParameterError):
        snake_fit(pts[:1], target)


def test_param_and_contour_validation():
    with pytest.raises(ParameterError):
        SnakeParams(alpha=-1)
    with pytest.raises(ParameterError):
        SnakeParams(max_iterations=0)
    with pytest.raises(ParameterError):
        SnakeParams(convergence_tol=0)
    with pytest.raises(ParameterError):
        ContourPolyline("axial", circle(4, 1.0))
    with pytest.raises(ParameterError):
        ContourPolyline("coronal", [[0, 0], [0, 0], [1, 1]])
    with pytest.raises(ParameterError):
        ContourPolyline("coronal", [[0, 0]])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=3, max_size=8, unique=True),
       st.tuples(st.floats(-30, 30), st.floats(-30, 30)), st.booleans())
def test_closest_point_distance_oracle(poly, q, closed):
    poly = np.array(poly)
    if np.any(np.all(poly[1:] == poly[:-1], axis=1)):
        return
    contour = ContourPolyline("midsagittal", poly, closed)
    _, d = closest_points(np.array([q]), contour)
    assert d[0] == pytest.approx(point_polyline_distance(np.array(q), poly, closed), abs=5e-2)
    assert d[0] <= point_polyline_distance(np.array(q), poly, closed) + 1e-9


# -- lifting ----------------------------------------------------------------

def test_lift(bar):
    sel = NodeSelection("constraint", (1, 2, 3))
    calib = PlaneCalibration.identity("midsagittal")
    ids, t = lift_contour_displacements(sel, bar, np.zeros((3, 2)), calib)
    assert ids.tolist() == [1, 2, 3] and not t.any()
    _, t = lift_contour_displacements(NodeSelection("constraint", (1,)), bar, [[1.0, 0.0]], calib)
    assert np.allclose(t, [[0.001, 0.0, 0.0]], rtol=0, atol=1e-18)
    cor = PlaneCalibration.identity("coronal")
    _, t = lift_contour_displacements(sel, bar, [[1.0, 2.0], [-3.0, 0.5], [0.0, 1.0]], cor)
    assert np.all(t @ cor.normal == 0.0)
    assert np.allclose(t[0], [0.0, 0.001, 0.002])
    with pytest.raises(PairingError):
        lift_contour_displacements(sel, bar, np.zeros((2, 2)), calib)


def test_combine_edits_averages_shared_nodes():
    ids, tg = combine_edits([([3, 1], [[1, 0, 0], [0, 1, 0]]), ([3, 7], [[3, 0, 0], [0, 0, 1]])])
    assert ids.tolist() == [1, 3, 7]
    assert np.allclose(tg, [[0, 1, 0], [2, 0, 0], [0, 0, 1]])
    ids, tg = combine_edits([])
    assert len(ids) == 0 and tg.shape == (0, 3)


def test_order_open_section_starts_at_gap():
    mesh = make_bar_mesh(6, 2, 4, 0.005, 0.005, 0.005)
    calib = PlaneCalibration.identity("midsagittal")
    sel = select_nodes_near_plane(mesh, "midsagittal", 0.005, 1e-9)
    base = set(np.nonzero(mesh.nodes[:, 2] == 0)[0])
    sel = NodeSelection("constraint", tuple(i for i in sel.node_ids if i not in base))
    ids, pts = order_plane_nodes(sel, mesh, calib, closed=False)
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert np.allclose(steps, 5.0)   # walks the outline one cell at a time
    assert {pts[0, 0], pts[-1, 0]} == {0.0, 30.0}


def test_order_collinear_nodes():
    mesh = make_bar_mesh(5, 1, 1, 1.0, 1.0, 1.0)
    calib = PlaneCalibration.identity("midsagittal")
    line = NodeSelection("constraint", tuple(np.nonzero((mesh.nodes[:, 1] == 0) & (mesh.nodes[:, 2] == 1))[0][::-1]))
    ids, pts = order_plane_nodes(line, mesh, calib, closed=False)
    assert np.all(np.diff(pts[:, 0]) > 0) or np.all(np.diff(pts[:, 0]) < 0)


# -- static propagation --------------------------------------------------------

@pytest.fixture(scope="module")
def slab():
    mesh = make_bar_mesh(12, 4, 4, 0.005, 0.005, 0.005)
    anchors = select_nodes_near_plane(mesh, "z", 0.0, 1e-9, surface_only=False, role="anchor")
    return mesh, anchors, assemble(mesh, MaterialParams(), anchors)


def node_at(mesh, x, y, z):
    return int(np.argmin(np.linalg.norm(mesh.nodes - [x, y, z], axis=1)))


def test_zero_edit_is_identity(slab):
    mesh, _, sm = slab
    ids = [node_at(mesh, 0.03, 0.01, 0.02), node_at(mesh, 0.0, 0.0, 0.02)]
    out = propagate_edit(mesh, sm, (ids, np.zeros((2, 3))))
    assert np.array_equal(out.nodes, mesh.nodes)


def test_single_node_edit_decays(slab):
    mesh, anchors, sm = slab
    node = node_at(mesh, 0.03, 0.01, 0.02)
    out = propagate_edit(mesh, sm, ([node], [[0.0, 0.0, 0.05 * 0.02]]))
    mag = np.linalg.norm(out.nodes - mesh.nodes, axis=1)
    assert mag[node] == pytest.approx(0.001)
    assert not mag[list(anchors.node_ids)].any()
    # along the top surface, within four cells (the free end faces bulge slightly)
    xs = 0.03 + 0.005 * np.arange(-4, 5)
    line = np.array([mag[node_at(mesh, x, 0.01, 0.02)] for x in xs])
    assert np.all(np.diff(line[4:]) < 0) and np.all(np.diff(line[:5]) > 0)
    # straight down to the anchored base
    down = np.array([mag[node_at(mesh, 0.03, 0.01, z)] for z in (0.02, 0.015, 0.01, 0.005, 0.0)])
    assert np.all(np.diff(down) < 0)


def test_edit_is_order_independent(slab, rng):
    mesh, _, sm = slab
    ids = np.array([node_at(mesh, x, 0.01, 0.02) for x in (0.01, 0.025, 0.04)])
    tg = 1e-4 * rng.standard_normal((3, 3))
    a = solve_static_edit(sm, ids, tg)
    perm = [2, 0, 1]
    b = solve_static_edit(sm, ids[perm], tg[perm])
    assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()


def test_rigid_translation_without_anchors():
    mesh = make_bar_mesh(4, 2, 2, 0.01, 0.01, 0.01)
    sm = assemble(mesh, MaterialParams())
    surf = mesh.surface_node_ids()
    shift = np.array([1e-3, -2e-3, 5e-4])
    out = propagate_edit(mesh, sm, (surf, np.tile(shift, (len(surf), 1))))
    u = out.nodes - mesh.nodes
    assert np.allclose(u, shift, atol=1e-12)
    energy = 0.5 * u.ravel() @ (sm.K @ u.ravel())
    assert energy < 1e-10


def test_edit_errors(slab):
    mesh, anchors, sm = slab
    top = node_at(mesh, 0.03, 0.01, 0.02)
    with pytest.raises(InvertedElementError) as exc:
        propagate_edit(mesh, sm, ([top], [[0.0, 0.0, -0.03]]))
    assert exc.value.tets
    with pytest.raises(ConstraintRankError):
        propagate_edit(mesh, sm, ([top, top], np.zeros((2, 3))))
    with pytest.raises(ConstraintRankError):
        propagate_edit(mesh, sm, ([anchors.node_ids[0]], np.zeros((1, 3))))
    free = make_bar_mesh(2, 1, 1, 0.01, 0.01, 0.01)
    with pytest.raises(ConstraintRankError):
        propagate_edit(free, assemble(free, MaterialParams()), ([0], [[1e-3, 0, 0]]))


# -- files ------------------------------------------------------------------------

def test_contour_file_round_trip(tmp_path):
    c = ContourPolyline("coronal", circle(9, 3.3, (1.0, 2.0)), closed=True)
    back = read_contour(write_contour(c, tmp_path / "c.csv"))
    assert back.plane == "coronal" and back.closed
    assert np.array_equal(back.points, c.points)


def test_contour_file_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x_mm,y_mm\n0,0\n1,1\n")
    with pytest.raises(InputError):
        read_contour(p)
    p.write_text("# plane: midsagittal\nx_mm,y_mm\n0,0\n1,abc\n")
    with pytest.raises(InputError) as exc:
        read_contour(p)
    assert ":4:" in str(exc.value)
    with pytest.raises(InputError):
        read_contour(tmp_path / "missing.csv")
