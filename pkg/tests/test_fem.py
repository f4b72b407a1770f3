import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings, strategies as st

from oracles import continuum_energy_affine
from tonguesim.errors import (DegenerateElementError, DimensionError, EmptySystemError,
                              ParameterError)
from tonguesim.fem import (MaterialParams, assemble, damping_coefficients, expand_free_vector,
                           restrict_field)
from tonguesim.mesh import NodeSelection, TetMesh, make_bar_mesh, total_volume

REF_TET = TetMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float),
                  np.array([[0, 1, 2, 3]]))

MESHES = [
    REF_TET,
    make_bar_mesh(3, 1, 1, 0.01, 0.01, 0.01),
    make_bar_mesh(2, 3, 2, 0.2, 0.1, 0.3),
    make_bar_mesh(4, 2, 1, 1.0, 1.0, 1.0).with_nodes(
        make_bar_mesh(4, 2, 1, 1.0, 1.0, 1.0).nodes
        + 0.05 * np.random.default_rng(0).standard_normal((30, 3))),
]


def test_material_validation():
    for bad in (dict(young_modulus=0.0), dict(poisson_ratio=0.5), dict(poisson_ratio=-0.1),
                dict(density=-1.0), dict(rayleigh_mass=-1.0), dict(rayleigh_stiffness=-1e-3)):
        with pytest.raises(ParameterError):
            MaterialParams(**bad)


def test_lame_parameters():
    lam, mu = MaterialParams(young_modulus=1000.0, poisson_ratio=0.25).lame
    assert lam == pytest.approx(400.0)
    assert mu == pytest.approx(400.0)


def test_single_tet_has_six_rigid_modes():
    sm = assemble(REF_TET, MaterialParams())
    K = sm.K.toarray()
    assert K.shape == (12, 12)
    ev = np.linalg.eigvalsh(K)
    tol = 1e-9 * ev.max()
    assert np.sum(np.abs(ev) < tol) == 6
    assert np.all(ev[6:] > tol)


@pytest.mark.parametrize("mesh", MESHES)
def test_structure_invariants(mesh):
    mat = MaterialParams(density=900.0)
    sm = assemble(mesh, mat)
    K = sm.K
    assert abs(K - K.T).max() < 1e-9 * abs(K).max()
    assert np.all(sm.M > 0)
    assert sm.M.sum() == pytest.approx(3 * mat.density * total_volume(mesh), rel=1e-10)
    norm = abs(K).sum(axis=1).max()
    for axis in range(3):
        t = np.zeros((mesh.node_count, 3))
        t[:, axis] = 1.0
        assert np.abs(K @ t.ravel()).max() < 1e-8 * norm


@pytest.mark.parametrize("mesh", MESHES)
def test_affine_energy_matches_continuum(mesh, rng):
    mat = MaterialParams(young_modulus=2e4, poisson_ratio=0.3)
    sm = assemble(mesh, mat)
    lam, mu = mat.lame
    for _ in range(3):
        A = rng.standard_normal((3, 3))
        u = (mesh.nodes @ A.T).ravel()
        energy = 0.5 * u @ (sm.K @ u)
        expected = continuum_energy_affine(A, lam, mu, total_volume(mesh))
        assert energy == pytest.approx(expected, rel=1e-8)


def test_anchored_bar_positive_definite(bar_anchored):
    _, anchors, sm = bar_anchored
    assert sm.n_free == 63 - len(anchors)
    ev = la.eigvalsh(sm.K.toarray())
    assert ev.min() > 0


def test_all_anchored_is_empty(bar):
    with pytest.raises(EmptySystemError):
        assemble(bar, MaterialParams(), NodeSelection("anchor", tuple(range(bar.node_count))))


def test_tiny_tet_is_degenerate():
    s = 1e-7
    tiny = TetMesh(np.array([[0, 0, 0], [s, 0, 0], [0, s, 0], [0, 0, s]]), np.array([[0, 1, 2, 3]]))
    with pytest.raises(DegenerateElementError):
        assemble(tiny, MaterialParams())


def test_assembly_is_deterministic(bar_anchored):
    mesh, anchors, sm = bar_anchored
    again = assemble(mesh, MaterialParams(), anchors)
    assert np.array_equal(sm.K.indptr, again.K.indptr)
    assert np.array_equal(sm.K.indices, again.K.indices)
    assert np.array_equal(sm.K.data, again.K.data)
    assert np.array_equal(sm.M, again.M)


def test_damping_coefficients():
    lam = np.array([0.0, 3.0, 400.0])
    assert np.all(damping_coefficients(MaterialParams(rayleigh_mass=0, rayleigh_stiffness=0), lam) == 0)
    assert np.all(damping_coefficients(MaterialParams(rayleigh_mass=1, rayleigh_stiffness=0), lam) == 1)
    d = damping_coefficients(MaterialParams(rayleigh_mass=0.1, rayleigh_stiffness=0.01), [400.0])
    assert d[0] == pytest.approx(4.1)
    with pytest.raises(ParameterError):
        damping_coefficients(MaterialParams(), [-1.0])


def test_expand_identity_without_anchors(bar, rng):
    sm = assemble(bar, MaterialParams())
    v = rng.standard_normal(sm.ndof)
    assert np.array_equal(expand_free_vector(sm, v).ravel(), v)
    assert np.array_equal(restrict_field(sm, expand_free_vector(sm, v)), v)


def test_expand_with_anchors(bar_anchored):
    _, anchors, sm = bar_anchored
    assert not expand_free_vector(sm, np.zeros(sm.ndof)).any()
    v = np.zeros(sm.ndof)
    v[0] = 1.0
    full = expand_free_vector(sm, v)
    assert np.count_nonzero(full) == 1
    assert full[sm.free_nodes[0], 0] == 1.0
    assert not full[list(anchors.node_ids)].any()
    with pytest.raises(DimensionError):
        expand_free_vector(sm, np.zeros(sm.ndof + 1))


@settings(max_examples=20, deadline=None)
@given(st.floats(100.0, 1e6), st.floats(0.0, 0.49))
def test_stiffness_scales_with_young_modulus(E, nu):
    m = MESHES[1]
    k1 = assemble(m, MaterialParams(young_modulus=1.0, poisson_ratio=nu)).K
    kE = assemble(m, MaterialParams(young_modulus=E, poisson_ratio=nu)).K
    assert abs(kE - E * k1).max() <= 1e-12 * abs(kE).max()
