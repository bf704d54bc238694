import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from constraints import (build_reduction, identity_reduction, match_periodic, parse_dof_spec,
                         plane_translation, reduce_system)
from discretization import Field, build_dofmap
from errors import ConstraintError
from mesh_io import generate_block_mesh, select_region


# ==================== DOF specs ====================

def test_parse_dof_spec():
    n_comp = {'u': 3, 'phi': 1}
    assert parse_dof_spec('u.all', n_comp) == ('u', [0, 1, 2])
    assert parse_dof_spec('u.1', n_comp) == ('u', [1])
    assert parse_dof_spec('phi.0', n_comp) == ('phi', [0])
    assert parse_dof_spec('phi', n_comp) == ('phi', [0])
    for bad in ('w.0', 'u.3', 'u.x', 'u'):
        with pytest.raises(ConstraintError):
            parse_dof_spec(bad, n_comp)


# ==================== Reductions ====================

def test_identity_reduction():
    red = identity_reduction(5)
    assert red.n_reduced == 5
    assert red.fixed.size == 0
    assert red.slaves.size == 0
    x = np.arange(5.0)
    assert_array_equal(red.prolong(x), x)
    assert_array_equal(red.restrict(x), x)


def test_fixed_dof_and_periodic_tie():
    # DOF 0 fixed to 1.5, DOF 2 tied to DOF 1
    red = build_reduction(3, {0: 1.5}, [(1, 2)])
    assert red.n_reduced == 1
    assert_array_equal(red.retained, [1])
    assert_array_equal(red.fixed, [0])
    assert_array_equal(red.slaves, [2])
    assert_array_equal(red.master, [-1, 1, 1])
    assert_allclose(red.prolong([4.0]), [1.5, 4.0, 4.0])
    assert_allclose(red.restrict([1.5, 4.0, 4.0]), [4.0])


def test_fixed_value_spreads_over_tied_group():
    red = build_reduction(4, {3: -2.0}, [(0, 3), (3, 1)])
    assert_array_equal(red.fixed, [0, 1, 3])
    assert_allclose(red.u_fixed, [-2.0, -2.0, 0.0, -2.0])
    assert_array_equal(red.retained, [2])


def test_master_is_smallest_index_of_group():
    red = build_reduction(6, {}, [(5, 3), (3, 4), (2, 1)])
    assert_array_equal(red.master, [0, 1, 1, 3, 3, 3])
    assert_array_equal(red.retained, [0, 1, 3])


def test_contradictory_fixed_values():
    with pytest.raises(ConstraintError):
        build_reduction(3, {0: 1.0, 2: 2.0}, [(0, 1), (1, 2)])
    red = build_reduction(3, {0: 1.0, 2: 1.0 + 1e-14}, [(0, 1), (1, 2)])
    assert red.n_reduced == 0


def test_out_of_range_indices():
    with pytest.raises(ConstraintError):
        build_reduction(3, {3: 0.0}, [])
    with pytest.raises(ConstraintError):
        build_reduction(3, {}, [(0, 5)])


def test_array_form_of_fixed_values():
    red = build_reduction(4, (np.array([1, 3]), np.array([0.5, -0.5])), np.zeros((0, 2)))
    assert_allclose(red.u_fixed, [0.0, 0.5, 0.0, -0.5])
    shifted = red.with_fixed_values(np.array([0.0, 1.0, 0.0, 2.0]))
    assert_allclose(shifted.prolong([7.0, 8.0]), [7.0, 1.0, 8.0, 2.0])
    assert_array_equal(shifted.retained, red.retained)


def test_reduce_system():
    A = np.array([[4.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 4.0]])
    b = np.array([1.0, 2.0, 3.0])
    red = build_reduction(3, {0: 2.0}, [])
    A_r, b_r = reduce_system(A, b, red)
    assert_allclose(A_r.toarray(), A[1:, 1:])
    assert_allclose(b_r, b[1:] - A[1:, 0] * 2.0)

    tied = build_reduction(3, {}, [(0, 2)])
    A_t, b_t = reduce_system(A, b, tied)
    assert_allclose(A_t.toarray(), [[8.0, -2.0], [-2.0, 4.0]])
    assert_allclose(b_t, [4.0, 2.0])

    with pytest.raises(ConstraintError):
        reduce_system(A, np.ones(4), red)


# ==================== Periodic matching ====================

@pytest.fixture
def square():
    return generate_block_mesh([1.0, 1.0], [4, 4], [0.5, 0.5])


def _field_dofmap(mesh, n_components, order=1):
    region = select_region(mesh, 'Omega', 'all')
    return build_dofmap(Field('f', n_components, region, order), mesh)


def _sides(mesh):
    left = select_region(mesh, 'Left', 'vertices in (x < 0.001)', 'facet')
    right = select_region(mesh, 'Right', 'vertices in (x > 0.999)', 'facet')
    return left, right


def test_match_periodic_scalar(square):
    dofmap = _field_dofmap(square, 1)
    left, right = _sides(square)
    translation = plane_translation(dofmap, left, right, 0)
    assert_allclose(translation, [1.0, 0.0])

    pairs = match_periodic(square, dofmap, left, right, translation)
    assert pairs.shape == (4, 2)
    assert np.all(np.diff(pairs[:, 0]) > 0)
    coors = dofmap.node_coors
    assert_allclose(coors[pairs[:, 0]] + translation, coors[pairs[:, 1]], atol=1e-12)


def test_match_periodic_vector_and_quadratic(square):
    left, right = _sides(square)
    vector = _field_dofmap(square, 2)
    pairs = match_periodic(square, vector, left, right, [1.0, 0.0])
    assert pairs.shape == (8, 2)
    assert_array_equal(pairs[:, 0] % 2 == pairs[:, 1] % 2, True)

    only_y = match_periodic(square, vector, left, right, [1.0, 0.0], components=[1])
    assert_array_equal(only_y[:, 0] % 2, 1)

    quadratic = _field_dofmap(square, 1, order=2)
    pairs = match_periodic(square, quadratic, left, right, [1.0, 0.0])
    assert pairs.shape == (7, 2)


def test_match_periodic_failures(square):
    dofmap = _field_dofmap(square, 1)
    left, right = _sides(square)
    with pytest.raises(ConstraintError):
        match_periodic(square, dofmap, left, right, [0.5, 0.0])
    with pytest.raises(ConstraintError):
        match_periodic(square, dofmap, left, right, [1.0, 0.0, 0.0])
    lower_right = select_region(square, 'LR', 'vertices in (x > 0.999) & (y < 0.4)', 'facet')
    with pytest.raises(ConstraintError):
        match_periodic(square, dofmap, left, lower_right, [1.0, 0.0])
    with pytest.raises(ConstraintError):
        plane_translation(dofmap, left, right, 2)


def test_periodic_reduction_ties_matched_nodes(square):
    dofmap = _field_dofmap(square, 1)
    left, right = _sides(square)
    pairs = match_periodic(square, dofmap, left, right, [1.0, 0.0])
    red = build_reduction(dofmap.n_dofs, {}, pairs)
    assert red.n_reduced == dofmap.n_dofs - 4
    x = red.prolong(np.arange(red.n_reduced, dtype=np.float64))
    assert_array_equal(x[pairs[:, 0]], x[pairs[:, 1]])
