import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from errors import EmptyRegionError, MeshError, MeshFormatError
from mesh_io import (Mesh, RegionSelector, assign_cell_groups, boundary_facets, generate_block_mesh,
                     read_vtk, read_vtk_data, select_region, write_vtk)


@pytest.fixture
def block3d():
    mesh = generate_block_mesh([1.0, 2.0, 1.0], [4, 3, 3], [0.5, 1.0, 0.5])
    return assign_cell_groups(mesh, [(1, [0.0, 0.0, 0.0], [0.34, 2.0, 1.0])])


# ==================== Construction ====================

def test_generate_block_mesh_counts_and_bounds():
    mesh = generate_block_mesh([0.1, 0.02, 0.02], [21, 3, 3], [0.05, 0.01, 0.01])
    assert mesh.dim == 3
    assert mesh.n_vertices == 21 * 3 * 3
    assert mesh.n_cells == 20 * 2 * 2
    assert mesh.volume_block[0] == 'hex8'
    assert_allclose(mesh.bounding_box(), [[0.0, 0.0, 0.0], [0.1, 0.02, 0.02]], atol=1e-15)
    assert_array_equal(mesh.cell_group_ids, 0)


@pytest.mark.parametrize('dims, shape, cell_type', [
    ([2.0], [5], 'line2'),
    ([1.0, 1.0], [3, 4], 'quad4'),
    ([1.0, 1.0, 1.0], [2, 2, 2], 'hex8'),
])
def test_generate_block_mesh_cell_types(dims, shape, cell_type):
    mesh = generate_block_mesh(dims, shape, [0.0] * len(dims))
    assert mesh.volume_block[0] == cell_type
    assert mesh.n_cells == int(np.prod([n - 1 for n in shape]))


def test_generate_block_mesh_rejects_bad_shape():
    with pytest.raises(MeshError):
        generate_block_mesh([1.0, 1.0], [1, 3], [0.0, 0.0])
    with pytest.raises(MeshError):
        generate_block_mesh([1.0, -1.0], [3, 3], [0.0, 0.0])
    with pytest.raises(MeshError):
        generate_block_mesh([1.0, 1.0], [3, 3], [0.0])


def test_mesh_is_immutable(block3d):
    with pytest.raises(ValueError):
        block3d.vertices[0, 0] = 5.0
    with pytest.raises(ValueError):
        block3d.cell_group_ids[0] = 7


def test_mesh_rejects_invalid_connectivity():
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(MeshError):
        Mesh(dim=2, vertices=vertices, cell_blocks=(('tri3', np.array([[0, 1, 3]])),),
             cell_group_ids=[0])
    with pytest.raises(MeshError):
        Mesh(dim=2, vertices=vertices, cell_blocks=(('tri3', np.array([[0, 1, 1]])),),
             cell_group_ids=[0])
    with pytest.raises(MeshError):
        Mesh(dim=2, vertices=vertices, cell_blocks=(('tri3', np.array([[0, 1, 2]])),),
             cell_group_ids=[0, 1])


def test_assign_cell_groups_later_boxes_win():
    mesh = generate_block_mesh([1.0, 1.0], [3, 3], [0.5, 0.5])
    grouped = assign_cell_groups(mesh, [(1, [0.0, 0.0], [1.0, 1.0]), (2, [0.0, 0.0], [0.5, 0.5])])
    centroids = grouped.cell_centroids()
    lower_left = (centroids[:, 0] < 0.5) & (centroids[:, 1] < 0.5)
    assert_array_equal(grouped.cell_group_ids[lower_left], 2)
    assert_array_equal(grouped.cell_group_ids[~lower_left], 1)
    assert_array_equal(mesh.cell_group_ids, 0)


# ==================== Boundary facets ====================

@pytest.mark.parametrize('shape', [[4, 3], [3, 5, 2], [4, 3, 3]])
def test_boundary_facet_count_of_structured_block(shape):
    mesh = generate_block_mesh([1.0] * len(shape), shape, [0.0] * len(shape))
    cells = [n - 1 for n in shape]
    if len(cells) == 2:
        expected = 2 * (cells[0] + cells[1])
    else:
        nx, ny, nz = cells
        expected = 2 * (ny * nz + nx * nz + nx * ny)
    assert boundary_facets(mesh).shape[0] == expected


def test_interior_facets_are_shared_by_two_cells(block3d):
    from mesh_io import CELL_TYPES

    cell_type, conn, _ = block3d.volume_block
    local = np.array(CELL_TYPES[cell_type].facets)
    facets = np.sort(conn[:, local].reshape((-1, local.shape[1])), axis=1)
    _, counts = np.unique(facets, axis=0, return_counts=True)
    assert set(counts.tolist()) == {1, 2}
    assert int(np.sum(counts == 1)) == boundary_facets(block3d).shape[0]


def test_boundary_facets_are_sorted_tuples(block3d):
    facets = boundary_facets(block3d)
    assert np.all(np.diff(facets, axis=1) > 0)
    assert np.all(np.diff(facets[:, 0]) >= 0)


# ==================== Regions ====================

def test_select_all_and_group_cells(block3d):
    everything = select_region(block3d, 'Omega', 'all')
    assert everything.kind == 'cell'
    assert len(everything) == block3d.n_cells

    group = select_region(block3d, 'Yc', 'cells of group 1')
    assert_array_equal(block3d.cell_group_ids[group.cells], 1)
    both = select_region(block3d, 'Y', 'cells of group 0, 1')
    assert len(both) == block3d.n_cells


def test_vertex_predicate_selection(block3d):
    region = select_region(block3d, 'Corner', 'vertices in (x < 0.001) & (y < 0.001) & (z < 0.001)')
    assert region.kind == 'vertex'
    assert_array_equal(region.entities, [0])

    either = select_region(block3d, 'Ends', 'vertices in (x < 0.001) | (x > 0.999)')
    coors = block3d.vertices[either.entities]
    assert np.all((coors[:, 0] < 0.001) | (coors[:, 0] > 0.999))
    assert len(either) == 2 * 3 * 3


def test_and_binds_tighter_than_or(block3d):
    a = select_region(block3d, 'a', 'vertices in (x < 0.001 | x > 0.999 & y < 0.001)')
    b = select_region(block3d, 'b', 'vertices in (x < 0.001) | ((x > 0.999) & (y < 0.001))')
    assert_array_equal(a.entities, b.entities)


def test_facet_region_from_predicate(block3d):
    left = select_region(block3d, 'Left', 'vertices in (x < 0.00001)', 'facet')
    assert left.kind == 'facet'
    assert len(left) == 2 * 2
    assert_allclose(block3d.vertices[left.vertices][:, 0], 0.0)


def test_vertices_of_group(block3d):
    region = select_region(block3d, 'Gamma', 'vertices of group 1')
    assert region.kind == 'vertex'
    assert np.all(block3d.vertices[region.entities][:, 0] <= 1.0 / 3.0 + 1e-12)


def test_select_region_is_idempotent(block3d):
    first = select_region(block3d, 'Right', 'vertices in (x > 0.999)', 'facet')
    second = select_region(block3d, 'Right', 'vertices in (x > 0.999)', 'facet')
    assert first.kind == second.kind
    assert_array_equal(first.entities, second.entities)


def test_predicate_tolerance_is_literal():
    mesh = generate_block_mesh([0.1], [11], [0.05])
    with pytest.raises(EmptyRegionError):
        select_region(mesh, 'Left', 'vertices in (x < 0.0)')
    assert len(select_region(mesh, 'Left', 'vertices in (x <= 0.0)')) == 1


def test_empty_and_malformed_selectors(block3d):
    with pytest.raises(EmptyRegionError):
        select_region(block3d, 'Nothing', 'cells of group 7')
    with pytest.raises(MeshError):
        select_region(block3d, 'Bad', 'vertices in (w < 1)')
    with pytest.raises(MeshError):
        select_region(block3d, 'Bad', 'vertices in ((x < 1)')
    with pytest.raises(MeshError):
        select_region(block3d, 'Bad', 'some cells')
    with pytest.raises(MeshError):
        RegionSelector.parse('cells of group 1', 'vertex')


def test_coordinate_missing_in_lower_dimension():
    mesh = generate_block_mesh([1.0, 1.0], [3, 3], [0.5, 0.5])
    with pytest.raises(MeshError):
        select_region(mesh, 'Top', 'vertices in (z > 0.5)')


# ==================== Legacy VTK ====================

def test_vtk_round_trip(tmp_path, block3d):
    path = tmp_path / 'block.vtk'
    u = block3d.vertices * 2.0
    p = block3d.vertices[:, 0] ** 2
    strain = np.linspace(0.0, 1.0, block3d.n_cells)
    write_vtk(path, block3d, point_data={'u': u, 'p': p}, cell_data={'strain': strain})

    mesh, point_data, cell_data = read_vtk_data(path)
    assert mesh.same_as(block3d)
    assert_allclose(point_data['u'], u, rtol=0, atol=0)
    assert_allclose(point_data['p'], p, rtol=0, atol=0)
    assert_allclose(cell_data['strain'], strain, rtol=0, atol=0)
    assert read_vtk(path).same_as(block3d)


def test_vtk_round_trip_2d_triangles(tmp_path):
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.3, 0.6]])
    conn = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    mesh = Mesh(dim=2, vertices=vertices, cell_blocks=(('tri3', conn),), cell_group_ids=[0, 1, 1, 2])
    path = tmp_path / 'tri.vtk'
    write_vtk(path, mesh, point_data={'v': vertices})

    back, point_data, _ = read_vtk_data(path)
    assert back.dim == 2
    assert back.same_as(mesh)
    assert point_data['v'].shape == (5, 2)


def test_vtk_reserved_and_mismatched_arrays(tmp_path, block3d):
    with pytest.raises(MeshError):
        write_vtk(tmp_path / 'x.vtk', block3d, cell_data={'mat_id': np.zeros(block3d.n_cells)})
    with pytest.raises(MeshError):
        write_vtk(tmp_path / 'x.vtk', block3d, point_data={'u': np.zeros(3)})


def test_read_vtk_rejects_malformed_files(tmp_path):
    path = tmp_path / 'bad.vtk'
    path.write_text("# vtk DataFile Version 3.0\nbad\nBINARY\nDATASET UNSTRUCTURED_GRID\n")
    with pytest.raises(MeshFormatError):
        read_vtk(path)

    path.write_text("# vtk DataFile Version 3.0\nbad\nASCII\nDATASET UNSTRUCTURED_GRID\n"
                    "POINTS 2 double\n0 0 0\n")
    with pytest.raises(MeshFormatError):
        read_vtk(path)

    path.write_text("# vtk DataFile Version 3.0\nbad\nASCII\nDATASET UNSTRUCTURED_GRID\n"
                    "POINTS 2 double\n0 0 0\n1 0 0\nCELLS 1 3\n2 0 1\nCELL_TYPES 1\n42\n")
    with pytest.raises(MeshFormatError):
        read_vtk(path)


def test_read_vtk_missing_file(tmp_path):
    with pytest.raises(MeshError):
        read_vtk(tmp_path / 'missing.vtk')
