import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import load_problem_data
from errors import ConfigError, SingularMatrixError
from mesh_io import read_vtk_data
from problem import Problem, l2_error, read_history, solve_declarative
from problem_dsl import parse_problem_data


def laplace_bar(order=1, shape=(5, 3, 3)):
    """Steady conduction in a bar with the exact solution 2 - 40 x."""
    return {
        'mesh': {'generate': {'dims': [0.1, 0.02, 0.02], 'shape': list(shape),
                              'centre': [0.05, 0.01, 0.01]}},
        'regions': {
            'Omega': 'all',
            'Left': ['vertices in (x < 0.00001)', 'facet'],
            'Right': ['vertices in (x > 0.099999)', 'facet'],
        },
        'fields': {'temperature': ['real', 1, 'Omega', order]},
        'variables': {'u': ['unknown field', 'temperature', 0], 'v': ['test field', 'temperature', 'u']},
        'materials': {'m': {'c': 1e-5}},
        'functions': {'exact': '2 - 40 * x'},
        'ebcs': {'u1': ['Left', {'u.0': 'exact'}], 'u2': ['Right', {'u.0': -2.0}]},
        'integrals': {'i': 2 * order},
        'equations': {'Temperature': 'dw_laplace.i.Omega(m.c, v, u) = 0'},
    }


def elastic_square(strain_field):
    return {
        'mesh': {'generate': {'dims': [1.0, 1.0], 'shape': [4, 4]}},
        'regions': {
            'Omega': 'all',
            'Gamma': ['vertices in (x < 0.001) | (x > 0.999) | (y < 0.001) | (y > 0.999)', 'vertex'],
        },
        'fields': {'displacement': ['real', 'vector', 'Omega', 1]},
        'variables': {'u': ['unknown field', 'displacement', 0], 'v': ['test field', 'displacement', 'u']},
        'materials': {'solid': {'D': {'stiffness_from_youngpoisson': {'E': 10.0, 'nu': 0.3}}}},
        'functions': {'ux': strain_field[0], 'uy': strain_field[1]},
        'ebcs': {'boundary': ['Gamma', {'u.0': 'ux', 'u.1': 'uy'}]},
        'integrals': {'i': 2},
        'equations': {'balance': 'dw_lin_elastic.i.Omega(solid.D, v, u) = 0'},
    }


# ==================== Stationary solves ====================

@pytest.mark.parametrize('order', [1, 2])
def test_linear_temperature_is_reproduced(order):
    result = solve_declarative(parse_problem_data(laplace_bar(order)), write_output=False)
    problem = result.problem
    coors = problem.domain.variable_dofmap('u').node_coors
    assert len(result.history) == 1
    assert result.final.report.iterations == 1
    assert np.abs(result.final.u - (2.0 - 40.0 * coors[:, 0])).max() <= 1e-9
    assert l2_error(problem, result.final.u, 'u', lambda x: 2.0 - 40.0 * x[:, 0], 'Omega', 'i') <= 1e-10
    assert result.output_files == []


def test_uniform_strain_is_reproduced():
    result = solve_declarative(parse_problem_data(elastic_square(['0.01 * x + 0.03 * y', '-0.02 * y'])),
                               write_output=False)
    problem = result.problem
    vertices = problem.vertex_values(result.final.u)['u']
    coors = problem.domain.mesh.vertices
    assert_allclose(vertices[:, 0], 0.01 * coors[:, 0] + 0.03 * coors[:, 1], atol=1e-12)
    assert_allclose(vertices[:, 1], -0.02 * coors[:, 1], atol=1e-12)
    magnitude = problem.cell_strains(result.final.u)['u_strain_magnitude']
    assert_allclose(magnitude, np.linalg.norm([0.01, -0.02, 0.03]), rtol=1e-9)


def test_pure_neumann_problem_is_singular():
    data = laplace_bar()
    data['ebcs'] = {}
    data['ics'] = {'ic': ['Omega', {'u.0': 'exact'}]}
    with pytest.raises(SingularMatrixError) as info:
        solve_declarative(parse_problem_data(data), write_output=False)
    assert info.value.phase == 'solve'


def test_problem_needs_unknowns_and_parameters_by_name():
    data = laplace_bar()
    data['variables']['w'] = ['parameter field', 'temperature', 'u']
    problem = Problem.from_config(parse_problem_data(data))
    assert problem.unknowns == ['u']
    with pytest.raises(ConfigError):
        problem.set_parameter('v', np.zeros(problem.n_dofs))
    with pytest.raises(ConfigError):
        problem.set_parameter('w', np.zeros(3))
    problem.set_parameter('w', np.ones(problem.n_dofs))
    assert_array_equal(problem.parameters['w'], 1.0)


# ==================== Transient solves ====================

@pytest.fixture
def heat_config(tmp_path):
    data = load_problem_data('heat_cond.json')
    data['solvers']['ts'].update({'t1': 2.0, 'dt': 1.0})
    return parse_problem_data(data, base_dir=tmp_path, path=tmp_path / 'heat_cond.json')


def test_jacobian_is_derivative_of_residual(heat_config):
    problem = Problem.from_config(heat_config)
    rng = np.random.default_rng(1)
    u_prev = rng.standard_normal(problem.n_dofs)
    u = rng.standard_normal(problem.n_dofs)
    du = rng.standard_normal(problem.n_dofs)
    dt = 0.5
    J = problem.jacobian(u, 0.0, dt)
    delta = problem.residual(u + du, 0.0, u_prev, dt) - problem.residual(u, 0.0, u_prev, dt)
    assert_allclose(delta, J @ du, rtol=1e-10, atol=1e-12 * np.abs(delta).max())
    assert J.shape == (problem.n_dofs, problem.n_dofs)


def test_initial_state_follows_initial_condition(heat_config):
    problem = Problem.from_config(heat_config)
    u0 = problem.initial_state()
    x = problem.domain.variable_dofmap('u').node_coors[:, 0]
    assert_allclose(u0, 2.0 - 40.0 * x + np.sin(4 * np.pi * x / 0.1))


def test_transient_outputs_and_history(heat_config, tmp_path):
    result = solve_declarative(heat_config)
    names = sorted(p.name for p in result.output_files)
    assert names == ['heat_cond.0000.vtk', 'heat_cond.0001.vtk', 'heat_cond.0002.vtk',
                     'heat_cond.history.json']
    assert all(p.parent == tmp_path / 'output' for p in result.output_files)
    assert [s.step for s in result.history] == [0, 1, 2]

    # Essential values hold from the first stored state on
    problem = result.problem
    left = problem.domain.variable_dofmap('u').region_nodes(problem.domain.region('Left'))
    for state in result.history:
        assert_allclose(state.u[left], 2.0)

    history = read_history(tmp_path / 'output' / 'heat_cond.history.json')
    assert history['unknowns'] == [{'name': 'u', 'offset': 0, 'n_dofs': problem.n_dofs}]
    for stored, state in zip(history['steps'], result.history):
        assert stored['time'] == state.time
        assert_array_equal(stored['u'], state.u)

    mesh, point_data, cell_data = read_vtk_data(tmp_path / 'output' / 'heat_cond.0002.vtk')
    assert mesh.same_as(problem.domain.mesh)
    assert_array_equal(point_data['u'], problem.vertex_values(result.final.u)['u'])
    assert 'mat_id' not in cell_data


def test_material_cache_holds_one_time_level(heat_config):
    domain = Problem.from_config(heat_config).domain
    first = domain.material('m.c', 'Omega', 'i', 0.0)
    for t in (1.0, 2.0, 3.0):
        assert_array_equal(domain.material('m.c', 'Omega', 'i', t), first)
    assert list(domain._materials) == [('m', 'Omega', 'i', 3.0)]


def test_read_history_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_history(tmp_path / 'missing.history.json')
    bad = tmp_path / 'bad.history.json'
    bad.write_text('{"steps": [{"step": 0}]}')
    with pytest.raises(ConfigError):
        read_history(bad)
