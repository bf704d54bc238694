import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import load_problem_data, write_problem
from discretization import Field, build_dofmap
from errors import ConfigError, CycleError, DependencyError, EngineError, HomfemError
from homogenization import (CoefficientDef, CorrectorSet, HomogResults, config_digest, default_cache_path,
                            eval_coef_eval, eval_shape_dim, eval_shape_dim_dim, get_homog_coefs_linear, homogenize,
                            macro_material_bridge, parse_coefficients, parse_requirements, run_engine,
                            solved_indices)
from mesh_io import generate_block_mesh, select_region
from problem_dsl import parse_problem_data

LAYERED_K = np.diag([20.0 / 11.0, 5.5])


@pytest.fixture(scope='module')
def layered():
    return run_engine(parse_problem_data(load_problem_data('layered_micro.json')), n_workers=1)


# ==================== Engine results ====================

def test_layered_cell_conductivity(layered):
    assert_allclose(layered.coefs['K'], LAYERED_K, rtol=1e-10, atol=1e-12)
    assert layered.n_solves == 2
    assert layered.volume == 1.0
    assert_allclose(layered.part_volumes['Y'], 1.0, rtol=1e-12)


def test_layered_correctors(layered):
    assert sorted(layered.correctors['corrs']) == [(0,), (1,)]
    assert sorted(layered.correctors['pis']) == [(0,), (1,)]
    # No variation along the layers
    assert_allclose(layered.correctors['corrs'][(1,)]['p'], 0.0, atol=1e-10)
    assert np.abs(layered.correctors['corrs'][(0,)]['p']).max() > 1e-3
    assert sorted(layered.corrector_digests) == ['corrs', 'pis']


@pytest.mark.parametrize('n_workers', [2, 4])
def test_worker_count_does_not_change_results(layered, n_workers):
    again = run_engine(parse_problem_data(load_problem_data('layered_micro.json')), n_workers=n_workers)
    assert_array_equal(again.coefs['K'], layered.coefs['K'])
    assert again.corrector_digests == layered.corrector_digests


def test_coefficient_volume_region():
    data = load_problem_data('layered_micro.json')
    data['coefs']['K']['volume'] = 'Y2'
    results = run_engine(parse_problem_data(data), n_workers=1)
    assert_allclose(results.coefs['K'], 2.0 * LAYERED_K, rtol=1e-10, atol=1e-12)


def test_coef_eval_combines_coefficients():
    data = load_problem_data('layered_micro.json')
    data['coefs']['twice_K'] = {'class': 'CoefEval', 'requires': ['c.K'], 'expression': '2 * c.K - 0.5'}
    results = run_engine(parse_problem_data(data), n_workers=2)
    assert_allclose(results.coefs['twice_K'], 2.0 * results.coefs['K'] - 0.5)


# ==================== Engine failures ====================

def test_undefined_requirement_is_a_dependency_error():
    data = load_problem_data('layered_micro.json')
    data['coefs']['K']['requires'] = ['pis', 'corrs', 'omega']
    with pytest.raises(DependencyError) as info:
        run_engine(parse_problem_data(data), n_workers=1)
    assert info.value.phase == 'parse'


def test_cyclic_requirements():
    data = load_problem_data('layered_micro.json')
    data['requirements']['pis']['requires'] = ['c.K']
    with pytest.raises(CycleError):
        run_engine(parse_problem_data(data), n_workers=1)


def test_failed_task_fails_its_dependents():
    data = load_problem_data('layered_micro.json')
    data['requirements']['corrs']['set_variables'] = [['Pi', 'pis', 'u']]
    data['coefs']['area'] = {'class': 'CoefEval', 'requires': ['c.K'], 'expression': 'c.K'}
    with pytest.raises(EngineError) as info:
        run_engine(parse_problem_data(data), n_workers=2)
    failures = info.value.failures
    assert "stores no 'u'" in failures['corrs']
    assert failures['c.K'] == 'failed due to corrs'
    assert failures['c.area'] == 'failed due to corrs'
    assert 'pis' not in failures


# ==================== Definitions ====================

@pytest.mark.parametrize('edit', [
    lambda d: d['requirements']['pis'].__setitem__('class', 'ShapeSym'),
    lambda d: d['requirements']['pis'].__setitem__('variables', ['p', 'Pi']),
    lambda d: d['requirements']['corrs'].pop('equations'),
    lambda d: d['requirements']['corrs'].__setitem__('ebcs', ['clamped']),
    lambda d: d['requirements']['corrs'].__setitem__('epbcs', ['periodic_z']),
    lambda d: d['requirements']['corrs'].__setitem__('set_variables', [['q', 'pis', 'p']]),
    lambda d: d['requirements']['corrs'].__setitem__('set_variables', [['Pi', 'other', 'p']]),
    lambda d: d['requirements']['corrs'].__setitem__('set_variables', [['Pi', 'pis']]),
    lambda d: d['requirements']['corrs'].__setitem__('dump_variables', ['w']),
    lambda d: d['requirements']['corrs'].__setitem__('solver', 'direct'),
    lambda d: d['requirements']['corrs']['equations'].__setitem__('eq', 'dw_laplace.i.Y(m.c, q, p) = '),
])
def test_invalid_requirements(edit):
    data = load_problem_data('layered_micro.json')
    edit(data)
    with pytest.raises(ConfigError):
        parse_requirements(parse_problem_data(data))


@pytest.mark.parametrize('edit', [
    lambda d: d['coefs']['K'].__setitem__('class', 'CoefTensor'),
    lambda d: d['coefs']['K'].pop('expression'),
    lambda d: d['coefs']['K'].__setitem__('expression', 'dw_laplace.i.Y(m.c, P1, P2'),
    lambda d: d['coefs']['K'].__setitem__('expression', 'dw_laplace.i.Nowhere(m.c, P1, P2)'),
    lambda d: d['coefs']['K'].__setitem__('volume', 'Nowhere'),
    lambda d: d['coefs'].__setitem__('E', {'class': 'CoefEval', 'requires': [], 'expression': 'c.K'}),
])
def test_invalid_coefficients(edit):
    data = load_problem_data('layered_micro.json')
    edit(data)
    with pytest.raises(ConfigError):
        parse_coefficients(parse_problem_data(data))


def test_bundled_piezo_definitions():
    config = parse_problem_data(load_problem_data('piezo_micro.json'))
    requirements = parse_requirements(config)
    coefficients = parse_coefficients(config)
    assert requirements['omega_ij'].cls == 'CorrDimDim'
    assert requirements['omega_k1'].requires == ()
    assert coefficients['A'].cls == 'CoefEval'
    assert coefficients['P1_2'].call.name == 'dw_piezo_coupling'
    assert coefficients['A1'].set_variables[0].sources == ('omega_ij', 'pis_u')


# ==================== Shape functions ====================

def _dofmap(n_components):
    mesh = generate_block_mesh([2.0, 1.0], [3, 3], [1.0, 0.5])
    return build_dofmap(Field('f', n_components, select_region(mesh, 'Y', 'all'), 1), mesh)


def test_shape_dim_dim():
    dofmap = _dofmap(2)
    entries = eval_shape_dim_dim(dofmap, 'u')
    assert sorted(entries) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    coors = dofmap.node_coors
    values = entries[(0, 1)]['u'].reshape((-1, 2))
    assert_array_equal(values[:, 0], coors[:, 1])
    assert_array_equal(values[:, 1], 0.0)
    with pytest.raises(ConfigError):
        eval_shape_dim_dim(_dofmap(1), 'p')


def test_shape_dim():
    dofmap = _dofmap(1)
    entries = eval_shape_dim(dofmap, 'p')
    assert_array_equal(entries[(1,)]['p'], dofmap.node_coors[:, 1])
    with pytest.raises(ConfigError):
        eval_shape_dim(_dofmap(2), 'u')


def test_solved_indices():
    assert solved_indices('CorrDimDim', 3) == [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]
    assert len(solved_indices('ShapeDimDim', 3)) == 9
    assert solved_indices('CorrDim', 2) == [(0,), (1,)]
    assert solved_indices('CorrOne', 3) == [()]


def test_singleton_corrector_serves_every_index():
    single = CorrectorSet('omega_k1', 'CorrOne', {(): {'u': np.ones(3)}})
    assert single.entry((0, 1)) is single.entries[()]
    assert single.entry((2,)) is single.entries[()]
    indexed = CorrectorSet('corrs', 'CorrDim', {(0,): {'p': np.zeros(2)}})
    with pytest.raises(ConfigError):
        indexed.entry((1,))


def test_coef_eval_shape_mismatch():
    cdef = CoefficientDef(name='bad', cls='CoefEval', requires=('c.a', 'c.b'), expression='c.a + c.b')
    with pytest.raises(ConfigError):
        eval_coef_eval(cdef, {'c.a': np.ones((2, 2)), 'c.b': np.ones(3)})
    assert_allclose(eval_coef_eval(cdef, {'c.a': np.ones(3), 'c.b': 2.0}), [3.0, 3.0, 3.0])


# ==================== Cache ====================

def test_cache_round_trip(tmp_path, layered):
    path = tmp_path / 'cell.coefs.json'
    layered.to_cache(path)
    assert not (tmp_path / 'cell.coefs.json.tmp').exists()

    data = json.loads(path.read_text())
    assert list(data) == sorted(data)
    assert data['format'] == 'homfem-coefs'
    assert data['coefs']['K']['shape'] == [2, 2]

    loaded = HomogResults.from_cache(path, layered.config_digest)
    assert_array_equal(loaded.coefs['K'], layered.coefs['K'])
    assert loaded.correctors == {}
    assert loaded.corrector_digests == layered.corrector_digests
    assert loaded.part_volumes == layered.part_volumes


def test_cache_rejections(tmp_path, layered):
    path = tmp_path / 'cell.coefs.json'
    assert HomogResults.from_cache(path) is None

    layered.to_cache(path)
    assert HomogResults.from_cache(path, 'f' * 64) is None

    data = json.loads(path.read_text())
    data['version'] = 99
    path.write_text(json.dumps(data))
    assert HomogResults.from_cache(path) is None

    path.write_text('{"format": "homfem-coefs", "version": 1, "coefs": ')
    assert HomogResults.from_cache(path) is None


def test_non_finite_coefficients_are_not_cached(tmp_path):
    results = HomogResults(coefs={'A': np.array([np.nan])}, correctors={}, volume=1.0)
    with pytest.raises(HomfemError):
        results.to_cache(tmp_path / 'nan.coefs.json')


def test_homogenize_reuses_matching_cache(tmp_path):
    data = load_problem_data('layered_micro.json')
    micro = write_problem(tmp_path, 'layered.json', data)
    first = homogenize(micro, n_workers=1)
    cache = default_cache_path(micro)
    assert cache == tmp_path / 'layered.coefs.json'
    assert cache.exists()
    assert first.correctors

    second = homogenize(micro, n_workers=1)
    assert second.correctors == {}
    assert_array_equal(second.coefs['K'], first.coefs['K'])

    # Editing the micro config invalidates the cache
    data['materials']['m']['c']['Y2'] = 3.0
    write_problem(tmp_path, 'layered.json', data)
    third = homogenize(micro, n_workers=1)
    assert third.correctors
    assert_allclose(third.coefs['K'], np.diag([2 * 3.0 / 4.0, 2.0]), rtol=1e-10, atol=1e-12)


def test_config_digest_tracks_data():
    data = load_problem_data('layered_micro.json')
    first = config_digest(parse_problem_data(data))
    assert config_digest(parse_problem_data(load_problem_data('layered_micro.json'))) == first
    data['integrals']['i'] = 3
    assert config_digest(parse_problem_data(data)) != first


# ==================== Macro bridge ====================

def test_macro_material_bridge():
    A = np.arange(36.0).reshape((6, 6))
    coefs = {'A': A, 'P1': np.ones(6), 'P2': np.arange(6.0), 'A1': np.zeros((6, 6)), 'P1_1': np.ones(6)}
    out = macro_material_bridge(coefs, [2.0, -1.0], n_qp=5)
    assert out['A'].shape == (5, 6, 6)
    assert out['Pf'].shape == (5, 6, 1)
    assert_array_equal(out['A'][3], A)
    assert_allclose(out['Pf'][0, :, 0], 2.0 - np.arange(6.0))


def test_macro_material_bridge_errors():
    coefs = {'A': np.eye(6), 'P1': np.ones(6), 'P2': np.ones(6)}
    with pytest.raises(ConfigError):
        macro_material_bridge(coefs, [1.0], n_qp=1)
    with pytest.raises(ConfigError):
        macro_material_bridge({'P1': np.ones(6)}, [1.0], n_qp=1)
    with pytest.raises(ConfigError):
        macro_material_bridge({'A': np.eye(6), 'P2': np.ones(6)}, [1.0], n_qp=1)


def test_engine_runs_once_per_micro_config(tmp_path, monkeypatch):
    import homogenization

    calls = []
    engine = homogenization.run_engine

    def counting_engine(config, n_workers=None, mesh=None):
        calls.append(config.name)
        return engine(config, n_workers, mesh)

    monkeypatch.setattr(homogenization, 'run_engine', counting_engine)
    micro = write_problem(tmp_path, 'layered.json', load_problem_data('layered_micro.json'))
    first = get_homog_coefs_linear(micro, n_workers=1)
    second = get_homog_coefs_linear(micro, n_workers=1)
    assert len(calls) == 1
    assert_array_equal(second['K'], first['K'])

    get_homog_coefs_linear(micro, tmp_path / 'elsewhere.coefs.json', n_workers=1)
    assert len(calls) == 2


def test_bilinear_evaluators_check_the_class():
    from homogenization import eval_coef_sym, eval_coef_symsym

    cdef = CoefficientDef(name='A', cls='CoefEval', requires=(), expression='1')
    with pytest.raises(ConfigError):
        eval_coef_sym(cdef, None, {}, 1.0)
    with pytest.raises(ConfigError):
        eval_coef_symsym(cdef, None, {}, 1.0)
