import re

import pytest

from cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from conftest import load_problem_data, write_problem
from logger import VERBOSITY_QUIET, set_verbosity


def _summaries(text):
    return dict(re.findall(r'^(\S+) = (.*)$', text, flags=re.MULTILINE))


@pytest.fixture(autouse=True)
def restore_verbosity():
    yield
    set_verbosity(VERBOSITY_QUIET)


# ==================== Usage ====================

def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(['solve', 'x.json']) == EXIT_USAGE
    assert main(['homogen', 'x.json', '--workers', '0']) == EXIT_USAGE
    assert main(['simple', str(tmp_path / 'missing.json')]) == EXIT_USAGE


def test_broken_dependencies_are_usage_errors(tmp_path):
    data = load_problem_data('layered_micro.json')
    data['coefs']['K']['requires'].append('omega')
    assert main(['homogen', str(write_problem(tmp_path, 'cell.json', data))]) == EXIT_USAGE


def test_solver_failures_exit_with_failure(tmp_path):
    data = load_problem_data('heat_cond.json')
    data['ebcs'] = {}
    data['equations'] = {'Temperature': 'dw_laplace.i.Omega(m.c, v, u) = 0'}
    data.pop('solvers')
    assert main(['simple', str(write_problem(tmp_path, 'heat.json', data))]) == EXIT_FAILURE


# ==================== Commands ====================

def test_homogen_prints_coefficients(tmp_path, capsys):
    micro = write_problem(tmp_path, 'cell.json', load_problem_data('layered_micro.json'))
    assert main(['homogen', str(micro), '--workers', '2']) == EXIT_OK
    values = _summaries(capsys.readouterr().out)
    assert values['n_solves'] == '2'
    assert values['K.shape'] == '[2, 2]'
    assert values['volume'] == '1.0'
    assert values['cache'] == str(tmp_path / 'cell.coefs.json')
    assert (tmp_path / 'cell.coefs.json').exists()


def test_simple_then_convert(tmp_path, capsys):
    data = load_problem_data('heat_cond.json')
    data['solvers']['ts'].update({'t1': 2.0, 'dt': 1.0})
    config = write_problem(tmp_path, 'heat_cond.json', data)
    assert main(['simple', str(config)]) == EXIT_OK
    values = _summaries(capsys.readouterr().out)
    assert values['unknowns'] == 'u'
    assert values['step.0000'] == 't=0.0 initial'
    assert values['step.0002'].startswith('t=2.0 iterations=1 ')
    history = tmp_path / 'output' / 'heat_cond.history.json'
    assert history.exists()

    converted = tmp_path / 'converted'
    assert main(['convert', str(history), '--output-dir', str(converted), '--step', '1']) == EXIT_OK
    assert sorted(p.name for p in converted.iterdir()) == ['heat_cond.0001.vtk']
    assert main(['convert', str(history), '--output-dir', str(converted), '--step', '7']) == EXIT_USAGE


def test_macro_with_potentials(piezo_dir, piezo_results, tmp_path, capsys):
    macro = piezo_dir / 'piezo_macro.json'
    assert main(['macro', str(macro), '--output-dir', str(tmp_path)]) == EXIT_OK
    loaded = float(_summaries(capsys.readouterr().out)['u.max_magnitude'])
    assert loaded > 0.0
    assert (tmp_path / 'piezo_macro.vtk').exists()

    assert main(['macro', str(macro), '--output-dir', str(tmp_path), '--phi', '0', '0']) == EXIT_OK
    assert float(_summaries(capsys.readouterr().out)['u.max_magnitude']) == 0.0

    assert main(['macro', str(macro), '--output-dir', str(tmp_path), '--phi', '1.0']) == EXIT_USAGE
