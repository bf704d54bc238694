import pytest

from logger import (VERBOSITY_DEBUG, VERBOSITY_NORMAL, VERBOSITY_QUIET, log_debug, log_error, log_info,
                    log_step, log_warning, logger, set_verbosity, summary)


@pytest.fixture(autouse=True)
def restore_verbosity():
    yield
    set_verbosity(VERBOSITY_QUIET)


def test_summaries_go_to_stdout(capsys):
    summary('K.shape', [2, 2])
    log_error("bad input", "CONFIG")
    out, err = capsys.readouterr()
    assert out == 'K.shape = [2, 2]\n'
    assert 'ERROR: [CONFIG] bad input' in err


@pytest.mark.parametrize('level, shown', [
    (VERBOSITY_QUIET, ['WARNING']),
    (VERBOSITY_NORMAL, ['INFO', 'STEP', 'WARNING']),
    (VERBOSITY_DEBUG, ['INFO', 'STEP', 'WARNING', 'DEBUG']),
])
def test_verbosity_gates_diagnostics(capsys, level, shown):
    set_verbosity(level)
    log_info("a", "INFO")
    log_step("b", "STEP")
    log_warning("c", "WARNING")
    log_debug("d", "DEBUG")
    out, err = capsys.readouterr()
    assert out == ''
    assert [tag for tag in ('INFO', 'STEP', 'WARNING', 'DEBUG') if f"[{tag}]" in err] == shown


def test_header_and_table(capsys):
    set_verbosity(VERBOSITY_NORMAL)
    logger.header("homfem homogen: cell")
    logger.table("Homogenized coefficients", ["name", "shape"], [("K", "2x2")])
    out, err = capsys.readouterr()
    assert 'homfem homogen: cell' in err
    assert 'K' in out and '2x2' in out

    set_verbosity(VERBOSITY_QUIET)
    logger.header("hidden")
    assert 'hidden' not in capsys.readouterr().err
