import json
import shutil
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / 'lib' / 'src'))
sys.path.insert(0, str(ROOT / 'lib'))

from config_manager import load_jsonc  # noqa: E402
from logger import VERBOSITY_QUIET, set_verbosity  # noqa: E402


PROBLEMS_DIR = ROOT / 'share' / 'problems'


@pytest.fixture(autouse=True)
def quiet_logger():
    set_verbosity(VERBOSITY_QUIET)
    yield


@pytest.fixture
def problems_dir() -> Path:
    return PROBLEMS_DIR


def load_problem_data(name: str) -> dict:
    """Bundled problem file as plain data, comments stripped."""
    return load_jsonc(PROBLEMS_DIR / name)


def write_problem(directory: Path, name: str, data: dict) -> Path:
    path = directory / name
    path.write_text(json.dumps(data, indent=1), encoding='utf-8')
    return path


def copy_problems(directory: Path, *names: str) -> Path:
    for name in names:
        shutil.copy(PROBLEMS_DIR / name, directory / name)
    return directory


@pytest.fixture(scope='session')
def piezo_dir(tmp_path_factory) -> Path:
    """Private copies of the piezo micro and macro problems (caches land next to them)."""
    return copy_problems(tmp_path_factory.mktemp('piezo'), 'piezo_micro.json', 'piezo_macro.json')


@pytest.fixture(scope='session')
def piezo_results(piezo_dir):
    """One full engine run of the bundled piezo cell, cached at the default path."""
    from homogenization import homogenize
    set_verbosity(VERBOSITY_QUIET)
    return homogenize(piezo_dir / 'piezo_micro.json', n_workers=1)
