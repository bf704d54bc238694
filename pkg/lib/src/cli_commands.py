"""
CLI command implementations for homfem
"""

import dataclasses
import json
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

try:
    from .errors import ConfigError, annotate_phase
    from .homogenization import default_cache_path, run_engine
    from .logger import log_info, log_step, log_success, logger, summary
    from .problem import Problem, output_prefix, read_history, solve_declarative
    from .problem_dsl import ProblemConfig, parse_problem
    from .solvers import StepState
except ImportError:
    from errors import ConfigError, annotate_phase
    from homogenization import default_cache_path, run_engine
    from logger import log_info, log_step, log_success, logger, summary
    from problem import Problem, output_prefix, read_history, solve_declarative
    from problem_dsl import ProblemConfig, parse_problem
    from solvers import StepState


def _load_config(path: str) -> ProblemConfig:
    with annotate_phase('parse'):
        return parse_problem(Path(path))


def _report_history(history: Sequence[StepState]):
    for state in history:
        if state.report is None:
            summary(f"step.{state.step:04d}", f"t={state.time!r} initial")
            continue
        summary(f"step.{state.step:04d}",
                f"t={state.time!r} iterations={state.report.iterations} "
                f"residual={state.report.final_residual:.6e}")


def _report_outputs(files: Sequence[Path]):
    for path in files:
        summary('output', path)


def _format_values(value: np.ndarray) -> str:
    return json.dumps(np.asarray(value).tolist())


# ==================== simple ====================

def simple_command(config_path: str, output_dir: Optional[str] = None) -> int:
    """Solve a declarative problem and write its VTK series"""
    config = _load_config(config_path)
    logger.header(f"homfem simple: {config.name}")
    result = solve_declarative(config, Path(output_dir) if output_dir else None)
    summary('unknowns', ' '.join(result.problem.unknowns))
    summary('n_dofs', result.problem.n_dofs)
    _report_history(result.history)
    _report_outputs(result.output_files)
    return 0


# ==================== homogen ====================

def homogen_command(micro_path: str, workers: Optional[int] = None, cache: Optional[str] = None) -> int:
    """Run the homogenization engine on a micro config and cache its coefficients"""
    config = _load_config(micro_path)
    logger.header(f"homfem homogen: {config.name}")
    results = run_engine(config, workers)
    cache_path = Path(cache) if cache else default_cache_path(micro_path)
    results.to_cache(cache_path)

    rows = [(name, 'x'.join(str(n) for n in np.shape(value)) or 'scalar')
            for name, value in sorted(results.coefs.items())]
    logger.section("Coefficients")
    logger.table("Homogenized coefficients", ["name", "shape"], rows)
    summary('volume', repr(results.volume))
    for region, volume in sorted(results.part_volumes.items()):
        summary(f"volume.{region}", repr(volume))
    summary('n_solves', results.n_solves)
    for name, value in sorted(results.coefs.items()):
        summary(f"{name}.shape", list(np.shape(value)))
        summary(name, _format_values(value))
    summary('cache', cache_path)
    return 0


# ==================== macro ====================

def _override_homogenized(config: ProblemConfig, cache: Optional[str], phi: Optional[List[float]],
                          workers: Optional[int]) -> int:
    count = 0
    for name, mat in list(config.materials.items()):
        if mat.homogenized is None:
            continue
        spec = dict(mat.homogenized)
        if cache:
            spec['cache'] = str(Path(cache).resolve())
        if phi is not None:
            spec['phi'] = list(phi)
        if workers is not None:
            spec['workers'] = workers
        config.materials[name] = dataclasses.replace(mat, homogenized=spec)
        count += 1
    return count


def macro_command(macro_path: str, output_dir: Optional[str] = None, cache: Optional[str] = None,
                  phi: Optional[List[float]] = None, workers: Optional[int] = None) -> int:
    """Solve a macro problem whose materials come from the homogenization engine"""
    config = _load_config(macro_path)
    logger.header(f"homfem macro: {config.name}")
    if not _override_homogenized(config, cache, phi, workers):
        if cache or phi is not None:
            raise ConfigError(f"{macro_path}: no homogenized material to apply --cache/--phi to")
    result = solve_declarative(config, Path(output_dir) if output_dir else None, with_strain=True)
    summary('unknowns', ' '.join(result.problem.unknowns))
    summary('n_dofs', result.problem.n_dofs)
    _report_history(result.history)
    for name, values in result.problem.vertex_values(result.final.u).items():
        magnitude = np.linalg.norm(values.reshape((values.shape[0], -1)), axis=1)
        summary(f"{name}.max_magnitude", repr(float(magnitude.max(initial=0.0))))
    _report_outputs(result.output_files)
    return 0


# ==================== convert ====================

def convert_command(history_path: str, output_dir: Optional[str] = None, step: Optional[int] = None) -> int:
    """Rebuild VTK files from a state history file"""
    history = read_history(Path(history_path))
    if not history.get('config'):
        raise ConfigError(f"{history_path}: history does not name its problem file", phase='parse')
    config = _load_config(history['config'])
    with annotate_phase('assemble'):
        problem = Problem.from_config(config)
    layout = [(u['name'], u['offset'], u['n_dofs']) for u in history['unknowns']]
    expected = [(name, problem.layout.offsets[name], problem.layout.sizes[name])
                for name in problem.unknowns]
    if layout != expected:
        raise ConfigError(f"{history_path}: DOF layout {layout} does not match the problem "
                          f"{expected}", phase='parse')

    steps = history['steps']
    if step is not None:
        steps = [s for s in steps if s['step'] == step]
        if not steps:
            raise ConfigError(f"{history_path}: no step {step}")
    prefix = output_prefix(config, Path(output_dir) if output_dir else None)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    log_info(f"converting {len(steps)} steps of {history_path}", "OUTPUT")
    files = []
    with annotate_phase('output'):
        for s in steps:
            path = Path(f"{prefix}.{s['step']:04d}.vtk")
            problem.save_state(path, StepState(step=s['step'], time=s['time'], u=s['u']))
            log_step(f"wrote {path}", "OUTPUT")
            files.append(path)
    log_success(f"converted {len(files)} steps", "OUTPUT")
    _report_outputs(files)
    return 0
