"""
Configuration manager for homfem
Loads JSONC problem files and merges solver settings over the defaults
"""

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

try:
    from .errors import ConfigError
except ImportError:
    from errors import ConfigError


def strip_jsonc(text: str) -> str:
    """Strip // and /* */ comments from JSONC while preserving strings and line numbers."""
    result = []
    i = 0
    in_str = False
    esc = False
    in_line = False
    in_block = False
    n = len(text)

    while i < n:
        ch = text[i]
        nxt = text[i + 1] if i + 1 < n else ""

        if in_line:
            if ch == "\n":
                in_line = False
                result.append(ch)
            i += 1
            continue

        if in_block:
            if ch == "*" and nxt == "/":
                in_block = False
                i += 2
            else:
                # Keep newlines so decoder errors point at the original line
                if ch == "\n":
                    result.append(ch)
                i += 1
            continue

        if not in_str:
            if ch == "/" and nxt == "/":
                in_line = True
                i += 2
                continue
            if ch == "/" and nxt == "*":
                in_block = True
                i += 2
                continue

        if ch == '"' and not esc:
            in_str = not in_str

        if ch == "\\" and in_str:
            esc = not esc
        else:
            esc = False

        result.append(ch)
        i += 1

    return "".join(result)


def load_jsonc(path: Path) -> Dict[str, Any]:
    """Load a JSONC file; an empty file yields an empty map."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            stripped = strip_jsonc(f.read())
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}", phase='parse')
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}", phase='parse')

    if not stripped.strip():
        return {}
    try:
        data = json.loads(stripped)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: syntax error: {e.msg} (line {e.lineno}, column {e.colno})",
                          phase='parse')
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a map", phase='parse')
    return data


@dataclass(frozen=True)
class LinearSolverConfig:
    method: str = 'auto'
    dense_threshold: int = 2000
    max_iterations: int = 10000
    rtol: float = 1e-12
    atol: float = 1e-30


@dataclass(frozen=True)
class NewtonConfig:
    i_max: int = 20
    eps_a: float = 1e-10
    eps_r: float = 1e-8
    ls_red: float = 0.5
    ls_min: float = 1e-6


@dataclass(frozen=True)
class TimeSteppingConfig:
    kind: str = 'auto'
    t0: float = 0.0
    t1: float = 1.0
    dt: float = 0.1

    @property
    def n_step(self) -> int:
        return max(1, int(round((self.t1 - self.t0) / self.dt)))


@dataclass(frozen=True)
class SolverConfig:
    linear: LinearSolverConfig
    newton: NewtonConfig
    ts: TimeSteppingConfig


class ConfigManager:
    """Manages solver settings: defaults merged with a problem's `solvers` section"""

    def __init__(self, settings: Optional[Dict[str, Any]] = None):
        # Default configuration values
        self.default_config = {
            'linear': {
                'method': 'auto',        # "auto" | "direct" | "iterative"
                'dense_threshold': 2000, # dense LU below this many DOFs
                'max_iterations': 10000,
                'rtol': 1e-12,
                'atol': 1e-30,
            },
            'newton': {
                'i_max': 20,
                'eps_a': 1e-10,
                'eps_r': 1e-8,
                'ls_red': 0.5,           # backtracking shrink factor
                'ls_min': 1e-6,          # smallest allowed step length
            },
            'ts': {
                'kind': 'auto',          # "auto" | "stationary" | "simple"
                't0': 0.0,
                't1': 1.0,
                'dt': 0.1,
            },
        }

        self.config = copy.deepcopy(self.default_config)
        if settings:
            self.update(settings)

    def update(self, settings: Dict[str, Any]):
        """Merge a `solvers` section over the current settings"""
        for group, values in settings.items():
            if group not in self.default_config:
                raise ConfigError(f"solvers: unknown solver group '{group}'")
            if not isinstance(values, dict):
                raise ConfigError(f"solvers.{group}: expected a map")
            for key, value in values.items():
                if key not in self.default_config[group]:
                    raise ConfigError(f"solvers.{group}: unknown setting '{key}'")
                self.config[group][key] = value

    def solver_config(self) -> SolverConfig:
        """Build the validated, immutable solver configuration"""
        lin = self.config['linear']
        nls = self.config['newton']
        ts = self.config['ts']
        try:
            linear = LinearSolverConfig(
                method=str(lin['method']),
                dense_threshold=int(lin['dense_threshold']),
                max_iterations=int(lin['max_iterations']),
                rtol=float(lin['rtol']),
                atol=float(lin['atol']),
            )
            newton = NewtonConfig(
                i_max=int(nls['i_max']),
                eps_a=float(nls['eps_a']),
                eps_r=float(nls['eps_r']),
                ls_red=float(nls['ls_red']),
                ls_min=float(nls['ls_min']),
            )
            stepping = TimeSteppingConfig(
                kind=str(ts['kind']),
                t0=float(ts['t0']),
                t1=float(ts['t1']),
                dt=float(ts['dt']),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"solvers: invalid value: {e}")

        if linear.method not in ('auto', 'direct', 'iterative'):
            raise ConfigError(f"solvers.linear.method: unknown method '{linear.method}'")
        if linear.rtol <= 0 or linear.atol <= 0 or newton.eps_a <= 0 or newton.eps_r <= 0:
            raise ConfigError("solvers: tolerances must be positive")
        if not 0.0 < newton.ls_red < 1.0:
            raise ConfigError("solvers.newton.ls_red must lie in (0, 1)")
        if newton.ls_min <= 0 or newton.i_max < 1:
            raise ConfigError("solvers.newton: ls_min and i_max must be positive")
        if stepping.kind not in ('auto', 'stationary', 'simple'):
            raise ConfigError(f"solvers.ts.kind: unknown time stepper '{stepping.kind}'")
        if stepping.dt <= 0:
            raise ConfigError("solvers.ts.dt must be positive")
        if stepping.kind == 'simple' and stepping.t1 <= stepping.t0:
            raise ConfigError("solvers.ts: t1 must exceed t0")

        return SolverConfig(linear=linear, newton=newton, ts=stepping)


def default_solver_config() -> SolverConfig:
    return ConfigManager().solver_config()
