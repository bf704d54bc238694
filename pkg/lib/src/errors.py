"""
Exception hierarchy for homfem
Every library error carries an optional phase tag (parse/assemble/solve/output)
"""

from contextlib import contextmanager
from typing import Dict, List, Optional


PHASES = ('parse', 'assemble', 'solve', 'output')


class HomfemError(Exception):
    """Base class of all homfem errors"""

    def __init__(self, message: str, phase: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.phase = phase

    def __str__(self):
        if self.phase:
            return f"[{self.phase}] {self.message}"
        return self.message


class ConfigError(HomfemError):
    """Invalid problem configuration"""


class DanglingReferenceError(ConfigError):
    """A name used in the configuration is not defined"""

    def __init__(self, key_path: str, name: str, kind: str):
        super().__init__(f"{key_path}: unknown {kind} '{name}'")
        self.key_path = key_path
        self.name = name
        self.kind = kind


class EquationSyntaxError(ConfigError):
    """Malformed equation or expression string"""

    def __init__(self, message: str, text: str = '', position: int = 0):
        line = text.count('\n', 0, position) + 1
        column = position - (text.rfind('\n', 0, position) + 1) + 1
        super().__init__(f"{message} (line {line}, column {column})")
        self.detail = message
        self.text = text
        self.position = position
        self.line = line
        self.column = column


class MeshError(HomfemError):
    """Invalid mesh or region request"""


class MeshFormatError(MeshError):
    """Malformed mesh file"""


class EmptyRegionError(MeshError):
    """A region selector matched no entities"""


class DiscretizationError(HomfemError):
    """Unsupported element, quadrature or field setup"""


class InvertedCellError(DiscretizationError):
    """A cell has a non-positive Jacobian determinant"""


class TermError(HomfemError):
    """Invalid term call or material data"""


class ConstraintError(HomfemError):
    """Contradictory or unresolvable boundary conditions"""


class SolverError(HomfemError):
    """Linear or nonlinear solver failure"""


class SingularMatrixError(SolverError):
    """The system matrix is singular"""


class ConvergenceError(SolverError):
    """An iterative process ran out of budget"""

    def __init__(self, message: str, iterations: int = 0, residual: float = float('nan')):
        super().__init__(f"{message} (iterations: {iterations}, residual: {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class DependencyError(HomfemError):
    """Broken dependency declaration in the homogenization task graph"""


class CycleError(DependencyError):
    """The task graph contains a cycle"""

    def __init__(self, cycle: List[str]):
        super().__init__(f"dependency cycle: {' -> '.join(cycle)}")
        self.cycle = list(cycle)


class EngineError(HomfemError):
    """One or more homogenization tasks failed"""

    def __init__(self, failures: Dict[str, str]):
        lines = [f"{name}: {reason}" for name, reason in sorted(failures.items())]
        super().__init__("homogenization failed:\n  " + "\n  ".join(lines), phase='solve')
        self.failures = dict(failures)


@contextmanager
def annotate_phase(phase: str):
    """Tag HomfemErrors raised in the block with a phase, keeping an existing tag"""
    try:
        yield
    except HomfemError as e:
        if e.phase is None:
            e.phase = phase
        raise
