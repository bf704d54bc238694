"""
Homogenization engine for homfem
Corrector problems and coefficient definitions on a periodic reference cell, run over a task graph
"""

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import psutil

try:
    from .discretization import DofMap, region_measure
    from .errors import ConfigError, EquationSyntaxError, HomfemError, annotate_phase
    from .logger import log_debug, log_info, log_step, log_success, log_warning
    from .mesh_io import Mesh
    from .problem import Problem, ProblemDomain
    from .problem_dsl import (EquationAst, EquationTerm, Expression, MaterialDef, ProblemConfig,
                              check_equation, parse_equation, parse_problem, parse_term_call)
    from .solvers import factorize
    from .task_graph import execute_graph, resolve_dependencies
    from .terms import TermCall, sym_pairs
except ImportError:
    from discretization import DofMap, region_measure
    from errors import ConfigError, EquationSyntaxError, HomfemError, annotate_phase
    from logger import log_debug, log_info, log_step, log_success, log_warning
    from mesh_io import Mesh
    from problem import Problem, ProblemDomain
    from problem_dsl import (EquationAst, EquationTerm, Expression, MaterialDef, ProblemConfig,
                             check_equation, parse_equation, parse_problem, parse_term_call)
    from solvers import factorize
    from task_graph import execute_graph, resolve_dependencies
    from terms import TermCall, sym_pairs


REQUIREMENT_CLASSES = ('ShapeDimDim', 'ShapeDim', 'CorrDimDim', 'CorrDim', 'CorrOne')
COEFFICIENT_CLASSES = ('CoefSymSym', 'CoefSym', 'CoefDimDim', 'CoefEval')
COEF_PREFIX = 'c.'
CACHE_FORMAT = 'homfem-coefs'
CACHE_VERSION = 1
HOMOGENIZED_KEYS = ('micro', 'cache', 'phi', 'workers')
POTENTIAL_COEF_RE = re.compile(r'^P(\d+)$')

Index = Tuple[int, ...]
CorrectorEntries = Dict[Index, Dict[str, np.ndarray]]


# ==================== Definitions ====================

@dataclass(frozen=True)
class Substitution:
    """Bind `target` to the sum of the `key` vectors of one or more sources"""

    target: str
    sources: Tuple[str, ...]
    key: str


@dataclass(frozen=True)
class RequirementDef:
    name: str
    cls: str
    requires: Tuple[str, ...] = ()
    variables: Tuple[str, ...] = ()
    equations: Dict[str, EquationAst] = field(default_factory=dict, compare=False, hash=False)
    ebcs: Tuple[str, ...] = ()
    epbcs: Tuple[str, ...] = ()
    set_variables: Tuple[Substitution, ...] = ()
    dump_variables: Tuple[str, ...] = ()


@dataclass(frozen=True)
class CoefficientDef:
    name: str
    cls: str
    requires: Tuple[str, ...]
    expression: str
    set_variables: Tuple[Substitution, ...] = ()
    volume: Optional[str] = None
    call: Optional[TermCall] = field(default=None, compare=False, hash=False)

    @property
    def node(self) -> str:
        return COEF_PREFIX + self.name


def _names(value, key_path: str) -> Tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,)
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{key_path}: expected a list of names")
    return tuple(value)


def _substitutions(value, key_path: str) -> Tuple[Substitution, ...]:
    out = []
    for n, item in enumerate(value or []):
        if not isinstance(item, (list, tuple)) or len(item) != 3:
            raise ConfigError(f"{key_path}[{n}]: expected [target, source(s), key]")
        target, sources, key = item
        out.append(Substitution(target=target, sources=_names(sources, f"{key_path}[{n}]"), key=key))
    return tuple(out)


def _parse_text(key_path: str, text, parser):
    if not isinstance(text, str):
        raise ConfigError(f"{key_path}: expected a string")
    try:
        return parser(text)
    except EquationSyntaxError as e:
        raise EquationSyntaxError(f"{key_path}: {e.detail}", text, e.position)


def _check_substitutions(config: ProblemConfig, key_path: str, subs: Sequence[Substitution],
                         requires: Sequence[str]):
    for sub in subs:
        var = config.variables.get(sub.target)
        if var is None or var.kind != 'parameter':
            raise ConfigError(f"{key_path}: set_variables target '{sub.target}' is not a parameter "
                              f"variable")
        for source in sub.sources:
            if source not in requires:
                raise ConfigError(f"{key_path}: substitution source '{source}' is not required")


def parse_requirements(config: ProblemConfig) -> Dict[str, RequirementDef]:
    """Corrector definitions of a micro config's `requirements` map."""
    defs = {}
    for name, raw in config.requirements.items():
        key_path = f"requirements.{name}"
        if not isinstance(raw, dict):
            raise ConfigError(f"{key_path}: expected a map")
        unknown = sorted(set(raw) - {'class', 'requires', 'variables', 'equations', 'ebcs', 'epbcs',
                                     'set_variables', 'dump_variables'})
        if unknown:
            raise ConfigError(f"{key_path}: unknown key '{unknown[0]}'")
        cls = raw.get('class')
        if cls not in REQUIREMENT_CLASSES:
            raise ConfigError(f"{key_path}: unknown requirement class '{cls}'")

        equations = {}
        for eq_name, text in (raw.get('equations') or {}).items():
            eq_path = f"{key_path}.equations.{eq_name}"
            equations[eq_name] = _parse_text(eq_path, text, parse_equation)
            check_equation(config, eq_path, equations[eq_name])

        rdef = RequirementDef(name=name, cls=cls, requires=_names(raw.get('requires'), key_path),
                              variables=_names(raw.get('variables'), key_path), equations=equations,
                              ebcs=_names(raw.get('ebcs'), key_path),
                              epbcs=_names(raw.get('epbcs'), key_path),
                              set_variables=_substitutions(raw.get('set_variables'),
                                                           f"{key_path}.set_variables"),
                              dump_variables=_names(raw.get('dump_variables'), key_path))
        if cls.startswith('Shape'):
            if len(rdef.variables) != 1 or rdef.variables[0] not in config.variables:
                raise ConfigError(f"{key_path}: {cls} needs exactly one defined variable")
        elif not equations:
            raise ConfigError(f"{key_path}: {cls} needs equations")
        for bc in rdef.ebcs:
            if bc not in config.ebcs:
                raise ConfigError(f"{key_path}: unknown ebc '{bc}'")
        for bc in rdef.epbcs:
            if bc not in config.epbcs:
                raise ConfigError(f"{key_path}: unknown epbc '{bc}'")
        _check_substitutions(config, key_path, rdef.set_variables, rdef.requires)
        for var in rdef.dump_variables:
            if var not in config.variables:
                raise ConfigError(f"{key_path}: unknown dump variable '{var}'")
        defs[name] = rdef
    return defs


def parse_coefficients(config: ProblemConfig) -> Dict[str, CoefficientDef]:
    """Coefficient definitions of a micro config's `coefs` map."""
    defs = {}
    for name, raw in config.coefs.items():
        key_path = f"coefs.{name}"
        if not isinstance(raw, dict):
            raise ConfigError(f"{key_path}: expected a map")
        unknown = sorted(set(raw) - {'class', 'requires', 'expression', 'set_variables', 'volume'})
        if unknown:
            raise ConfigError(f"{key_path}: unknown key '{unknown[0]}'")
        cls = raw.get('class')
        if cls not in COEFFICIENT_CLASSES:
            raise ConfigError(f"{key_path}: unknown coefficient class '{cls}'")
        if 'expression' not in raw:
            raise ConfigError(f"{key_path}: missing expression")
        requires = _names(raw.get('requires'), key_path)
        expression = raw['expression']

        call = None
        if cls == 'CoefEval':
            operands = _parse_text(f"{key_path}.expression", expression,
                                   lambda text: Expression(text, dotted_names=True)).names
            for operand in sorted(operands):
                if operand not in requires:
                    raise ConfigError(f"{key_path}: operand '{operand}' is not in requires")
        else:
            call = _parse_text(f"{key_path}.expression", expression, parse_term_call)
            check_equation(config, key_path, EquationAst(lhs=(EquationTerm(1, None, call),), rhs=()))
            if len(call.variables) != 2:
                raise ConfigError(f"{key_path}: {cls} needs a bilinear term")

        cdef = CoefficientDef(name=name, cls=cls, requires=requires, expression=expression,
                              set_variables=_substitutions(raw.get('set_variables'),
                                                           f"{key_path}.set_variables"),
                              volume=raw.get('volume'), call=call)
        _check_substitutions(config, key_path, cdef.set_variables, cdef.requires)
        if cdef.volume is not None and cdef.volume not in config.regions:
            raise ConfigError(f"{key_path}: unknown volume region '{cdef.volume}'")
        defs[name] = cdef
    return defs


def dependency_map(requirements: Mapping[str, RequirementDef],
                   coefficients: Mapping[str, CoefficientDef]) -> Dict[str, Tuple[str, ...]]:
    """Task graph nodes: requirement names and "c.<coefficient>" names."""
    requires = {name: rdef.requires for name, rdef in requirements.items()}
    requires.update({cdef.node: cdef.requires for cdef in coefficients.values()})
    return requires


# ==================== Correctors ====================

@dataclass
class CorrectorSet:
    """Stored vectors of one requirement, keyed by multi-index then variable"""

    name: str
    cls: str
    entries: CorrectorEntries
    n_solves: int = 0

    def entry(self, index: Index) -> Dict[str, np.ndarray]:
        # Singletons serve every index
        if () in self.entries:
            return self.entries[()]
        if index not in self.entries:
            raise ConfigError(f"corrector '{self.name}' ({self.cls}) has no entry for index {index}")
        return self.entries[index]

    def digest(self) -> str:
        h = hashlib.sha256()
        for index in sorted(self.entries):
            for var in sorted(self.entries[index]):
                h.update(repr((index, var)).encode('utf-8'))
                h.update(np.ascontiguousarray(self.entries[index][var], dtype='<f8').tobytes())
        return h.hexdigest()


def solved_indices(cls: str, dim: int) -> List[Index]:
    """Multi-indices a requirement class produces; CorrDimDim solves the sym pairs only."""
    if cls == 'ShapeDimDim':
        return [(i, j) for i in range(dim) for j in range(dim)]
    if cls == 'CorrDimDim':
        return list(sym_pairs(dim))
    if cls in ('ShapeDim', 'CorrDim'):
        return [(i,) for i in range(dim)]
    return [()]


def eval_shape_dim_dim(dofmap: DofMap, variable: str) -> CorrectorEntries:
    """Nodal data of Pi^ij with components Pi^ij_k(y) = y_j delta_ik for every pair (i, j)."""
    coors = dofmap.node_coors
    n_nodes, dim = coors.shape
    if dofmap.n_components != dim:
        raise ConfigError(f"ShapeDimDim needs a vector field, '{dofmap.field.name}' has "
                          f"{dofmap.n_components} component(s)")
    out = {}
    for i, j in solved_indices('ShapeDimDim', dim):
        data = np.zeros((n_nodes, dim))
        data[:, i] = coors[:, j]
        out[(i, j)] = {variable: data.ravel()}
    return out


def eval_shape_dim(dofmap: DofMap, variable: str) -> CorrectorEntries:
    """Nodal data of the scalar coordinate functions y_i."""
    if dofmap.n_components != 1:
        raise ConfigError(f"ShapeDim needs a scalar field, '{dofmap.field.name}' has "
                          f"{dofmap.n_components} components")
    coors = dofmap.node_coors
    return {(i,): {variable: coors[:, i].copy()} for i in range(coors.shape[1])}


def _substituted(sub: Substitution, inputs: Mapping[str, Any], index: Index, n_dofs: int,
                 key_path: str) -> np.ndarray:
    total = np.zeros(n_dofs)
    for source in sub.sources:
        correctors = inputs.get(source)
        if not isinstance(correctors, CorrectorSet):
            raise ConfigError(f"{key_path}: substitution source '{source}' is not a corrector")
        entry = correctors.entry(index)
        if sub.key not in entry:
            raise ConfigError(f"{key_path}: corrector '{source}' stores no '{sub.key}' "
                              f"(has {sorted(entry)})")
        values = entry[sub.key]
        if values.shape != (n_dofs,):
            raise ConfigError(f"{key_path}: '{source}.{sub.key}' has {values.shape[0]} values, "
                              f"'{sub.target}' needs {n_dofs}")
        total += values
    return total


def solve_corrector(rdef: RequirementDef, domain: ProblemDomain,
                    inputs: Mapping[str, Any]) -> CorrectorSet:
    """Solve one requirement for all of its multi-indices.

    The corrector systems are linear with a shared matrix: it is reduced and
    factorized once, then every index only changes the substituted data.
    """
    key_path = f"requirements.{rdef.name}"
    if rdef.cls == 'ShapeDimDim':
        var = rdef.variables[0]
        return CorrectorSet(rdef.name, rdef.cls, eval_shape_dim_dim(domain.variable_dofmap(var), var))
    if rdef.cls == 'ShapeDim':
        var = rdef.variables[0]
        return CorrectorSet(rdef.name, rdef.cls, eval_shape_dim(domain.variable_dofmap(var), var))

    cfg = domain.config.solvers
    t = cfg.ts.t0
    problem = Problem(domain=domain, equations=rdef.equations, ebcs=list(rdef.ebcs),
                      epbcs=list(rdef.epbcs), solver_config=cfg)
    dump = rdef.dump_variables or tuple(problem.unknowns)
    for var in dump:
        if var not in problem.unknowns:
            raise ConfigError(f"{key_path}: dump variable '{var}' is not an unknown of its equations")

    red = problem.reduction(t)
    P = red.prolongation
    zero = np.zeros(red.n_reduced)
    matrix = (P.T @ problem.jacobian(red.prolong(zero), t) @ P).tocsr()
    solve = factorize(matrix, cfg.linear)

    def residual(x):
        return P.T @ problem.residual(red.prolong(x), t)

    entries: CorrectorEntries = {}
    indices = solved_indices(rdef.cls, domain.dim)
    for index in indices:
        for sub in rdef.set_variables:
            n_dofs = domain.variable_dofmap(sub.target).n_dofs
            problem.set_parameter(sub.target, _substituted(sub, inputs, index, n_dofs, key_path))
        # One Newton step from zero is exact for these linear systems
        r0 = residual(zero)
        x = solve(-r0)
        parts = problem.split(red.prolong(x))
        entries[index] = {var: parts[var].copy() for var in dump}
        log_debug(f"{rdef.name}{list(index) if index else ''}: |r| {np.linalg.norm(r0):.3e} -> "
                  f"{np.linalg.norm(residual(x)):.3e}", "CORRECTOR")

    if rdef.cls == 'CorrDimDim':
        # e(Pi^ij) = e(Pi^ji): the transposed pairs share their corrector
        for i, j in indices:
            if i != j:
                entries[(j, i)] = entries[(i, j)]
    return CorrectorSet(rdef.name, rdef.cls, entries, n_solves=len(indices))


# ==================== Coefficients ====================

def coefficient_indices(cls: str, dim: int) -> List[Index]:
    if cls in ('CoefSymSym', 'CoefSym'):
        return list(sym_pairs(dim))
    return [(i,) for i in range(dim)]


def cell_volume(mesh: Mesh) -> float:
    """|Y|: volume of the bounding block, voids included."""
    lo, hi = mesh.bounding_box()
    return float(np.prod(hi - lo))


def _eval_coef_bilinear(cdef: CoefficientDef, domain: ProblemDomain, inputs: Mapping[str, Any],
                        volume: float) -> np.ndarray:
    # M is the term matrix, x binds the first variable argument and y the second
    key_path = f"coefs.{cdef.name}"
    call = cdef.call
    subs = {sub.target: sub for sub in cdef.set_variables}
    row_arg, col_arg = call.variables
    for arg in (row_arg, col_arg):
        if arg.name not in subs:
            raise ConfigError(f"{key_path}: variable '{arg.name}' is not bound by set_variables")

    matrix = domain.term_matrix(call, domain.config.solvers.ts.t0)
    n_rows, n_cols = matrix.shape
    indices = coefficient_indices(cdef.cls, domain.dim)
    X = np.column_stack([_substituted(subs[row_arg.name], inputs, I, n_rows, key_path)
                         for I in indices])
    Y = np.column_stack([_substituted(subs[col_arg.name], inputs, I, n_cols, key_path)
                         for I in indices])
    MY = matrix @ Y
    if cdef.cls == 'CoefSym':
        return np.einsum('ni,ni->i', X, MY) / volume
    return (X.T @ MY) / volume


def eval_coef_symsym(cdef: CoefficientDef, domain: ProblemDomain, inputs: Mapping[str, Any],
                     volume: float) -> np.ndarray:
    """CoefSymSym and CoefDimDim: matrix of x_I^T M y_J / volume over all index pairs."""
    if cdef.cls not in ('CoefSymSym', 'CoefDimDim'):
        raise ConfigError(f"coefs.{cdef.name}: {cdef.cls} is not a matrix coefficient")
    return _eval_coef_bilinear(cdef, domain, inputs, volume)


def eval_coef_sym(cdef: CoefficientDef, domain: ProblemDomain, inputs: Mapping[str, Any],
                  volume: float) -> np.ndarray:
    """CoefSym: vector of x_I^T M y_I / volume."""
    if cdef.cls != 'CoefSym':
        raise ConfigError(f"coefs.{cdef.name}: {cdef.cls} is not a vector coefficient")
    return _eval_coef_bilinear(cdef, domain, inputs, volume)


def eval_coef_eval(cdef: CoefficientDef, inputs: Mapping[str, Any]) -> np.ndarray:
    """Element-wise arithmetic over coefficient operands of equal shape (or scalars)."""
    key_path = f"coefs.{cdef.name}"
    expression = Expression(cdef.expression, dotted_names=True)
    env = {}
    shapes = set()
    for name in sorted(expression.names):
        value = inputs.get(name)
        if value is None or isinstance(value, CorrectorSet):
            raise ConfigError(f"{key_path}: operand '{name}' is not a computed coefficient")
        arr = np.asarray(value, dtype=np.float64)
        env[name] = arr
        if arr.ndim:
            shapes.add(arr.shape)
    if len(shapes) > 1:
        raise ConfigError(f"{key_path}: operand shapes {sorted(shapes)} do not match")
    return np.asarray(expression.evaluate(env), dtype=np.float64)


# ==================== Results and cache ====================

@dataclass
class HomogResults:
    """Coefficients and correctors of one engine run (correctors are not cached)"""

    coefs: Dict[str, np.ndarray]
    correctors: Dict[str, CorrectorEntries]
    volume: float
    part_volumes: Dict[str, float] = field(default_factory=dict)
    n_solves: int = 0
    config_digest: str = ''
    corrector_digests: Dict[str, str] = field(default_factory=dict)

    def to_cache(self, path: Union[str, Path]):
        """Write the coefficients atomically; floats round-trip exactly through repr."""
        path = Path(path)
        data = {
            'format': CACHE_FORMAT,
            'version': CACHE_VERSION,
            'config_digest': self.config_digest,
            'volume': self.volume,
            'part_volumes': self.part_volumes,
            'coefs': {name: {'shape': list(np.shape(value)),
                             'values': [float(v) for v in np.ravel(value)]}
                      for name, value in self.coefs.items()},
            'correctors': self.corrector_digests,
        }
        tmp = path.with_name(path.name + '.tmp')
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=1, sort_keys=True, allow_nan=False)
                f.write('\n')
            tmp.replace(path)
        except ValueError as e:
            raise HomfemError(f"cannot cache non-finite coefficients: {e}", phase='output')
        except OSError as e:
            raise HomfemError(f"cannot write coefficient cache {path}: {e}", phase='output')
        log_debug(f"wrote {path}", "CACHE")

    @classmethod
    def from_cache(cls, path: Union[str, Path],
                   config_digest: Optional[str] = None) -> Optional['HomogResults']:
        """Load a cache; None when it is missing, unreadable or made for another config."""
        path = Path(path)
        if not path.exists():
            return None
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
            if data.get('format') != CACHE_FORMAT or data.get('version') != CACHE_VERSION:
                log_warning(f"{path} is not a coefficient cache of this version", "CACHE")
                return None
            if config_digest is not None and data.get('config_digest') != config_digest:
                log_info(f"{path} was computed for another micro config", "CACHE")
                return None
            coefs = {name: np.array(entry['values'], dtype=np.float64).reshape(entry['shape'])
                     for name, entry in data['coefs'].items()}
            return cls(coefs=coefs, correctors={}, volume=float(data['volume']),
                       part_volumes={k: float(v) for k, v in data['part_volumes'].items()},
                       config_digest=data['config_digest'],
                       corrector_digests=dict(data['correctors']))
        except (OSError, ValueError, KeyError, TypeError, AttributeError) as e:
            log_warning(f"ignoring unreadable cache {path}: {e}", "CACHE")
            return None


def config_digest(config: ProblemConfig) -> str:
    """Digest of the canonical micro config data and the mesh file it reads."""
    h = hashlib.sha256()
    h.update(f"{CACHE_FORMAT}/{CACHE_VERSION}".encode('utf-8'))
    h.update(json.dumps(config.raw, sort_keys=True, separators=(',', ':')).encode('utf-8'))
    if config.mesh.filename is not None:
        mesh_path = config.resolve_path(str(config.mesh.filename))
        try:
            h.update(mesh_path.read_bytes())
        except OSError as e:
            raise ConfigError(f"cannot read mesh {mesh_path}: {e}")
    return h.hexdigest()


def default_cache_path(micro_path: Union[str, Path]) -> Path:
    micro_path = Path(micro_path)
    return micro_path.with_name(micro_path.stem + '.coefs.json')


# ==================== Engine ====================

class _Engine:
    """Task callbacks of one engine run; workers only read the shared definitions"""

    def __init__(self, config: ProblemConfig, domain: ProblemDomain,
                 requirements: Dict[str, RequirementDef], coefficients: Dict[str, CoefficientDef]):
        self.config = config
        self.domain = domain
        self.requirements = requirements
        self.coefficients = coefficients
        self.volume = cell_volume(domain.mesh)

    def coefficient_volume(self, cdef: CoefficientDef) -> float:
        if cdef.volume is None:
            return self.volume
        return region_measure(self.domain.mesh, self.domain.region(cdef.volume))

    def run_task(self, node: str, inputs: Mapping[str, Any]):
        if node.startswith(COEF_PREFIX):
            cdef = self.coefficients[node[len(COEF_PREFIX):]]
            if cdef.cls == 'CoefEval':
                value = eval_coef_eval(cdef, inputs)
            elif cdef.cls == 'CoefSym':
                value = eval_coef_sym(cdef, self.domain, inputs, self.coefficient_volume(cdef))
            else:
                value = eval_coef_symsym(cdef, self.domain, inputs, self.coefficient_volume(cdef))
            log_debug(f"{cdef.name}: shape {value.shape}", "COEF")
            return value
        return solve_corrector(self.requirements[node], self.domain, inputs)

    def part_volumes(self) -> Dict[str, float]:
        names = {fdef.region for fdef in self.config.fields.values()}
        names.update(cdef.call.region for cdef in self.coefficients.values() if cdef.call is not None)
        return {name: region_measure(self.domain.mesh, self.domain.region(name))
                for name in sorted(names)}


def run_engine(config: ProblemConfig, n_workers: Optional[int] = None,
               mesh: Optional[Mesh] = None) -> HomogResults:
    """Solve all correctors and evaluate all coefficients of a micro config.

    Args:
        n_workers: concurrent tasks (default: available CPUs)

    Raises:
        CycleError / DependencyError: broken requires
        EngineError: failed tasks, dependents reported as failed due to their failed requirement
    """
    with annotate_phase('parse'):
        requirements = parse_requirements(config)
        coefficients = parse_coefficients(config)
        if not coefficients:
            raise ConfigError("micro config defines no coefs")
        graph = resolve_dependencies(dependency_map(requirements, coefficients))
    n_workers = n_workers or psutil.cpu_count(logical=True) or 1
    log_info(f"{config.name}: {len(requirements)} correctors, {len(coefficients)} coefficients, "
             f"{n_workers} workers", "ENGINE")
    log_debug(f"schedule: {', '.join(graph.schedule)}", "ENGINE")

    with annotate_phase('assemble'):
        domain = ProblemDomain(config, mesh)
        engine = _Engine(config, domain, requirements, coefficients)
    with annotate_phase('solve'):
        results = execute_graph(graph, engine.run_task, n_workers)
        part_volumes = engine.part_volumes()

    correctors = {name: results[name] for name in requirements}
    out = HomogResults(coefs={name: results[cdef.node] for name, cdef in coefficients.items()},
                       correctors={name: cs.entries for name, cs in correctors.items()},
                       volume=engine.volume, part_volumes=part_volumes,
                       n_solves=sum(cs.n_solves for cs in correctors.values()),
                       config_digest=config_digest(config),
                       corrector_digests={name: cs.digest() for name, cs in correctors.items()})
    log_success(f"{len(out.coefs)} coefficients from {out.n_solves} corrector solves", "ENGINE")
    return out


def homogenize(micro_path: Union[str, Path], cache_path: Optional[Union[str, Path]] = None,
               n_workers: Optional[int] = None) -> HomogResults:
    """Cached engine run: reuse the cache when it matches the micro config, else compute and store."""
    micro_path = Path(micro_path)
    with annotate_phase('parse'):
        config = parse_problem(micro_path)
        digest = config_digest(config)
    cache_path = Path(cache_path) if cache_path is not None else default_cache_path(micro_path)
    cached = HomogResults.from_cache(cache_path, digest)
    if cached is not None:
        log_info(f"using cached coefficients {cache_path}", "CACHE")
        return cached
    results = run_engine(config, n_workers)
    results.to_cache(cache_path)
    log_step(f"cached coefficients in {cache_path}", "CACHE")
    return results


def get_homog_coefs_linear(micro_path: Union[str, Path], cache_path: Optional[Union[str, Path]] = None,
                           n_workers: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Homogenized coefficients of a linear micro problem; the same at every macro point."""
    return homogenize(micro_path, cache_path, n_workers).coefs


# ==================== Macro bridge ====================

def macro_material_bridge(coefs: Mapping[str, np.ndarray], phi: Sequence[float],
                          n_qp: int) -> Dict[str, np.ndarray]:
    """Macro material values per point: A and the prestress Pf = sum_k P^k phi_k.

    Returns:
        {'A': (n_qp, sym, sym), 'Pf': (n_qp, sym, 1)}
    """
    if 'A' not in coefs:
        raise ConfigError("homogenized coefficients have no 'A'")
    networks = [m for m in map(POTENTIAL_COEF_RE.match, coefs) if m]
    if len(phi) != len(networks):
        raise ConfigError(f"{len(phi)} conductor potentials given, coefficients define "
                          f"{len(networks)} conductor networks")
    A = np.asarray(coefs['A'], dtype=np.float64)
    Pf = np.zeros(A.shape[0])
    for k, value in enumerate(phi, 1):
        key = f"P{k}"
        if key not in coefs:
            raise ConfigError(f"homogenized coefficients have no '{key}'")
        Pf = Pf + np.asarray(coefs[key], dtype=np.float64) * float(value)
    return {'A': np.tile(A, (n_qp, 1, 1)), 'Pf': np.tile(Pf[:, np.newaxis], (n_qp, 1, 1))}


def homogenized_material(config: ProblemConfig, mat: MaterialDef, n_points: int) -> Dict[str, np.ndarray]:
    """Resolve a `{"homogenized": {...}}` material of a macro config."""
    spec = mat.homogenized
    key_path = f"materials.{mat.name}.homogenized"
    unknown = sorted(set(spec) - set(HOMOGENIZED_KEYS))
    if unknown:
        raise ConfigError(f"{key_path}: unknown key '{unknown[0]}'")
    if 'micro' not in spec:
        raise ConfigError(f"{key_path}: missing micro config")
    micro = config.resolve_path(str(spec['micro']))
    if not micro.exists():
        raise ConfigError(f"{key_path}: micro config not found: {micro}")
    cache = config.resolve_path(str(spec['cache'])) if spec.get('cache') else None
    phi = spec.get('phi', [])
    if not isinstance(phi, (list, tuple)):
        raise ConfigError(f"{key_path}: phi must be a list of potentials")
    coefs = get_homog_coefs_linear(micro, cache, spec.get('workers'))
    return macro_material_bridge(coefs, phi, n_points)
