"""
Assembled problems for homfem
Builds the discrete domain of a ProblemConfig, assembles residuals and Jacobians, and drives solves
"""

import json
import threading
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

try:
    from .config_manager import SolverConfig
    from .constraints import (PLANE_MATCHERS, ConstraintReduction, build_reduction, match_periodic,
                              parse_dof_spec, plane_translation)
    from .discretization import (DofMap, Field, RefMapping, UNBOUND_SOURCE, Variable, build_dofmap,
                                 build_mapping, eval_field_qp, get_quadrature)
    from .errors import ConfigError, HomfemError, MeshError, annotate_phase
    from .logger import log_debug, log_info, log_success
    from .mesh_io import Mesh, Region, assign_cell_groups, generate_block_mesh, read_vtk, select_region, \
        write_vtk
    from .problem_dsl import EquationAst, ProblemConfig, resolve_ics, resolve_materials
    from .solvers import StepState, run_implicit, run_stationary
    from .terms import SparseSystem, assemble, eval_strain, eval_term_blocks, eval_term_local
except ImportError:
    from config_manager import SolverConfig
    from constraints import (PLANE_MATCHERS, ConstraintReduction, build_reduction, match_periodic,
                             parse_dof_spec, plane_translation)
    from discretization import (DofMap, Field, RefMapping, UNBOUND_SOURCE, Variable, build_dofmap,
                                build_mapping, eval_field_qp, get_quadrature)
    from errors import ConfigError, HomfemError, MeshError, annotate_phase
    from logger import log_debug, log_info, log_success
    from mesh_io import Mesh, Region, assign_cell_groups, generate_block_mesh, read_vtk, select_region, \
        write_vtk
    from problem_dsl import EquationAst, ProblemConfig, resolve_ics, resolve_materials
    from solvers import StepState, run_implicit, run_stationary
    from terms import SparseSystem, assemble, eval_strain, eval_term_blocks, eval_term_local


def load_mesh(config: ProblemConfig) -> Mesh:
    """Read or generate the mesh named by the config's mesh source."""
    source = config.mesh
    if source.filename is not None:
        mesh = read_vtk(config.resolve_path(str(source.filename)))
    else:
        mesh = generate_block_mesh(source.dims, source.shape, source.centre, name=config.name)
        if source.groups:
            mesh = assign_cell_groups(mesh, source.groups)
    log_info(f"mesh '{mesh.name}': {mesh.n_vertices} vertices, {mesh.n_cells} cells, dim {mesh.dim}",
             "MESH")
    return mesh


class ProblemDomain:
    """Regions, fields, DOF maps and cached mappings/materials of one config over one mesh.

    Caches are guarded by a lock so several problems (engine workers) can share a domain.
    """

    def __init__(self, config: ProblemConfig, mesh: Optional[Mesh] = None):
        self.config = config
        self.mesh = mesh if mesh is not None else load_mesh(config)
        self.dim = self.mesh.dim
        self._lock = threading.RLock()
        self._regions: Dict[str, Region] = {}
        self._fields: Dict[str, Field] = {}
        self._dofmaps: Dict[str, DofMap] = {}
        self._mappings: Dict[Tuple[str, str, str], RefMapping] = {}
        self._materials: Dict[Tuple[str, str, str, float], Dict[str, np.ndarray]] = {}

    # ----- discrete objects -----

    def region(self, name: str) -> Region:
        with self._lock:
            if name not in self._regions:
                rdef = self.config.regions.get(name)
                if rdef is None:
                    raise ConfigError(f"unknown region '{name}'")
                self._regions[name] = select_region(self.mesh, name, rdef.selector, rdef.kind)
                log_debug(f"region {name}: {len(self._regions[name])} {self._regions[name].kind} "
                          f"entities", "MESH")
            return self._regions[name]

    @property
    def regions(self) -> Mapping[str, Region]:
        return _RegionView(self)

    def field(self, name: str) -> Field:
        with self._lock:
            if name not in self._fields:
                fdef = self.config.fields[name]
                self._fields[name] = Field(name=name, n_components=fdef.components(self.dim),
                                           region=self.region(fdef.region), order=fdef.order,
                                           dtype=fdef.dtype)
            return self._fields[name]

    def dofmap(self, field_name: str) -> DofMap:
        with self._lock:
            if field_name not in self._dofmaps:
                self._dofmaps[field_name] = build_dofmap(self.field(field_name), self.mesh)
            return self._dofmaps[field_name]

    def variable(self, name: str) -> Variable:
        var = self.config.variables.get(name)
        if var is None:
            raise ConfigError(f"unknown variable '{name}'")
        return var

    def variable_dofmap(self, name: str) -> DofMap:
        return self.dofmap(self.variable(name).field)

    def field_mapping(self, field_name: str, region: str, integral: str) -> RefMapping:
        key = (field_name, region, integral)
        with self._lock:
            if key not in self._mappings:
                order = self.config.integrals.get(integral)
                if order is None:
                    raise ConfigError(f"unknown integral '{integral}'")
                cell_type = self.mesh.volume_block[0]
                self._mappings[key] = build_mapping(self.mesh, self.region(region), self.field(field_name),
                                                    get_quadrature(cell_type, order),
                                                    self.dofmap(field_name))
            return self._mappings[key]

    def mapping(self, variable: str, region: str, integral: str) -> RefMapping:
        return self.field_mapping(self.variable(variable).field, region, integral)

    def material(self, path: str, region: str, integral: str, t: float = 0.0) -> np.ndarray:
        name, _, param = path.partition('.')
        key = (name, region, integral, t)
        with self._lock:
            values = self._materials.get(key)
            if values is None:
                geometry = self._geometry_mapping(region, integral)
                values = resolve_materials(self.config, t, geometry.qp_coors, cells=geometry.cells,
                                           regions=self.regions, names=[name])
                # Keep only the current time level per material and quadrature
                for stale in [k for k in self._materials if k[:3] == key[:3]]:
                    del self._materials[stale]
                self._materials[key] = values
        if path not in values:
            raise ConfigError(f"material '{name}' has no parameter '{param}'")
        return values[path]

    def _geometry_mapping(self, region: str, integral: str) -> RefMapping:
        # Quadrature points only depend on the geometry; any field covering the region will do
        for (field_name, reg, integ), mapping in self._mappings.items():
            if reg == region and integ == integral:
                return mapping
        target = self.region(region)
        for field_name in self.config.fields:
            if np.isin(target.cells, self.field(field_name).region.cells).all():
                return self.field_mapping(field_name, region, integral)
        raise ConfigError(f"no field covers region '{region}'")

    # ----- term evaluation with bound values -----

    def evaluate(self, call, values: Dict[str, np.ndarray], t: float = 0.0) -> float:
        """Integral value of a term with every variable bound."""
        blocks = eval_term_local(call, 'eval', _Evaluation(self, values, None, t))
        return float(np.sum(blocks.values))

    def term_matrix(self, call, t: float = 0.0) -> csr_matrix:
        """Global matrix of a bilinear term: rows over the first variable argument's DOFs,
        columns over the second's."""
        blocks = eval_term_blocks(call, _Evaluation(self, {}, None, t))
        if blocks.col_variable is None:
            raise ConfigError(f"{call}: expected a bilinear term")
        n_rows = self.variable_dofmap(blocks.row_variable).n_dofs
        n_cols = self.variable_dofmap(blocks.col_variable).n_dofs
        shape = blocks.values.shape
        rows = np.broadcast_to(blocks.row_dofs[:, :, None], shape).ravel()
        cols = np.broadcast_to(blocks.col_dofs[:, None, :], shape).ravel()
        return coo_matrix((blocks.values.ravel(), (rows, cols)), shape=(n_rows, n_cols)).tocsr()


class _RegionView(Mapping):
    """Read-only name -> Region view selecting regions on first access"""

    def __init__(self, domain: ProblemDomain):
        self._domain = domain

    def __getitem__(self, name: str) -> Region:
        if name not in self._domain.config.regions:
            raise KeyError(name)
        return self._domain.region(name)

    def __iter__(self):
        return iter(self._domain.config.regions)

    def __len__(self):
        return len(self._domain.config.regions)


class _Evaluation:
    """Term context binding a domain to the variable values of one evaluation"""

    def __init__(self, domain: ProblemDomain, values: Dict[str, np.ndarray],
                 rates: Optional[Dict[str, np.ndarray]] = None, t: float = 0.0):
        self.domain = domain
        self.dim = domain.dim
        self._values = values
        self._rates = rates or {}
        self.t = t

    def variable(self, name: str) -> Variable:
        return self.domain.variable(name)

    def mapping(self, variable: str, region: str, integral: str) -> RefMapping:
        return self.domain.mapping(variable, region, integral)

    def material(self, path: str, region: str, integral: str) -> np.ndarray:
        return self.domain.material(path, region, integral, self.t)

    def values(self, variable: str, derivative: bool = False) -> np.ndarray:
        source = self._rates if derivative else self._values
        if variable not in source:
            what = 'rate' if derivative else 'values'
            raise ConfigError(f"no {what} bound for variable '{variable}'")
        return source[variable]


@dataclass
class Problem:
    """Equations with constraints over a domain; satisfies the SteppableProblem protocol"""

    domain: ProblemDomain
    equations: Dict[str, EquationAst]
    ebcs: Sequence[str]
    epbcs: Sequence[str]
    solver_config: SolverConfig
    parameters: Dict[str, np.ndarray] = field(default_factory=dict)
    ebc_values: Dict[str, Dict[str, object]] = field(default_factory=dict)

    def __post_init__(self):
        config = self.domain.config
        used = []
        for ast in self.equations.values():
            for call in ast.calls:
                for arg in call.variables:
                    var = self.domain.variable(arg.name)
                    name = var.primary if var.kind == 'test' else arg.name
                    if self.domain.variable(name).kind == 'unknown' and name not in used:
                        used.append(name)
        if not used:
            raise ConfigError("equations have no unknown variables")
        self.unknowns: List[str] = sorted(used, key=lambda n: (config.variables[n].order, n))
        sizes = {name: self.domain.variable_dofmap(name).n_dofs for name in self.unknowns}
        self.layout = SparseSystem(sizes, self.unknowns)
        self.n_dofs = self.layout.n_dofs
        self._pattern = None
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, config: ProblemConfig, domain: Optional[ProblemDomain] = None) -> 'Problem':
        domain = domain or ProblemDomain(config)
        return cls(domain=domain, equations=config.equations, ebcs=list(config.ebcs),
                   epbcs=list(config.epbcs), solver_config=config.solvers)

    # ----- state vectors -----

    def split(self, u: np.ndarray) -> Dict[str, np.ndarray]:
        u = np.asarray(u)
        return {name: u[self.layout.offsets[name]:self.layout.offsets[name] + self.layout.sizes[name]]
                for name in self.unknowns}

    def _bound_values(self, u: np.ndarray) -> Dict[str, np.ndarray]:
        values = self.split(u)
        for name, var in self.domain.config.variables.items():
            if var.kind != 'parameter':
                continue
            if name in self.parameters:
                values[name] = np.asarray(self.parameters[name], dtype=np.float64)
            elif var.source != UNBOUND_SOURCE and var.source in values:
                values[name] = values[var.source]
        return values

    def set_parameter(self, name: str, values: np.ndarray):
        var = self.domain.variable(name)
        if var.kind != 'parameter':
            raise ConfigError(f"variable '{name}' is not a parameter")
        values = np.asarray(values, dtype=np.float64)
        n = self.domain.variable_dofmap(name).n_dofs
        if values.shape != (n,):
            raise ConfigError(f"parameter '{name}' needs {n} values, got shape {values.shape}")
        self.parameters[name] = values

    def initial_state(self) -> np.ndarray:
        parts = []
        for name in self.unknowns:
            dofmap = self.domain.variable_dofmap(name)
            ic_nodes = {ic.region: dofmap.region_nodes(self.domain.region(ic.region))
                        for ic in self.domain.config.ics.values()}
            parts.append(resolve_ics(self.domain.config, name, dofmap.node_coors, dofmap.n_components,
                                     ic_nodes))
        return np.concatenate(parts)

    # ----- constraints -----

    def _constraint_pattern(self):
        with self._lock:
            if self._pattern is not None:
                return self._pattern
            config = self.domain.config
            n_comp = {name: self.domain.variable_dofmap(name).n_components for name in self.unknowns}

            fixed_specs = []
            for bc_name in self.ebcs:
                bc = config.ebcs[bc_name]
                region = self.domain.region(bc.region)
                overrides = self.ebc_values.get(bc_name, {})
                for spec, value in bc.dofs:
                    var, comps = self._dof_spec(spec, n_comp, f"ebcs.{bc_name}")
                    dofmap = self.domain.variable_dofmap(var)
                    nodes = dofmap.region_nodes(region)
                    value = overrides.get(spec, value)
                    for c in comps:
                        dofs = self.layout.global_dofs(var, dofmap.node_dofs(nodes, c))
                        fixed_specs.append((dofs, dofmap.node_coors[nodes], value, c))

            pairs = []
            for bc_name in self.epbcs:
                bc = config.epbcs[bc_name]
                master = self.domain.region(bc.master)
                slave = self.domain.region(bc.slave)
                for master_spec, slave_spec in bc.dofs:
                    var, comps = self._dof_spec(master_spec, n_comp, f"epbcs.{bc_name}")
                    slave_var, slave_comps = self._dof_spec(slave_spec, n_comp, f"epbcs.{bc_name}")
                    if slave_var != var or slave_comps != comps:
                        raise ConfigError(f"epbcs.{bc_name}: '{master_spec}' and '{slave_spec}' must "
                                          f"name the same DOFs")
                    dofmap = self.domain.variable_dofmap(var)
                    if bc.translation is not None:
                        translation = np.asarray(bc.translation)
                    else:
                        translation = plane_translation(dofmap, master, slave, PLANE_MATCHERS[bc.match])
                    local = match_periodic(self.domain.mesh, dofmap, master, slave, translation,
                                           bc.tol, comps)
                    pairs.append(self.layout.global_dofs(var, local))
            pairs = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
            self._pattern = (fixed_specs, pairs)
            return self._pattern

    def _dof_spec(self, spec: str, n_comp: Dict[str, int], key_path: str):
        var = spec.partition('.')[0]
        if var not in n_comp:
            raise ConfigError(f"{key_path}: '{var}' is not an unknown of this problem")
        return parse_dof_spec(spec, n_comp)

    def reduction(self, t: float) -> ConstraintReduction:
        fixed_specs, pairs = self._constraint_pattern()
        config = self.domain.config
        dofs, vals = [], []
        for dof_ids, coors, value, c in fixed_specs:
            if isinstance(value, str):
                v = np.asarray(config.functions.evaluate(value, coors, t, config.constants))
                v = v if v.ndim == 1 else v[:, c]
            else:
                v = np.full(dof_ids.shape[0], float(value))
            dofs.append(dof_ids)
            vals.append(v)
        if dofs:
            fixed = (np.concatenate(dofs), np.concatenate(vals))
        else:
            fixed = (np.zeros(0, dtype=np.int64), np.zeros(0))
        return build_reduction(self.n_dofs, fixed, pairs)

    # ----- assembly -----

    def _terms(self):
        for ast in self.equations.values():
            for factor, call in ast.residual_terms():
                yield factor, call

    def residual(self, u: np.ndarray, t: float, u_prev: Optional[np.ndarray] = None,
                 dt: Optional[float] = None) -> np.ndarray:
        """Residual LHS - RHS over all unknown DOFs."""
        u = np.asarray(u, dtype=np.float64)
        values = self._bound_values(u)
        if u_prev is not None and dt is not None:
            rates = self.split((u - np.asarray(u_prev)) / dt)
        else:
            rates = {name: np.zeros_like(v) for name, v in self.split(u).items()}
        context = _Evaluation(self.domain, values, rates, t)
        system = SparseSystem(self.layout.sizes, self.unknowns)
        for factor, call in self._terms():
            blocks = eval_term_local(call, 'vector', context)
            row = self.domain.variable(blocks.row_variable).primary
            assemble(system, blocks.values, system.global_dofs(row, blocks.row_dofs), sign=factor)
        return system.rhs

    def jacobian(self, u: np.ndarray, t: float, dt: Optional[float] = None):
        """Derivative of the residual with respect to all unknown DOFs."""
        values = self._bound_values(np.asarray(u, dtype=np.float64))
        context = _Evaluation(self.domain, values, None, t)
        system = SparseSystem(self.layout.sizes, self.unknowns)
        for factor, call in self._terms():
            if len(call.variables) == 1:
                continue
            if call.has_time_derivative and dt is None:
                continue
            blocks = eval_term_local(call, 'matrix', context)
            col_var = self.domain.variable(blocks.col_variable)
            if col_var.kind != 'unknown':
                continue
            row = self.domain.variable(blocks.row_variable).primary
            scale = factor / dt if blocks.time_derivative else factor
            assemble(system, blocks.values, system.global_dofs(row, blocks.row_dofs),
                     system.global_dofs(blocks.col_variable, blocks.col_dofs), sign=scale)
        return system.tocsr()

    # ----- output -----

    def vertex_values(self, u: np.ndarray) -> Dict[str, np.ndarray]:
        """Nodal values of every unknown at the mesh vertices (zero off the field region)."""
        out = {}
        for name, values in self.split(u).items():
            dofmap = self.domain.variable_dofmap(name)
            nc = dofmap.n_components
            data = np.zeros((self.domain.mesh.n_vertices, nc))
            present = dofmap.vertex_nodes >= 0
            data[present] = values.reshape((-1, nc))[dofmap.vertex_nodes[present]]
            out[name] = data[:, 0] if nc == 1 else data
        return out

    def cell_strains(self, u: np.ndarray, integral_order: int = 1) -> Dict[str, np.ndarray]:
        """Cell-averaged engineering strain and its magnitude for vector unknowns."""
        out = {}
        cell_type, _, ids = self.domain.mesh.volume_block
        for name, values in self.split(u).items():
            dofmap = self.domain.variable_dofmap(name)
            if dofmap.n_components != self.domain.dim or self.domain.dim == 1:
                continue
            region = dofmap.field.region
            mapping = build_mapping(self.domain.mesh, region, dofmap.field,
                                    get_quadrature(cell_type, integral_order), dofmap)
            strain = eval_strain(values, mapping)
            weights = mapping.dv / mapping.dv.sum(axis=1, keepdims=True)
            mean = np.einsum('cq,cqs->cs', weights, strain)
            full = np.zeros((ids.shape[0], mean.shape[1]))
            full[self.domain.mesh.cell_lookup[mapping.cells]] = mean
            out[f"{name}_strain_magnitude"] = np.linalg.norm(full, axis=1)
        return out

    def save_state(self, path: Path, state: StepState, with_strain: bool = False):
        cell_data = self.cell_strains(state.u) if with_strain else {}
        write_vtk(path, self.domain.mesh, point_data=self.vertex_values(state.u), cell_data=cell_data,
                  title=f"{self.domain.config.name} step {state.step} t = {state.time!r}")


# ==================== Declarative driver ====================

@dataclass
class SolveResult:
    problem: Problem
    history: List[StepState]
    output_files: List[Path]

    @property
    def final(self) -> StepState:
        return self.history[-1]


def output_prefix(config: ProblemConfig, output_dir: Optional[Path] = None) -> Path:
    if output_dir is None:
        output_dir = config.resolve_path(config.options.output_dir) if config.options.output_dir \
            else config.base_dir
    return Path(output_dir) / (config.options.output_prefix or config.name)


def write_history(path: Path, problem: Problem, history: Sequence[StepState]):
    """Persist every step's full DOF vector with the layout needed to rebuild VTK output."""
    config = problem.domain.config
    data = {
        'config': str(config.path.resolve()) if config.path else None,
        'unknowns': [{'name': name, 'offset': problem.layout.offsets[name],
                      'n_dofs': problem.layout.sizes[name]} for name in problem.unknowns],
        'steps': [{'step': s.step, 'time': s.time, 'u': [repr(float(v)) for v in s.u]}
                  for s in history],
    }
    tmp = path.with_suffix(path.suffix + '.tmp')
    try:
        with open(tmp, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=1)
        tmp.replace(path)
    except OSError as e:
        raise HomfemError(f"cannot write history {path}: {e}", phase='output')


def read_history(path: Path) -> Dict[str, object]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        steps = [{'step': int(s['step']), 'time': float(s['time']),
                  'u': np.array([float(v) for v in s['u']])} for s in data['steps']]
    except FileNotFoundError:
        raise ConfigError(f"history not found: {path}", phase='parse')
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"malformed history file {path}: {e}", phase='parse')
    data['steps'] = steps
    return data


def solve_declarative(config: ProblemConfig, output_dir: Optional[Path] = None,
                      write_output: bool = True, with_strain: bool = False,
                      domain: Optional[ProblemDomain] = None) -> SolveResult:
    """Build, assemble and solve a config; one VTK file per step.

    Time stepping is used when an equation contains du/dt (or ts.kind is "simple").
    """
    with annotate_phase('assemble'):
        problem = Problem.from_config(config, domain)
        n_dofs = problem.n_dofs
    log_info(f"{config.name}: unknowns {', '.join(problem.unknowns)}, {n_dofs} DOFs", "ASSEMBLE")

    prefix = output_prefix(config, output_dir)
    if write_output:
        try:
            prefix.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise MeshError(f"cannot create output directory {prefix.parent}: {e}", phase='output')
    kind = config.solvers.ts.kind
    transient = kind == 'simple' or (kind == 'auto' and config.has_time_derivative)
    files: List[Path] = []

    def on_step(state: StepState):
        if not write_output:
            return
        path = Path(f"{prefix}.{state.step:04d}.vtk") if transient else Path(f"{prefix}.vtk")
        with annotate_phase('output'):
            problem.save_state(path, state, with_strain)
        files.append(path)

    with annotate_phase('solve'):
        if transient:
            history = run_implicit(problem, config.solvers, on_step=on_step)
        else:
            history = [run_stationary(problem, config.solvers)]
            on_step(history[0])

    if write_output and config.options.save_history:
        path = Path(f"{prefix}.history.json")
        write_history(path, problem, history)
        files.append(path)
    if write_output:
        log_success(f"wrote {len(files)} output files under {prefix.parent}", "OUTPUT")
    return SolveResult(problem=problem, history=history, output_files=files)


def l2_error(problem: Problem, u: np.ndarray, variable: str, exact, region: str, integral: str) -> float:
    """L2 norm of (u_h - exact) over a region; `exact` maps (n, dim) points to values."""
    mapping = problem.domain.mapping(variable, region, integral)
    dofmap = problem.domain.variable_dofmap(variable)
    uh = eval_field_qp(problem.split(u)[variable], dofmap, mapping)[..., 0]
    points = mapping.qp_coors.reshape((-1, problem.domain.dim))
    ue = np.asarray(exact(points)).reshape(uh.shape)
    return float(np.sqrt(np.sum(mapping.dv * (uh - ue) ** 2)))
