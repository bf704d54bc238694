"""
Term database for homfem
Per-cell evaluation of weak-form integrals and global sparse assembly
"""

import threading
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

try:
    from .discretization import RefMapping, Variable, eval_field_grad_qp
    from .errors import TermError
except ImportError:
    from discretization import RefMapping, Variable, eval_field_grad_qp
    from errors import TermError


TERM_MODES = ('matrix', 'vector', 'eval')


# ==================== Symmetric storage ====================

def sym_size(dim: int) -> int:
    return dim * (dim + 1) // 2


def sym_pairs(dim: int) -> List[Tuple[int, int]]:
    """Index pairs in sym-vector order: 11, 22, 33, 12, 13, 23."""
    pairs = [(i, i) for i in range(dim)]
    pairs.extend((i, j) for i in range(dim) for j in range(i + 1, dim))
    return pairs


def stiffness_from_lame(dim: int, lam: float, mu: float) -> np.ndarray:
    """Isotropic stiffness in sym storage with engineering shear."""
    sym = sym_size(dim)
    D = np.zeros((sym, sym))
    D[:dim, :dim] = lam
    D[np.arange(dim), np.arange(dim)] += 2.0 * mu
    D[np.arange(dim, sym), np.arange(dim, sym)] = mu
    return D


def stiffness_from_youngpoisson(dim: int, young: float, poisson: float,
                                plane: str = 'strain') -> np.ndarray:
    """Isotropic stiffness from Young's modulus and Poisson's ratio (plane strain or stress in 2D)."""
    if not -1.0 < poisson < 0.5:
        raise TermError(f"Poisson's ratio {poisson} outside (-1, 0.5)")
    lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    mu = young / (2.0 * (1.0 + poisson))
    if dim == 2 and plane == 'stress':
        lam = 2.0 * lam * mu / (lam + 2.0 * mu)
    elif plane not in ('strain', 'stress'):
        raise TermError(f"unknown plane assumption '{plane}'")
    return stiffness_from_lame(dim, lam, mu)


# ==================== Term calls ====================

@dataclass(frozen=True)
class TermArg:
    """Material reference, variable name or time derivative of a variable"""

    kind: str       # 'material' | 'variable' | 'derivative'
    name: str       # 'mat.param' for materials

    def __str__(self):
        if self.kind == 'derivative':
            return f"d{self.name}/dt"
        return self.name


@dataclass(frozen=True)
class TermCall:
    name: str
    integral: str
    region: str
    args: Tuple[TermArg, ...]
    coef: float = 1.0

    @property
    def materials(self) -> Tuple[TermArg, ...]:
        return tuple(a for a in self.args if a.kind == 'material')

    @property
    def variables(self) -> Tuple[TermArg, ...]:
        return tuple(a for a in self.args if a.kind != 'material')

    @property
    def has_time_derivative(self) -> bool:
        return any(a.kind == 'derivative' for a in self.args)

    def __str__(self):
        args = ', '.join(str(a) for a in self.args)
        return f"{self.name}.{self.integral}.{self.region}({args})"


class TermSpec(NamedTuple):
    name: str
    # Material shape tag ('scalar', 'matrix', 'symsym', 'coupling', 'sym') or None
    material: Optional[str]
    material_optional: bool
    n_variables: int
    # Required field kinds in argument order ('any', 'scalar', 'vector')
    field_kinds: Tuple[str, ...]


TERM_TABLE: Dict[str, TermSpec] = {
    'dw_volume_dot': TermSpec('dw_volume_dot', 'scalar', True, 2, ('any', 'any')),
    'dw_laplace': TermSpec('dw_laplace', 'scalar', False, 2, ('any', 'any')),
    'dw_diffusion': TermSpec('dw_diffusion', 'matrix', False, 2, ('scalar', 'scalar')),
    'dw_lin_elastic': TermSpec('dw_lin_elastic', 'symsym', False, 2, ('vector', 'vector')),
    'dw_piezo_coupling': TermSpec('dw_piezo_coupling', 'coupling', False, 2, ('mixed', 'mixed')),
    'dw_lin_prestress': TermSpec('dw_lin_prestress', 'sym', False, 1, ('vector',)),
}


def check_term_call(call: TermCall) -> TermSpec:
    """Validate argument arity against the term table."""
    spec = TERM_TABLE.get(call.name)
    if spec is None:
        raise TermError(f"unknown term '{call.name}'")
    materials = call.materials
    if any(a.kind == 'material' for a in call.args[len(materials):]):
        raise TermError(f"{call}: material arguments must come first")
    n_mat = len(materials)
    if spec.material is None and n_mat:
        raise TermError(f"{call}: term takes no material")
    if spec.material is not None and n_mat != 1 and not (spec.material_optional and n_mat == 0):
        raise TermError(f"{call}: expected one material argument, got {n_mat}")
    if len(call.variables) != spec.n_variables:
        raise TermError(f"{call}: expected {spec.n_variables} variable arguments, "
                        f"got {len(call.variables)}")
    return spec


class TermContext(Protocol):
    """What term evaluation needs from a problem"""

    dim: int

    def variable(self, name: str) -> Variable: ...

    def mapping(self, variable: str, region: str, integral: str) -> RefMapping: ...

    def material(self, path: str, region: str, integral: str) -> np.ndarray: ...

    def values(self, variable: str, derivative: bool = False) -> np.ndarray: ...


@dataclass
class LocalBlocks:
    """Per-cell term contributions with the field-local DOFs they belong to"""

    values: np.ndarray              # (n_cells, n_row[, n_col]) or (n_cells,) in eval mode
    row_variable: Optional[str]
    row_dofs: Optional[np.ndarray]  # (n_cells, n_row)
    col_variable: Optional[str] = None
    col_dofs: Optional[np.ndarray] = None
    time_derivative: bool = False


# ==================== Kernels ====================

MATERIAL_SHAPES = {
    'scalar': lambda dim: (),
    'matrix': lambda dim: (dim, dim),
    'symsym': lambda dim: (sym_size(dim), sym_size(dim)),
    'coupling': lambda dim: (dim, sym_size(dim)),
    'sym': lambda dim: (sym_size(dim),),
}


def broadcast_material(value, n_cells: int, n_qp: int, shape: Tuple[int, ...],
                       label: str = 'material') -> np.ndarray:
    """Bring constant, per-point or per-cell-per-point data to (n_cells, n_qp) + shape."""
    arr = np.asarray(value, dtype=np.float64)
    # Column-vector data such as (sym, 1) prestress and (1, 1) scalars
    if shape and arr.ndim > len(shape) and arr.shape[-len(shape) - 1:] == shape + (1,):
        arr = arr[..., 0]
    if not shape and arr.ndim >= 2 and arr.shape[-2:] == (1, 1):
        arr = arr[..., 0, 0]

    tail = arr.shape[arr.ndim - len(shape):] if shape else ()
    if tail != shape:
        raise TermError(f"{label}: value shape {arr.shape} does not end with {shape}")
    lead = arr.shape[:arr.ndim - len(shape)]
    if lead == ():
        return np.broadcast_to(arr, (n_cells, n_qp) + shape)
    if lead == (n_cells * n_qp,):
        return arr.reshape((n_cells, n_qp) + shape)
    if lead == (n_cells, n_qp):
        return arr
    if lead == (n_cells, 1) or lead == (1, n_qp):
        return np.broadcast_to(arr, (n_cells, n_qp) + shape)
    raise TermError(f"{label}: {lead} values for {n_cells} cells x {n_qp} quadrature points")


def _value_operator(mapping: RefMapping, n_comp: int) -> np.ndarray:
    # (n_qp, n_comp, n_basis * n_comp)
    n_qp, n_basis = mapping.bf.shape
    op = np.zeros((n_qp, n_comp, n_basis, n_comp))
    for k in range(n_comp):
        op[:, k, :, k] = mapping.bf
    return op.reshape((n_qp, n_comp, n_basis * n_comp))


def strain_operator(mapping: RefMapping, dim: int) -> np.ndarray:
    """(n_cells, n_qp, sym, n_basis * dim) map from nodal DOFs to engineering strain."""
    n_cells, n_qp, n_basis, _ = mapping.bfg.shape
    op = np.zeros((n_cells, n_qp, sym_size(dim), n_basis, dim))
    for row, (i, j) in enumerate(sym_pairs(dim)):
        if i == j:
            op[:, :, row, :, i] = mapping.bfg[..., i]
        else:
            op[:, :, row, :, i] = mapping.bfg[..., j]
            op[:, :, row, :, j] = mapping.bfg[..., i]
    return op.reshape((n_cells, n_qp, sym_size(dim), n_basis * dim))


def _expand_components(block: np.ndarray, n_comp: int) -> np.ndarray:
    if n_comp == 1:
        return block
    n_cells, na, nb = block.shape
    out = np.einsum('cab,kl->cakbl', block, np.eye(n_comp))
    return out.reshape((n_cells, na * n_comp, nb * n_comp))


def _n_comp(mapping: RefMapping) -> int:
    return mapping.dofmap.n_components


def _kernel(call: TermCall, dim: int, material: Optional[np.ndarray],
            maps: Sequence[RefMapping]) -> np.ndarray:
    """Block with rows over the first variable argument and columns over the second."""
    name = call.name
    dv = maps[0].dv

    if name == 'dw_lin_prestress':
        B = strain_operator(maps[0], dim)
        return np.einsum('cq,cqIa,cqI->ca', dv, B, material, optimize=True)

    m1, m2 = maps
    n1, n2 = _n_comp(m1), _n_comp(m2)
    if name == 'dw_volume_dot':
        if n1 != n2:
            raise TermError(f"{call}: arguments have {n1} and {n2} components")
        weight = dv if material is None else dv * material
        base = np.einsum('cq,qa,qb->cab', weight, m1.bf, m2.bf, optimize=True)
        return _expand_components(base, n1)
    if name == 'dw_laplace':
        if n1 != n2:
            raise TermError(f"{call}: arguments have {n1} and {n2} components")
        base = np.einsum('cq,cqai,cqbi->cab', dv * material, m1.bfg, m2.bfg, optimize=True)
        return _expand_components(base, n1)
    if name == 'dw_diffusion':
        return np.einsum('cq,cqai,cqij,cqbj->cab', dv, m1.bfg, material, m2.bfg, optimize=True)
    if name == 'dw_lin_elastic':
        B1 = strain_operator(m1, dim)
        B2 = strain_operator(m2, dim)
        return np.einsum('cq,cqIa,cqIJ,cqJb->cab', dv, B1, material, B2, optimize=True)
    if name == 'dw_piezo_coupling':
        # In 1D both fields have one component; the first argument is the vector one
        vector_first = not (dim > 1 and n1 == 1)
        mv, ms = (m1, m2) if vector_first else (m2, m1)
        B = strain_operator(mv, dim)
        block = np.einsum('cq,cqIa,cqkI,cqbk->cab', dv, B, material, ms.bfg, optimize=True)
        return block if vector_first else np.transpose(block, (0, 2, 1))
    raise TermError(f"unknown term '{name}'")


def _check_field_kinds(call: TermCall, spec: TermSpec, maps: Sequence[RefMapping], dim: int):
    comps = [_n_comp(m) for m in maps]
    for kind, n, arg in zip(spec.field_kinds, comps, call.variables):
        if kind == 'scalar' and n != 1:
            raise TermError(f"{call}: '{arg}' must be a scalar field")
        if kind == 'vector' and n != dim:
            raise TermError(f"{call}: '{arg}' must be a vector field")
    if spec.field_kinds == ('mixed', 'mixed') and sorted(comps) != sorted([1, dim]):
        raise TermError(f"{call}: needs one vector and one scalar field argument")


def _term_block(call: TermCall, context: TermContext):
    spec = check_term_call(call)
    dim = context.dim
    maps = [context.mapping(a.name, call.region, call.integral) for a in call.variables]
    _check_field_kinds(call, spec, maps, dim)
    n_cells, n_qp = maps[0].dv.shape

    material = None
    if call.materials:
        path = call.materials[0].name
        shape = MATERIAL_SHAPES[spec.material](dim)
        material = broadcast_material(context.material(path, call.region, call.integral),
                                      n_cells, n_qp, shape, label=f"{call}: {path}")
    return spec, maps, call.coef * _kernel(call, dim, material, maps)


def eval_term_blocks(call: TermCall, context: TermContext) -> LocalBlocks:
    """Per-cell blocks with rows over the first variable argument and columns over
    the second, whatever the roles of the arguments."""
    spec, maps, block = _term_block(call, context)
    var_args = call.variables
    if spec.n_variables == 1:
        return LocalBlocks(values=block, row_variable=var_args[0].name, row_dofs=maps[0].cell_dofs)
    return LocalBlocks(values=block, row_variable=var_args[0].name, row_dofs=maps[0].cell_dofs,
                       col_variable=var_args[1].name, col_dofs=maps[1].cell_dofs,
                       time_derivative=call.has_time_derivative)


def eval_term_local(call: TermCall, mode: str, context: TermContext) -> LocalBlocks:
    """Evaluate a term cell by cell.

    matrix mode: blocks (n_cells, n_test, n_other) rows over the test variable.
    vector mode: blocks (n_cells, n_test), the term applied to the other
    argument's current values (or the load vector of a linear term).
    eval mode: per-cell scalars x^T(block)y with all variable values known.
    """
    if mode not in TERM_MODES:
        raise TermError(f"unknown evaluation mode '{mode}'")
    spec, maps, block = _term_block(call, context)
    var_args = call.variables
    kinds = [context.variable(a.name).kind if a.kind == 'variable' else 'unknown'
             for a in var_args]
    time_derivative = call.has_time_derivative

    def local_values(index: int) -> np.ndarray:
        arg = var_args[index]
        vals = context.values(arg.name, derivative=arg.kind == 'derivative')
        return np.asarray(vals)[maps[index].cell_dofs]

    if mode == 'eval':
        if spec.n_variables == 1:
            return LocalBlocks(values=np.einsum('ca,ca->c', block, local_values(0)),
                               row_variable=None, row_dofs=None)
        values = np.einsum('ca,cab,cb->c', local_values(0), block, local_values(1))
        return LocalBlocks(values=values, row_variable=None, row_dofs=None)

    tests = [i for i, k in enumerate(kinds) if k == 'test']
    if len(tests) != 1:
        raise TermError(f"{call}: {mode} mode needs exactly one test variable, got {len(tests)}")
    row = tests[0]
    row_dofs = maps[row].cell_dofs

    if spec.n_variables == 1:
        if mode == 'matrix':
            raise TermError(f"{call}: linear term has no matrix form")
        return LocalBlocks(values=block, row_variable=var_args[row].name, row_dofs=row_dofs)

    col = 1 - row
    if row == 1:
        block = np.transpose(block, (0, 2, 1))
    if mode == 'matrix':
        return LocalBlocks(values=block, row_variable=var_args[row].name, row_dofs=row_dofs,
                           col_variable=var_args[col].name, col_dofs=maps[col].cell_dofs,
                           time_derivative=time_derivative)
    values = np.einsum('cab,cb->ca', block, local_values(col))
    return LocalBlocks(values=values, row_variable=var_args[row].name, row_dofs=row_dofs,
                       time_derivative=time_derivative)


def eval_strain(values: np.ndarray, mapping: RefMapping) -> np.ndarray:
    """Engineering strain sym-vectors (n_cells, n_qp, sym) of a nodal vector field."""
    dofmap = mapping.dofmap
    dim = dofmap.field.mesh.dim
    if dofmap.n_components != dim:
        raise TermError(f"strain of '{dofmap.field.name}' needs a vector field")
    grad = eval_field_grad_qp(values, dofmap, mapping)   # (c, q, k, i) = d u_k / d x_i
    pairs = sym_pairs(dim)
    out = np.empty(grad.shape[:2] + (len(pairs),))
    for row, (i, j) in enumerate(pairs):
        out[..., row] = grad[..., i, i] if i == j else grad[..., i, j] + grad[..., j, i]
    return out


# ==================== Assembly ====================

class SparseSystem:
    """Triplet-accumulated square system over stacked unknown variables"""

    def __init__(self, sizes: Dict[str, int], order: Optional[Sequence[str]] = None):
        names = list(order) if order is not None else list(sizes)
        self.offsets: Dict[str, int] = {}
        offset = 0
        for name in names:
            self.offsets[name] = offset
            offset += int(sizes[name])
        self.sizes = {name: int(sizes[name]) for name in names}
        self.n_dofs = offset
        self.rhs = np.zeros(self.n_dofs)
        self._rows: List[np.ndarray] = []
        self._cols: List[np.ndarray] = []
        self._vals: List[np.ndarray] = []
        self._lock = threading.Lock()

    def global_dofs(self, variable: str, local_dofs: np.ndarray) -> np.ndarray:
        if variable not in self.offsets:
            raise TermError(f"variable '{variable}' is not part of the system")
        return np.asarray(local_dofs) + self.offsets[variable]

    def tocsr(self) -> csr_matrix:
        with self._lock:
            if self._vals:
                rows = np.concatenate(self._rows)
                cols = np.concatenate(self._cols)
                vals = np.concatenate(self._vals)
            else:
                rows = cols = np.zeros(0, dtype=np.int64)
                vals = np.zeros(0)
        matrix = coo_matrix((vals, (rows, cols)), shape=(self.n_dofs, self.n_dofs)).tocsr()
        matrix.sum_duplicates()
        return matrix

    def add_triplets(self, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray):
        with self._lock:
            self._rows.append(rows)
            self._cols.append(cols)
            self._vals.append(vals)

    def add_rhs(self, rows: np.ndarray, vals: np.ndarray):
        with self._lock:
            np.add.at(self.rhs, rows, vals)


def assemble(system: SparseSystem, blocks: np.ndarray, row_dofs: np.ndarray,
             col_dofs: Optional[np.ndarray] = None, sign: float = 1.0):
    """Accumulate per-cell blocks into the system; vector blocks (no col_dofs) go to the RHS."""
    blocks = np.asarray(blocks, dtype=np.float64)
    row_dofs = np.asarray(row_dofs, dtype=np.int64)
    for dofs in (row_dofs, col_dofs):
        if dofs is not None and dofs.size and (np.min(dofs) < 0 or np.max(dofs) >= system.n_dofs):
            raise TermError(f"DOF index out of range for a system of size {system.n_dofs}")

    if col_dofs is None:
        if blocks.shape != row_dofs.shape:
            raise TermError(f"vector blocks {blocks.shape} do not match DOF map {row_dofs.shape}")
        system.add_rhs(row_dofs.ravel(), sign * blocks.ravel())
        return

    col_dofs = np.asarray(col_dofs, dtype=np.int64)
    if blocks.shape != row_dofs.shape + col_dofs.shape[1:]:
        raise TermError(f"matrix blocks {blocks.shape} do not match DOF maps "
                        f"{row_dofs.shape} x {col_dofs.shape}")
    rows = np.broadcast_to(row_dofs[:, :, None], blocks.shape).ravel()
    cols = np.broadcast_to(col_dofs[:, None, :], blocks.shape).ravel()
    system.add_triplets(rows, cols, sign * blocks.ravel())
