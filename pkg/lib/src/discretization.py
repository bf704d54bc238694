"""
Discretization for homfem
Reference elements, Lagrange bases, quadrature rules, fields, DOF maps and reference mappings
"""

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from itertools import product
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import roots_jacobi

try:
    from .errors import DiscretizationError, InvertedCellError
    from .logger import log_debug
    from .mesh_io import CELL_TYPES, Mesh, Region
except ImportError:
    from errors import DiscretizationError, InvertedCellError
    from logger import log_debug
    from mesh_io import CELL_TYPES, Mesh, Region


MAX_FIELD_ORDER = 2
MAX_QUADRATURE_ORDER = 15

# Reference cell vertices: line/quad/hex on [-1, 1]^d, tri/tet on the unit simplex
REF_VERTICES = {
    'line2': np.array([[-1.0], [1.0]]),
    'quad4': np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]),
    'hex8': np.array([[-1.0, -1.0, -1.0], [1.0, -1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, 1.0, -1.0],
                      [-1.0, -1.0, 1.0], [1.0, -1.0, 1.0], [1.0, 1.0, 1.0], [-1.0, 1.0, 1.0]]),
    'tri3': np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    'tet4': np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
}

REF_MEASURE = {'line2': 2.0, 'quad4': 4.0, 'hex8': 8.0, 'tri3': 0.5, 'tet4': 1.0 / 6.0}

SIMPLEX_CELLS = ('tri3', 'tet4')


# ==================== Lagrange bases ====================

@dataclass(frozen=True)
class LagrangeBasis:
    """Nodal basis of one cell type and order, built from a monomial Vandermonde system"""

    cell_type: str
    order: int
    exponents: np.ndarray      # (n_mono, dim)
    coefficients: np.ndarray   # (n_mono, n_basis)
    nodes: np.ndarray          # (n_basis, dim) reference coordinates
    # Per local node: ('vertex'|'edge'|'face'|'interior', local entity index)
    entities: Tuple[Tuple[str, int], ...]

    @property
    def n_basis(self) -> int:
        return self.nodes.shape[0]


def _node_layout(cell_type: str, order: int) -> Tuple[np.ndarray, Tuple[Tuple[str, int], ...]]:
    ct = CELL_TYPES[cell_type]
    ref = REF_VERTICES[cell_type]
    nodes = [ref[i] for i in range(ct.n_vertices)]
    entities = [('vertex', i) for i in range(ct.n_vertices)]
    if order == 2:
        for i, edge in enumerate(ct.edges):
            nodes.append(ref[list(edge)].mean(axis=0))
            entities.append(('edge', i))
        if cell_type == 'hex8':
            for i, face in enumerate(ct.facets):
                nodes.append(ref[list(face)].mean(axis=0))
                entities.append(('face', i))
        if cell_type in ('quad4', 'hex8'):
            nodes.append(ref.mean(axis=0))
            entities.append(('interior', 0))
    return np.array(nodes), tuple(entities)


def _monomial_exponents(cell_type: str, order: int) -> np.ndarray:
    dim = CELL_TYPES[cell_type].dim
    if cell_type in SIMPLEX_CELLS:
        exps = [e for e in product(range(order + 1), repeat=dim) if sum(e) <= order]
    else:
        exps = list(product(range(order + 1), repeat=dim))
    return np.array(exps, dtype=np.int64)


def _eval_monomials(exps: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.prod(points[:, None, :] ** exps[None, :, :], axis=2)


def _eval_monomial_gradients(exps: np.ndarray, points: np.ndarray) -> np.ndarray:
    dim = exps.shape[1]
    out = np.empty((points.shape[0], exps.shape[0], dim))
    for k in range(dim):
        lowered = exps.copy()
        lowered[:, k] = np.maximum(lowered[:, k] - 1, 0)
        out[:, :, k] = exps[:, k] * _eval_monomials(lowered, points)
    return out


@lru_cache(maxsize=None)
def get_basis(cell_type: str, order: int) -> LagrangeBasis:
    if cell_type not in CELL_TYPES:
        raise DiscretizationError(f"unsupported cell type '{cell_type}'")
    if order not in range(1, MAX_FIELD_ORDER + 1):
        raise DiscretizationError(f"unsupported basis order {order} for {cell_type}")

    nodes, entities = _node_layout(cell_type, order)
    exps = _monomial_exponents(cell_type, order)
    vandermonde = _eval_monomials(exps, nodes)
    if vandermonde.shape[0] != vandermonde.shape[1]:
        raise DiscretizationError(f"no unisolvent node set for {cell_type} order {order}")
    coefficients = np.linalg.inv(vandermonde)
    for arr in (exps, coefficients, nodes):
        arr.setflags(write=False)
    return LagrangeBasis(cell_type, order, exps, coefficients, nodes, entities)


def eval_basis(cell_type: str, order: int, points) -> Tuple[np.ndarray, np.ndarray]:
    """Evaluate the nodal Lagrange basis at reference points.

    Returns:
        (values, gradients) with shapes (n_basis, n_points) and
        (n_basis, n_points, dim)
    """
    basis = get_basis(cell_type, order)
    dim = CELL_TYPES[cell_type].dim
    points = np.asarray(points, dtype=np.float64).reshape((-1, dim))
    values = _eval_monomials(basis.exponents, points) @ basis.coefficients
    grads = np.einsum('pmk,mb->bpk', _eval_monomial_gradients(basis.exponents, points),
                      basis.coefficients)
    return values.T, grads


# ==================== Quadrature ====================

@dataclass(frozen=True)
class QuadratureRule:
    cell_type: str
    order: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]


def _gauss_legendre_01(n: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _gauss_jacobi_01(n: int, alpha: int) -> Tuple[np.ndarray, np.ndarray]:
    # Weight (1 - u)^alpha on [0, 1]
    x, w = roots_jacobi(n, alpha, 0)
    return 0.5 * (x + 1.0), w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def get_quadrature(cell_type: str, order: int) -> QuadratureRule:
    """Gauss-type rule on the reference cell exact for polynomials up to `order`."""
    if cell_type not in CELL_TYPES:
        raise DiscretizationError(f"unsupported cell type '{cell_type}'")
    if not 1 <= order <= MAX_QUADRATURE_ORDER:
        raise DiscretizationError(
            f"quadrature order {order} outside the supported range 1..{MAX_QUADRATURE_ORDER}")

    dim = CELL_TYPES[cell_type].dim
    n = (order + 2) // 2
    if cell_type in SIMPLEX_CELLS and order == 1:
        points = REF_VERTICES[cell_type].mean(axis=0, keepdims=True)
        weights = np.array([REF_MEASURE[cell_type]])
    elif cell_type == 'tri3':
        u, wu = _gauss_jacobi_01(n, 1)
        v, wv = _gauss_legendre_01(n)
        uu, vv = np.meshgrid(u, v, indexing='ij')
        points = np.stack([uu.ravel(), (vv * (1.0 - uu)).ravel()], axis=1)
        weights = np.outer(wu, wv).ravel()
    elif cell_type == 'tet4':
        u, wu = _gauss_jacobi_01(n, 2)
        v, wv = _gauss_jacobi_01(n, 1)
        w, ww = _gauss_legendre_01(n)
        uu, vv, ww_ = np.meshgrid(u, v, w, indexing='ij')
        points = np.stack([uu.ravel(), (vv * (1.0 - uu)).ravel(),
                           (ww_ * (1.0 - uu) * (1.0 - vv)).ravel()], axis=1)
        weights = np.einsum('i,j,k->ijk', wu, wv, ww).ravel()
    else:
        x, w = np.polynomial.legendre.leggauss(n)
        grids = np.meshgrid(*([x] * dim), indexing='ij')
        points = np.stack([g.ravel() for g in grids], axis=1)
        weights = np.prod(np.stack(np.meshgrid(*([w] * dim), indexing='ij')), axis=0).ravel()

    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(cell_type, order, points, weights)


# ==================== Fields, variables, DOF maps ====================

@dataclass(frozen=True, eq=False)
class Field:
    """Discrete nodal Lagrange function space over a cell region"""

    name: str
    n_components: int
    region: Region
    order: int = 1
    dtype: str = 'real'

    def __post_init__(self):
        if self.dtype != 'real':
            raise DiscretizationError(f"field '{self.name}': only real fields are supported")
        if self.region.kind != 'cell':
            raise DiscretizationError(f"field '{self.name}': region '{self.region.name}' is not a cell region")
        if self.order not in range(1, MAX_FIELD_ORDER + 1):
            raise DiscretizationError(f"field '{self.name}': unsupported order {self.order}")
        if self.n_components not in (1, self.region.mesh.dim):
            raise DiscretizationError(
                f"field '{self.name}': {self.n_components} components in a {self.region.mesh.dim}D mesh")

    @property
    def mesh(self) -> Mesh:
        return self.region.mesh


VARIABLE_KINDS = ('unknown', 'test', 'parameter')
UNBOUND_SOURCE = '(set-to-None)'


@dataclass(frozen=True)
class Variable:
    """Unknown, test or parameter role over a field"""

    name: str
    kind: str
    field: str
    order: int = 0
    history: int = 0
    primary: Optional[str] = None
    source: Optional[str] = None

    def __post_init__(self):
        if self.kind not in VARIABLE_KINDS:
            raise DiscretizationError(f"variable '{self.name}': unknown kind '{self.kind}'")
        if self.history not in (0, 1):
            raise DiscretizationError(f"variable '{self.name}': history size must be 0 or 1")
        if self.kind == 'test' and not self.primary:
            raise DiscretizationError(f"test variable '{self.name}' must name its unknown")
        if self.order < 0:
            raise DiscretizationError(f"variable '{self.name}': negative order in the state vector")


@dataclass(frozen=True, eq=False)
class DofMap:
    """Node and DOF numbering of a field; DOF of node n, component c is n * n_components + c"""

    field: Field
    cells: np.ndarray           # global cell ids of the field region
    cell_nodes: np.ndarray      # (n_cells, n_basis)
    node_coors: np.ndarray      # (n_nodes, dim)
    node_vertices: Tuple[Tuple[int, ...], ...]   # defining mesh vertices per node
    node_kinds: Tuple[str, ...]
    vertex_nodes: np.ndarray    # global vertex id -> node id or -1

    @property
    def n_components(self) -> int:
        return self.field.n_components

    @property
    def n_nodes(self) -> int:
        return self.node_coors.shape[0]

    @property
    def n_dofs(self) -> int:
        return self.n_nodes * self.n_components

    @cached_property
    def cell_dofs(self) -> np.ndarray:
        nc = self.n_components
        dofs = self.cell_nodes[:, :, None] * nc + np.arange(nc)[None, None, :]
        dofs = dofs.reshape((self.cell_nodes.shape[0], -1))
        dofs.setflags(write=False)
        return dofs

    def cell_rows(self, cells: np.ndarray) -> np.ndarray:
        """Rows of `cells` (global ids) in this map; cells outside the field region are an error."""
        rows = np.searchsorted(self.cells, cells)
        rows = np.minimum(rows, self.cells.shape[0] - 1)
        if np.any(self.cells[rows] != cells):
            missing = np.asarray(cells)[self.cells[rows] != cells]
            raise DiscretizationError(
                f"field '{self.field.name}' is not defined on cells {missing[:5].tolist()}")
        return rows

    def region_nodes(self, region: Region) -> np.ndarray:
        """Nodes lying on a region: all defining vertices in the region vertex set."""
        if region.kind == 'cell':
            rows = self.cell_rows(region.cells)
            return np.unique(self.cell_nodes[rows])
        inside = np.zeros(self.field.mesh.n_vertices, dtype=bool)
        inside[region.vertices] = True
        selected = [n for n, (verts, kind) in enumerate(zip(self.node_vertices, self.node_kinds))
                    if kind != 'interior' and inside[list(verts)].all()]
        return np.array(selected, dtype=np.int64)

    def node_dofs(self, nodes: np.ndarray, component: Optional[int] = None) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        if component is None:
            return (nodes[:, None] * self.n_components + np.arange(self.n_components)).ravel()
        return nodes * self.n_components + component


def build_dofmap(field: Field, mesh: Optional[Mesh] = None) -> DofMap:
    """Number field nodes: region vertices in ascending order first, then higher-order
    nodes in order of first appearance over the region cells."""
    mesh = mesh or field.mesh
    cell_type, conn, _ = mesh.volume_block
    cells = np.asarray(field.region.cells, dtype=np.int64)
    cell_conn = conn[mesh.cell_lookup[cells]]
    basis = get_basis(cell_type, field.order)
    ct = CELL_TYPES[cell_type]

    used = np.unique(cell_conn)
    vertex_nodes = np.full(mesh.n_vertices, -1, dtype=np.int64)
    vertex_nodes[used] = np.arange(used.shape[0])

    node_vertices: List[Tuple[int, ...]] = [(int(v),) for v in used]
    node_kinds: List[str] = ['vertex'] * used.shape[0]
    cell_nodes = np.empty((cells.shape[0], basis.n_basis), dtype=np.int64)
    cell_nodes[:, :ct.n_vertices] = vertex_nodes[cell_conn]

    if field.order > 1:
        entity_nodes: Dict[tuple, int] = {}
        for row, (cell, verts) in enumerate(zip(cells, cell_conn)):
            for local, (kind, index) in enumerate(basis.entities[ct.n_vertices:], start=ct.n_vertices):
                if kind == 'edge':
                    members = tuple(sorted(int(verts[i]) for i in ct.edges[index]))
                    key = ('edge',) + members
                elif kind == 'face':
                    members = tuple(sorted(int(verts[i]) for i in ct.facets[index]))
                    key = ('face',) + members
                else:
                    members = tuple(int(v) for v in verts)
                    key = ('interior', int(cell))
                node = entity_nodes.get(key)
                if node is None:
                    node = len(node_vertices)
                    entity_nodes[key] = node
                    node_vertices.append(members)
                    node_kinds.append(kind)
                cell_nodes[row, local] = node

    node_coors = np.array([mesh.vertices[list(v)].mean(axis=0) for v in node_vertices])
    node_coors = node_coors.reshape((-1, mesh.dim))
    for arr in (cells, cell_nodes, node_coors, vertex_nodes):
        arr.setflags(write=False)

    dofmap = DofMap(field=field, cells=cells, cell_nodes=cell_nodes, node_coors=node_coors,
                    node_vertices=tuple(node_vertices), node_kinds=tuple(node_kinds),
                    vertex_nodes=vertex_nodes)
    log_debug(f"field {field.name}: {dofmap.n_nodes} nodes, {dofmap.n_dofs} DOFs", "DOFS")
    return dofmap


# ==================== Reference mappings ====================

@dataclass(frozen=True, eq=False)
class RefMapping:
    """Per-cell, per-quadrature-point geometry and transformed basis of a field"""

    cells: np.ndarray       # global cell ids
    rows: np.ndarray        # rows in the field DOF map
    bf: np.ndarray          # (n_qp, n_basis)
    bfg: np.ndarray         # (n_cells, n_qp, n_basis, dim)
    det: np.ndarray         # (n_cells, n_qp)
    dv: np.ndarray          # (n_cells, n_qp), det * weight
    qp_coors: np.ndarray    # (n_cells, n_qp, dim)
    dofmap: DofMap = field(repr=False)

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_qp(self) -> int:
        return self.bf.shape[0]

    @property
    def cell_dofs(self) -> np.ndarray:
        return self.dofmap.cell_dofs[self.rows]

    def volume(self) -> float:
        return float(self.dv.sum())


def build_mapping(mesh: Mesh, region: Region, field_: Field, quadrature: QuadratureRule,
                  dofmap: Optional[DofMap] = None) -> RefMapping:
    """Map the field basis from the reference cell to the region cells."""
    if region.kind != 'cell':
        raise DiscretizationError(f"cannot integrate over {region.kind} region '{region.name}'")
    cell_type, conn, _ = mesh.volume_block
    if quadrature.cell_type != cell_type:
        raise DiscretizationError(f"{quadrature.cell_type} quadrature used on {cell_type} cells")
    dofmap = dofmap or build_dofmap(field_, mesh)

    cells = np.asarray(region.cells, dtype=np.int64)
    rows = dofmap.cell_rows(cells)
    coors = mesh.vertices[conn[mesh.cell_lookup[cells]]]          # (nc, nv, dim)

    _, geo_grad = eval_basis(cell_type, 1, quadrature.points)     # (nv, nq, dim)
    jac = np.einsum('cai,aqj->cqij', coors, geo_grad)
    det = np.linalg.det(jac)
    if np.any(det <= 0.0):
        bad = np.unique(cells[np.nonzero(det <= 0.0)[0]])
        raise InvertedCellError(f"non-positive Jacobian determinant in cells {bad[:10].tolist()}")
    inv_jac = np.linalg.inv(jac)

    bf, ref_grad = eval_basis(cell_type, field_.order, quadrature.points)
    bfg = np.einsum('aqj,cqji->cqai', ref_grad, inv_jac)
    geo_bf, _ = eval_basis(cell_type, 1, quadrature.points)
    qp_coors = np.einsum('aq,cai->cqi', geo_bf, coors)
    dv = det * quadrature.weights[None, :]

    return RefMapping(cells=cells, rows=rows, bf=bf.T.copy(), bfg=bfg, det=det, dv=dv,
                      qp_coors=qp_coors, dofmap=dofmap)


def eval_field_qp(values: np.ndarray, dofmap: DofMap, mapping: RefMapping) -> np.ndarray:
    """Field values at the quadrature points, shape (n_cells, n_qp, n_components)."""
    nc = dofmap.n_components
    local = np.asarray(values)[dofmap.cell_dofs[mapping.rows]]
    local = local.reshape((mapping.n_cells, -1, nc))
    return np.einsum('qa,cak->cqk', mapping.bf, local)


def eval_field_grad_qp(values: np.ndarray, dofmap: DofMap, mapping: RefMapping) -> np.ndarray:
    """Field gradients at the quadrature points, shape (n_cells, n_qp, n_components, dim)."""
    nc = dofmap.n_components
    local = np.asarray(values)[dofmap.cell_dofs[mapping.rows]]
    local = local.reshape((mapping.n_cells, -1, nc))
    return np.einsum('cqai,cak->cqki', mapping.bfg, local)


def integrate(mapping: RefMapping, qp_values) -> np.ndarray:
    """Integrate per-quadrature-point data (n_cells, n_qp, ...) over the mapped region."""
    qp_values = np.asarray(qp_values, dtype=np.float64)
    if qp_values.ndim == 0:
        return np.float64(qp_values * mapping.dv.sum())
    return np.tensordot(mapping.dv, qp_values, axes=([0, 1], [0, 1]))


def region_measure(mesh: Mesh, region: Region) -> float:
    """Volume (area, length) of a cell region."""
    cell_type, _, _ = mesh.volume_block
    geometry = Field(name='geometry', n_components=1, region=region, order=1)
    mapping = build_mapping(mesh, region, geometry, get_quadrature(cell_type, 2))
    return mapping.volume()


def cell_volumes(mesh: Mesh) -> np.ndarray:
    """Measure of every volume cell, ordered like the volume block."""
    cell_type, _, ids = mesh.volume_block
    everything = Region(name='cells', kind='cell', entities=ids, mesh=mesh)
    geometry = Field(name='geometry', n_components=1, region=everything, order=1)
    mapping = build_mapping(mesh, everything, geometry, get_quadrature(cell_type, 2))
    return mapping.dv.sum(axis=1)
