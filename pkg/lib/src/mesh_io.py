"""
Mesh handling for homfem
Mesh representation, block mesh generation, legacy VTK I/O and region selection
"""

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from .errors import EmptyRegionError, MeshError, MeshFormatError
    from .logger import log_debug
except ImportError:
    from errors import EmptyRegionError, MeshError, MeshFormatError
    from logger import log_debug


class CellType(NamedTuple):
    name: str
    dim: int
    n_vertices: int
    vtk_code: int
    # Local vertex tuples, oriented outwards for volume cells
    facets: Tuple[Tuple[int, ...], ...]
    edges: Tuple[Tuple[int, ...], ...]


CELL_TYPES: Dict[str, CellType] = {
    'line2': CellType('line2', 1, 2, 3, ((0,), (1,)), ((0, 1),)),
    'tri3': CellType('tri3', 2, 3, 5, ((0, 1), (1, 2), (2, 0)),
                     ((0, 1), (1, 2), (2, 0))),
    'quad4': CellType('quad4', 2, 4, 9, ((0, 1), (1, 2), (2, 3), (3, 0)),
                      ((0, 1), (1, 2), (2, 3), (3, 0))),
    'tet4': CellType('tet4', 3, 4, 10,
                     ((0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3)),
                     ((0, 1), (1, 2), (2, 0), (0, 3), (1, 3), (2, 3))),
    'hex8': CellType('hex8', 3, 8, 12,
                     ((0, 3, 2, 1), (0, 1, 5, 4), (1, 2, 6, 5),
                      (2, 3, 7, 6), (3, 0, 4, 7), (4, 5, 6, 7)),
                     ((0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6),
                      (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7))),
}

VTK_CELL_TYPES = {ct.vtk_code: ct.name for ct in CELL_TYPES.values()}

REGION_KINDS = ('cell', 'facet', 'vertex')


@dataclass(frozen=True, eq=False)
class Mesh:
    """Vertices, cell connectivity blocks and per-cell group ids; immutable"""

    dim: int
    vertices: np.ndarray
    cell_blocks: Tuple[Tuple[str, np.ndarray], ...]
    cell_group_ids: np.ndarray
    name: str = 'mesh'

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise MeshError(f"unsupported mesh dimension {self.dim}")

        vertices = np.array(self.vertices, dtype=np.float64)
        if vertices.ndim != 2 or vertices.shape[1] != self.dim:
            raise MeshError(f"vertices must have shape (n, {self.dim}), got {vertices.shape}")
        n_vertices = vertices.shape[0]

        blocks = []
        n_cells = 0
        has_volume = False
        for cell_type, conn in self.cell_blocks:
            if cell_type not in CELL_TYPES:
                raise MeshError(f"unsupported cell type '{cell_type}'")
            ct = CELL_TYPES[cell_type]
            conn = np.array(conn, dtype=np.int64).reshape((-1, ct.n_vertices))
            if ct.dim > self.dim:
                raise MeshError(f"{cell_type} cells cannot live in a {self.dim}D mesh")
            has_volume = has_volume or ct.dim == self.dim
            if conn.size and (conn.min() < 0 or conn.max() >= n_vertices):
                raise MeshError(f"{cell_type} connectivity index out of range")
            if conn.shape[1] > 1:
                ordered = np.sort(conn, axis=1)
                if np.any(ordered[:, 1:] == ordered[:, :-1]):
                    raise MeshError(f"{cell_type} cell with repeated vertices")
            conn.setflags(write=False)
            blocks.append((cell_type, conn))
            n_cells += conn.shape[0]

        if not has_volume:
            raise MeshError(f"mesh has no {self.dim}D volume cells")

        groups = np.array(self.cell_group_ids, dtype=np.int64).reshape(-1)
        if groups.shape[0] != n_cells:
            raise MeshError(f"{groups.shape[0]} group ids for {n_cells} cells")

        vertices.setflags(write=False)
        groups.setflags(write=False)
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'cell_blocks', tuple(blocks))
        object.__setattr__(self, 'cell_group_ids', groups)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return int(sum(conn.shape[0] for _, conn in self.cell_blocks))

    @cached_property
    def volume_block(self) -> Tuple[str, np.ndarray, np.ndarray]:
        """(cell type, connectivity, global cell ids) of the volume cells."""
        found = []
        offset = 0
        for cell_type, conn in self.cell_blocks:
            if CELL_TYPES[cell_type].dim == self.dim:
                found.append((cell_type, conn, np.arange(offset, offset + conn.shape[0])))
            offset += conn.shape[0]
        types = {ct for ct, _, _ in found}
        if len(types) > 1:
            raise MeshError(f"mixed volume cell types are not supported: {sorted(types)}")
        cell_type = found[0][0]
        conn = np.concatenate([c for _, c, _ in found])
        ids = np.concatenate([i for _, _, i in found])
        conn.setflags(write=False)
        ids.setflags(write=False)
        return cell_type, conn, ids

    @cached_property
    def cell_lookup(self) -> np.ndarray:
        """Global cell id -> row in volume_block (-1 for lower-dimensional cells)."""
        _, _, ids = self.volume_block
        lookup = np.full(self.n_cells, -1, dtype=np.int64)
        lookup[ids] = np.arange(ids.shape[0])
        lookup.setflags(write=False)
        return lookup

    @cached_property
    def facet_table(self) -> Tuple[np.ndarray, np.ndarray]:
        """Sorted boundary facet vertex tuples and the volume cell owning each."""
        cell_type, conn, ids = self.volume_block
        local = np.array(CELL_TYPES[cell_type].facets)
        n_local = local.shape[0]
        all_facets = np.sort(conn[:, local].reshape((-1, local.shape[1])), axis=1)
        owners = np.repeat(ids, n_local)
        keys, first, counts = np.unique(all_facets, axis=0, return_index=True,
                                        return_counts=True)
        boundary = counts == 1
        facets = keys[boundary]
        facet_owners = owners[first[boundary]]
        facets.setflags(write=False)
        facet_owners.setflags(write=False)
        return facets, facet_owners

    def bounding_box(self) -> np.ndarray:
        """(2, dim) array of minimum and maximum vertex coordinates"""
        return np.vstack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    def cell_centroids(self) -> np.ndarray:
        """Centroid per global cell id"""
        out = np.empty((self.n_cells, self.dim))
        offset = 0
        for _, conn in self.cell_blocks:
            out[offset:offset + conn.shape[0]] = self.vertices[conn].mean(axis=1)
            offset += conn.shape[0]
        return out

    def same_as(self, other: 'Mesh', tol: float = 1e-12) -> bool:
        """Geometry, connectivity and group equality up to a coordinate tolerance"""
        if self.dim != other.dim or self.vertices.shape != other.vertices.shape:
            return False
        if not np.allclose(self.vertices, other.vertices, rtol=0.0, atol=tol):
            return False
        if len(self.cell_blocks) != len(other.cell_blocks):
            return False
        for (t1, c1), (t2, c2) in zip(self.cell_blocks, other.cell_blocks):
            if t1 != t2 or not np.array_equal(c1, c2):
                return False
        return bool(np.array_equal(self.cell_group_ids, other.cell_group_ids))


@dataclass(frozen=True, eq=False)
class Region:
    """Named, sorted set of mesh entities of one kind"""

    name: str
    kind: str
    entities: np.ndarray
    mesh: Mesh = field(repr=False)

    @cached_property
    def vertices(self) -> np.ndarray:
        if self.kind == 'vertex':
            return self.entities
        if self.kind == 'facet':
            facets, _ = self.mesh.facet_table
            return np.unique(facets[self.entities])
        _, conn, _ = self.mesh.volume_block
        return np.unique(conn[self.mesh.cell_lookup[self.entities]])

    @property
    def cells(self) -> np.ndarray:
        if self.kind != 'cell':
            raise MeshError(f"region '{self.name}' is a {self.kind} region, not a cell region")
        return self.entities

    @property
    def facets(self) -> np.ndarray:
        """Vertex tuples of the region facets (facet regions only)"""
        if self.kind != 'facet':
            raise MeshError(f"region '{self.name}' is a {self.kind} region, not a facet region")
        facets, _ = self.mesh.facet_table
        return facets[self.entities]

    def __len__(self):
        return int(self.entities.shape[0])


@dataclass(frozen=True)
class RegionSelector:
    """Parsed region selector expression plus the requested entity kind"""

    text: str
    kind: str
    tree: tuple

    @classmethod
    def parse(cls, text: str, kind: Optional[str] = None) -> 'RegionSelector':
        tree = _parse_selector(text)
        if kind is None:
            kind = 'vertex' if tree[0] in ('vertices', 'vertex_group') else 'cell'
        if kind not in REGION_KINDS:
            raise MeshError(f"unknown region kind '{kind}'")
        if tree[0] == 'cell_group' and kind != 'cell':
            raise MeshError(f"'{text}' selects cells and cannot produce a {kind} region")
        return cls(text=text, kind=kind, tree=tree)


_COORDS = {'x': 0, 'y': 1, 'z': 2}
_TOKEN_RE = re.compile(r"\s*(?:(<=|>=|<|>)|([&|()])|"
                       r"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|([A-Za-z_]\w*))")


def _tokenize_predicate(text: str) -> List[Tuple[str, str]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise MeshError(f"cannot parse selector predicate at '{text[pos:]}'")
        if m.group(1):
            tokens.append(('op', m.group(1)))
        elif m.group(2):
            tokens.append(('punct', m.group(2)))
        elif m.group(3):
            tokens.append(('number', m.group(3)))
        else:
            name = m.group(4)
            if name not in _COORDS:
                raise MeshError(f"unknown coordinate name '{name}' in selector")
            tokens.append(('coord', name))
        pos = m.end()
    return tokens


class _PredicateParser:
    # or_expr := and_expr { "|" and_expr };  and_expr := atom { "&" atom }
    # atom := comparison | "(" or_expr ")"

    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self):
        token = self.peek()
        self.pos += 1
        return token

    def parse(self):
        tree = self.or_expr()
        if self.pos != len(self.tokens):
            raise MeshError(f"unexpected token '{self.peek()[1]}' in selector predicate")
        return tree

    def or_expr(self):
        node = self.and_expr()
        while self.peek() == ('punct', '|'):
            self.take()
            node = ('or', node, self.and_expr())
        return node

    def and_expr(self):
        node = self.atom()
        while self.peek() == ('punct', '&'):
            self.take()
            node = ('and', node, self.atom())
        return node

    def atom(self):
        kind, value = self.take()
        if (kind, value) == ('punct', '('):
            node = self.or_expr()
            if self.take() != ('punct', ')'):
                raise MeshError("unbalanced parentheses in selector predicate")
            return node
        if kind != 'coord':
            raise MeshError(f"expected a coordinate name, got '{value}'")
        op_kind, op = self.take()
        num_kind, number = self.take()
        if op_kind != 'op' or num_kind != 'number':
            raise MeshError(f"malformed comparison after '{value}'")
        return ('cmp', _COORDS[value], op, float(number))


def _parse_selector(text: str) -> tuple:
    normalized = ' '.join(text.split())
    if normalized == 'all':
        return ('all',)
    m = re.fullmatch(r'(cells|vertices) of group (\d+(?: ?, ?\d+)*)', normalized)
    if m:
        groups = tuple(int(g) for g in m.group(2).split(','))
        return ('cell_group' if m.group(1) == 'cells' else 'vertex_group', groups)
    m = re.fullmatch(r'vertices in (\(.*)', normalized)
    if m:
        return ('vertices', _PredicateParser(_tokenize_predicate(m.group(1))).parse())
    raise MeshError(f"cannot parse region selector '{text}'")


def _eval_predicate(tree: tuple, coors: np.ndarray) -> np.ndarray:
    kind = tree[0]
    if kind == 'cmp':
        _, axis, op, value = tree
        if axis >= coors.shape[1]:
            raise MeshError(f"coordinate '{'xyz'[axis]}' not available in a {coors.shape[1]}D mesh")
        column = coors[:, axis]
        if op == '<':
            return column < value
        if op == '>':
            return column > value
        if op == '<=':
            return column <= value
        return column >= value
    left = _eval_predicate(tree[1], coors)
    right = _eval_predicate(tree[2], coors)
    return (left & right) if kind == 'and' else (left | right)


def select_region(mesh: Mesh, name: str, selector: Union[RegionSelector, str],
                  kind: Optional[str] = None) -> Region:
    """Select a named region of the mesh; an empty selection is an error."""
    if isinstance(selector, str):
        selector = RegionSelector.parse(selector, kind)
    tree = selector.tree
    _, conn, cell_ids = mesh.volume_block

    if tree[0] in ('all', 'cell_group'):
        if tree[0] == 'all':
            cell_mask = np.ones(cell_ids.shape[0], dtype=bool)
        else:
            cell_mask = np.isin(mesh.cell_group_ids[cell_ids], tree[1])
        vertex_mask = np.zeros(mesh.n_vertices, dtype=bool)
        vertex_mask[conn[cell_mask]] = True
    else:
        if tree[0] == 'vertex_group':
            vertex_mask = np.zeros(mesh.n_vertices, dtype=bool)
            vertex_mask[conn[np.isin(mesh.cell_group_ids[cell_ids], tree[1])]] = True
        else:
            vertex_mask = _eval_predicate(tree[1], mesh.vertices)
        cell_mask = vertex_mask[conn].all(axis=1)

    if selector.kind == 'cell':
        entities = cell_ids[cell_mask]
    elif selector.kind == 'vertex':
        entities = np.flatnonzero(vertex_mask)
    else:
        facets, _ = mesh.facet_table
        entities = np.flatnonzero(vertex_mask[facets].all(axis=1))

    if entities.shape[0] == 0:
        raise EmptyRegionError(f"region '{name}' ({selector.text}) is empty")

    entities = np.unique(entities).astype(np.int64)
    entities.setflags(write=False)
    log_debug(f"region {name}: {entities.shape[0]} {selector.kind} entities", "MESH")
    return Region(name=name, kind=selector.kind, entities=entities, mesh=mesh)


def boundary_facets(mesh: Mesh) -> np.ndarray:
    """Facets incident to exactly one volume cell, as sorted vertex tuples in lexicographic order."""
    facets, _ = mesh.facet_table
    return facets


def generate_block_mesh(dims: Sequence[float], shape: Sequence[int],
                        centre: Sequence[float], name: str = 'block') -> Mesh:
    """Generate a structured line2/quad4/hex8 mesh of an axis-aligned block.

    Args:
        dims: physical lengths per axis
        shape: vertex counts per axis
        centre: coordinates of the block centre

    Returns:
        Mesh with prod(shape) vertices (x varies fastest) and group ids 0
    """
    dims = np.asarray(dims, dtype=np.float64).reshape(-1)
    shape = np.asarray(shape, dtype=np.int64).reshape(-1)
    centre = np.asarray(centre, dtype=np.float64).reshape(-1)
    dim = dims.shape[0]
    if not (dim == shape.shape[0] == centre.shape[0]) or dim not in (1, 2, 3):
        raise MeshError("dims, shape and centre must have equal length 1, 2 or 3")
    if np.any(shape < 2):
        raise MeshError(f"every shape entry must be >= 2, got {shape.tolist()}")
    if np.any(dims <= 0):
        raise MeshError(f"every dims entry must be positive, got {dims.tolist()}")

    axes = [np.linspace(c - 0.5 * d, c + 0.5 * d, n) for d, n, c in zip(dims, shape, centre)]
    grid = np.meshgrid(*axes, indexing='ij')
    vertices = np.stack([g.ravel(order='F') for g in grid], axis=1)
    idx = np.arange(int(np.prod(shape))).reshape(tuple(shape), order='F')

    if dim == 1:
        corners = [idx[:-1], idx[1:]]
        cell_type = 'line2'
    elif dim == 2:
        corners = [idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]]
        cell_type = 'quad4'
    else:
        corners = [idx[:-1, :-1, :-1], idx[1:, :-1, :-1], idx[1:, 1:, :-1], idx[:-1, 1:, :-1],
                   idx[:-1, :-1, 1:], idx[1:, :-1, 1:], idx[1:, 1:, 1:], idx[:-1, 1:, 1:]]
        cell_type = 'hex8'
    conn = np.stack([c.ravel(order='F') for c in corners], axis=1)

    return Mesh(dim=dim, vertices=vertices, cell_blocks=((cell_type, conn),),
                cell_group_ids=np.zeros(conn.shape[0], dtype=np.int64), name=name)


def assign_cell_groups(mesh: Mesh, boxes: Sequence[Tuple[int, Sequence[float], Sequence[float]]]) -> Mesh:
    """Return a copy of the mesh where cells with centroid inside a box get its group id.

    Later boxes win when boxes overlap.
    """
    groups = np.array(mesh.cell_group_ids)
    centroids = mesh.cell_centroids()
    for group_id, lo, hi in boxes:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if lo.shape != (mesh.dim,) or hi.shape != (mesh.dim,):
            raise MeshError(f"group box for id {group_id} must have {mesh.dim} coordinates")
        inside = np.all((centroids >= lo) & (centroids <= hi), axis=1)
        groups[inside] = int(group_id)
    return Mesh(dim=mesh.dim, vertices=mesh.vertices, cell_blocks=mesh.cell_blocks,
                cell_group_ids=groups, name=mesh.name)


# ==================== Legacy VTK ====================

_VTK_KEYWORDS = {'POINTS', 'CELLS', 'CELL_TYPES', 'CELL_DATA', 'POINT_DATA', 'SCALARS',
                 'VECTORS', 'LOOKUP_TABLE', 'FIELD', 'NORMALS', 'TENSORS', 'METADATA',
                 'TEXTURE_COORDINATES', 'COLOR_SCALARS'}


def _fmt(value: float) -> str:
    return format(float(value), '.17g')


def _as_point_array(name: str, values, count: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.shape[0] != count or arr.ndim > 2 or (arr.ndim == 2 and arr.shape[1] > 3):
        raise MeshError(f"{what} array '{name}' has shape {arr.shape}, expected ({count},) or ({count}, <=3)")
    return arr


def _write_data_block(lines: List[str], data: Dict[str, np.ndarray]):
    for name, arr in data.items():
        if ' ' in name:
            raise MeshError(f"VTK array names cannot contain spaces: '{name}'")
        if arr.ndim == 1:
            dtype = 'int' if np.issubdtype(arr.dtype, np.integer) else 'double'
            lines.append(f"SCALARS {name} {dtype} 1")
            lines.append("LOOKUP_TABLE default")
            if dtype == 'int':
                lines.extend(str(int(v)) for v in arr)
            else:
                lines.extend(_fmt(v) for v in arr)
        else:
            padded = np.zeros((arr.shape[0], 3))
            padded[:, :arr.shape[1]] = arr
            lines.append(f"VECTORS {name} double")
            lines.extend(' '.join(_fmt(v) for v in row) for row in padded)


def write_vtk(path: Union[str, Path], mesh: Mesh,
              point_data: Optional[Dict[str, np.ndarray]] = None,
              cell_data: Optional[Dict[str, np.ndarray]] = None,
              title: str = 'homfem output'):
    """Write an ASCII legacy VTK 3.0 unstructured grid; cell groups go to CELL_DATA mat_id."""
    point_data = {k: _as_point_array(k, v, mesh.n_vertices, 'point')
                  for k, v in (point_data or {}).items()}
    cell_data = {k: _as_point_array(k, v, mesh.n_cells, 'cell')
                 for k, v in (cell_data or {}).items()}
    if 'mat_id' in cell_data:
        raise MeshError("cell data name 'mat_id' is reserved for cell groups")

    coors = np.zeros((mesh.n_vertices, 3))
    coors[:, :mesh.dim] = mesh.vertices

    lines = ["# vtk DataFile Version 3.0", title.replace('\n', ' ')[:255] or 'homfem',
             "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_vertices} double"]
    lines.extend(' '.join(_fmt(v) for v in row) for row in coors)

    size = sum(conn.shape[0] * (conn.shape[1] + 1) for _, conn in mesh.cell_blocks)
    lines.append(f"CELLS {mesh.n_cells} {size}")
    for _, conn in mesh.cell_blocks:
        lines.extend(f"{conn.shape[1]} " + ' '.join(str(int(i)) for i in row) for row in conn)
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    for cell_type, conn in mesh.cell_blocks:
        lines.extend([str(CELL_TYPES[cell_type].vtk_code)] * conn.shape[0])

    lines.append(f"CELL_DATA {mesh.n_cells}")
    _write_data_block(lines, {'mat_id': mesh.cell_group_ids.astype(np.int64), **cell_data})
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        _write_data_block(lines, point_data)

    try:
        with open(path, 'w', encoding='ascii') as f:
            f.write('\n'.join(lines) + '\n')
    except OSError as e:
        raise MeshError(f"cannot write VTK file {path}: {e}", phase='output')


def _split_sections(lines: List[str], path) -> List[Tuple[List[str], List[str]]]:
    sections = []
    for line_no, raw in enumerate(lines, start=5):
        words = raw.split()
        if not words:
            continue
        if words[0] in _VTK_KEYWORDS:
            sections.append((words, []))
        elif not sections:
            raise MeshFormatError(f"{path}:{line_no}: data before the first section")
        else:
            sections[-1][1].extend(words)
    return sections


def read_vtk_data(path: Union[str, Path]) -> Tuple[Mesh, Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Read an ASCII legacy VTK unstructured grid with its point and cell data arrays."""
    try:
        with open(path, 'r', encoding='ascii', errors='replace') as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise MeshError(f"cannot read VTK file {path}: {e}", phase='parse')

    if len(lines) < 4 or not lines[0].startswith('# vtk DataFile'):
        raise MeshFormatError(f"{path}: missing '# vtk DataFile' header")
    if lines[2].strip().upper() != 'ASCII':
        raise MeshFormatError(f"{path}: only ASCII legacy VTK is supported")
    if lines[3].split() != ['DATASET', 'UNSTRUCTURED_GRID']:
        raise MeshFormatError(f"{path}: expected DATASET UNSTRUCTURED_GRID")

    points = None
    cells = None
    types = None
    point_data: Dict[str, np.ndarray] = {}
    cell_data: Dict[str, np.ndarray] = {}
    target, target_count = None, 0

    def numbers(values, count, label):
        if len(values) != count:
            raise MeshFormatError(f"{path}: {label} declares {count} values, found {len(values)}")
        try:
            return np.array([float(v) for v in values])
        except ValueError as e:
            raise MeshFormatError(f"{path}: {label}: {e}")

    for words, values in _split_sections(lines[4:], path):
        key = words[0]
        try:
            if key == 'POINTS':
                n = int(words[1])
                points = numbers(values, 3 * n, f"POINTS {n}").reshape((n, 3))
            elif key == 'CELLS':
                n, size = int(words[1]), int(words[2])
                flat = numbers(values, size, f"CELLS {n}").astype(np.int64)
                cells, pos = [], 0
                for _ in range(n):
                    if pos >= flat.shape[0]:
                        raise MeshFormatError(f"{path}: CELLS declares {n} cells, found {len(cells)}")
                    k = int(flat[pos])
                    cells.append(flat[pos + 1:pos + 1 + k])
                    pos += k + 1
                if pos != size:
                    raise MeshFormatError(f"{path}: CELLS size {size} does not match the cell list")
            elif key == 'CELL_TYPES':
                n = int(words[1])
                types = numbers(values, n, f"CELL_TYPES {n}").astype(np.int64)
            elif key in ('CELL_DATA', 'POINT_DATA'):
                if values:
                    raise MeshFormatError(f"{path}: unexpected values after {key}")
                target = cell_data if key == 'CELL_DATA' else point_data
                target_count = int(words[1])
            elif key == 'LOOKUP_TABLE':
                if values:
                    # LOOKUP_TABLE default directly followed by SCALARS values
                    if target is None or not target.get('__pending__'):
                        raise MeshFormatError(f"{path}: misplaced LOOKUP_TABLE")
                    name, n_comp, is_int = target.pop('__pending__')
                    arr = numbers(values, target_count * n_comp, f"SCALARS {name}")
                    arr = arr.reshape((target_count, n_comp)) if n_comp > 1 else arr
                    target[name] = arr.astype(np.int64) if is_int else arr
            elif key == 'SCALARS':
                if target is None:
                    raise MeshFormatError(f"{path}: SCALARS outside a data block")
                name = words[1]
                n_comp = int(words[3]) if len(words) > 3 else 1
                is_int = words[2].lower() in ('int', 'long', 'short', 'unsigned_int',
                                              'unsigned_long', 'unsigned_short', 'char')
                if values:
                    arr = numbers(values, target_count * n_comp, f"SCALARS {name}")
                    arr = arr.reshape((target_count, n_comp)) if n_comp > 1 else arr
                    target[name] = arr.astype(np.int64) if is_int else arr
                else:
                    target['__pending__'] = (name, n_comp, is_int)
            elif key == 'VECTORS':
                if target is None:
                    raise MeshFormatError(f"{path}: VECTORS outside a data block")
                name = words[1]
                target[name] = numbers(values, 3 * target_count, f"VECTORS {name}").reshape((target_count, 3))
            else:
                raise MeshFormatError(f"{path}: unsupported section '{key}'")
        except (IndexError, ValueError) as e:
            raise MeshFormatError(f"{path}: malformed '{' '.join(words)}' line: {e}")

    if points is None or cells is None or types is None:
        raise MeshFormatError(f"{path}: POINTS, CELLS and CELL_TYPES sections are required")
    if len(cells) != types.shape[0]:
        raise MeshFormatError(f"{path}: {len(cells)} cells but {types.shape[0]} cell types")

    blocks: List[Tuple[str, List[np.ndarray]]] = []
    for conn, code in zip(cells, types):
        if int(code) not in VTK_CELL_TYPES:
            raise MeshFormatError(f"{path}: unsupported VTK cell type {int(code)}")
        cell_type = VTK_CELL_TYPES[int(code)]
        if conn.shape[0] != CELL_TYPES[cell_type].n_vertices:
            raise MeshFormatError(f"{path}: {cell_type} cell with {conn.shape[0]} vertices")
        if blocks and blocks[-1][0] == cell_type:
            blocks[-1][1].append(conn)
        else:
            blocks.append((cell_type, [conn]))

    dim = max(CELL_TYPES[t].dim for t, _ in blocks)
    scale = max(1.0, float(np.abs(points).max())) if points.size else 1.0
    if np.any(np.abs(points[:, dim:]) > 1e-12 * scale):
        raise MeshFormatError(f"{path}: {dim}D cells with non-zero out-of-plane coordinates")

    groups = cell_data.pop('mat_id', None)
    if groups is None:
        groups = np.zeros(len(cells), dtype=np.int64)
    for store in (point_data, cell_data):
        store.pop('__pending__', None)
        for name, arr in list(store.items()):
            if arr.ndim == 2 and arr.shape[1] == 3:
                store[name] = arr[:, :dim]

    mesh = Mesh(dim=dim, vertices=points[:, :dim],
                cell_blocks=tuple((t, np.array(c)) for t, c in blocks),
                cell_group_ids=np.asarray(groups, dtype=np.int64), name=Path(path).stem)
    return mesh, point_data, cell_data


def read_vtk(path: Union[str, Path]) -> Mesh:
    """Read the mesh of an ASCII legacy VTK unstructured grid; mat_id becomes the cell groups."""
    mesh, _, _ = read_vtk_data(path)
    return mesh
