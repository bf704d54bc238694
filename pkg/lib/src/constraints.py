"""
Boundary constraints for homfem
Essential and periodic conditions composed into one DOF elimination operator
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, issparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

try:
    from .discretization import DofMap
    from .errors import ConstraintError
    from .logger import log_debug
    from .mesh_io import Mesh, Region
except ImportError:
    from discretization import DofMap
    from errors import ConstraintError
    from logger import log_debug
    from mesh_io import Mesh, Region


FIXED_VALUE_TOL = 1e-12

PLANE_MATCHERS = {'match_x_plane': 0, 'match_y_plane': 1, 'match_z_plane': 2}


@dataclass(frozen=True)
class EssentialBC:
    """Prescribed values on a region: "var.component" -> constant or function name"""

    name: str
    region: str
    dofs: Tuple[Tuple[str, Any], ...]


@dataclass(frozen=True)
class PeriodicBC:
    """Ties DOFs of a slave region to translated DOFs of a master region"""

    name: str
    master: str
    slave: str
    dofs: Tuple[Tuple[str, str], ...]
    match: str = 'match_x_plane'
    translation: Optional[Tuple[float, ...]] = None
    tol: Optional[float] = None


def parse_dof_spec(spec: str, n_components: Dict[str, int]) -> Tuple[str, List[int]]:
    """Split "u.1" or "u.all" into the variable name and its component indices."""
    name, _, comp = spec.partition('.')
    if name not in n_components:
        raise ConstraintError(f"unknown variable '{name}' in DOF spec '{spec}'")
    n = n_components[name]
    if comp == 'all' or (comp == '' and n == 1):
        return name, list(range(n))
    try:
        index = int(comp)
    except ValueError:
        raise ConstraintError(f"malformed DOF spec '{spec}'")
    if not 0 <= index < n:
        raise ConstraintError(f"component {index} out of range for '{name}' with {n} components")
    return name, [index]


def plane_translation(dofmap: DofMap, master: Region, slave: Region, axis: int) -> np.ndarray:
    """Translation along one axis mapping the master plane onto the slave plane."""
    dim = dofmap.field.mesh.dim
    if axis >= dim:
        raise ConstraintError(f"cannot match along axis {axis} in a {dim}D mesh")
    coors = dofmap.node_coors
    t = np.zeros(dim)
    t[axis] = (coors[dofmap.region_nodes(slave), axis].mean()
               - coors[dofmap.region_nodes(master), axis].mean())
    return t


def default_tolerance(mesh: Mesh) -> float:
    lo, hi = mesh.bounding_box()
    return 1e-8 * max(1.0, float(np.linalg.norm(hi - lo)))


def match_periodic(mesh: Mesh, dofmap: DofMap, master: Region, slave: Region,
                   translation, tol: Optional[float] = None,
                   components: Optional[Sequence[int]] = None) -> np.ndarray:
    """Pair master and slave nodes by translated coordinates.

    Returns:
        (n_pairs, 2) array of (master DOF, slave DOF), per component, in
        ascending master node order
    """
    tol = default_tolerance(mesh) if tol is None else tol
    translation = np.asarray(translation, dtype=np.float64).reshape(-1)
    if translation.shape[0] != mesh.dim:
        raise ConstraintError(f"translation {translation.tolist()} does not match mesh dimension {mesh.dim}")

    master_nodes = dofmap.region_nodes(master)
    slave_nodes = dofmap.region_nodes(slave)
    if master_nodes.shape[0] != slave_nodes.shape[0]:
        raise ConstraintError(f"periodic regions '{master.name}' and '{slave.name}' have "
                              f"{master_nodes.shape[0]} and {slave_nodes.shape[0]} nodes")

    tree = cKDTree(dofmap.node_coors[slave_nodes])
    dist, idx = tree.query(dofmap.node_coors[master_nodes] + translation)
    if np.any(dist > tol):
        worst = int(np.argmax(dist))
        raise ConstraintError(f"periodic node {int(master_nodes[worst])} of '{master.name}' has no "
                              f"match in '{slave.name}' (distance {dist[worst]:.3e} > tol {tol:.3e})")
    if np.unique(idx).shape[0] != idx.shape[0]:
        raise ConstraintError(f"periodic matching '{master.name}' -> '{slave.name}' is not a bijection")

    comps = range(dofmap.n_components) if components is None else components
    pairs = [np.stack([dofmap.node_dofs(master_nodes, c), dofmap.node_dofs(slave_nodes[idx], c)], axis=1)
             for c in comps]
    pairs = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
    return pairs[np.argsort(pairs[:, 0], kind='stable')]


@dataclass(frozen=True, eq=False)
class ConstraintReduction:
    """Elimination of fixed and periodic-slave DOFs: x_full = P x_reduced + u_fixed"""

    n_dofs: int
    retained: np.ndarray        # masters kept in the reduced vector, ascending
    fixed: np.ndarray           # fixed DOFs, ascending
    u_fixed: np.ndarray         # full-length vector, fixed values at fixed DOFs
    master: np.ndarray          # full DOF -> retained master DOF, -1 when fixed
    prolongation: csr_matrix = field(repr=False)

    @property
    def n_reduced(self) -> int:
        return self.retained.shape[0]

    @property
    def slaves(self) -> np.ndarray:
        free = self.master >= 0
        return np.flatnonzero(free & (self.master != np.arange(self.n_dofs)))

    def prolong(self, x_reduced: np.ndarray) -> np.ndarray:
        return self.prolongation @ np.asarray(x_reduced) + self.u_fixed

    def restrict(self, x_full: np.ndarray) -> np.ndarray:
        return np.asarray(x_full)[self.retained]

    def with_fixed_values(self, u_fixed: np.ndarray) -> 'ConstraintReduction':
        """Same elimination pattern with new fixed values (time-dependent data)."""
        return ConstraintReduction(self.n_dofs, self.retained, self.fixed, np.asarray(u_fixed),
                                   self.master, self.prolongation)


def identity_reduction(n_dofs: int) -> ConstraintReduction:
    return build_reduction(n_dofs, {}, np.zeros((0, 2), dtype=np.int64))


def build_reduction(n_dofs: int, fixed: Union[Dict[int, float], Tuple[np.ndarray, np.ndarray]],
                    pairs) -> ConstraintReduction:
    """Compose essential values and periodic ties into one reduction.

    Tied DOFs form groups (connected components); the smallest index of a
    group is its master. A group containing a fixed DOF becomes fixed as a
    whole; differing fixed values inside one group are contradictory.
    """
    if isinstance(fixed, dict):
        fixed_dofs = np.fromiter(fixed.keys(), dtype=np.int64, count=len(fixed))
        fixed_vals = np.fromiter(fixed.values(), dtype=np.float64, count=len(fixed))
    else:
        fixed_dofs = np.asarray(fixed[0], dtype=np.int64).reshape(-1)
        fixed_vals = np.asarray(fixed[1], dtype=np.float64).reshape(-1)
    pairs = np.asarray(pairs, dtype=np.int64).reshape((-1, 2))

    for arr, what in ((fixed_dofs, 'fixed'), (pairs, 'periodic')):
        if arr.size and (arr.min() < 0 or arr.max() >= n_dofs):
            raise ConstraintError(f"{what} DOF index out of range for {n_dofs} DOFs")

    graph = coo_matrix((np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(n_dofs, n_dofs))
    _, labels = connected_components(graph, directed=False)
    # Minimum DOF index of every component
    roots = np.full(labels.max() + 1 if n_dofs else 0, n_dofs, dtype=np.int64)
    np.minimum.at(roots, labels, np.arange(n_dofs))
    master = roots[labels]

    group_value = {}
    for dof, value in zip(fixed_dofs, fixed_vals):
        root = int(master[dof])
        previous = group_value.get(root)
        if previous is not None and abs(previous - value) > FIXED_VALUE_TOL:
            raise ConstraintError(f"contradictory fixed values {previous!r} and {value!r} "
                                  f"on DOFs tied to DOF {root}")
        group_value[root] = float(value)

    u_fixed = np.zeros(n_dofs)
    is_fixed = np.zeros(n_dofs, dtype=bool)
    if group_value:
        fixed_roots = np.fromiter(group_value.keys(), dtype=np.int64)
        root_values = np.zeros(n_dofs)
        root_values[fixed_roots] = list(group_value.values())
        is_root_fixed = np.zeros(n_dofs, dtype=bool)
        is_root_fixed[fixed_roots] = True
        is_fixed = is_root_fixed[master]
        u_fixed[is_fixed] = root_values[master[is_fixed]]

    master = np.where(is_fixed, -1, master)
    retained = np.flatnonzero(master == np.arange(n_dofs))
    reduced_index = np.full(n_dofs, -1, dtype=np.int64)
    reduced_index[retained] = np.arange(retained.shape[0])

    free = np.flatnonzero(~is_fixed)
    P = coo_matrix((np.ones(free.shape[0]), (free, reduced_index[master[free]])),
                   shape=(n_dofs, retained.shape[0])).tocsr()

    for arr in (retained, u_fixed, master):
        arr.setflags(write=False)
    fixed_all = np.flatnonzero(is_fixed)
    fixed_all.setflags(write=False)
    log_debug(f"reduction: {n_dofs} DOFs -> {retained.shape[0]} "
              f"({fixed_all.shape[0]} fixed, {free.shape[0] - retained.shape[0]} slaves)", "CONSTRAINTS")
    return ConstraintReduction(n_dofs=n_dofs, retained=retained, fixed=fixed_all, u_fixed=u_fixed,
                               master=master, prolongation=P)


def reduce_system(matrix, rhs: np.ndarray, reduction: ConstraintReduction):
    """A_r = P^T A P and b_r = P^T (b - A u_fixed)."""
    n = reduction.n_dofs
    rhs = np.asarray(rhs, dtype=np.float64)
    if matrix.shape != (n, n) or rhs.shape != (n,):
        raise ConstraintError(f"system of shape {matrix.shape} with RHS {rhs.shape} does not "
                              f"match a reduction over {n} DOFs")
    A = matrix if issparse(matrix) else csr_matrix(matrix)
    P = reduction.prolongation
    A_r = (P.T @ A @ P).tocsr()
    b_r = P.T @ (rhs - A @ reduction.u_fixed)
    return A_r, np.asarray(b_r).reshape(-1)
