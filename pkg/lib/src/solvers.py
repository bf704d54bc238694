"""
Solvers for homfem
Linear solves, Newton with backtracking line search, stationary and implicit time stepping
"""

import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol

import numpy as np
import scipy.linalg
from scipy.sparse import csc_matrix, csr_matrix, diags, issparse
from scipy.sparse.linalg import LinearOperator, cg, splu, tfqmr

try:
    from .config_manager import LinearSolverConfig, NewtonConfig, SolverConfig, default_solver_config
    from .constraints import ConstraintReduction
    from .errors import ConvergenceError, SingularMatrixError, SolverError
    from .logger import log_debug, log_info, log_step
except ImportError:
    from config_manager import LinearSolverConfig, NewtonConfig, SolverConfig, default_solver_config
    from constraints import ConstraintReduction
    from errors import ConvergenceError, SingularMatrixError, SolverError
    from logger import log_debug, log_info, log_step


SolveFn = Callable[[np.ndarray], np.ndarray]

DIRECT_RESIDUAL_RTOL = 1e-10
PIVOT_RTOL = 1e-13


# ==================== Linear ====================

def _check_square(A, b=None):
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SolverError(f"matrix of shape {A.shape} is not square")
    if b is not None and np.shape(b) != (A.shape[0],):
        raise SolverError(f"right-hand side of shape {np.shape(b)} does not match matrix {A.shape}")


def is_symmetric(A, tol: float = 1e-12) -> bool:
    if issparse(A):
        scale = abs(A).max() if A.nnz else 0.0
        diff = abs(A - A.T)
        return (diff.max() if diff.nnz else 0.0) <= tol * scale
    A = np.asarray(A)
    return bool(np.abs(A - A.T).max(initial=0.0) <= tol * np.abs(A).max(initial=0.0))


def _equilibration(A) -> np.ndarray:
    # Symmetric diagonal scaling 1/sqrt(|a_ii|), 1 where the diagonal vanishes
    d = np.abs(A.diagonal()) if issparse(A) else np.abs(np.diag(A))
    s = np.ones_like(d, dtype=np.float64)
    nz = d > 0.0
    s[nz] = 1.0 / np.sqrt(d[nz])
    return s


def _dense_factor(A: np.ndarray) -> SolveFn:
    n = A.shape[0]
    s = _equilibration(A)
    scaled = s[:, None] * A * s[None, :]
    scale = np.abs(scaled).max(initial=0.0)
    if scale == 0.0:
        raise SingularMatrixError("matrix is zero")
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(scaled, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= PIVOT_RTOL * scale * max(n, 1):
        raise SingularMatrixError(f"matrix is singular (pivot {pivots.min():.3e}, size {n})")

    def solve(b):
        return s * scipy.linalg.lu_solve((lu, piv), s * b)
    return solve


def _sparse_factor(A) -> SolveFn:
    s = _equilibration(A)
    S = diags(s)
    try:
        lu = splu(csc_matrix(S @ A @ S))
    except RuntimeError as e:
        raise SingularMatrixError(f"sparse factorization failed: {e}")

    def solve(b):
        return s * lu.solve(s * b)
    return solve


def _krylov(A, cfg: LinearSolverConfig) -> SolveFn:
    A = csr_matrix(A)
    d = A.diagonal()
    inv_d = np.where(d != 0.0, 1.0 / np.where(d != 0.0, d, 1.0), 1.0)
    precond = LinearOperator(A.shape, matvec=lambda v: inv_d * v)
    symmetric = is_symmetric(A)
    method = cg if symmetric else tfqmr

    def solve(b):
        iterations = [0]

        def count(_):
            iterations[0] += 1

        x, info = method(A, b, rtol=cfg.rtol, atol=cfg.atol, maxiter=cfg.max_iterations,
                         M=precond, callback=count)
        residual = float(np.linalg.norm(A @ x - b))
        if info > 0:
            raise ConvergenceError(f"{method.__name__} did not converge", iterations[0], residual)
        if info < 0:
            raise SolverError(f"{method.__name__} breakdown (info {info})")
        log_debug(f"{method.__name__}: {iterations[0]} iterations, residual {residual:.3e}", "SOLVE")
        return x
    return solve


def factorize(A, cfg: Optional[LinearSolverConfig] = None) -> SolveFn:
    """Prepare a reusable solver for A: dense LU, sparse LU or preconditioned Krylov."""
    cfg = cfg or default_solver_config().linear
    if not issparse(A):
        A = np.asarray(A, dtype=np.float64)
    _check_square(A)
    n = A.shape[0]
    use_dense = n <= cfg.dense_threshold and cfg.method != 'iterative'
    if use_dense:
        dense = A.toarray() if issparse(A) else np.asarray(A, dtype=np.float64)
        inner = _dense_factor(dense)
    elif cfg.method == 'direct':
        inner = _sparse_factor(csr_matrix(A))
    else:
        return _krylov(A, cfg)

    def solve(b):
        b = np.asarray(b, dtype=np.float64)
        x = inner(b)
        residual = float(np.linalg.norm(A @ x - b))
        limit = max(cfg.atol, DIRECT_RESIDUAL_RTOL * float(np.linalg.norm(b)))
        if not np.all(np.isfinite(x)) or residual > limit:
            raise SingularMatrixError(f"direct solve residual {residual:.3e} exceeds {limit:.3e}; "
                                      f"matrix is singular or ill-conditioned")
        return x
    return solve


def solve_linear(A, b, cfg: Optional[LinearSolverConfig] = None) -> np.ndarray:
    """Solve A x = b with the configured backend."""
    b = np.asarray(b, dtype=np.float64)
    if not issparse(A):
        A = np.asarray(A, dtype=np.float64)
    _check_square(A, b)
    return factorize(A, cfg)(b)


# ==================== Newton ====================

@dataclass
class NewtonReport:
    iterations: int = 0
    backtracks: int = 0
    initial_residual: float = 0.0
    final_residual: float = 0.0
    converged: bool = False

    def summary(self) -> str:
        return (f"{self.iterations} iterations, {self.backtracks} backtracks, "
                f"|r| {self.initial_residual:.3e} -> {self.final_residual:.3e}")


def newton(residual: Callable[[np.ndarray], np.ndarray],
           jacobian: Callable[[np.ndarray], object],
           x0, cfg: Optional[SolverConfig] = None,
           linear_solver: Optional[Callable[[object, np.ndarray], np.ndarray]] = None):
    """Newton iteration with backtracking line search.

    Stops when |r| <= eps_a or |r| <= eps_r * |r(x0)| (l2 norms). Each
    step solves A dx = -r and halves (ls_red) the step while the residual
    norm does not decrease.

    Returns:
        (x, NewtonReport)
    """
    cfg = cfg or default_solver_config()
    ncfg: NewtonConfig = cfg.newton
    solve = linear_solver or (lambda A, b: solve_linear(A, b, cfg.linear))

    x = np.array(x0, dtype=np.float64).reshape(-1)
    r = np.asarray(residual(x), dtype=np.float64)
    norm = float(np.linalg.norm(r))
    report = NewtonReport(initial_residual=norm, final_residual=norm)

    while True:
        if not np.isfinite(norm):
            raise ConvergenceError("residual is not finite", report.iterations, norm)
        if norm <= ncfg.eps_a or norm <= ncfg.eps_r * report.initial_residual:
            report.converged = True
            break
        if report.iterations >= ncfg.i_max:
            raise ConvergenceError("Newton iteration limit reached", report.iterations, norm)

        dx = solve(jacobian(x), -r)
        alpha = 1.0
        while True:
            x_new = x + alpha * dx
            r_new = np.asarray(residual(x_new), dtype=np.float64)
            norm_new = float(np.linalg.norm(r_new))
            if norm_new < norm:
                break
            alpha *= ncfg.ls_red
            report.backtracks += 1
            if alpha < ncfg.ls_min:
                raise ConvergenceError("line search stalled at the minimum step",
                                       report.iterations, norm)
        x, r, norm = x_new, r_new, norm_new
        report.iterations += 1
        log_debug(f"iteration {report.iterations}: |r| = {norm:.6e} (step {alpha:g})", "NEWTON")

    report.final_residual = norm
    return x, report


# ==================== Time stepping ====================

class SteppableProblem(Protocol):
    """What the time-stepping drivers need from an assembled problem"""

    def reduction(self, t: float) -> ConstraintReduction: ...

    def residual(self, u: np.ndarray, t: float, u_prev: Optional[np.ndarray], dt: Optional[float]) -> np.ndarray: ...

    def jacobian(self, u: np.ndarray, t: float, dt: Optional[float]): ...

    def initial_state(self) -> np.ndarray: ...


@dataclass
class StepState:
    step: int
    time: float
    u: np.ndarray
    report: Optional[NewtonReport] = None


def _solve_step(problem: SteppableProblem, cfg: SolverConfig, t: float, u_guess: np.ndarray,
                u_prev: Optional[np.ndarray], dt: Optional[float]):
    red = problem.reduction(t)
    P = red.prolongation

    def residual(x):
        return P.T @ problem.residual(red.prolong(x), t, u_prev, dt)

    def jacobian(x):
        return (P.T @ problem.jacobian(red.prolong(x), t, dt) @ P).tocsr()

    x, report = newton(residual, jacobian, red.restrict(u_guess), cfg)
    return red.prolong(x), report


def run_stationary(problem: SteppableProblem, cfg: Optional[SolverConfig] = None) -> StepState:
    """One Newton solve at t = t0 with essential values resolved at t0."""
    cfg = cfg or default_solver_config()
    t = cfg.ts.t0
    u, report = _solve_step(problem, cfg, t, problem.initial_state(), None, None)
    log_info(f"stationary solve: {report.summary()}", "SOLVE")
    return StepState(step=0, time=t, u=u, report=report)


def run_implicit(problem: SteppableProblem, cfg: Optional[SolverConfig] = None,
                 on_step: Optional[Callable[[StepState], None]] = None) -> List[StepState]:
    """Backward Euler with a fixed step; the history starts with the constrained initial state."""
    cfg = cfg or default_solver_config()
    ts = cfg.ts
    dt = ts.dt
    n_step = ts.n_step

    red0 = problem.reduction(ts.t0)
    u = red0.prolong(red0.restrict(problem.initial_state()))
    history = [StepState(step=0, time=ts.t0, u=u)]
    if on_step:
        on_step(history[0])

    for step in range(1, n_step + 1):
        t = ts.t0 + step * dt
        try:
            u_new, report = _solve_step(problem, cfg, t, u, u, dt)
        except SolverError as e:
            e.message = f"time step {step} (t = {t:g}): {e.message}"
            raise
        state = StepState(step=step, time=t, u=u_new, report=report)
        history.append(state)
        log_step(f"step {step}/{n_step}, t = {t:g}: {report.summary()}", "TS")
        if on_step:
            on_step(state)
        u = u_new
    return history
