import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.sparse import csr_matrix, diags, identity

from config_manager import ConfigManager, LinearSolverConfig
from constraints import build_reduction, identity_reduction
from errors import ConvergenceError, SingularMatrixError, SolverError
from solvers import factorize, is_symmetric, newton, run_implicit, run_stationary, solve_linear


def _random_spd(n, seed=0):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    return B @ B.T + n * np.eye(n)


def _solver_config(**groups):
    return ConfigManager(groups).solver_config()


# ==================== Linear ====================

def test_identity_system():
    b = np.array([1.0, -2.0, 3.5])
    assert_allclose(solve_linear(np.eye(3), b), b)
    assert_allclose(solve_linear(identity(3, format='csr'), b), b)


@pytest.mark.parametrize('method', ['auto', 'direct', 'iterative'])
def test_backends_agree(method):
    A = _random_spd(40)
    b = np.arange(40.0)
    reference = np.linalg.solve(A, b)
    cfg = LinearSolverConfig(method=method, dense_threshold=10)
    assert_allclose(solve_linear(csr_matrix(A), b, cfg), reference, rtol=1e-8)


def test_nonsymmetric_sparse_system():
    n = 200
    A = diags([-1.0, 4.0, -2.0], [-1, 0, 1], shape=(n, n), format='csr')
    b = np.ones(n)
    for method in ('direct', 'iterative'):
        x = solve_linear(A, b, LinearSolverConfig(method=method, dense_threshold=10))
        assert_allclose(A @ x, b, atol=1e-8)
    assert not is_symmetric(A)
    assert is_symmetric(A + A.T)


def test_factorization_is_reusable():
    A = _random_spd(12, seed=3)
    solve = factorize(A)
    for k in range(3):
        b = np.full(12, float(k + 1))
        assert_allclose(A @ solve(b), b, atol=1e-10)


@pytest.mark.parametrize('method, threshold', [('auto', 2000), ('direct', 1)])
def test_singular_matrix_is_reported(method, threshold):
    A = csr_matrix(np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]))
    with pytest.raises(SingularMatrixError):
        solve_linear(A, np.array([1.0, 0.0, 1.0]), LinearSolverConfig(method=method,
                                                                      dense_threshold=threshold))


def test_zero_matrix_and_shape_errors():
    with pytest.raises(SingularMatrixError):
        solve_linear(np.zeros((2, 2)), np.ones(2))
    with pytest.raises(SolverError):
        solve_linear(np.ones((2, 3)), np.ones(2))
    with pytest.raises(SolverError):
        solve_linear(np.eye(2), np.ones(3))


# ==================== Newton ====================

def test_newton_cube_root():
    x, report = newton(lambda x: x ** 3 - 8.0, lambda x: np.array([[3.0 * x[0] ** 2]]), [3.0])
    assert report.converged
    assert report.iterations <= 8
    assert_allclose(x, [2.0], rtol=1e-10)
    assert report.final_residual <= report.initial_residual


def test_newton_linear_problem_takes_one_iteration():
    A = _random_spd(6, seed=5)
    b = np.ones(6)
    x, report = newton(lambda x: A @ x - b, lambda x: A, np.zeros(6))
    assert report.iterations == 1
    assert_allclose(A @ x, b, atol=1e-10)


def test_newton_converged_initial_guess():
    _, report = newton(lambda x: x - 1.0, lambda x: np.eye(1), [1.0])
    assert report.iterations == 0
    assert report.converged


def test_newton_line_search_backtracks():
    # arctan overshoots from far away without damping
    x, report = newton(lambda x: np.arctan(x), lambda x: np.array([[1.0 / (1.0 + x[0] ** 2)]]), [3.0])
    assert report.backtracks > 0
    assert abs(x[0]) < 1e-7


def test_newton_iteration_limit():
    cfg = _solver_config(newton={'i_max': 2})
    with pytest.raises(ConvergenceError) as info:
        newton(lambda x: x ** 3 - 8.0, lambda x: np.array([[3.0 * x[0] ** 2]]), [30.0], cfg)
    assert info.value.iterations == 2


def test_newton_non_finite_residual():
    with pytest.raises(ConvergenceError):
        newton(lambda x: x * np.inf, lambda x: np.eye(1), [1.0])


# ==================== Time stepping ====================

class _Decay:
    """u' = -k u on independent DOFs, the first one held at a fixed value"""

    def __init__(self, n=3, k=1.0, fixed=None):
        self.n = n
        self.k = k
        self.fixed = fixed

    def reduction(self, t):
        if self.fixed is None:
            return identity_reduction(self.n)
        return build_reduction(self.n, {0: self.fixed}, [])

    def residual(self, u, t, u_prev, dt):
        r = self.k * u
        if dt is not None:
            r = r + (u - u_prev) / dt
        return r

    def jacobian(self, u, t, dt):
        return identity(self.n, format='csr') * (self.k + (1.0 / dt if dt is not None else 0.0))

    def initial_state(self):
        return np.ones(self.n)


def test_run_implicit_backward_euler():
    cfg = _solver_config(ts={'kind': 'simple', 't0': 0.0, 't1': 1.0, 'dt': 0.25})
    history = run_implicit(_Decay(), cfg)
    assert [s.step for s in history] == [0, 1, 2, 3, 4]
    assert_allclose([s.time for s in history], [0.0, 0.25, 0.5, 0.75, 1.0])
    for state in history:
        assert_allclose(state.u, (1.0 / 1.25) ** state.step, rtol=1e-12)
    assert history[0].report is None


def test_run_implicit_constrains_initial_state_and_calls_back():
    cfg = _solver_config(ts={'kind': 'simple', 't1': 0.5, 'dt': 0.25})
    seen = []
    history = run_implicit(_Decay(fixed=3.0), cfg, on_step=lambda s: seen.append(s.step))
    assert seen == [0, 1, 2]
    assert history[0].u[0] == 3.0
    assert all(s.u[0] == 3.0 for s in history)


def test_run_stationary():
    state = run_stationary(_Decay(fixed=2.0))
    assert state.step == 0
    assert_allclose(state.u, [2.0, 0.0, 0.0], atol=1e-12)
    assert state.report.converged


def test_step_failure_names_the_step():
    class Broken(_Decay):
        def jacobian(self, u, t, dt):
            return csr_matrix((self.n, self.n))

    cfg = _solver_config(ts={'kind': 'simple', 't1': 0.5, 'dt': 0.25})
    with pytest.raises(SingularMatrixError) as info:
        run_implicit(Broken(), cfg)
    assert 'time step 1' in info.value.message
