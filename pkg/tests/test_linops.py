import numpy as np
import pytest

from bigrad.errors import DimensionMismatch, NonConvergence, Singular
from bigrad.linops import (
    LinearOperator,
    cg_solve,
    dense_solve,
    fd_directional,
    gmres_solve,
    matrix,
    vector,
)


def test_vector_validates_and_freezes():
    v = vector([1.0, 2.0, 3.0])
    assert v.shape == (3,)
    with pytest.raises(ValueError):
        v[0] = 5.0
    with pytest.raises(ValueError):
        vector([1.0, np.nan])


def test_matrix_flat_and_nested():
    m = matrix([1, 2, 3, 4, 5, 6], rows=2, cols=3)
    assert m.shape == (2, 3)
    assert m[1, 0] == 4.0
    with pytest.raises(DimensionMismatch):
        matrix([1, 2, 3], rows=2, cols=2)
    with pytest.raises(ValueError):
        matrix([[np.inf, 0], [0, 1]])


def test_cg_identity():
    op = LinearOperator.identity(3)
    b = np.array([1.0, 2.0, 3.0])
    assert np.allclose(cg_solve(op, b), b)


def test_cg_diagonal():
    op = LinearOperator.from_matrix(np.diag([2.0, 4.0]))
    x = cg_solve(op, np.array([2.0, 4.0]))
    assert np.allclose(x, [1.0, 1.0])


def test_cg_random_spd_vs_dense_oracle():
    rng = np.random.default_rng(7)
    m = rng.standard_normal((5, 5))
    spd = m.T @ m + np.eye(5)
    b = rng.standard_normal(5)
    x = cg_solve(LinearOperator.from_matrix(spd), b, tol=1e-12)
    assert np.max(np.abs(x - np.linalg.solve(spd, b))) < 1e-8


def test_cg_rejects_indefinite():
    op = LinearOperator.from_matrix(np.diag([1.0, -1.0]))
    with pytest.raises(NonConvergence):
        cg_solve(op, np.array([1.0, 1.0]))


def test_gmres_identity_and_triangular():
    assert np.allclose(gmres_solve(LinearOperator.identity(1), np.array([5.0])), [5.0])
    op = LinearOperator.from_matrix(np.array([[1.0, 1.0], [0.0, 1.0]]))
    x = gmres_solve(op, np.array([2.0, 1.0]))
    assert np.allclose(x, [1.0, 1.0], atol=1e-9)


def test_gmres_random_vs_dense_oracle():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((8, 8)) + 4.0 * np.eye(8)
    b = rng.standard_normal(8)
    x = gmres_solve(LinearOperator.from_matrix(a), b, tol=1e-12)
    assert np.max(np.abs(x - np.linalg.solve(a, b))) < 1e-8


@pytest.mark.parametrize("dim", [5, 20, 50])
def test_iterative_agree_with_dense_up_to_dim_50(dim):
    rng = np.random.default_rng(dim)
    m = rng.standard_normal((dim, dim))
    spd = m.T @ m + dim * np.eye(dim)
    b = rng.standard_normal(dim)
    want = np.linalg.solve(spd, b)
    got_cg = cg_solve(LinearOperator.from_matrix(spd), b, tol=1e-12)
    got_gm = gmres_solve(LinearOperator.from_matrix(spd), b, tol=1e-12)
    denom = np.linalg.norm(want)
    assert np.linalg.norm(got_cg - want) / denom < 1e-7
    assert np.linalg.norm(got_gm - want) / denom < 1e-7


def test_dense_solve_examples():
    assert np.allclose(dense_solve(np.eye(2), np.array([3.0, 4.0])), [3.0, 4.0])
    assert np.allclose(dense_solve(np.diag([2.0, 0.5]), np.array([2.0, 1.0])), [1.0, 2.0])
    # hand inversion reused by the hypergradient worked example
    a = np.array([[1.0, 1.0], [-1.0, 1.0]])
    assert np.allclose(dense_solve(a, np.array([-1.0, 0.0])), [-0.5, -0.5])


def test_dense_solve_singular():
    with pytest.raises(Singular):
        dense_solve(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 1.0]))


def test_adjoint_consistency_random_probes():
    rng = np.random.default_rng(3)
    m = rng.standard_normal((6, 4))
    op = LinearOperator.from_matrix(m)
    for _ in range(20):
        u = rng.standard_normal(4)
        v = rng.standard_normal(6)
        lhs = float(op(u) @ v)
        rhs = float(u @ op.adjoint(v))
        assert abs(lhs - rhs) <= 1e-9 * (1.0 + abs(lhs))


def test_operator_linearity_probe():
    rng = np.random.default_rng(5)
    m = rng.standard_normal((4, 4))
    op = LinearOperator.from_matrix(m)
    u, v = rng.standard_normal(4), rng.standard_normal(4)
    a, b = 0.3, -1.7
    lhs = op(a * u + b * v)
    rhs = a * op(u) + b * op(v)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * (1.0 + np.max(np.abs(lhs)))


def test_fd_identity_returns_direction():
    d = fd_directional(lambda v: v, np.array([1.0, 2.0]), np.array([0.5, -0.5]))
    assert np.allclose(d, [0.5, -0.5])


def test_fd_square_scalar():
    d = fd_directional(lambda v: np.array([v[0] ** 2]), np.array([3.0]),
                       np.array([1.0]), h=1e-5)
    assert abs(d[0] - 6.0) < 1e-8


def test_fd_quadratic_map_vs_analytic_jacobian():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((4, 4))

    def fun(v):
        return (v @ a) * v  # component i: v_i * (A^T v)_i

    at = rng.standard_normal(4)
    direction = rng.standard_normal(4)
    # d/dt [ (at + t d) * A^T (at + t d) ]_i at t=0
    want = direction * (a.T @ at) + at * (a.T @ direction)
    got = fd_directional(fun, at, direction)
    assert np.max(np.abs(got - want)) < 1e-6


@pytest.mark.parametrize("h", [1e-7, 1e-5, 1e-3])
def test_fd_linear_map_h_independent(h):
    rng = np.random.default_rng(13)
    m = rng.standard_normal((3, 3))
    at = rng.standard_normal(3)
    d = rng.standard_normal(3)
    got = fd_directional(lambda v: m @ v, at, d, h=h)
    assert np.max(np.abs(got - m @ d)) < 1e-6
