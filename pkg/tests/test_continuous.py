import numpy as np
import pytest

from bigrad.continuous import (
    BilevelConfig,
    SmoothObjective,
    barrier_transform,
    build_residuals,
    eq_reparam,
    hypergradient,
    quadratic_objective,
    solve_bilevel,
)
from bigrad.errors import Infeasible, InfeasiblePoint
from bigrad.gradcheck_suites import (
    closed_form_solution,
    hypergradient_fd_gap,
    make_quadratic_bilevel,
)
from bigrad.linops import fd_directional


def toy_pair():
    # f = 0.5 (x - z)^2 + 0.5 y^2, g = 0.5 (y - x)^2
    f = quadratic_objective(1, 1, 1, qxx=[[1]], qxz=[[-1]], qzz=[[1]], qyy=[[1]])
    g = quadratic_objective(1, 1, 1, qxx=[[1]], qxy=[[-1]], qyy=[[1]])
    return f, g


def test_toy_residual_at_hand_solution():
    f, g = toy_pair()
    rp = build_residuals(f, g)
    z = np.array([2.0])
    at = np.array([1.0])  # x = y = z / 2
    assert abs(rp.G_eval(at, at, z)[0]) < 1e-12
    assert abs(rp.F_eval(at, at, z)[0]) < 1e-10


def test_decoupled_inner_reduces_F_to_grad_x():
    # g independent of x: inner multiplier route contributes nothing
    f = quadratic_objective(2, 2, 1, qxx=np.eye(2), qxy=0.3 * np.ones((2, 2)),
                            qyy=np.eye(2), lin_x=[0.5, -0.2])
    g = quadratic_objective(2, 2, 1, qyy=2.0 * np.eye(2), lin_y=[1.0, 1.0])
    rp = build_residuals(f, g)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x, y, z = rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(1)
        assert np.max(np.abs(rp.F_eval(x, y, z) - f.grad("x", x, y, z))) < 1e-9


def test_random_quadratic_residual_vanishes_at_closed_form():
    rng = np.random.default_rng(21)
    for _ in range(5):
        prob = make_quadratic_bilevel(rng, n=3, m=4, p=2)
        z = prob["z0"]
        x_star, y_star = closed_form_solution(prob, z)
        rp = build_residuals(prob["f"], prob["g"])
        assert np.max(np.abs(rp.F_eval(x_star, y_star, z))) <= 1e-8
        assert np.max(np.abs(rp.G_eval(x_star, y_star, z))) <= 1e-8


def test_hypergradient_toy_analytic():
    f, g = toy_pair()
    sol = solve_bilevel(f, g, np.array([2.0]))
    rp = build_residuals(f, g)
    d = hypergradient(rp, sol, np.array([1.0]), np.array([1.0]), np.array([0.0]))
    assert abs(d[0] - 1.0) <= 1e-8


def test_hypergradient_zero_left_vector_returns_grad_z():
    f, g = toy_pair()
    sol = solve_bilevel(f, g, np.array([2.0]))
    rp = build_residuals(f, g)
    gz = np.array([0.37])
    d = hypergradient(rp, sol, np.zeros(1), np.zeros(1), gz)
    assert np.array_equal(d, gz)


def test_hypergradient_matches_fd_through_solver():
    rng = np.random.default_rng(5)
    for _ in range(3):
        prob = make_quadratic_bilevel(rng, n=4, m=4, p=3)
        assert hypergradient_fd_gap(prob) <= 1e-4


def test_dense_and_iterative_paths_agree():
    rng = np.random.default_rng(33)
    prob = make_quadratic_bilevel(rng, n=4, m=5, p=3)
    sol = solve_bilevel(prob["f"], prob["g"], prob["z0"],
                        BilevelConfig(inner_tol=1e-8, outer_tol=1e-7))
    rp = build_residuals(prob["f"], prob["g"])
    loss = prob["loss"]
    n, m, p = prob["dims"]
    args = (rp, sol, loss[:n], loss[n:n + m], loss[n + m:])
    dense = hypergradient(*args, method="dense")
    iterative = hypergradient(*args, method="iterative")
    assert np.max(np.abs(dense - iterative)) <= 1e-8


def test_solve_bilevel_toy_and_reduction():
    f, g = toy_pair()
    sol = solve_bilevel(f, g, np.array([2.0]))
    assert abs(sol.x[0] - 1.0) < 1e-6 and abs(sol.y[0] - 1.0) < 1e-6
    assert sol.residual_norms[0] <= 1e-6 and sol.residual_norms[1] <= 1e-6

    # degenerate outer: pure inner minimization y = z
    fz = quadratic_objective(0, 2, 2, qyy=np.eye(2), qyz=-np.eye(2), qzz=np.eye(2))
    sol2 = solve_bilevel(fz, fz, np.array([1.5, -0.5]))
    assert np.max(np.abs(sol2.y - np.array([1.5, -0.5]))) < 1e-8


def test_solve_bilevel_matches_closed_form_kkt():
    rng = np.random.default_rng(11)
    prob = make_quadratic_bilevel(rng, n=3, m=3, p=2)
    sol = solve_bilevel(prob["f"], prob["g"], prob["z0"],
                        BilevelConfig(inner_tol=1e-8, outer_tol=1e-7))
    x_star, y_star = closed_form_solution(prob, prob["z0"])
    assert np.max(np.abs(sol.x - x_star)) < 1e-5
    assert np.max(np.abs(sol.y - y_star)) < 1e-5


def test_third_order_exact_jacobians_match_fd_path():
    # with the zero third oracle removed, the FD fallback must agree with the
    # exact composition on a quadratic instance
    rng = np.random.default_rng(8)
    prob = make_quadratic_bilevel(rng, n=3, m=3, p=2)
    f, g = prob["f"], prob["g"]
    g_no_third = SmoothObjective(g.n, g.m, g.p, g.value, g.grad_x, g.grad_y,
                                 g.grad_z, hvp=g.hvp, third=None)
    rp_exact = build_residuals(f, g)
    rp_fd = build_residuals(f, g_no_third)
    x, y, z = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(2)
    for var, dim in (("x", 3), ("y", 3), ("z", 2)):
        v = rng.standard_normal(dim)
        u = rng.standard_normal(3)
        assert np.max(np.abs(rp_exact.F_jvp(var, x, y, z, v)
                             - rp_fd.F_jvp(var, x, y, z, v))) < 1e-5
        assert np.max(np.abs(rp_exact.F_vjp(var, x, y, z, u)
                             - rp_fd.F_vjp(var, x, y, z, u))) < 1e-5


def test_residual_jvp_vjp_adjoint_consistency():
    rng = np.random.default_rng(13)
    prob = make_quadratic_bilevel(rng, n=3, m=4, p=2)
    rp = build_residuals(prob["f"], prob["g"])
    x, y, z = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(2)
    for var, dim in (("x", 3), ("y", 4), ("z", 2)):
        for _ in range(5):
            v = rng.standard_normal(dim)
            u = rng.standard_normal(3)
            lhs = float(rp.F_jvp(var, x, y, z, v) @ u)
            rhs = float(v @ rp.F_vjp(var, x, y, z, u))
            assert abs(lhs - rhs) <= 1e-9 * (1.0 + abs(lhs))
            uy = rng.standard_normal(4)
            lhs = float(rp.G_jvp(var, x, y, z, v) @ uy)
            rhs = float(v @ rp.G_vjp(var, x, y, z, uy))
            assert abs(lhs - rhs) <= 1e-9 * (1.0 + abs(lhs))


# ---------------------------------------------------------------------------
# equality reparameterization


def test_eq_reparam_single_constraint_plane():
    x0, basis = eq_reparam(np.array([[1.0, 1.0]]), np.array([2.0]))
    assert abs(x0.sum() - 2.0) < 1e-10
    assert basis.shape == (2, 1)
    assert np.allclose(np.abs(basis[:, 0]), [1 / np.sqrt(2), 1 / np.sqrt(2)])


def test_eq_reparam_full_rank_identity():
    c = np.array([3.0, -1.0, 2.0])
    x0, basis = eq_reparam(np.eye(3), c)
    assert np.allclose(x0, c)
    assert basis.shape == (3, 0)


def test_eq_reparam_property_random_wide_system():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((2, 5))
    b = rng.standard_normal(2)
    x0, basis = eq_reparam(a, b)
    assert np.max(np.abs(a @ x0 - b)) < 1e-8
    assert np.max(np.abs(a @ basis)) < 1e-8
    assert basis.shape == (5, 3)
    assert np.max(np.abs(basis.T @ basis - np.eye(3))) < 1e-8
    for _ in range(100):
        u = rng.standard_normal(3)
        assert np.max(np.abs(a @ (x0 + basis @ u) - b)) < 1e-7


def test_eq_reparam_infeasible():
    a = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(Infeasible):
        eq_reparam(a, np.array([1.0, 2.0]))


# ---------------------------------------------------------------------------
# barrier transform


def _scalar_objective(fn, gx=None):
    # single-variable objective over the x slot (n=1, m=0, p=0)
    return SmoothObjective(
        1, 0, 0,
        value=lambda x, y, z: fn(x[0]),
        grad_x=lambda x, y, z: np.array([gx(x[0])]),
        grad_y=lambda x, y, z: np.zeros(0),
        grad_z=lambda x, y, z: np.zeros(0),
    )


def test_barrier_hand_example():
    obj = _scalar_objective(lambda u: u, lambda u: 1.0)
    con = _scalar_objective(lambda u: u - 1.0, lambda u: 1.0)
    bar = barrier_transform(obj, [con], t=1.0)
    at = (np.array([0.0]), np.zeros(0), np.zeros(0))
    assert abs(bar.value(*at) - 0.0) < 1e-12
    assert abs(bar.grad("x", *at)[0] - 2.0) < 1e-12


def test_barrier_no_constraints_is_scaled_objective():
    obj = _scalar_objective(lambda u: u * u, lambda u: 2 * u)
    bar = barrier_transform(obj, [], t=7.0)
    at = (np.array([1.5]), np.zeros(0), np.zeros(0))
    assert abs(bar.value(*at) - 7.0 * 2.25) < 1e-12


def test_barrier_infeasible_point_raises():
    obj = _scalar_objective(lambda u: u, lambda u: 1.0)
    con = _scalar_objective(lambda u: u - 1.0, lambda u: 1.0)
    bar = barrier_transform(obj, [con], t=1.0)
    with pytest.raises(InfeasiblePoint):
        bar.value(np.array([2.0]), np.zeros(0), np.zeros(0))


def test_barrier_ball_gradient_matches_fd():
    n = 3
    obj = quadratic_objective(n, 0, 0, qxx=2.0 * np.eye(n), lin_x=[1.0, -1.0, 0.5])
    ball = quadratic_objective(n, 0, 0, qxx=2.0 * np.eye(n), const=-1.0)  # |u|^2 - 1
    bar = barrier_transform(obj, [ball], t=10.0)
    at = 0.5 * np.eye(n)[0]

    def val(x):
        return np.array([bar.value(x, np.zeros(0), np.zeros(0))])

    got = bar.grad("x", at, np.zeros(0), np.zeros(0))
    for j in range(n):
        e = np.eye(n)[j]
        fd = fd_directional(val, at, e, h=1e-6)[0]
        assert abs(got[j] - fd) < 1e-6


def _newton_minimize_barrier(bar, u, iters=60):
    empty = np.zeros(0)
    for _ in range(iters):
        g = bar.grad("x", u, empty, empty)
        if np.max(np.abs(g)) < 1e-12:
            break
        h = np.stack([bar.hvp_apply(u, empty, empty, "xx", e)
                      for e in np.eye(u.size)], axis=1)
        step = np.linalg.solve(h, -g)
        alpha = 1.0
        val = bar.value(u, empty, empty)
        for _ in range(50):
            cand = u + alpha * step
            if cand @ cand < 1.0 and bar.value(cand, empty, empty) <= val + 1e-14:
                u = cand
                break
            alpha *= 0.5
    return u


def test_barrier_minimizers_approach_projection():
    # min |u - u0|^2 s.t. |u|^2 <= 1 with |u0| > 1: constrained optimum is
    # the projection u0 / |u0|
    u0 = np.array([1.2, 0.9])
    target = u0 / np.linalg.norm(u0)
    obj = quadratic_objective(2, 0, 0, qxx=2.0 * np.eye(2), lin_x=-2.0 * u0)
    ball = quadratic_objective(2, 0, 0, qxx=2.0 * np.eye(2), const=-1.0)
    dists = []
    for t in (1.0, 10.0, 100.0, 1000.0):
        bar = barrier_transform(obj, [ball], t=t)
        u = _newton_minimize_barrier(bar, np.zeros(2))
        dists.append(np.linalg.norm(u - target))
    assert all(d2 < d1 + 1e-12 for d1, d2 in zip(dists, dists[1:]))
    assert dists[-1] < 1e-3
