"""Estimator checks against independent oracles, runnable from the CLI.

Each suite compares one gradient path against an oracle that shares no code
with it: enumeration differences for the black-box estimators, the exact
linear-algebra formula for straight-through, finite differences of the
Monte-Carlo smoothed map for the perturbation estimator, and finite
differences through the forward solver for the continuous engine.  The
``mutate`` hook injects a deliberate fault so callers can verify the checks
fail when they should.
"""

from __future__ import annotations

import numpy as np

from . import continuous
from .discrete import DiscreteBilevel, bb_grad_separate, bb_grad_merged, \
    compose_total_grad, exhaustive_bilevel_solve, perturb_jacobian, pt_grad, \
    pt_surrogate_jacobians, vertex_lmo
from .harness import CheckReport, CheckResult

Array = np.ndarray

SUITES = ("continuous", "bb", "pt", "perturb")

MUTATIONS = (None, "flip_bb_sign")


def run(suite: str, seed: int = 0, mutate: str | None = None) -> CheckReport:
    if suite not in SUITES:
        raise ValueError(f"suite must be one of {SUITES}")
    if mutate not in MUTATIONS:
        raise ValueError(f"mutate must be one of {MUTATIONS}")
    fn = {"continuous": _suite_continuous, "bb": _suite_bb, "pt": _suite_pt,
          "perturb": _suite_perturb}[suite]
    return CheckReport(suite=suite, results=fn(seed, mutate))


# ---------------------------------------------------------------------------
# helpers


def _identity_problem(n: int, rng) -> DiscreteBilevel:
    """Small coupled instance over random vertex sets with identity couplings."""
    verts_x = rng.integers(0, 2, size=(4, n)).astype(float)
    verts_y = rng.integers(0, 2, size=(4, n)).astype(float)
    lmo_x = vertex_lmo(verts_x)
    lmo_y = vertex_lmo(verts_y)
    a = np.eye(n)
    b = np.zeros((n, n))
    c = np.eye(n)
    d = np.zeros((n, n))
    z = rng.uniform(-1, 1, n)
    w = rng.uniform(-1, 1, n)
    solve = exhaustive_bilevel_solve((a, b, c, d), lmo_x, lmo_y)
    return DiscreteBilevel(a, b, c, d, z, w, lmo_x, lmo_y, solve)


# ---------------------------------------------------------------------------
# suites


def _suite_continuous(seed: int, mutate: str | None) -> list[CheckResult]:
    results = []
    # analytic toy: nested quadratics with hand-computed total gradient 1
    f = continuous.quadratic_objective(1, 1, 1, qxx=[[1]], qxz=[[-1]],
                                       qzz=[[1]], qyy=[[1]])
    g = continuous.quadratic_objective(1, 1, 1, qxx=[[1]], qxy=[[-1]], qyy=[[1]])
    sol = continuous.solve_bilevel(f, g, np.array([2.0]))
    rp = continuous.build_residuals(f, g)
    d = continuous.hypergradient(rp, sol, np.array([1.0]), np.array([1.0]),
                                 np.array([0.0]))
    ok = abs(d[0] - 1.0) <= 1e-8
    results.append(CheckResult("analytic_toy", ok, f"d_z={d[0]:.12f} want 1"))

    # random strongly convex quadratics vs finite differences through the solver
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        prob = make_quadratic_bilevel(rng, n=3, m=3, p=2)
        err = hypergradient_fd_gap(prob)
        worst = max(worst, err)
    ok = worst <= 1e-4
    results.append(CheckResult("quadratic_vs_fd", ok, f"max rel err {worst:.2e}"))
    return results


def make_quadratic_bilevel(rng, n: int, m: int, p: int,
                           cond_margin: float = 0.3):
    """Random strongly convex quadratic bilevel instance with loss vectors.

    Returns a dict with the objectives, a linear loss, and a closed-form
    solution oracle; the reduced outer Hessian is resampled until it is
    comfortably positive definite.
    """
    for _ in range(100):
        total = n + m + p
        root = rng.standard_normal((total, total)) / np.sqrt(total)
        q_full = root.T @ root + 0.5 * np.eye(total)
        lin = rng.standard_normal(total) * 0.3
        qg_root = rng.standard_normal((total, total)) / np.sqrt(total)
        qg_full = qg_root.T @ qg_root + 0.6 * np.eye(total)
        lin_g = rng.standard_normal(total) * 0.3

        sl = {"x": slice(0, n), "y": slice(n, n + m), "z": slice(n + m, total)}
        gyy = qg_full[sl["y"], sl["y"]]
        gyx = qg_full[sl["y"], sl["x"]]
        red = _reduced_hessian(q_full, gyy, gyx, n, m)
        vals = np.linalg.eigvalsh(red)
        if vals[0] < cond_margin or vals[-1] / vals[0] > 40:
            continue
        f = continuous.quadratic_objective(
            n, m, p, qxx=q_full[sl["x"], sl["x"]], qxy=q_full[sl["x"], sl["y"]],
            qxz=q_full[sl["x"], sl["z"]], qyy=q_full[sl["y"], sl["y"]],
            qyz=q_full[sl["y"], sl["z"]], qzz=q_full[sl["z"], sl["z"]],
            lin_x=lin[sl["x"]], lin_y=lin[sl["y"]], lin_z=lin[sl["z"]])
        g = continuous.quadratic_objective(
            n, m, p, qxx=qg_full[sl["x"], sl["x"]], qxy=qg_full[sl["x"], sl["y"]],
            qxz=qg_full[sl["x"], sl["z"]], qyy=gyy, qyz=qg_full[sl["y"], sl["z"]],
            qzz=qg_full[sl["z"], sl["z"]],
            lin_x=lin_g[sl["x"]], lin_y=lin_g[sl["y"]], lin_z=lin_g[sl["z"]])
        loss = rng.standard_normal(n + m + p)
        z0 = rng.standard_normal(p) * 0.5
        return {"f": f, "g": g, "loss": loss, "z0": z0, "dims": (n, m, p),
                "q_f": (q_full, lin), "q_g": (qg_full, lin_g)}
    raise RuntimeError("failed to sample a well-conditioned instance")


def _reduced_hessian(q_full, gyy, gyx, n, m):
    fxx = q_full[:n, :n]
    fxy = q_full[:n, n:n + m]
    fyy = q_full[n:n + m, n:n + m]
    dy_dx = -np.linalg.solve(gyy, gyx)
    return (fxx + fxy @ dy_dx + dy_dx.T @ fxy.T + dy_dx.T @ fyy @ dy_dx)


def closed_form_solution(prob, z: Array) -> tuple[Array, Array]:
    """KKT solve of the quadratic instance: inner stationarity plus reduced outer."""
    n, m, p = prob["dims"]
    q_f, lin_f = prob["q_f"]
    q_g, lin_g = prob["q_g"]
    gyy = q_g[n:n + m, n:n + m]
    gyx = q_g[n:n + m, :n]
    gyz = q_g[n:n + m, n + m:]
    by = lin_g[n:n + m]
    dy_dx = -np.linalg.solve(gyy, gyx)
    y_of = lambda x: -np.linalg.solve(gyy, gyx @ x + gyz @ z + by)
    red = _reduced_hessian(q_f, gyy, gyx, n, m)
    # gradient of f(x, y(x)) at x = 0
    y0 = y_of(np.zeros(n))
    fx = q_f[:n, :n] @ np.zeros(n) + q_f[:n, n:n + m] @ y0 + q_f[:n, n + m:] @ z + lin_f[:n]
    fy = q_f[n:n + m, :n] @ np.zeros(n) + q_f[n:n + m, n:n + m] @ y0 \
        + q_f[n:n + m, n + m:] @ z + lin_f[n:n + m]
    grad0 = fx + dy_dx.T @ fy
    x_star = -np.linalg.solve(red, grad0)
    return x_star, y_of(x_star)


def hypergradient_fd_gap(prob, fd_h: float = 3e-2) -> float:
    """Max relative gap between the adjoint hypergradient and FD through the solver."""
    n, m, p = prob["dims"]
    f, g = prob["f"], prob["g"]
    loss = prob["loss"]
    gx, gy, gz = loss[:n], loss[n:n + m], loss[n + m:]
    cfg = continuous.BilevelConfig(inner_tol=1e-8, outer_tol=1e-7)
    z0 = prob["z0"]
    sol = continuous.solve_bilevel(f, g, z0, cfg)
    rp = continuous.build_residuals(f, g)
    d = continuous.hypergradient(rp, sol, gx, gy, gz)

    def scalar_loss(z):
        # the loss is linear and the solution map affine, so a large FD step
        # is exact up to solver noise of order outer_tol / h
        warm = continuous.BilevelConfig(inner_tol=1e-8, outer_tol=1e-7,
                                        x0=sol.x, y0=sol.y)
        s = continuous.solve_bilevel(f, g, z, warm)
        return float(gx @ s.x + gy @ s.y + gz @ z)

    worst = 0.0
    for j in range(p):
        e = np.zeros(p)
        e[j] = 1.0
        fd = (scalar_loss(z0 + fd_h * e) - scalar_loss(z0 - fd_h * e)) / (2 * fd_h)
        worst = max(worst, abs(d[j] - fd) / (1.0 + abs(fd)))
    return worst


def _suite_bb(seed: int, mutate: str | None) -> list[CheckResult]:
    results = []
    sign = -1.0 if mutate == "flip_bb_sign" else 1.0
    # two-vertex enumeration case: the perturbed argmin flip is known exactly
    lmo = vertex_lmo([[1.0, 0.0], [0.0, 1.0]])
    a = np.eye(2)
    prob = DiscreteBilevel(a, np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)),
                           np.array([1.0, 2.0]), np.array([1.0, 2.0]),
                           lmo, lmo,
                           exhaustive_bilevel_solve(
                               (a, np.zeros((2, 2)), np.eye(2), np.zeros((2, 2))),
                               lmo, lmo))
    x0 = lmo(prob.z)
    y0 = lmo(prob.w)
    gx = sign * np.array([3.0, -3.0])
    est = bb_grad_separate(prob, x0, y0, gx, np.zeros(2), tau=1.0)
    # hand enumeration of both vertices: cost (1,2) flips to vertex e2 under
    # the +tau perturbation (4,-1), so the difference quotient is (-1, 1)
    expected = np.array([-1.0, 1.0])
    results.append(CheckResult(
        "two_vertex_flip", bool(np.array_equal(est.d_z, expected)),
        f"d_z={est.d_z.tolist()} want {expected.tolist()}"))

    # decoupling: merged equals separate when the cross couplings vanish
    rng = np.random.default_rng(seed)
    agree = True
    for _ in range(10):
        p2 = _identity_problem(3, rng)
        x, y = p2.bilevel_solve(p2.z, p2.w)
        gxr = sign * rng.standard_normal(3)
        gyr = sign * rng.standard_normal(3)
        e1 = bb_grad_separate(p2, x, y, gxr, gyr, tau=0.7)
        e2 = bb_grad_merged(p2, x, y, gxr, gyr, tau=0.7)
        if not (np.array_equal(e1.d_z, e2.d_z) and np.array_equal(e1.d_w, e2.d_w)):
            agree = False
    results.append(CheckResult("decoupled_merged_eq_separate", agree, ""))

    # piecewise constancy: tau far below the argmin margin returns zero
    margin_ok = True
    probm = _identity_problem(3, np.random.default_rng(seed + 1))
    xm, ym = probm.bilevel_solve(probm.z, probm.w)
    em = bb_grad_separate(probm, xm, ym, sign * np.ones(3), sign * np.ones(3),
                          tau=1e-6)
    if not (np.array_equal(em.d_z, np.zeros(3)) and np.array_equal(em.d_w, np.zeros(3))):
        margin_ok = False
    results.append(CheckResult("tiny_tau_zero", margin_ok, "tau=1e-6"))
    return results


def _suite_pt(seed: int, mutate: str | None) -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)
    ok_formula = True
    ok_compose = True
    for _ in range(10):
        n, m, p, q = 3, 4, 3, 4
        a = rng.standard_normal((p, n))
        c = rng.standard_normal((q, m))
        prob = DiscreteBilevel(
            a, np.zeros((m, n)), c, np.zeros((n, m)),
            rng.standard_normal(p), rng.standard_normal(q),
            vertex_lmo(rng.integers(0, 2, (4, n)).astype(float)),
            vertex_lmo(rng.integers(0, 2, (4, m)).astype(float)),
            lambda z, w: (np.zeros(n), np.zeros(m)))
        gx = rng.standard_normal(n)
        gy = rng.standard_normal(m)
        est = pt_grad(prob, gx, gy)
        if not np.array_equal(est.d_z, -(a @ gx)):
            ok_formula = False
        if not np.array_equal(est.d_w, -(c @ gy)):
            ok_formula = False
        jz, jxy, jyx, jw = pt_surrogate_jacobians(prob)
        dz, dw = compose_total_grad(np.zeros(p), np.zeros(q), gx, gy,
                                    jz, jxy, jyx, jw)
        if not (np.array_equal(dz, est.d_z) and np.array_equal(dw, est.d_w)):
            ok_compose = False
    results.append(CheckResult("pt_formula", ok_formula, "d_z == -A grad_x"))
    results.append(CheckResult("pt_compose_bitexact", ok_compose, ""))
    return results


def _suite_perturb(seed: int, mutate: str | None) -> list[CheckResult]:
    results = []
    rng_seed = seed + 17
    eta, samples = 0.1, 10_000
    # deep inside one region: the smoothed Jacobian vanishes
    lmo = vertex_lmo([[1.0, 0.0], [0.0, 1.0]])
    cost = np.array([0.0, 10.0])
    jac = perturb_jacobian(lmo, cost, eta, samples, rng_seed)
    ok_zero = np.max(np.abs(jac)) <= 3.0 * _mc_se(lmo, cost, eta, samples, rng_seed) + 1e-12
    results.append(CheckResult("far_margin_zero", bool(ok_zero),
                               f"max |J| {np.max(np.abs(jac)):.2e}"))

    # near the decision boundary: agree with FD of the smoothed map, shared seeds
    cost2 = np.array([0.0, 0.05])
    jac2 = perturb_jacobian(lmo, cost2, eta, samples, rng_seed)
    fd, fd_se = _fd_smoothed(lmo, cost2, eta, samples, rng_seed, delta=0.02)
    est_se = _mc_se(lmo, cost2, eta, samples, rng_seed)
    tol = 3.0 * np.sqrt(est_se**2 + fd_se**2) + 1e-12
    gap = float(np.max(np.abs(jac2 - fd)))
    results.append(CheckResult("fd_of_smoothed_map", gap <= tol,
                               f"gap {gap:.3f} vs 3se {tol:.3f}"))

    # determinism with one sample
    j1 = perturb_jacobian(lmo, cost2, eta, 1, rng_seed)
    j2 = perturb_jacobian(lmo, cost2, eta, 1, rng_seed)
    results.append(CheckResult("seed_determinism", bool(np.array_equal(j1, j2)), ""))
    return results


def _mc_se(lmo, cost: Array, eta: float, samples: int, rng_seed: int) -> float:
    """Largest entrywise standard error of the Monte-Carlo Jacobian."""
    rng = np.random.default_rng(rng_seed)
    d = cost.size
    terms = np.empty((samples, d, d))
    for i in range(samples):
        u = rng.standard_normal(d)
        terms[i] = np.outer(lmo(cost + eta * u), u) / eta
    return float(np.max(terms.std(axis=0) / np.sqrt(samples)))


def _fd_smoothed(lmo, cost: Array, eta: float, samples: int, rng_seed: int,
                 delta: float):
    """Central differences of the empirically smoothed map, common random numbers."""
    rng = np.random.default_rng(rng_seed)
    d = cost.size
    us = rng.standard_normal((samples, d))
    jac = np.zeros((d, d))
    ses = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = delta
        diffs = np.stack([
            (lmo(cost + e + eta * u) - lmo(cost - e + eta * u)) / (2 * delta)
            for u in us
        ])
        jac[:, j] = diffs.mean(axis=0)
        ses.append(diffs.std(axis=0) / np.sqrt(samples))
    return jac, float(np.max(ses))
