"""Continuous bilevel layer: forward solver, residual system, adjoint hypergradient.

A bilevel program

    min_x f(x, y, z)   subject to   y in argmin_y g(x, y, z)

is rewritten as a root-finding system (F, G) around a solution:

    G(x, y, z) = grad_y g
    F(x, y, z) = grad_x f - (d_x G)^T lambda,   (d_y G)^T lambda = grad_y f

F is the total derivative of f along the inner best response, so a root of
the stacked system is a stationary bilevel point.  The backward pass solves
the stacked adjoint system for multipliers (lam, gam) from the loss
gradients and applies the z-block VJPs:

    (dF/dx)^T lam + (dG/dx)^T gam = -grad_x L
    (dF/dy)^T lam + (dG/dy)^T gam = -grad_y L
    d_z L = grad_z L + (dF/dz)^T lam + (dG/dz)^T gam

All Jacobian products are evaluated through oracles; a dense path assembles
the small stacked system directly, the iterative path runs GMRES on the
adjoint operator so nothing larger than a vector is ever stored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    Infeasible,
    InfeasiblePoint,
    NonConvergence,
    SingularInnerHessian,
    SingularSystem,
    Singular,
)
from .linops import LinearOperator, cg_solve, dense_solve, fd_directional, gmres_solve

Array = np.ndarray

_VAR_DIMS = {"x": 0, "y": 1, "z": 2}

#: Above this stacked dimension the adjoint system is solved matrix-free.
DENSE_LIMIT = 200


@dataclass(frozen=True)
class SmoothObjective:
    """Scalar function of (x, y, z) with derivative oracles.

    ``value``/``grad_*`` are required.  ``hvp(x, y, z, block, v)`` applies a
    second-derivative block: for block "ab" it returns the directional
    derivative of grad_a in direction v of the b-variable (result in
    a-space).  ``third(x, y, z, pair, wrt, v, w)`` is the directional
    derivative, in direction w of the ``wrt`` variable, of hvp(pair, v).
    Missing oracles fall back to central differences of the next-lower
    derivative.
    """

    n: int
    m: int
    p: int
    value: Callable[[Array, Array, Array], float]
    grad_x: Callable[[Array, Array, Array], Array]
    grad_y: Callable[[Array, Array, Array], Array]
    grad_z: Callable[[Array, Array, Array], Array]
    hvp: Callable[[Array, Array, Array, str, Array], Array] | None = None
    third: Callable[[Array, Array, Array, str, str, Array, Array], Array] | None = None

    def dim(self, var: str) -> int:
        return (self.n, self.m, self.p)[_VAR_DIMS[var]]

    def grad(self, var: str, x: Array, y: Array, z: Array) -> Array:
        fn = {"x": self.grad_x, "y": self.grad_y, "z": self.grad_z}[var]
        out = np.asarray(fn(x, y, z), dtype=np.float64).reshape(-1)
        if out.shape != (self.dim(var),):
            raise DimensionMismatch(
                f"grad_{var} returned length {out.size}, expected {self.dim(var)}"
            )
        return out

    def hvp_apply(self, x: Array, y: Array, z: Array, block: str, v: Array) -> Array:
        """Apply the Hessian block, falling back to FD of the gradient."""
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape != (self.dim(block[1]),):
            raise DimensionMismatch(
                f"hvp block {block}: direction length {v.size}, "
                f"expected {self.dim(block[1])}"
            )
        if self.dim(block[0]) == 0 or self.dim(block[1]) == 0:
            return np.zeros(self.dim(block[0]))
        if self.hvp is not None:
            out = self.hvp(x, y, z, block, v)
            if out is not None:
                return np.asarray(out, dtype=np.float64).reshape(-1)
        point = {"x": x, "y": y, "z": z}

        def moved(t: Array) -> Array:
            q = dict(point)
            q[block[1]] = t
            return self.grad(block[0], q["x"], q["y"], q["z"])

        return fd_directional(moved, point[block[1]], v)


def quadratic_objective(n: int, m: int, p: int, *, qxx=None, qxy=None, qxz=None,
                        qyy=None, qyz=None, qzz=None, lin_x=None, lin_y=None,
                        lin_z=None, const: float = 0.0) -> SmoothObjective:
    """Quadratic form 0.5 v^T Q v + b^T v + c over stacked v = (x, y, z).

    Off-diagonal blocks are given once (``qxy`` etc.); the symmetric
    counterpart is implied.  Exact hvp and an identically-zero third-order
    oracle are attached, so downstream Jacobians are exact.
    """
    dims = (n, m, p)
    total = sum(dims)
    q = np.zeros((total, total))
    off = {"x": 0, "y": n, "z": n + m}

    # diagonal blocks: symmetrize, off-diagonal: mirror
    for name, blk in (("x", qxx), ("y", qyy), ("z", qzz)):
        if blk is not None:
            b2 = np.asarray(blk, dtype=np.float64).reshape(
                dims[_VAR_DIMS[name]], dims[_VAR_DIMS[name]]
            )
            i = off[name]
            q[i : i + b2.shape[0], i : i + b2.shape[1]] = 0.5 * (b2 + b2.T)
    for a, b, blk in (("x", "y", qxy), ("x", "z", qxz), ("y", "z", qyz)):
        if blk is not None:
            b2 = np.asarray(blk, dtype=np.float64).reshape(
                dims[_VAR_DIMS[a]], dims[_VAR_DIMS[b]]
            )
            ia, ib = off[a], off[b]
            q[ia : ia + b2.shape[0], ib : ib + b2.shape[1]] = b2
            q[ib : ib + b2.shape[1], ia : ia + b2.shape[0]] = b2.T

    lin = np.zeros(total)
    for name, l in (("x", lin_x), ("y", lin_y), ("z", lin_z)):
        if l is not None:
            i = off[name]
            lin[i : i + dims[_VAR_DIMS[name]]] = np.asarray(l, dtype=np.float64).reshape(-1)

    def stack(x, y, z):
        return np.concatenate([np.asarray(x, float).reshape(-1),
                               np.asarray(y, float).reshape(-1),
                               np.asarray(z, float).reshape(-1)])

    def seg(v, name):
        i = off[name]
        return v[i : i + dims[_VAR_DIMS[name]]]

    def value(x, y, z):
        v = stack(x, y, z)
        return float(0.5 * v @ q @ v + lin @ v + const)

    def grad(name):
        def g(x, y, z):
            v = stack(x, y, z)
            return seg(q @ v + lin, name)
        return g

    def hvp(x, y, z, block, v):
        a, b = block[0], block[1]
        ia, ib = off[a], off[b]
        blk = q[ia : ia + dims[_VAR_DIMS[a]], ib : ib + dims[_VAR_DIMS[b]]]
        return blk @ v

    def third(x, y, z, pair, wrt, v, w):
        return np.zeros(dims[_VAR_DIMS[pair[0]]])

    return SmoothObjective(n, m, p, value, grad("x"), grad("y"), grad("z"),
                           hvp=hvp, third=third)


class ResidualPair:
    """The implicit system (F, G) with JVP/VJP oracles for every block.

    Built by :func:`build_residuals`.  When g carries a third-order oracle,
    F-Jacobian products are composed exactly from the derivative oracles;
    otherwise they come from central differences of F itself.
    """

    def __init__(self, f: SmoothObjective, g: SmoothObjective,
                 hess_tol: float = 1e-12):
        if (f.n, f.m, f.p) != (g.n, g.m, g.p):
            raise DimensionMismatch("f and g must share (n, m, p)")
        self.f = f
        self.g = g
        self.n, self.m, self.p = f.n, f.m, f.p
        self._hess_tol = hess_tol
        self._exact = g.third is not None

    # -- inner Hessian solve ------------------------------------------------

    def _yy_solve(self, x: Array, y: Array, z: Array, rhs: Array) -> Array:
        if self.m == 0:
            return np.zeros(0)
        op = LinearOperator(
            self.m, self.m, lambda v: self.g.hvp_apply(x, y, z, "yy", v)
        )
        try:
            return cg_solve(op, rhs, tol=self._hess_tol, max_iter=20 * self.m + 50)
        except NonConvergence as exc:
            raise SingularInnerHessian(str(exc)) from exc

    def inner_multiplier(self, x: Array, y: Array, z: Array) -> Array:
        """lambda with (d_y G)^T lambda = grad_y f (Hessian applied via CG)."""
        return self._yy_solve(x, y, z, self.f.grad("y", x, y, z))

    # -- residual evaluations -----------------------------------------------

    def G_eval(self, x: Array, y: Array, z: Array) -> Array:
        return self.g.grad("y", x, y, z)

    def F_eval(self, x: Array, y: Array, z: Array) -> Array:
        if self.n == 0:
            return np.zeros(0)
        gx = self.f.grad("x", x, y, z)
        if self.m == 0:
            return gx
        lam = self.inner_multiplier(x, y, z)
        return gx - self.g.hvp_apply(x, y, z, "xy", lam)

    # -- G Jacobian products (pure second derivatives of g) ------------------

    def G_jvp(self, var: str, x: Array, y: Array, z: Array, v: Array) -> Array:
        return self.g.hvp_apply(x, y, z, "y" + var, v)

    def G_vjp(self, var: str, x: Array, y: Array, z: Array, u: Array) -> Array:
        return self.g.hvp_apply(x, y, z, var + "y", u)

    # -- F Jacobian products --------------------------------------------------

    def F_jvp(self, var: str, x: Array, y: Array, z: Array, v: Array) -> Array:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if self.n == 0:
            return np.zeros(0)
        if not self._exact or self.m == 0:
            point = {"x": x, "y": y, "z": z}

            def moved(t: Array) -> Array:
                q = dict(point)
                q[var] = t
                return self.F_eval(q["x"], q["y"], q["z"])

            return fd_directional(moved, point[var], v)
        lam = self.inner_multiplier(x, y, z)
        third = self.g.third
        rhs = self.f.hvp_apply(x, y, z, "y" + var, v) - third(x, y, z, "yy", var, lam, v)
        mu = self._yy_solve(x, y, z, rhs)
        return (
            self.f.hvp_apply(x, y, z, "x" + var, v)
            - third(x, y, z, "xy", var, lam, v)
            - self.g.hvp_apply(x, y, z, "xy", mu)
        )

    def F_vjp(self, var: str, x: Array, y: Array, z: Array, u: Array) -> Array:
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        d = (self.n, self.m, self.p)[_VAR_DIMS[var]]
        if d == 0 or self.n == 0:
            return np.zeros(d)
        if not self._exact or self.m == 0:
            # gradient of <F, u> w.r.t. var by componentwise central differences
            point = {"x": x, "y": y, "z": z}
            base = point[var]
            h = 1e-5 * (1.0 + (np.max(np.abs(base)) if base.size else 0.0))
            out = np.zeros(d)
            for i in range(d):
                e = np.zeros(d)
                e[i] = 1.0
                q_hi, q_lo = dict(point), dict(point)
                q_hi[var] = base + h * e
                q_lo[var] = base - h * e
                hi = self.F_eval(q_hi["x"], q_hi["y"], q_hi["z"]) @ u
                lo = self.F_eval(q_lo["x"], q_lo["y"], q_lo["z"]) @ u
                out[i] = (hi - lo) / (2.0 * h)
            return out
        lam = self.inner_multiplier(x, y, z)
        third = self.g.third
        s = self._yy_solve(x, y, z, self.g.hvp_apply(x, y, z, "yx", u))
        return (
            self.f.hvp_apply(x, y, z, var + "x", u)
            - third(x, y, z, var + "y", "x", lam, u)
            - self.f.hvp_apply(x, y, z, var + "y", s)
            + third(x, y, z, var + "y", "y", lam, s)
        )


def build_residuals(f: SmoothObjective, g: SmoothObjective) -> ResidualPair:
    """Assemble the implicit system characterizing a bilevel solution.

    G is the inner stationarity map grad_y g; F is the outer total
    derivative, with the inner Hessian inverse applied through a CG solve
    (never materialized).
    """
    return ResidualPair(f, g)


class SaddleResiduals:
    """Residual pair for opposite-objective (min-max) layers.

    Encodes joint first-order stationarity, F = grad_x f and G = grad_y g,
    whose root is a best-response fixed point.  Every Jacobian block is a
    plain second derivative, so all products come straight from the hvp
    oracles.  Interface-compatible with :class:`ResidualPair` for
    :func:`hypergradient`.
    """

    def __init__(self, f: SmoothObjective, g: SmoothObjective):
        if (f.n, f.m, f.p) != (g.n, g.m, g.p):
            raise DimensionMismatch("f and g must share (n, m, p)")
        self.f = f
        self.g = g
        self.n, self.m, self.p = f.n, f.m, f.p

    def F_eval(self, x, y, z):
        return self.f.grad("x", x, y, z) if self.n else np.zeros(0)

    def G_eval(self, x, y, z):
        return self.g.grad("y", x, y, z) if self.m else np.zeros(0)

    def F_jvp(self, var, x, y, z, v):
        return self.f.hvp_apply(x, y, z, "x" + var, v)

    def F_vjp(self, var, x, y, z, u):
        return self.f.hvp_apply(x, y, z, var + "x", u)

    def G_jvp(self, var, x, y, z, v):
        return self.g.hvp_apply(x, y, z, "y" + var, v)

    def G_vjp(self, var, x, y, z, u):
        return self.g.hvp_apply(x, y, z, var + "y", u)


@dataclass(frozen=True)
class BilevelSolution:
    """Solver output saved for the backward pass."""

    x: Array
    y: Array
    z: Array
    residual_norms: tuple[float, float]
    iterations: int


@dataclass(frozen=True)
class BilevelConfig:
    inner_tol: float = 1e-8
    outer_tol: float = 1e-7
    resid_tol: float = 1e-6
    max_inner: int = 20000
    max_outer: int = 5000
    armijo_factor: float = 0.5
    armijo_c: float = 1e-4
    init_step: float = 1.0
    x0: Array | None = None
    y0: Array | None = None


def _armijo_descent(value: Callable[[Array], float],
                    grad: Callable[[Array], Array],
                    start: Array, tol: float, max_iter: int,
                    factor: float, c: float, step0: float) -> tuple[Array, int]:
    """Gradient descent with Armijo backtracking; stops on ||grad||_inf <= tol."""
    u = start.astype(np.float64).copy()
    step = step0
    it = 0
    gu = grad(u)
    fu = value(u)
    while it < max_iter:
        gnorm = np.max(np.abs(gu)) if gu.size else 0.0
        if gnorm <= tol:
            return u, it
        sq = float(gu @ gu)
        trial = step
        for _ in range(60):
            cand = u - trial * gu
            fc = value(cand)
            if fc <= fu - c * trial * sq:
                break
            trial *= factor
        else:
            raise NonConvergence("line search failed to make progress")
        u = cand
        fu = fc
        gu = grad(u)
        step = min(trial / factor, 1e6)  # let the step grow back
        it += 1
    gnorm = np.max(np.abs(gu)) if gu.size else 0.0
    if gnorm <= tol:
        return u, it
    raise NonConvergence(f"descent cap {max_iter} hit (grad norm {gnorm:.3e})")


def solve_bilevel(f: SmoothObjective, g: SmoothObjective, z: Array,
                  cfg: BilevelConfig | None = None) -> BilevelSolution:
    """Nested descent: inner minimizes g over y, outer steps x along F.

    F is the total derivative of f through the inner best response, so the
    outer loop is plain hypergradient descent on the reduced objective
    x -> f(x, y*(x), z); both loops use Armijo backtracking.
    """
    if cfg is None:
        cfg = BilevelConfig()
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape != (f.p,):
        raise DimensionMismatch(f"z length {z.size}, expected {f.p}")
    rp = build_residuals(f, g)
    n, m = f.n, f.m
    x = np.zeros(n) if cfg.x0 is None else np.asarray(cfg.x0, float).reshape(-1).copy()
    y = np.zeros(m) if cfg.y0 is None else np.asarray(cfg.y0, float).reshape(-1).copy()
    iterations = 0

    def inner_solve(xc: Array, y_start: Array) -> tuple[Array, int]:
        if m == 0:
            return np.zeros(0), 0
        return _armijo_descent(
            value=lambda yy: g.value(xc, yy, z),
            grad=lambda yy: g.grad("y", xc, yy, z),
            start=y_start, tol=cfg.inner_tol, max_iter=cfg.max_inner,
            factor=cfg.armijo_factor, c=cfg.armijo_c, step0=cfg.init_step,
        )

    y, used = inner_solve(x, y)
    iterations += used

    if n == 0:
        g_norm = float(np.max(np.abs(rp.G_eval(x, y, z)))) if m else 0.0
        return BilevelSolution(x, y, z, (0.0, g_norm), iterations)

    # outer: merit is the reduced objective; each trial re-solves the inner
    # problem warm-started from the current y
    state = {"y": y}

    def reduced_value(xc: Array) -> float:
        yy, used_in = inner_solve(xc, state["y"])
        state["trial_y"] = yy
        state["used"] = used_in
        return f.value(xc, yy, z)

    step = cfg.init_step
    fx = reduced_value(x)
    state["y"] = state.get("trial_y", y)
    iterations += state.get("used", 0)
    for outer_it in range(cfg.max_outer):
        res = rp.F_eval(x, state["y"], z)
        if np.max(np.abs(res)) <= cfg.outer_tol:
            break
        sq = float(res @ res)
        trial = step
        accepted = False
        for _ in range(60):
            cand = x - trial * res
            fc = reduced_value(cand)
            iterations += state.get("used", 0)
            if fc <= fx - cfg.armijo_c * trial * sq:
                accepted = True
                break
            trial *= cfg.armijo_factor
        if not accepted:
            raise NonConvergence("outer line search stalled")
        x = cand
        fx = fc
        state["y"] = state["trial_y"]
        step = min(trial / cfg.armijo_factor, 1e6)
    else:
        raise NonConvergence(f"outer cap {cfg.max_outer} hit")

    y = state["y"]
    f_norm = float(np.max(np.abs(rp.F_eval(x, y, z)))) if n else 0.0
    g_norm = float(np.max(np.abs(rp.G_eval(x, y, z)))) if m else 0.0
    if f_norm > cfg.resid_tol or g_norm > cfg.resid_tol:
        raise NonConvergence(
            f"residuals ({f_norm:.2e}, {g_norm:.2e}) above resid_tol {cfg.resid_tol}"
        )
    return BilevelSolution(x, y, z, (f_norm, g_norm), iterations)


def hypergradient(rp: ResidualPair, sol: BilevelSolution, grad_x_L: Array,
                  grad_y_L: Array, grad_z_L: Array, method: str = "auto") -> Array:
    """Total gradient d_z L through the implicit layer at ``sol``.

    Solves the stacked adjoint system for (lam, gam) from the loss
    gradients, then applies the z-block VJPs.  ``method`` picks the dense
    assembly ("dense"), the matrix-free GMRES path ("iterative"), or size-
    based dispatch ("auto": dense while n + m <= 200).
    """
    x, y, z = sol.x, sol.y, sol.z
    n, m, p = rp.n, rp.m, rp.p
    gx = np.asarray(grad_x_L, dtype=np.float64).reshape(-1)
    gy = np.asarray(grad_y_L, dtype=np.float64).reshape(-1)
    gz = np.asarray(grad_z_L, dtype=np.float64).reshape(-1)
    if gx.shape != (n,) or gy.shape != (m,) or gz.shape != (p,):
        raise DimensionMismatch(
            f"loss gradient lengths {(gx.size, gy.size, gz.size)} vs dims {(n, m, p)}"
        )
    if method not in ("auto", "dense", "iterative"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        method = "dense" if n + m <= DENSE_LIMIT else "iterative"

    rhs = -np.concatenate([gx, gy])
    if n + m == 0:
        return gz.copy()
    if not np.any(rhs):
        lam = np.zeros(n)
        gam = np.zeros(m)
    elif method == "dense":
        jac = np.zeros((n + m, n + m))
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            jac[:n, i] = rp.F_jvp("x", x, y, z, e) if n else np.zeros(0)
            jac[n:, i] = rp.G_jvp("x", x, y, z, e)
        for i in range(m):
            e = np.zeros(m)
            e[i] = 1.0
            jac[:n, n + i] = rp.F_jvp("y", x, y, z, e)
            jac[n:, n + i] = rp.G_jvp("y", x, y, z, e)
        try:
            sol_vec = dense_solve(jac.T, rhs)
        except Singular as exc:
            raise SingularSystem(str(exc)) from exc
        lam, gam = sol_vec[:n], sol_vec[n:]
    else:
        def adjoint_apply(u: Array) -> Array:
            lam_u, gam_u = u[:n], u[n:]
            top = rp.F_vjp("x", x, y, z, lam_u) + rp.G_vjp("x", x, y, z, gam_u)
            bot = rp.F_vjp("y", x, y, z, lam_u) + rp.G_vjp("y", x, y, z, gam_u)
            return np.concatenate([top, bot])

        op = LinearOperator(n + m, n + m, adjoint_apply)
        try:
            sol_vec = gmres_solve(op, rhs, tol=1e-12, max_iter=50 * (n + m) + 100)
        except NonConvergence as exc:
            raise SingularSystem(str(exc)) from exc
        lam, gam = sol_vec[:n], sol_vec[n:]

    out = gz.copy()
    if n:
        out = out + rp.F_vjp("z", x, y, z, lam)
    if m:
        out = out + rp.G_vjp("z", x, y, z, gam)
    return out


def eq_reparam(a: Array, b: Array) -> tuple[Array, Array]:
    """Parameterize the affine solution set of A x = b.

    Returns (x0, basis): a particular solution and an orthonormal null-space
    basis, so x0 + basis @ u sweeps every solution.  Raises Infeasible when
    the system is inconsistent.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"A {a.shape} incompatible with b {b.shape}")
    n = a.shape[1]
    u, s, vt = np.linalg.svd(a, full_matrices=True)
    cutoff = max(a.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > max(cutoff, 1e-13)))
    x0, *_ = np.linalg.lstsq(a, b, rcond=None)
    if np.max(np.abs(a @ x0 - b), initial=0.0) > 1e-8 * (1.0 + np.max(np.abs(b), initial=0.0)):
        raise Infeasible("A x = b has no solution")
    basis = vt[rank:].T.copy()  # (n, n - rank), orthonormal columns
    return x0, basis


def barrier_transform(obj: SmoothObjective, ineqs: Sequence[SmoothObjective],
                      t: float) -> SmoothObjective:
    """Log-barrier reformulation t * obj - sum_i ln(-c_i).

    Constraint functions must stay strictly negative; evaluating any oracle
    at a point with c_i >= 0 raises InfeasiblePoint.  Gradients and hvp
    blocks are composed by the chain rule from the constituents.
    """
    if t <= 0:
        raise ValueError("barrier parameter t must be positive")
    ineqs = list(ineqs)
    for c in ineqs:
        if (c.n, c.m, c.p) != (obj.n, obj.m, obj.p):
            raise DimensionMismatch("constraint dims must match the objective")

    def cvals(x, y, z):
        vals = np.array([c.value(x, y, z) for c in ineqs], dtype=np.float64)
        if np.any(vals >= 0.0):
            bad = int(np.argmax(vals >= 0.0))
            raise InfeasiblePoint(f"constraint {bad} is {vals[bad]:.3e} >= 0")
        return vals

    def value(x, y, z):
        vals = cvals(x, y, z)
        return float(t * obj.value(x, y, z) - np.sum(np.log(-vals)))

    def grad(var):
        def gfn(x, y, z):
            vals = cvals(x, y, z)
            out = t * obj.grad(var, x, y, z)
            for c, cv in zip(ineqs, vals):
                out = out - c.grad(var, x, y, z) / cv
            return out
        return gfn

    def hvp(x, y, z, block, v):
        vals = cvals(x, y, z)
        out = t * obj.hvp_apply(x, y, z, block, v)
        a, bvar = block[0], block[1]
        for c, cv in zip(ineqs, vals):
            ga = c.grad(a, x, y, z)
            gb = c.grad(bvar, x, y, z)
            out = out - c.hvp_apply(x, y, z, block, v) / cv
            out = out + ga * (float(gb @ v) / cv**2)
        return out

    return SmoothObjective(obj.n, obj.m, obj.p, value, grad("x"), grad("y"),
                           grad("z"), hvp=hvp)
