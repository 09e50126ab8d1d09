"""Adversarial optimal control with a learned proxy-QP policy.

The policy solves, at every step, the proxy problem

    min_u  u^T P u + x^T Q u + q^T u    s.t.  ||u||_2 <= 1

while an adversary injects a bounded state perturbation chosen against the
control signal:

    max_eps  Q(u, x + eps)   s.t. ||eps|| <= sigma,
    u(eps) = argmin_u Q(u, x + eps)  s.t. ||u|| <= 1.

Training moves (P, Q, q) by hypergradients of the rollout stage costs
through this layer.  The layer is smoothed with log barriers on both balls
and differentiated through the joint first-order (saddle) residual system;
the two-step baseline freezes the adversary at its best response and
differentiates the single-level QP only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .continuous import (
    SaddleResiduals,
    SmoothObjective,
    BilevelSolution,
    barrier_transform,
    hypergradient,
)
from .errors import (
    DimensionMismatch,
    DivergedTraining,
    NonConvergence,
    Singular,
)
from .linops import dense_solve

Array = np.ndarray

TRAIN_MODES = ("LQR_FIXED", "TWO_STEP", "BILEVEL")

#: Barrier scale rule: t >= _BARRIER_SAFETY * ||barrier grad|| / ||objective grad||,
#: comfortably inside the <=1% relative-magnitude target.  The cap keeps the
#: equilibrium boundary gap representable in double precision.
_BARRIER_SAFETY = 1e4
_T_MIN, _T_MAX = 1e2, 1e6


@dataclass(frozen=True)
class LtiSystem:
    """Linear time-invariant plant with disturbance and adversary budgets.

    ``adv_in_dynamics`` also injects the adversarial perturbation into the
    state propagation (the disturbance enters the plant); by default it only
    corrupts the state the controller sees inside its proxy problem, which
    is the genuinely adversarial channel for this attacker (it weakens the
    control response; injected into the plant it would pull the state inward
    and help).
    """

    a_mat: Array
    b_mat: Array
    noise_std: float
    horizon: int
    adv_budget: float
    adv_in_dynamics: bool = False

    def __post_init__(self):
        a = np.asarray(self.a_mat, dtype=np.float64)
        b = np.asarray(self.b_mat, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch("A must be square")
        if b.ndim != 2 or b.shape[0] != a.shape[0]:
            raise DimensionMismatch("B must map inputs into the state space")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.noise_std < 0 or self.adv_budget < 0:
            raise ValueError("noise_std and adv_budget must be >= 0")
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_mat", b)

    @property
    def state_dim(self) -> int:
        return self.a_mat.shape[0]

    @property
    def input_dim(self) -> int:
        return self.b_mat.shape[1]


@dataclass(frozen=True)
class AdpController:
    """Learned proxy-QP parameters (P symmetric PD, coupling Q, linear q)."""

    p_mat: Array
    q_mat: Array
    q_vec: Array

    def __post_init__(self):
        p = np.asarray(self.p_mat, dtype=np.float64)
        q = np.asarray(self.q_mat, dtype=np.float64)
        qv = np.asarray(self.q_vec, dtype=np.float64).reshape(-1)
        u = p.shape[0]
        if p.shape != (u, u) or q.ndim != 2 or q.shape[1] != u or qv.shape != (u,):
            raise DimensionMismatch("controller parameter shapes are inconsistent")
        if np.max(np.abs(p - p.T)) > 1e-8:
            raise ValueError("P must be symmetric")
        if np.min(np.linalg.eigvalsh(p)) < 1e-8 - 1e-12:
            raise ValueError("P must have minimum eigenvalue >= 1e-8")
        object.__setattr__(self, "p_mat", p)
        object.__setattr__(self, "q_mat", q)
        object.__setattr__(self, "q_vec", qv)

    @property
    def state_dim(self) -> int:
        return self.q_mat.shape[0]

    @property
    def input_dim(self) -> int:
        return self.p_mat.shape[0]


def project_psd(mat: Array, floor: float = 1e-8) -> Array:
    """Nearest symmetric matrix with eigenvalues clipped from below."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


# ---------------------------------------------------------------------------
# classic pieces


def riccati_lqr(a: Array, b: Array, q_cost: Array, r_cost: Array,
                tol: float = 1e-10, max_iter: int = 10_000) -> Array:
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Plain fixed-point iteration of the backward recursion until the iterates
    agree to ``tol`` in the max norm.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    q = np.asarray(q_cost, dtype=np.float64)
    r = np.asarray(r_cost, dtype=np.float64)
    p = q.copy()
    for _ in range(max_iter):
        btp = b.T @ p
        gain = dense_solve_sym(r + btp @ b, btp @ a)
        p_next = q + a.T @ p @ a - a.T @ p @ b @ gain
        p_next = 0.5 * (p_next + p_next.T)
        if np.max(np.abs(p_next - p)) <= tol:
            return p_next
        p = p_next
    raise NonConvergence(f"riccati iteration did not settle in {max_iter} steps")


def dense_solve_sym(mat: Array, rhs: Array) -> Array:
    """Columnwise dense solve for matrix right-hand sides."""
    rhs = np.atleast_2d(np.asarray(rhs, dtype=np.float64))
    out = np.stack([dense_solve(mat, rhs[:, j]) for j in range(rhs.shape[1])], axis=1)
    return out


def lqr_controller(sys: LtiSystem) -> AdpController:
    """Controller seeded from the LQR value function for unit stage costs.

    One-step lookahead with value x^T P x gives the proxy parameters
    P~ = R + B^T P B, Q~ = 2 A^T P B, q~ = 0.
    """
    n, u = sys.state_dim, sys.input_dim
    p_ric = riccati_lqr(sys.a_mat, sys.b_mat, np.eye(n), np.eye(u))
    return AdpController(
        p_mat=np.eye(u) + sys.b_mat.T @ p_ric @ sys.b_mat,
        q_mat=2.0 * sys.a_mat.T @ p_ric @ sys.b_mat,
        q_vec=np.zeros(u),
    )


def qp_ball_solve(p: Array, c: Array, tol: float = 1e-9) -> Array:
    """argmin u^T p u + c^T u over the unit ball.

    Uses the unconstrained stationary point when it is feasible; otherwise
    finds the multiplier lam >= 0 with ||(2p + 2 lam I)^-1 c|| = 1 by
    bisection on the eigenbasis of the symmetric part (one factorization,
    scalar iterations).
    """
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if p.shape != (c.size, c.size):
        raise DimensionMismatch(f"p {p.shape} vs c length {c.size}")
    vals, vecs = np.linalg.eigh(0.5 * (p + p.T))
    if vals[0] <= 0:
        raise Singular("p must be positive definite")
    if not np.any(c):
        return np.zeros_like(c)
    ct = vecs.T @ c  # rotated linear term; u = -V diag(1/(2 vals + 2 lam)) ct

    def norm_sq(lam: float) -> float:
        return float(np.sum((ct / (2.0 * vals + 2.0 * lam)) ** 2))

    if norm_sq(0.0) <= 1.0:
        return vecs @ (-ct / (2.0 * vals))
    lo, hi = 0.0, 1.0
    while norm_sq(hi) > 1.0:
        hi *= 2.0
        if hi > 1e16:
            raise NonConvergence("ball multiplier bracket failed")
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        if norm_sq(mid) > 1.0:
            lo = mid
        else:
            hi = mid
        if abs(np.sqrt(norm_sq(hi)) - 1.0) <= tol:
            break
    return vecs @ (-ct / (2.0 * vals + 2.0 * hi))


def adversary_best_response(q_mat: Array, u: Array, sigma: float) -> Array:
    """Maximizer of the eps-linear coupling over the sigma-ball: sigma * Qu / ||Qu||."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    direction = np.asarray(q_mat, dtype=np.float64) @ np.asarray(u, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if sigma == 0.0 or norm == 0.0:
        return np.zeros(direction.shape[0])
    return sigma * direction / norm


def _br_iterate(ctrl: AdpController, x_t: Array, sigma: float, tol: float,
                max_iter: int) -> tuple[Array, Array, bool]:
    """Plain then damped best-response rounds; returns (eps, u, converged)."""
    eps = np.zeros(ctrl.state_dim)
    u = np.zeros(ctrl.input_dim)
    for damping, rounds in ((1.0, max_iter), (0.5, 3 * max_iter)):
        for _ in range(rounds):
            u_star = qp_ball_solve(ctrl.p_mat, ctrl.q_mat.T @ (x_t + eps) + ctrl.q_vec)
            u_new = u + damping * (u_star - u)
            eps_star = adversary_best_response(ctrl.q_mat, u_new, sigma)
            eps_new = eps + damping * (eps_star - eps)
            delta = max(
                np.max(np.abs(u_star - u), initial=0.0),
                np.max(np.abs(eps_star - eps), initial=0.0),
            )
            u, eps = u_new, eps_new
            if delta <= tol:
                return eps, u, True
    return eps, u, False


def solve_control_bilevel(ctrl: AdpController, x_t: Array, sigma: float,
                          tol: float = 1e-8, max_iter: int = 100) -> tuple[Array, Array]:
    """Best-response iteration for the adversarial layer.

    Alternates u <- ball-QP at state x_t + eps and eps <- adversary response
    to u until the pair moves less than ``tol`` in the max norm.  If the
    plain iteration oscillates (the response map is discontinuous where
    Q u = 0) it is retried with damping and finally replaced by the
    barrier-smoothed saddle, whose fixed point always exists and sits within
    O(1/t) of the exact responses.
    """
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1)
    if x_t.shape != (ctrl.state_dim,):
        raise DimensionMismatch(f"state length {x_t.size} vs {ctrl.state_dim}")
    if sigma == 0.0:
        u = qp_ball_solve(ctrl.p_mat, ctrl.q_mat.T @ x_t + ctrl.q_vec)
        return np.zeros(ctrl.state_dim), u
    eps, u, ok = _br_iterate(ctrl, x_t, sigma, tol, max_iter)
    if ok:
        return eps, u
    try:
        _, _, eps_s, u_s, _ = _smoothed_saddle(ctrl, x_t, sigma, eps, u)
        return eps_s, u_s
    except (NonConvergence, Singular) as exc:
        raise NonConvergence(
            f"best-response iteration oscillating; last |eps|="
            f"{np.linalg.norm(eps):.4f}, |u|={np.linalg.norm(u):.4f}"
        ) from exc


# ---------------------------------------------------------------------------
# smoothed layer and its hypergradient


def pack_params(ctrl: AdpController) -> Array:
    return np.concatenate([ctrl.p_mat.reshape(-1), ctrl.q_mat.reshape(-1), ctrl.q_vec])


def unpack_params(zv: Array, n: int, udim: int) -> tuple[Array, Array, Array]:
    p_len, q_len = udim * udim, n * udim
    return (zv[:p_len].reshape(udim, udim),
            zv[p_len : p_len + q_len].reshape(n, udim),
            zv[p_len + q_len :])


def _proxy_objective(n_eps: int, state_dim: int, udim: int, x_t: Array,
                     sign: float) -> SmoothObjective:
    """sign * Q(u, x_t + eps) as a function of (eps, u, packed params).

    ``n_eps`` is the dimension of the perturbation variable (0 freezes the
    adversary and the state enters as a constant); the packed parameter
    layout always uses the true ``state_dim``.
    """
    p_dim = udim * udim + state_dim * udim + udim
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1)

    def state(e):
        return x_t + e if n_eps else x_t

    def value(e, u, zv):
        p, q, qv = unpack_params(zv, state_dim, udim)
        s = state(e)
        return sign * float(u @ p @ u + s @ q @ u + qv @ u)

    def grad_x(e, u, zv):
        if not n_eps:
            return np.zeros(0)
        _, q, _ = unpack_params(zv, state_dim, udim)
        return sign * (q @ u)

    def grad_y(e, u, zv):
        p, q, qv = unpack_params(zv, state_dim, udim)
        return sign * ((p + p.T) @ u + q.T @ state(e) + qv)

    def grad_z(e, u, zv):
        s = state(e)
        return sign * np.concatenate([np.outer(u, u).reshape(-1),
                                      np.outer(s, u).reshape(-1), u])

    def hvp(e, u, zv, block, v):
        # dim-0 blocks are short-circuited by hvp_apply before reaching here
        p, q, _ = unpack_params(zv, state_dim, udim)
        s = state(e)
        if block == "xx":
            return np.zeros(n_eps)
        if block == "xy":
            return sign * (q @ v)
        if block == "xz":
            _, vq, _ = unpack_params(v, state_dim, udim)
            return sign * (vq @ u)
        if block == "yx":
            return sign * (q.T @ v)
        if block == "yy":
            return sign * ((p + p.T) @ v)
        if block == "yz":
            vp, vq, vqv = unpack_params(v, state_dim, udim)
            return sign * ((vp + vp.T) @ u + vq.T @ s + vqv)
        if block == "zx":
            return sign * np.concatenate([np.zeros(udim * udim),
                                          np.outer(v, u).reshape(-1),
                                          np.zeros(udim)])
        if block == "zy":
            return sign * np.concatenate([
                (np.outer(v, u) + np.outer(u, v)).reshape(-1),
                np.outer(s, v).reshape(-1), v])
        if block == "zz":
            return np.zeros(p_dim)
        raise ValueError(f"unknown block {block!r}")

    return SmoothObjective(n_eps, udim, p_dim, value, grad_x, grad_y, grad_z, hvp=hvp)


def _ball_constraint(n: int, udim: int, p_dim: int, var: str, radius_sq: float) -> SmoothObjective:
    """||var||^2 - radius_sq as a SmoothObjective over (eps, u, params)."""
    dims = {"x": n, "y": udim, "z": p_dim}

    def pick(e, u, zv):
        return {"x": e, "y": u, "z": zv}[var]

    def value(e, u, zv):
        t = pick(e, u, zv)
        return float(t @ t - radius_sq)

    def grad(which):
        def g(e, u, zv):
            if which == var:
                return 2.0 * pick(e, u, zv)
            return np.zeros(dims[which])
        return g

    def hvp(e, u, zv, block, v):
        if block == var + var:
            return 2.0 * v
        return np.zeros(dims[block[0]])

    return SmoothObjective(n, udim, p_dim, value, grad("x"), grad("y"), grad("z"), hvp=hvp)


def _barrier_scale(barrier_grad: float, objective_grad: float) -> float:
    return float(np.clip(_BARRIER_SAFETY * barrier_grad / max(objective_grad, 1e-2),
                         _T_MIN, _T_MAX))


def _scale_objective(obj: SmoothObjective, s: float) -> SmoothObjective:
    """s * obj with all derivative oracles scaled alike."""
    return SmoothObjective(
        obj.n, obj.m, obj.p,
        value=lambda x, y, z: s * obj.value(x, y, z),
        grad_x=lambda x, y, z: s * obj.grad("x", x, y, z),
        grad_y=lambda x, y, z: s * obj.grad("y", x, y, z),
        grad_z=lambda x, y, z: s * obj.grad("z", x, y, z),
        hvp=lambda x, y, z, block, v: s * obj.hvp_apply(x, y, z, block, v),
    )


@dataclass(frozen=True)
class SmoothedLayer:
    """Barrier-smoothed adversarial layer at one state, ready for Thm-2 gradients."""

    residuals: SaddleResiduals
    solution: BilevelSolution


def _barrier_weights(ctrl: AdpController, x_t: Array, sigma: float,
                     eps0: Array, u0: Array) -> tuple[float, float, Array, Array]:
    """Barrier weights from gradient magnitudes at the (nudged) start point."""
    eps_in = eps0 * (1.0 - 1e-3)
    u_in = u0 if np.linalg.norm(u0) < 1.0 - 1e-6 else u0 * (1.0 - 1e-3)
    qu = ctrl.q_mat @ u0
    b_eps = np.linalg.norm(2.0 * eps_in / max(sigma**2 - eps_in @ eps_in, 1e-300))
    t_f = _barrier_scale(b_eps, np.linalg.norm(qu))
    grad_u = (ctrl.p_mat + ctrl.p_mat.T) @ u_in + ctrl.q_mat.T @ (x_t + eps_in) + ctrl.q_vec
    b_u = np.linalg.norm(2.0 * u_in / max(1.0 - u_in @ u_in, 1e-300))
    t_g = _barrier_scale(b_u, np.linalg.norm(grad_u))
    return t_f, t_g, eps_in, u_in


def _smoothed_saddle(ctrl: AdpController, x_t: Array, sigma: float,
                     eps0: Array, u0: Array):
    """Solve the barriered saddle from (eps0, u0); returns (t_f, t_g, eps, u, iters)."""
    t_f, t_g, eps_in, u_in = _barrier_weights(ctrl, x_t, sigma, eps0, u0)
    eps, u, iters = _solve_saddle_numeric(ctrl, x_t, sigma, t_f, t_g, eps_in, u_in)
    return t_f, t_g, eps, u, iters


def smooth_layer_solve(ctrl: AdpController, x_t: Array, sigma: float) -> SmoothedLayer:
    """Solve the barrier-smoothed saddle system to high accuracy.

    Barrier weights are picked so the barrier gradients are a small fraction
    of the objective gradients; the magnitudes are measured at the plain QP
    point, which varies continuously with the inputs, so the smoothed layer
    is a single smooth map of (state, parameters).  The smoothed root sits
    next to the exact saddle and the residual pair feeds the hypergradient
    engine.
    """
    if sigma <= 0:
        raise ValueError("smooth_layer_solve needs sigma > 0; use the QP directly")
    n, udim = ctrl.state_dim, ctrl.input_dim
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1)
    u0 = qp_ball_solve(ctrl.p_mat, ctrl.q_mat.T @ x_t + ctrl.q_vec)
    delta = 1e-3  # reference distance to the ball boundaries for the scale rule
    b_eps = 2.0 * (1.0 - delta) / (sigma * delta * (2.0 - delta))
    t_f = _barrier_scale(b_eps, np.linalg.norm(ctrl.q_mat @ u0))
    u_in = u0 if np.linalg.norm(u0) < 1.0 - 1e-6 else u0 * (1.0 - delta)
    b_u = np.linalg.norm(2.0 * u_in / max(1.0 - u_in @ u_in, delta))
    og_u = np.linalg.norm((ctrl.p_mat + ctrl.p_mat.T) @ u_in
                          + ctrl.q_mat.T @ x_t + ctrl.q_vec)
    t_g = _barrier_scale(b_u, og_u)
    eps, u, iters = _solve_saddle_numeric(ctrl, x_t, sigma, t_f, t_g,
                                          np.zeros(n), u_in)
    zv = pack_params(ctrl)
    # 1/t normalization keeps residuals on the objective scale (same root)
    f_bar = _scale_objective(
        barrier_transform(_proxy_objective(n, n, udim, x_t, -1.0),
                          [_ball_constraint(n, udim, zv.size, "x", sigma**2)], t_f),
        1.0 / t_f)
    g_bar = _scale_objective(
        barrier_transform(_proxy_objective(n, n, udim, x_t, +1.0),
                          [_ball_constraint(n, udim, zv.size, "y", 1.0)], t_g),
        1.0 / t_g)
    rp = SaddleResiduals(f_bar, g_bar)
    f_norm = float(np.max(np.abs(rp.F_eval(eps, u, zv))))
    g_norm = float(np.max(np.abs(rp.G_eval(eps, u, zv))))
    sol = BilevelSolution(x=eps, y=u, z=zv, residual_norms=(f_norm, g_norm),
                         iterations=iters)
    return SmoothedLayer(residuals=rp, solution=sol)


def _smoothed_adversary(qu: Array, sigma: float, t_f: float) -> Array:
    """Closed-form maximizer of t * <eps, qu> + ln(sigma^2 - ||eps||^2)."""
    norm = np.linalg.norm(qu)
    a = t_f * norm
    if a == 0.0:
        return np.zeros_like(qu)
    rho = (np.sqrt(1.0 + (a * sigma) ** 2) - 1.0) / a
    return rho * qu / norm


def _newton_in_u_numeric(p2: Array, t_g: float, c: Array, u: Array,
                         tol: float = 1e-11, max_iter: int = 60) -> Array:
    """Minimize (u^T P u + c^T u) - ln(1 - ||u||^2) / t_g; p2 = P + P^T.

    The 1/t_g normalization keeps gradients on the objective's own scale.
    Iterates are confined to gap >= 0.01/t_g, which never excludes the
    minimizer (its equilibrium gap is 2/(t_g * boundary force)) but stops
    Newton from overshooting through the weak barrier onto the cliff.
    """
    udim = u.size
    eye = np.eye(udim)
    inv_t = 1.0 / t_g
    gap_min = 0.01 * inv_t
    radius_sq = 1.0 - gap_min

    def clamp(uu):
        r = uu @ uu
        if r > radius_sq:
            return uu * np.sqrt(radius_sq / r)
        return uu

    u = clamp(u)
    for _ in range(max_iter):
        gap = 1.0 - u @ u
        grad = p2 @ u + c + inv_t * 2.0 * u / gap
        if np.max(np.abs(grad)) <= tol:
            return u
        hess = p2 + inv_t * ((2.0 / gap) * eye + (4.0 / gap**2) * np.outer(u, u))
        step = np.linalg.solve(hess, -grad)
        val = 0.5 * u @ p2 @ u + c @ u - inv_t * np.log(gap)
        slope = float(grad @ step)
        alpha = min(1.0, _edge_fraction(u, step, radius_sq))
        accepted = False
        for _ in range(60):
            cand = u + alpha * step
            cgap = 1.0 - cand @ cand
            if cand @ cand <= radius_sq:
                cval = 0.5 * cand @ p2 @ cand + c @ cand - inv_t * np.log(cgap)
                if cval <= val + 1e-4 * alpha * slope + 1e-14:
                    u = cand
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            return u
    return u


def _edge_fraction(u: Array, step: Array, radius_sq: float) -> float:
    """Largest step fraction keeping ||u + a step||^2 <= radius_sq, damped."""
    a_ss = step @ step
    if a_ss == 0.0:
        return 1.0
    b_us = u @ step
    c_gap = radius_sq - u @ u
    disc = b_us**2 + a_ss * max(c_gap, 0.0)
    return float(0.995 * (np.sqrt(disc) - b_us) / a_ss)


def _solve_saddle_numeric(ctrl: AdpController, x_t: Array, sigma: float,
                          t_f: float, t_g: float, eps: Array, u: Array,
                          tol: float = 1e-10) -> tuple[Array, Array, int]:
    """Global solve of the t-normalized saddle system.

    The smoothed inner max has the closed form eps*(u) (Danskin), so the
    saddle is the unique minimizer of the strictly convex worst-case control
    objective; damped Newton on it cannot cycle, unlike best-response
    iteration.
    """
    udim = ctrl.input_dim
    p2 = ctrl.p_mat + ctrl.p_mat.T
    q, qv = ctrl.q_mat, ctrl.q_vec
    inv_f, inv_g = 1.0 / t_f, 1.0 / t_g
    c_lin = q.T @ x_t + qv
    eye_m = np.eye(udim)

    def eps_star(uu):
        return _smoothed_adversary(q @ uu, sigma, t_f)

    def worst_value(uu):
        # m(u) = <eps*, Qu> + ln(sigma^2 - ||eps*||^2) / t_f, smooth and convex
        qu = q @ uu
        e = _smoothed_adversary(qu, sigma, t_f)
        return float(e @ qu) + inv_f * np.log(sigma**2 - e @ e)

    def psi(uu):
        gap = 1.0 - uu @ uu
        return (0.5 * uu @ p2 @ uu + c_lin @ uu + worst_value(uu)
                - inv_g * np.log(gap))

    def grad_psi(uu):
        gap = 1.0 - uu @ uu
        return p2 @ uu + c_lin + q.T @ eps_star(uu) + inv_g * 2.0 * uu / gap

    def hess_psi(uu):
        gap = 1.0 - uu @ uu
        qu = q @ uu
        norm = np.linalg.norm(qu)
        a = t_f * norm
        if a < 1e-12:
            d2m = (t_f * sigma**2 / 2.0) * (q.T @ q)
        else:
            s = np.sqrt(1.0 + (a * sigma) ** 2)
            rho = (s - 1.0) / a
            rho_p = (s - 1.0) / (s * a * a)
            dhat = qu / norm
            proj = np.outer(dhat, dhat)
            inner = t_f * rho_p * proj + (rho / norm) * (eye_m - proj)
            d2m = q.T @ inner @ q
        barrier = inv_g * ((2.0 / gap) * eye_m + (4.0 / gap**2) * np.outer(uu, uu))
        return p2 + d2m + barrier

    gap_min = 0.01 * inv_g
    radius_sq = 1.0 - gap_min
    if u @ u > radius_sq:
        u = u * np.sqrt(radius_sq / (u @ u))
    it = 0
    for it in range(1, 201):
        g = grad_psi(u)
        if np.max(np.abs(g)) <= tol:
            break
        hess = hess_psi(u)
        mu = 0.0  # Levenberg damping, raised only when the pure step fails
        moved = False
        for _ in range(12):
            try:
                step = np.linalg.solve(hess + mu * eye_m, -g)
            except np.linalg.LinAlgError:
                mu = max(10.0 * mu, 1e-8 * (1.0 + np.trace(hess)))
                continue
            val = psi(u)
            slope = float(g @ step)
            alpha = min(1.0, _edge_fraction(u, step, radius_sq))
            for _ in range(40):
                cand = u + alpha * step
                if cand @ cand <= radius_sq \
                        and psi(cand) <= val + 1e-4 * alpha * slope + 1e-14:
                    u = cand
                    moved = True
                    break
                alpha *= 0.5
            if moved:
                break
            mu = max(10.0 * mu, 1e-8 * (1.0 + abs(np.trace(hess))))
        if not moved:
            break
    g = grad_psi(u)
    if np.max(np.abs(g)) > 1e-7 and 1.0 - u @ u > 2.0 * gap_min:
        raise NonConvergence(
            f"smoothed saddle solve stalled at gradient {np.max(np.abs(g)):.2e}"
        )
    return eps_star(u), u, it


def _layer_grad(layer: SmoothedLayer, grad_u_L: Array) -> Array:
    """Packed parameter gradient of a loss with gradient grad_u_L at the control."""
    n = layer.residuals.n
    return hypergradient(layer.residuals, layer.solution, np.zeros(n),
                         grad_u_L, np.zeros(layer.solution.z.size))


def _adjoint_multipliers(rp, sol: BilevelSolution, grad_eps_L: Array,
                         grad_u_L: Array) -> tuple[Array, Array]:
    """(lam, gam) of the stacked adjoint system for the given loss gradients."""
    n, m = rp.n, rp.m
    x, y, z = sol.x, sol.y, sol.z
    jac = np.zeros((n + m, n + m))
    for i in range(n):
        e = np.eye(n)[i]
        jac[:n, i] = rp.F_jvp("x", x, y, z, e)
        jac[n:, i] = rp.G_jvp("x", x, y, z, e)
    for i in range(m):
        e = np.eye(m)[i]
        jac[:n, n + i] = rp.F_jvp("y", x, y, z, e)
        jac[n:, n + i] = rp.G_jvp("y", x, y, z, e)
    rhs = -np.concatenate([grad_eps_L, grad_u_L])
    v = dense_solve(jac.T, rhs)
    return v[:n], v[n:]


def _layer_pullbacks(rp, sol: BilevelSolution, q_mat: Array, grad_u_L: Array,
                     grad_eps_L: Array | None = None) -> tuple[Array, Array]:
    """((d(eps,u)/dtheta)^T g, (d(eps,u)/dx_t)^T g) through one layer solve.

    ``grad_eps_L`` carries the loss sensitivity to the perturbation output
    (nonzero when the adversary also enters the dynamics).  The state enters
    the stationarity residual G only via the linear term Q^T x_t, so the
    state pullback is Q @ gam with the same adjoint multipliers that give
    the parameter gradient.
    """
    n = rp.n
    x, y, z = sol.x, sol.y, sol.z
    g_eps = np.zeros(n) if grad_eps_L is None else grad_eps_L
    lam, gam = _adjoint_multipliers(rp, sol, g_eps, grad_u_L)
    d_theta = np.zeros(z.size)
    if n:
        d_theta = d_theta + rp.F_vjp("z", x, y, z, lam)
    d_theta = d_theta + rp.G_vjp("z", x, y, z, gam)
    return d_theta, q_mat @ gam


def _twostep_layer(ctrl: AdpController, x_t: Array, eps: Array,
                   u0: Array) -> SmoothedLayer:
    """Smoothed single-level QP layer with the adversary frozen at eps."""
    n, udim = ctrl.state_dim, ctrl.input_dim
    zv = pack_params(ctrl)
    state = np.asarray(x_t, dtype=np.float64).reshape(-1) + eps
    u_in = u0 if np.linalg.norm(u0) < 1.0 - 1e-6 else u0 * (1.0 - 1e-3)
    grad_u = (ctrl.p_mat + ctrl.p_mat.T) @ u_in + ctrl.q_mat.T @ state + ctrl.q_vec
    b_u = np.linalg.norm(2.0 * u_in / max(1.0 - u_in @ u_in, 1e-300))
    t_g = _barrier_scale(b_u, np.linalg.norm(grad_u))
    g_bar = _scale_objective(
        barrier_transform(_proxy_objective(0, n, udim, state, +1.0),
                          [_ball_constraint(0, udim, zv.size, "y", 1.0)], t_g),
        1.0 / t_g)
    f_zero = SmoothObjective(0, udim, zv.size,
                             value=lambda e, uu, z: 0.0,
                             grad_x=lambda e, uu, z: np.zeros(0),
                             grad_y=lambda e, uu, z: np.zeros(udim),
                             grad_z=lambda e, uu, z: np.zeros(zv.size),
                             hvp=lambda e, uu, z, blk, v: np.zeros(
                                 {"x": 0, "y": udim, "z": zv.size}[blk[0]]))
    u = _newton_in_u_numeric(ctrl.p_mat + ctrl.p_mat.T, t_g,
                             ctrl.q_mat.T @ state + ctrl.q_vec, u_in)
    rp = SaddleResiduals(f_zero, g_bar)
    g_norm = float(np.max(np.abs(rp.G_eval(np.zeros(0), u, zv))))
    sol = BilevelSolution(x=np.zeros(0), y=u, z=zv,
                         residual_norms=(0.0, g_norm), iterations=0)
    return SmoothedLayer(residuals=rp, solution=sol)


def _grad_twostep(ctrl: AdpController, x_t: Array, eps: Array, u0: Array,
                  grad_u_L: Array) -> tuple[Array, Array]:
    """(smoothed u, packed gradient) through the QP with the adversary frozen."""
    layer = _twostep_layer(ctrl, x_t, eps, u0)
    d_z = hypergradient(layer.residuals, layer.solution, np.zeros(0), grad_u_L,
                        np.zeros(layer.solution.z.size))
    return layer.solution.y, d_z


def stage_cost_gradient(ctrl: AdpController, x_t: Array, sigma: float,
                        mode: str = "BILEVEL") -> tuple[Array, Array, Array]:
    """Hypergradient of ||x_t||^2 + ||u||^2 w.r.t. (P, Q, q) through the layer.

    BILEVEL differentiates the smoothed saddle system in both variables;
    TWO_STEP freezes the adversary at its best response and differentiates
    the single-level smoothed QP.
    """
    n, udim = ctrl.state_dim, ctrl.input_dim
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1)
    if mode == "BILEVEL" and sigma > 0:
        layer = smooth_layer_solve(ctrl, x_t, sigma)
        d_z = _layer_grad(layer, 2.0 * layer.solution.y)
    elif mode in ("TWO_STEP", "BILEVEL"):
        if sigma > 0:
            eps, u0 = solve_control_bilevel(ctrl, x_t, sigma)
        else:
            eps = np.zeros(n)
            u0 = qp_ball_solve(ctrl.p_mat, ctrl.q_mat.T @ x_t + ctrl.q_vec)
        _, d_z = _grad_twostep(ctrl, x_t, eps, u0, 2.0 * u0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return unpack_params(d_z, n, udim)


# ---------------------------------------------------------------------------
# rollout and training


def rollout(sys: LtiSystem, ctrl: AdpController, x0: Array, rng_seed: int,
            adversarial: bool) -> tuple[float, list[dict]]:
    """Simulate the closed loop for ``sys.horizon`` steps.

    Average stage cost (||x||^2 + ||u||^2) / T; the disturbance sequence is
    deterministic in ``rng_seed``.
    """
    rng = np.random.default_rng(rng_seed)
    x = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    total = 0.0
    traj = []
    for _ in range(sys.horizon):
        if adversarial and sys.adv_budget > 0:
            eps, u = solve_control_bilevel(ctrl, x, sys.adv_budget)
        else:
            eps = np.zeros(sys.state_dim)
            u = qp_ball_solve(ctrl.p_mat, ctrl.q_mat.T @ x + ctrl.q_vec)
        total += float(x @ x + u @ u)
        traj.append({"x": x.copy(), "u": u, "eps": eps})
        noise = sys.noise_std * rng.standard_normal(sys.state_dim)
        x = sys.a_mat @ x + sys.b_mat @ u + noise
        if adversarial and sys.adv_in_dynamics:
            x = x + eps
    return total / sys.horizon, traj


def _rollout_gradient(sys: LtiSystem, ctrl: AdpController, rng: np.random.Generator,
                      mode: str) -> tuple[float, Array]:
    """Average cost of one training rollout and its parameter gradient.

    The layer is replicated at every time step; the backward pass runs the
    adjoint recursion through the known dynamics, pulling each step's
    contribution back through that step's layer (full saddle sensitivities
    for BILEVEL, frozen-adversary QP sensitivities for TWO_STEP).
    """
    t = sys.horizon
    x = rng.standard_normal(sys.state_dim)
    adversarial = sys.adv_budget > 0
    inject = adversarial and sys.adv_in_dynamics
    states: list[Array] = []
    controls: list[Array] = []
    layers: list[SmoothedLayer] = []
    total = 0.0
    for _ in range(t):
        if mode == "BILEVEL" and adversarial:
            layer = smooth_layer_solve(ctrl, x, sys.adv_budget)
            eps, u = layer.solution.x, layer.solution.y
        else:
            if adversarial:
                eps, u0 = solve_control_bilevel(ctrl, x, sys.adv_budget)
            else:
                eps = np.zeros(sys.state_dim)
                u0 = qp_ball_solve(ctrl.p_mat, ctrl.q_mat.T @ x + ctrl.q_vec)
            layer = _twostep_layer(ctrl, x, eps, u0)
            u = layer.solution.y
        states.append(x)
        controls.append(u)
        layers.append(layer)
        total += float(x @ x + u @ u)
        noise = sys.noise_std * rng.standard_normal(sys.state_dim)
        x = sys.a_mat @ x + sys.b_mat @ u + noise
        if inject:
            x = x + eps

    d_theta = np.zeros(pack_params(ctrl).size)
    lam_x = np.zeros(sys.state_dim)  # d(avg cost)/d x_{t+1}
    for step in range(t - 1, -1, -1):
        u = controls[step]
        g_u = 2.0 * u / t + sys.b_mat.T @ lam_x
        # when the perturbation enters the plant, the next-state adjoint
        # also pulls back through the layer's eps output (BILEVEL only; the
        # two-step baseline treats eps as a constant)
        g_eps = lam_x if (inject and mode == "BILEVEL") else None
        d_step, x_pull = _layer_pullbacks(layers[step].residuals,
                                          layers[step].solution,
                                          ctrl.q_mat, g_u, g_eps)
        d_theta += d_step
        lam_x = 2.0 * states[step] / t + sys.a_mat.T @ lam_x + x_pull
    return total / t, d_theta


def train_controller(sys: LtiSystem, ctrl: AdpController, epochs: int, lr: float,
                     rng_seed: int, mode: str,
                     rollouts_per_epoch: int = 5) -> tuple[AdpController, list[float]]:
    """Hypergradient training of (P, Q, q) on adversarial rollouts.

    Each epoch runs ``rollouts_per_epoch`` training rollouts; every rollout
    contributes one gradient update of its average stage cost, computed by
    per-step hypergradients through the replicated layer and the adjoint
    recursion through the dynamics.  BILEVEL differentiates the full saddle
    layer, TWO_STEP treats the adversary as the fixed best-response function,
    LQR_FIXED performs no updates.  P is projected back to symmetric PD
    after every update.
    """
    if mode not in TRAIN_MODES:
        raise ValueError(f"mode must be one of {TRAIN_MODES}")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    curve: list[float] = []
    p, q, qv = ctrl.p_mat.copy(), ctrl.q_mat.copy(), ctrl.q_vec.copy()
    train_here = mode != "LQR_FIXED" and lr > 0
    for epoch in range(epochs):
        rng = np.random.default_rng((rng_seed, epoch))
        costs = []
        for _ in range(rollouts_per_epoch):
            cur = AdpController(p, q, qv)
            if train_here:
                cost, d_theta = _rollout_gradient(sys, cur, rng, mode)
                d_p, d_q, d_qv = unpack_params(d_theta, sys.state_dim, sys.input_dim)
                p = project_psd(p - lr * d_p)
                q = q - lr * d_q
                qv = qv - lr * d_qv
            else:
                cost, _ = rollout(sys, cur, rng.standard_normal(sys.state_dim),
                                  int(rng.integers(1 << 31)), adversarial=True)
            costs.append(cost)
        avg = float(np.mean(costs))
        curve.append(avg)
        if epoch > 0 and avg > 1e3 * max(curve[0], 1e-9):
            raise DivergedTraining(f"epoch {epoch} cost {avg:.3e} blew up")
    return AdpController(p, q, qv), curve


def evaluate_controller(sys: LtiSystem, ctrl: AdpController,
                        seeds: Sequence[int]) -> float:
    """Mean adversarial rollout cost over evaluation seeds."""
    costs = [rollout(sys, ctrl, _eval_x0(seed, sys.state_dim), seed, True)[0]
             for seed in seeds]
    return float(np.mean(costs))


def _eval_x0(seed: int, dim: int) -> Array:
    return np.random.default_rng((seed, 104729)).standard_normal(dim)


def make_default_system(seed: int = 0, state_dim: int = 2, horizon: int = 20,
                        noise_std: float = 0.1, adv_budget: float = 0.2,
                        instability: float = 0.1) -> LtiSystem:
    """Mildly unstable A = I + instability * R with identity input map."""
    rng = np.random.default_rng((seed, 9001))
    a = np.eye(state_dim) + instability * rng.standard_normal((state_dim, state_dim))
    return LtiSystem(a_mat=a, b_mat=np.eye(state_dim), noise_std=noise_std,
                     horizon=horizon, adv_budget=adv_budget)
