"""Dense vectors/matrices and matrix-free iterative linear solvers.

All numeric data in the package is float64. The ``vector``/``matrix``
constructors validate finiteness and return read-only arrays; the
``LinearOperator`` type carries the apply / apply-adjoint oracle pair that
lets the hypergradient engine evaluate Jacobian products without ever
materializing a matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NonConvergence, Singular

Array = np.ndarray

#: Pivot magnitude below which elimination is treated as singular.
PIVOT_TOL = 1e-12


def vector(data) -> Array:
    """Validated 1-D float64 vector (finite entries, read-only)."""
    v = np.array(data, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector entries must be finite")
    v.setflags(write=False)
    return v


def matrix(data, rows: int | None = None, cols: int | None = None) -> Array:
    """Validated 2-D float64 matrix, row-major.

    ``data`` may be nested rows or a flat sequence together with
    ``rows``/``cols``.
    """
    a = np.array(data, dtype=np.float64)
    if a.ndim == 1:
        if rows is None or cols is None:
            raise DimensionMismatch("flat matrix data needs rows and cols")
        if rows <= 0 or cols <= 0 or a.size != rows * cols:
            raise DimensionMismatch(
                f"cannot shape {a.size} entries into {rows}x{cols}"
            )
        a = a.reshape(rows, cols)
    elif a.ndim != 2:
        raise DimensionMismatch(f"matrix data must be 1-D or 2-D, got ndim={a.ndim}")
    if rows is not None and cols is not None and a.shape != (rows, cols):
        raise DimensionMismatch(f"expected shape {(rows, cols)}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free linear map with an optional adjoint oracle.

    ``apply(v)`` computes M @ v for v of length ``dim_in``;
    ``apply_adjoint(u)`` computes M.T @ u for u of length ``dim_out``.
    """

    dim_in: int
    dim_out: int
    apply: Callable[[Array], Array]
    apply_adjoint: Callable[[Array], Array] | None = None

    def __call__(self, v: Array) -> Array:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim_in,):
            raise DimensionMismatch(f"expected length {self.dim_in}, got {v.shape}")
        out = np.asarray(self.apply(v), dtype=np.float64)
        if out.shape != (self.dim_out,):
            raise DimensionMismatch(
                f"operator returned shape {out.shape}, expected ({self.dim_out},)"
            )
        return out

    def adjoint(self, u: Array) -> Array:
        if self.apply_adjoint is None:
            raise DimensionMismatch("operator has no adjoint oracle")
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.dim_out,):
            raise DimensionMismatch(f"expected length {self.dim_out}, got {u.shape}")
        out = np.asarray(self.apply_adjoint(u), dtype=np.float64)
        if out.shape != (self.dim_in,):
            raise DimensionMismatch(
                f"adjoint returned shape {out.shape}, expected ({self.dim_in},)"
            )
        return out

    @staticmethod
    def from_matrix(mat: Array) -> "LinearOperator":
        m = np.asarray(mat, dtype=np.float64)
        if m.ndim != 2:
            raise DimensionMismatch("from_matrix expects a 2-D array")
        return LinearOperator(
            dim_in=m.shape[1],
            dim_out=m.shape[0],
            apply=lambda v: m @ v,
            apply_adjoint=lambda u: m.T @ u,
        )

    @staticmethod
    def identity(dim: int) -> "LinearOperator":
        return LinearOperator(dim, dim, lambda v: v, lambda u: u)


def cg_solve(op: LinearOperator, b: Array, tol: float = 1e-10,
             max_iter: int | None = None) -> Array:
    """Conjugate gradients for a symmetric positive-definite operator.

    Returns x with ||op(x) - b||_2 <= tol * ||b||_2.  SPD-ness is the
    caller's responsibility; a non-positive curvature breakdown or hitting
    ``max_iter`` raises NonConvergence.
    """
    if op.dim_in != op.dim_out:
        raise DimensionMismatch("cg_solve needs a square operator")
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (op.dim_in,):
        raise DimensionMismatch(f"rhs length {b.shape} vs dim {op.dim_in}")
    n = op.dim_in
    if max_iter is None:
        max_iter = max(10 * n, 50)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros(n)
    x = np.zeros(n)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    target = tol * b_norm
    for _ in range(max_iter):
        if np.sqrt(rs) <= target:
            return x
        ap = op(p)
        denom = float(p @ ap)
        if denom <= 0.0 or not np.isfinite(denom):
            raise NonConvergence("cg breakdown: operator not positive definite")
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    # final residual check against the true residual, not the recursion
    if np.linalg.norm(b - op(x)) <= target:
        return x
    raise NonConvergence(f"cg did not reach tol={tol} in {max_iter} iterations")


def gmres_solve(op: LinearOperator, b: Array, tol: float = 1e-10,
                max_iter: int | None = None, restart: int | None = None) -> Array:
    """Restarted GMRES for a general square operator.

    Arnoldi with modified Gram-Schmidt; the restart length defaults to
    min(dim, 30) so memory stays O(restart * dim).
    """
    if op.dim_in != op.dim_out:
        raise DimensionMismatch("gmres_solve needs a square operator")
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (op.dim_in,):
        raise DimensionMismatch(f"rhs length {b.shape} vs dim {op.dim_in}")
    n = op.dim_in
    if restart is None:
        restart = min(n, 30)
    restart = max(1, min(restart, n))
    if max_iter is None:
        max_iter = max(10 * n, 50)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros(n)
    target = tol * b_norm

    x = np.zeros(n)
    total = 0
    while total < max_iter:
        r = b - op(x)
        beta = np.linalg.norm(r)
        if beta <= target:
            return x
        v = np.zeros((restart + 1, n))
        h = np.zeros((restart + 1, restart))
        v[0] = r / beta
        k = 0
        for j in range(restart):
            if total >= max_iter:
                break
            w = op(v[j])
            total += 1
            for i in range(j + 1):
                h[i, j] = w @ v[i]
                w = w - h[i, j] * v[i]
            h[j + 1, j] = np.linalg.norm(w)
            k = j + 1
            if h[j + 1, j] < 1e-14 * max(1.0, beta):
                break  # happy breakdown: solution lies in the current subspace
            v[j + 1] = w / h[j + 1, j]
        e1 = np.zeros(k + 1)
        e1[0] = beta
        y, *_ = np.linalg.lstsq(h[: k + 1, :k], e1, rcond=None)
        x = x + v[:k].T @ y
        if np.linalg.norm(b - op(x)) <= target:
            return x
    raise NonConvergence(f"gmres did not reach tol={tol} in {max_iter} products")


def dense_solve(a: Array, b: Array) -> Array:
    """Direct LU solve with an explicit pivot-magnitude singularity check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"dense_solve needs a square matrix, got {a.shape}")
    if b.shape != (a.shape[0],):
        raise DimensionMismatch(f"rhs length {b.shape} vs matrix {a.shape}")
    if a.shape[0] == 0:
        return np.zeros(0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # exact-singular warning; we raise below
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    if np.min(np.abs(np.diag(lu))) <= PIVOT_TOL:
        raise Singular("pivot below 1e-12 during elimination")
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)


def fd_directional(fun: Callable[[Array], Array], at: Array, direction: Array,
                   h: float | None = None) -> Array:
    """Central-difference directional derivative of a vector map.

    Default step is 1e-5 * (1 + ||at||_inf).  Exceptions raised by ``fun``
    propagate to the caller.
    """
    at = np.asarray(at, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if at.shape != direction.shape:
        raise DimensionMismatch("point and direction must share a shape")
    if h is None:
        h = 1e-5 * (1.0 + (np.max(np.abs(at)) if at.size else 0.0))
    if h <= 0:
        raise ValueError("h must be positive")
    hi = np.asarray(fun(at + h * direction), dtype=np.float64)
    lo = np.asarray(fun(at - h * direction), dtype=np.float64)
    return (hi - lo) / (2.0 * h)
