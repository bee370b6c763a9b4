"""Damped Newton method for smooth convex problems with linear equality constraints."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


@dataclass
class NewtonResult:
    z: np.ndarray
    value: float
    residual: float
    iterations: int
    converged: bool


def null_basis(A, n):
    """Orthonormal basis of ``null(A)``; redundant rows are allowed."""
    if A.shape[0] == 0:
        return np.eye(n)
    return scipy.linalg.null_space(A, rcond=1e-12)


def minimize(fun, A, z0, inside, tol, residual_scale=1.0, max_iter=200):
    """Minimize ``fun`` over ``{A z = A z0} ∩ {inside(z)}``.

    ``fun(z)`` returns ``(value, gradient, hessian)``. Steps are computed in
    an orthonormal basis of the null space of ``A``. Convergence is the sup
    norm of the projected gradient divided by ``residual_scale`` being at
    most ``tol``. The iterate never leaves the open domain ``inside``.
    """
    z = np.array(z0, dtype=float)
    Z = null_basis(A, len(z))
    val, grad, hess = fun(z)
    res = np.abs(Z @ (Z.T @ grad)).max(initial=0.0) / residual_scale
    it = 0
    while res > tol and it < max_iter:
        it += 1
        gr = Z.T @ grad
        Hr = Z.T @ hess @ Z
        try:
            c, low = scipy.linalg.cho_factor(Hr)
            y = -scipy.linalg.cho_solve((c, low), gr)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(Hr)
            w = np.maximum(w, 1e-12 * max(w.max(), 1.0))
            y = -V @ ((V.T @ gr) / w)
        dz = Z @ y
        decrement = -grad @ dz
        t = 1.0
        accepted = False
        for _ in range(60):
            trial = z + t * dz
            if inside(trial):
                v, g, h = fun(trial)
                small = decrement < 1e-13 * max(1.0, abs(val))
                if np.isfinite(v) and (v <= val - 1e-4 * t * decrement or small):
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        z, val, grad, hess = trial, v, g, h
        res = np.abs(Z @ (Z.T @ grad)).max(initial=0.0) / residual_scale
    return NewtonResult(z, val, res, it, res <= tol)
