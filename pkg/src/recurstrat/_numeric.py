"""Shared numerical primitives: stable ratios, finite differences, Newton."""

from __future__ import annotations

import numpy as np

__all__ = [
    "rate_over_1m_exp",
    "rate_over_expm1",
    "logsumexp_pair",
    "numerical_hessian",
    "damped_newton_maximize",
    "FitError",
]


class FitError(RuntimeError):
    """Raised when an optimizer cannot make progress."""


def rate_over_1m_exp(u):
    """u / (1 - exp(-u)) for u >= 0, with the limit 1 at 0."""
    u = np.asarray(u, dtype=float)
    den = -np.expm1(-u)
    out = np.where(den > 0, u / np.where(den > 0, den, 1.0), 1.0)
    return out


def rate_over_expm1(u):
    """u / (exp(u) - 1) for u >= 0, with the limit 1 at 0."""
    u = np.asarray(u, dtype=float)
    den = -np.expm1(-u)
    out = np.where(den > 0, u * np.exp(-u) / np.where(den > 0, den, 1.0), 1.0)
    return out


def logsumexp_pair(a, b):
    """Elementwise log(exp(a) + exp(b)); either side may be -inf."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    hi = np.maximum(a, b)
    lo = np.minimum(a, b)
    out = np.where(np.isneginf(hi), -np.inf, hi + np.log1p(np.exp(np.maximum(lo - hi, -745.0))))
    return np.where(np.isneginf(lo), hi, out)


def numerical_hessian(fun, x, rel_step: float = 1e-5):
    """Symmetric central-difference Hessian with per-coordinate scaled steps."""
    x = np.asarray(x, dtype=float)
    k = x.size
    h = np.maximum(rel_step, rel_step * np.abs(x))
    hess = np.empty((k, k))
    f0 = fun(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        hess[i, i] = (fun(x + ei) - 2.0 * f0 + fun(x - ei)) / h[i] ** 2
        for j in range(i + 1, k):
            ej = np.zeros(k)
            ej[j] = h[j]
            hess[i, j] = hess[j, i] = (
                fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
    return hess


def _fd_hessian_of_gradient(grad, x, rel_step: float = 1e-6):
    x = np.asarray(x, dtype=float)
    k = x.size
    h = np.maximum(rel_step, rel_step * np.abs(x))
    cols = []
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        cols.append((grad(x + ei) - grad(x - ei)) / (2.0 * h[i]))
    hess = np.column_stack(cols)
    return 0.5 * (hess + hess.T)


def damped_newton_maximize(value_and_grad, x0, grad_tol: float = 1e-9,
                           max_iter: int = 200, max_halvings: int = 20,
                           context: str = "objective"):
    """Maximize a smooth function with Newton steps on a finite-difference
    Hessian of the analytic gradient, halving the step until the objective
    increases and falling back to a gradient step when the Newton direction
    fails.

    Returns (x, value, grad, trace, n_iter, converged).
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = value_and_grad(x)
    if not np.isfinite(f):
        raise FitError(f"{context}: objective not finite at the starting point")
    trace = [f]
    grad_only = lambda v: value_and_grad(v)[1]
    for it in range(1, max_iter + 1):
        scale = grad_tol * (1.0 + abs(f))
        if np.max(np.abs(g)) <= scale:
            return x, f, g, trace, it - 1, True
        hess = _fd_hessian_of_gradient(grad_only, x)
        try:
            direction = np.linalg.solve(hess, -g)
        except np.linalg.LinAlgError:
            direction = None
        if direction is None or direction @ g <= 0 or not np.all(np.isfinite(direction)):
            direction = g * (1.0 / max(np.max(np.abs(g)), 1.0))
        improved = False
        step = 1.0
        for _ in range(max_halvings):
            x_new = x + step * direction
            f_new, g_new = value_and_grad(x_new)
            if np.isfinite(f_new) and f_new > f:
                x, f, g = x_new, f_new, g_new
                improved = True
                break
            step *= 0.5
        if not improved:
            # bisection fallback along the raw gradient
            direction = g * (1.0 / max(np.max(np.abs(g)), 1.0))
            step = 1.0
            for _ in range(max_halvings):
                x_new = x + step * direction
                f_new, g_new = value_and_grad(x_new)
                if np.isfinite(f_new) and f_new > f:
                    x, f, g = x_new, f_new, g_new
                    improved = True
                    break
                step *= 0.5
        trace.append(f)
        if not improved:
            if np.max(np.abs(g)) <= 1e3 * scale:
                return x, f, g, trace, it, True
            raise FitError(f"{context}: no ascent direction found (gradient norm "
                           f"{np.max(np.abs(g)):.3e})")
    return x, f, g, trace, max_iter, False
