"""Unconstrained descent drivers shared by the cell and film solvers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize


@dataclass
class DescentResult:
    x: np.ndarray
    fun: float
    residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)  # (iter, energy, residual)


def lbfgs(fun_grad, x0, tol=1e-8, max_iter=20000, memory=20):
    """L-BFGS with a sup-norm gradient stopping rule.

    ``fun_grad(x) -> (f, g)``.  Returns the final iterate; its energy never
    exceeds ``f(x0)`` because every accepted step satisfies a sufficient
    decrease condition.
    """
    x0 = np.asarray(x0, dtype=float)
    history = []
    f0, g0 = fun_grad(x0)
    if x0.size == 0 or np.abs(g0).max(initial=0.0) <= tol:
        return DescentResult(x0, float(f0), float(np.abs(g0).max(initial=0.0)), 0, True,
                             [(0, float(f0), float(np.abs(g0).max(initial=0.0)))])
    history.append((0, float(f0), float(np.abs(g0).max())))
    last = {}

    def wrapped(x):
        f, g = fun_grad(x)
        last["x"], last["f"], last["g"] = x, f, g
        return f, g

    def callback(xk):
        f, g = fun_grad(xk) if last.get("x") is None or not np.array_equal(last["x"], xk) else (last["f"], last["g"])
        history.append((len(history), float(f), float(np.abs(g).max())))

    res = minimize(wrapped, x0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": max_iter, "maxfun": 4 * max_iter, "gtol": tol, "ftol": 0.0,
                            "maxcor": memory})
    f, g = fun_grad(res.x)
    if f > f0:  # never return something worse than the start
        return DescentResult(x0, float(f0), float(np.abs(g0).max()), int(res.nit), False, history)
    r = float(np.abs(g).max())
    return DescentResult(res.x, float(f), r, int(res.nit), r <= tol, history)


def armijo_descent(fun_grad, x0, tol=1e-8, max_iter=20000, c1=1e-4, step0=1.0, retract=None):
    """Steepest descent with Armijo backtracking (halving).

    ``retract(x, d, alpha)`` maps a step to a feasible point (defaults to
    ``x + alpha * d``); it may raise ValueError to signal an infeasible step,
    which is then halved.
    """
    x = np.asarray(x0, dtype=float)
    f, g = fun_grad(x)
    history = [(0, float(f), float(np.abs(g).max(initial=0.0)))]
    step = step0
    for it in range(1, max_iter + 1):
        r = float(np.abs(g).max(initial=0.0))
        if r <= tol:
            return DescentResult(x, float(f), r, it - 1, True, history)
        d = -g
        slope = float(g @ d)
        alpha = step
        while True:
            try:
                xn = x + alpha * d if retract is None else retract(x, d, alpha)
                fn, gn = fun_grad(xn)
                ok = fn <= f + c1 * alpha * slope
            except ValueError:
                ok = False
            if ok:
                break
            alpha *= 0.5
            if alpha < 1e-20:
                return DescentResult(x, float(f), r, it - 1, False, history)
        x, f, g = xn, fn, gn
        step = min(alpha * 2.0, 1e6)
        history.append((it, float(f), float(np.abs(g).max(initial=0.0))))
    return DescentResult(x, float(f), float(np.abs(g).max(initial=0.0)), max_iter, False, history)
