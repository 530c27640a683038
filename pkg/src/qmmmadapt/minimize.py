"""Limited-memory quasi-Newton minimization with admissibility-aware line search.

The energy landscapes here are smooth with exact gradients, but steps can
leave the admissible set (atoms interpenetrating), which the objective
signals by raising ConfigurationError.  The backtracking line search treats
such steps like Armijo failures: halve and retry.  Accepted iterates are
therefore always admissible and the energy sequence is strictly monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError, OptimizationError

_C1 = 1e-4
_MIN_STEP = 1e-14
_CURVATURE_TOL = 1e-12


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    converged: bool
    iterations: int
    n_evals: int
    f_history: list = field(default_factory=list)


def _two_loop(grad, s_list, y_list):
    """Implicit inverse-Hessian product of the standard two-loop recursion."""
    q = grad.copy()
    rhos = [1.0 / np.dot(s, y) for s, y in zip(s_list, y_list)]
    alphas = [0.0] * len(s_list)
    for i in range(len(s_list) - 1, -1, -1):
        alphas[i] = rhos[i] * np.dot(s_list[i], q)
        q -= alphas[i] * y_list[i]
    q *= np.dot(s_list[-1], y_list[-1]) / np.dot(y_list[-1], y_list[-1])
    for i in range(len(s_list)):
        beta = rhos[i] * np.dot(y_list[i], q)
        q += (alphas[i] - beta) * s_list[i]
    return q


def lbfgs_minimize(fg, x0, g_tol=1e-6, max_iter=2000, memory=20, c1=_C1) -> MinimizeResult:
    """Minimize a smooth function given a fused value-and-gradient callable.

    Parameters
    ----------
    fg : callable
        Maps a flat ndarray to (value, gradient).  May raise
        ConfigurationError for inadmissible points; such points are rejected
        by the line search, never accepted.
    x0 : ndarray
        Starting point; must itself be admissible.
    g_tol : float
        Convergence threshold on the gradient infinity norm.
    max_iter : int
        Iteration budget; exhaustion returns converged=False (no raise).

    Raises
    ------
    OptimizationError
        If the line search cannot make progress; carries the last iterate
        in its `state` attribute.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fg(x)
    n_evals = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError("objective returned non-finite value or gradient at the starting point")
    history = [f]
    s_list, y_list = [], []

    for it in range(max_iter):
        if np.max(np.abs(g)) <= g_tol:
            return MinimizeResult(x, f, g, True, it, n_evals, history)

        d = -_two_loop(g, s_list, y_list) if s_list else -g
        slope = float(np.dot(g, d))
        if slope >= 0.0:
            d = -g
            slope = -float(np.dot(g, g))

        t = 1.0
        accepted = False
        while t >= _MIN_STEP:
            try:
                f_new, g_new = fg(x + t * d)
                n_evals += 1
            except ConfigurationError:
                t *= 0.5
                continue
            # strict decrease required: once c1*t*slope underflows against f,
            # plain Armijo would accept zero-progress steps and stagnate
            if np.isfinite(f_new) and f_new <= f + c1 * t * slope and f_new < f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            raise OptimizationError(
                f"line search failed at iteration {it} (gradient inf-norm {np.max(np.abs(g)):.3e})",
                state=MinimizeResult(x, f, g, False, it, n_evals, history),
            )

        s = t * d
        y_vec = g_new - g
        x = x + s
        f, g = f_new, g_new
        history.append(f)
        sy = float(np.dot(s, y_vec))
        if sy > _CURVATURE_TOL * np.linalg.norm(s) * np.linalg.norm(y_vec):
            s_list.append(s)
            y_list.append(y_vec)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)

    converged = bool(np.max(np.abs(g)) <= g_tol)
    return MinimizeResult(x, f, g, converged, max_iter, n_evals, history)
