"""Limited-memory BFGS with a weak-Wolfe bracketing line search.

Small and allocation-light on purpose: one replan optimizes a few dozen
variables and the whole solve has to fit in a couple of milliseconds.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

log = logging.getLogger(__name__)


@dataclass
class SolveReport:
    cost: float
    grad_norm: float
    iterations: int
    evaluations: int
    wall_time: float
    reason: str  # converged | stalled | max_iter | timeout | line_search_fail

    def as_dict(self, with_time=False):
        d = {"cost": self.cost, "grad_norm": self.grad_norm, "iterations": self.iterations,
             "evaluations": self.evaluations, "reason": self.reason}
        if with_time:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class LbfgsOptions:
    memory: int = 8
    g_tol: float = 1e-4
    max_iter: int = 40
    # relative cost decrease over ``past`` iterations below which we stop
    past: int = 3
    delta: float = 1e-5
    c1: float = 1e-4
    c2: float = 0.9
    max_linesearch: int = 40
    # wall-clock budget in seconds; None keeps runs bit-reproducible
    max_time: float | None = None


@njit(cache=True)
def _two_loop(g, S, Y, rho, head, count):
    """Search direction ``-H g`` from the ``count`` newest pairs of the ring buffers."""
    mem = S.shape[0]
    d = -g.copy()
    alpha = np.empty(mem)
    for k in range(count):
        j = (head - 1 - k) % mem
        a = rho[j] * np.dot(S[j], d)
        alpha[k] = a
        d -= a * Y[j]
    if count > 0:
        j = (head - 1) % mem
        d *= np.dot(S[j], Y[j]) / np.dot(Y[j], Y[j])
    for k in range(count - 1, -1, -1):
        j = (head - 1 - k) % mem
        b = rho[j] * np.dot(Y[j], d)
        d += (alpha[k] - b) * S[j]
    return d


def _line_search(fun, x, f, g, d, step, opts):
    """Lewis-Overton bisection/expansion for the weak Wolfe conditions."""
    gd = float(g @ d)
    lo, hi = 0.0, np.inf
    evals = 0
    best = None
    for _ in range(opts.max_linesearch):
        xn = x + step * d
        fn, gn = fun(xn)
        evals += 1
        if not np.isfinite(fn) or fn > f + opts.c1 * step * gd:
            hi = step
        else:
            best = (xn, fn, gn, step)
            if float(gn @ d) < opts.c2 * gd:
                lo = step
            else:
                return best, evals, True
        step = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * step
        if hi - lo < 1e-16 * max(1.0, hi if np.isfinite(hi) else lo):
            break
    return best, evals, False


REASONS = ("converged", "stalled", "max_iter", "timeout", "line_search_fail")


def minimize(fun, x0, opts: LbfgsOptions | None = None):
    """Minimize ``fun(x) -> (cost, grad)`` from ``x0``.

    Returns ``(x, SolveReport)``.  Accepted costs never increase; on a failed
    line search the best iterate so far is returned.
    """
    opts = opts or LbfgsOptions()
    start = time.perf_counter()
    x = np.array(x0, dtype=float, copy=True)
    f, g = fun(x)
    evals = 1
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the initial point")
    mem = max(int(opts.memory), 1)
    S, Y, rho = np.zeros((mem, x.size)), np.zeros((mem, x.size)), np.zeros(mem)
    head = count = 0
    history = [f]
    reason = "max_iter"
    it = 0
    while True:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= opts.g_tol:
            reason = "converged"
            break
        if it >= opts.max_iter:
            reason = "max_iter"
            break
        if opts.max_time is not None and time.perf_counter() - start > opts.max_time:
            reason = "timeout"
            break
        d = _two_loop(g, S, Y, rho, head, count)
        if float(g @ d) >= 0.0:
            count = 0
            d = -g
        step = 1.0 if count else 1.0 / max(float(np.linalg.norm(d)), 1e-12)
        best, n, ok = _line_search(fun, x, f, g, d, step, opts)
        evals += n
        it += 1
        if best is None:
            reason = "line_search_fail"
            break
        xn, fn, gn, _ = best
        s, y = xn - x, gn - g
        sy = float(s @ y)
        # cautious update keeps the inverse Hessian approximation positive definite
        if sy > 1e-10 * float(s @ s) * max(1.0, gnorm):
            S[head], Y[head], rho[head] = s, y, 1.0 / sy
            head = (head + 1) % mem
            count = min(count + 1, mem)
        x, f, g = xn, fn, gn
        history.append(f)
        if not ok:
            reason = "line_search_fail"
            break
        if len(history) > opts.past:
            ref = history[-1 - opts.past]
            if (ref - f) <= opts.delta * max(1.0, abs(f)):
                reason = "stalled"
                break
    wall = time.perf_counter() - start
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    report = SolveReport(float(f), gnorm, it, evals, wall, reason)
    log.debug("lbfgs %s after %d it (%d evals) f=%.6g |g|=%.3g", reason, it, evals, f, gnorm)
    return x, report
