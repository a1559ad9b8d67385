"""Independent reference computations shared by the unit and acceptance tests.

Nothing here calls into the banded solver or the compiled kernels: dense
linear algebra, finite differences and brute-force quadrature only.
"""
from __future__ import annotations

import numpy as np

from minco_swarm.minco import NCOEF, BoundaryCondition, solve_mapping

# -- registry of worked examples -------------------------------------------

DERIVED = {}


def derived(key, covered_by=None):
    """Register a worked example so the acceptance run can replay it.

    ``covered_by`` names the acceptance criterion that exercises an example
    too expensive to replay twice.
    """
    def wrap(fn):
        DERIVED[key] = (fn, covered_by)
        return fn
    return wrap


def covered(key, criterion):
    """Register an example whose only faithful check is an acceptance run."""
    DERIVED[key] = (None, criterion)


# -- dense MINCO oracle -----------------------------------------------------

def _row(t, order):
    out = np.zeros(NCOEF)
    for k in range(order, NCOEF):
        out[k] = np.prod(np.arange(k - order + 1, k + 1)) * t ** (k - order)
    return out


def dense_system(q, T, bc0: BoundaryCondition, bcf: BoundaryCondition):
    """Assemble the 6M x 6M minimum-jerk system row by row from its definition."""
    T = np.asarray(T, dtype=float)
    M = T.size
    dims = bc0.position.size
    q = np.asarray(q, dtype=float).reshape(-1, dims)
    n = NCOEF * M
    A = np.zeros((n, n))
    b = np.zeros((n, dims))
    r = 0
    for order, val in enumerate((bc0.position, bc0.velocity, bc0.acceleration)):
        A[r, :NCOEF] = _row(0.0, order)
        b[r] = val
        r += 1
    for i in range(M - 1):
        lo, hi = NCOEF * i, NCOEF * (i + 1)
        A[r, lo:hi] = _row(T[i], 0)
        b[r] = q[i]
        r += 1
        for order in range(5):
            A[r, lo:hi] = _row(T[i], order)
            A[r, hi:hi + NCOEF] = -_row(0.0, order)
            r += 1
    for order, val in enumerate((bcf.position, bcf.velocity, bcf.acceleration)):
        A[r, n - NCOEF:] = _row(T[-1], order)
        b[r] = val
        r += 1
    assert r == n
    return A, b


def dense_coefficients(q, T, bc0, bcf):
    A, b = dense_system(q, T, bc0, bcf)
    return np.linalg.solve(A, b)


# -- finite differences -----------------------------------------------------

def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def relative_error(analytic, reference, floor=1e-8):
    """Largest component-wise relative error; small components use ``floor`` as scale."""
    analytic = np.asarray(analytic, dtype=float).ravel()
    reference = np.asarray(reference, dtype=float).ravel()
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(reference), np.abs(analytic)), floor)
    return float(np.max(np.abs(analytic - reference) / scale))


# -- quadrature -------------------------------------------------------------

def fine_cubic_penalty(g_of_t, duration, samples=10_000):
    """Trapezoid rule over ``samples`` intervals of ``max(g, 0)^3``."""
    ts = np.linspace(0.0, duration, samples + 1)
    v = np.maximum(np.array([g_of_t(t) for t in ts]), 0.0) ** 3
    return float(np.sum(0.5 * (v[1:] + v[:-1])) * (duration / samples))


def two_pass_variance(values):
    v = np.asarray(values, dtype=float)
    mean = v.sum() / v.size
    return float(np.sum((v - mean) ** 2) / v.size)


# -- random instances -------------------------------------------------------

def random_trajectory(rng, M, dims=3, spread=2.0, t_lo=0.5, t_hi=1.5):
    T = rng.uniform(t_lo, t_hi, M)
    q = rng.normal(scale=spread, size=(M - 1, dims))
    bc0 = BoundaryCondition(rng.normal(size=dims), rng.normal(scale=0.5, size=dims), rng.normal(scale=0.5, size=dims))
    bcf = BoundaryCondition.rest(rng.normal(scale=spread, size=dims))
    return q, T, bc0, bcf, solve_mapping(q, T, bc0, bcf)


def rest_to_rest(length=1.0, duration=1.0):
    """The 1-D minimum-jerk quintic from 0 to ``length``."""
    return solve_mapping(np.zeros((0, 1)), [duration], BoundaryCondition.rest([0.0]),
                         BoundaryCondition.rest([length]))


def kinematic_lower_bound(distance, v_max, a_max):
    """Shortest rest-to-rest time under speed and acceleration limits (bang-coast-bang)."""
    if distance >= v_max ** 2 / a_max:
        return distance / v_max + v_max / a_max
    return 2.0 * np.sqrt(distance / a_max)
