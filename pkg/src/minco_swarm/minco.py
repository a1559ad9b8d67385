"""Minimum-jerk MINCO trajectories.

A trajectory with ``M`` quintic pieces is fully determined by its ``M - 1``
intermediate waypoints ``q``, the piece durations ``T`` and the two boundary
states.  The coefficients come out of one banded linear system
``A(T) c = b(q)`` of size ``6M``, factorized in ``O(M)`` without pivoting.
The same factors give the adjoint solve used to pull a cost gradient with
respect to the coefficients back onto ``(q, T)``.

Coefficients are stored in the natural basis ``[1, t, ..., t^5]``; piece ``i``
occupies rows ``6i .. 6i+5`` of the stacked ``(6M, m)`` coefficient matrix.

Row layout of ``A(T)`` (band width 6 on both sides)::

    0..2            initial position / velocity / acceleration
    6i+3 .. 6i+8    junction i: jerk cont., snap cont., waypoint,
                    position cont., velocity cont., acceleration cont.
    6M-3 .. 6M-1    terminal position / velocity / acceleration
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import NonPositiveDuration, OutOfDomain, ShapeMismatch, SingularSystem

S = 3
NCOEF = 2 * S
BAND = 2 * S
PIVOT_TOL = 1e-12
DOMAIN_TOL = 1e-9

# derivative orders evaluated at the end of piece i, per junction row offset
_JUNCTION_ORDERS = np.array([3, 4, 0, 0, 1, 2], dtype=np.int64)
_TERMINAL_ORDERS = np.array([0, 1, 2], dtype=np.int64)


@njit(cache=True)
def basis(t, order, out):
    """Write ``d^order/dt^order [1, t, ..., t^5]`` into ``out``."""
    p = 1.0
    for k in range(NCOEF):
        if k < order:
            out[k] = 0.0
        else:
            coef = 1.0
            for r in range(order):
                coef *= k - r
            out[k] = coef * p
            p *= t


@njit(cache=True)
def _set(band, i, j, val):
    band[BAND + i - j, j] = val


@njit(cache=True)
def _fill_band(T, band):
    M = T.shape[0]
    band[:, :] = 0.0
    _set(band, 0, 0, 1.0)
    _set(band, 1, 1, 1.0)
    _set(band, 2, 2, 2.0)
    for i in range(M - 1):
        t1 = T[i]
        t2 = t1 * t1
        t3 = t2 * t1
        t4 = t2 * t2
        t5 = t4 * t1
        r = 6 * i + 3
        b = 6 * i
        _set(band, r, b + 3, 6.0)
        _set(band, r, b + 4, 24.0 * t1)
        _set(band, r, b + 5, 60.0 * t2)
        _set(band, r, b + 9, -6.0)

        _set(band, r + 1, b + 4, 24.0)
        _set(band, r + 1, b + 5, 120.0 * t1)
        _set(band, r + 1, b + 10, -24.0)

        _set(band, r + 2, b, 1.0)
        _set(band, r + 2, b + 1, t1)
        _set(band, r + 2, b + 2, t2)
        _set(band, r + 2, b + 3, t3)
        _set(band, r + 2, b + 4, t4)
        _set(band, r + 2, b + 5, t5)

        _set(band, r + 3, b, 1.0)
        _set(band, r + 3, b + 1, t1)
        _set(band, r + 3, b + 2, t2)
        _set(band, r + 3, b + 3, t3)
        _set(band, r + 3, b + 4, t4)
        _set(band, r + 3, b + 5, t5)
        _set(band, r + 3, b + 6, -1.0)

        _set(band, r + 4, b + 1, 1.0)
        _set(band, r + 4, b + 2, 2.0 * t1)
        _set(band, r + 4, b + 3, 3.0 * t2)
        _set(band, r + 4, b + 4, 4.0 * t3)
        _set(band, r + 4, b + 5, 5.0 * t4)
        _set(band, r + 4, b + 7, -1.0)

        _set(band, r + 5, b + 2, 2.0)
        _set(band, r + 5, b + 3, 6.0 * t1)
        _set(band, r + 5, b + 4, 12.0 * t2)
        _set(band, r + 5, b + 5, 20.0 * t3)
        _set(band, r + 5, b + 8, -2.0)

    t1 = T[M - 1]
    t2 = t1 * t1
    t3 = t2 * t1
    t4 = t2 * t2
    t5 = t4 * t1
    r = 6 * M - 3
    b = 6 * (M - 1)
    _set(band, r, b, 1.0)
    _set(band, r, b + 1, t1)
    _set(band, r, b + 2, t2)
    _set(band, r, b + 3, t3)
    _set(band, r, b + 4, t4)
    _set(band, r, b + 5, t5)
    _set(band, r + 1, b + 1, 1.0)
    _set(band, r + 1, b + 2, 2.0 * t1)
    _set(band, r + 1, b + 3, 3.0 * t2)
    _set(band, r + 1, b + 4, 4.0 * t3)
    _set(band, r + 1, b + 5, 5.0 * t4)
    _set(band, r + 2, b + 2, 2.0)
    _set(band, r + 2, b + 3, 6.0 * t1)
    _set(band, r + 2, b + 4, 12.0 * t2)
    _set(band, r + 2, b + 5, 20.0 * t3)


@njit(cache=True)
def _fill_rhs(q, bc0, bcf, rhs):
    M = q.shape[0] + 1
    rhs[:, :] = 0.0
    rhs[0:3, :] = bc0
    for i in range(M - 1):
        rhs[6 * i + 5, :] = q[i]
    rhs[6 * M - 3:6 * M, :] = bcf


@njit(cache=True)
def band_factorize(band):
    """In-place LU without pivoting.  Returns -1 or the index of a failed pivot."""
    n = band.shape[1]
    for k in range(n):
        piv = band[BAND, k]
        if abs(piv) < PIVOT_TOL:
            return k
        iend = min(k + BAND + 1, n)
        jend = min(k + BAND + 1, n)
        for i in range(k + 1, iend):
            band[BAND + i - k, k] /= piv
        for j in range(k + 1, jend):
            ukj = band[BAND + k - j, j]
            if ukj != 0.0:
                for i in range(k + 1, iend):
                    band[BAND + i - j, j] -= band[BAND + i - k, k] * ukj
    return -1


@njit(cache=True)
def band_solve(band, rhs):
    n = band.shape[1]
    m = rhs.shape[1]
    for k in range(n):
        iend = min(k + BAND + 1, n)
        for i in range(k + 1, iend):
            lik = band[BAND + i - k, k]
            if lik != 0.0:
                for d in range(m):
                    rhs[i, d] -= lik * rhs[k, d]
    for j in range(n - 1, -1, -1):
        ujj = band[BAND, j]
        for d in range(m):
            rhs[j, d] /= ujj
        for i in range(max(0, j - BAND), j):
            uij = band[BAND + i - j, j]
            if uij != 0.0:
                for d in range(m):
                    rhs[i, d] -= uij * rhs[j, d]


@njit(cache=True)
def band_solve_transposed(band, rhs):
    """Solve ``A^T x = rhs`` in place with the factors of ``A``."""
    n = band.shape[1]
    m = rhs.shape[1]
    for j in range(n):
        for i in range(max(0, j - BAND), j):
            uij = band[BAND + i - j, j]
            if uij != 0.0:
                for d in range(m):
                    rhs[j, d] -= uij * rhs[i, d]
        ujj = band[BAND, j]
        for d in range(m):
            rhs[j, d] /= ujj
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, min(i + BAND + 1, n)):
            lki = band[BAND + k - i, i]
            if lki != 0.0:
                for d in range(m):
                    rhs[i, d] -= lki * rhs[k, d]


@njit(cache=True)
def _time_gradient(c, T, adj, grad_T):
    """Subtract ``<adj, (dA/dT_i) c>`` from ``grad_T`` for every piece."""
    M = T.shape[0]
    m = c.shape[1]
    b = np.empty(NCOEF)
    for i in range(M):
        if i < M - 1:
            r0 = 6 * i + 3
            orders = _JUNCTION_ORDERS
        else:
            r0 = 6 * M - 3
            orders = _TERMINAL_ORDERS
        acc = 0.0
        for r in range(orders.shape[0]):
            basis(T[i], orders[r] + 1, b)
            for d in range(m):
                val = 0.0
                for k in range(NCOEF):
                    val += b[k] * c[6 * i + k, d]
                acc += adj[r0 + r, d] * val
        grad_T[i] -= acc


class BandedSystem:
    """Band storage of ``A(T)`` plus right-hand side ``b(q)``.

    Element ``(i, j)`` lives at ``band[6 + i - j, j]``.
    """

    lower = BAND
    upper = BAND

    def __init__(self, n_pieces: int, dims: int = 3):
        if n_pieces < 1:
            raise ValueError("need at least one piece")
        self.n_pieces = n_pieces
        self.dims = dims
        self.n = NCOEF * n_pieces
        self.band = np.zeros((2 * BAND + 1, self.n))
        self.rhs = np.zeros((self.n, dims))
        self.factorized = False

    def assemble(self, waypoints, durations, start, end):
        _fill_band(durations, self.band)
        _fill_rhs(waypoints, start, end, self.rhs)
        self.factorized = False

    def to_dense(self) -> np.ndarray:
        if self.factorized:
            raise RuntimeError("band already overwritten by its factors")
        n = self.n
        A = np.zeros((n, n))
        for i in range(n):
            for j in range(max(0, i - BAND), min(n, i + BAND + 1)):
                A[i, j] = self.band[BAND + i - j, j]
        return A

    def factorize(self):
        bad = band_factorize(self.band)
        if bad >= 0:
            raise SingularSystem(f"pivot {bad} below {PIVOT_TOL:g}")
        self.factorized = True

    def solve(self, rhs=None) -> np.ndarray:
        x = np.array(self.rhs if rhs is None else rhs, dtype=float, copy=True)
        band_solve(self.band, x)
        return x

    def solve_transposed(self, rhs) -> np.ndarray:
        x = np.array(rhs, dtype=float, copy=True)
        band_solve_transposed(self.band, x)
        return x


@dataclass(frozen=True)
class BoundaryCondition:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray

    def __post_init__(self):
        for name in ("position", "velocity", "acceleration"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name}")
            object.__setattr__(self, name, arr)

    @classmethod
    def rest(cls, position) -> "BoundaryCondition":
        p = np.asarray(position, dtype=float).reshape(-1)
        return cls(p, np.zeros_like(p), np.zeros_like(p))

    def as_matrix(self) -> np.ndarray:
        return np.vstack([self.position, self.velocity, self.acceleration])


class PiecewisePolynomial:
    """Quintic pieces ``coeffs[i]`` (6 x m, natural basis) over ``durations[i]``."""

    order_s = S

    def __init__(self, coeffs, durations, system: BandedSystem | None = None):
        coeffs = np.asarray(coeffs, dtype=float)
        durations = np.asarray(durations, dtype=float).reshape(-1)
        if coeffs.ndim == 2:
            coeffs = coeffs.reshape(-1, NCOEF, coeffs.shape[1])
        if coeffs.shape[0] != durations.shape[0] or coeffs.shape[1] != NCOEF:
            raise ShapeMismatch(f"coeffs {coeffs.shape} vs {durations.shape[0]} durations")
        if np.any(~(durations > 0.0)):
            raise NonPositiveDuration(f"durations must be > 0, got {durations}")
        self.coeffs = coeffs
        self.durations = durations
        self.breaks = np.concatenate([[0.0], np.cumsum(durations)])
        self._system = system

    @classmethod
    def hover(cls, position, duration: float = 1.0) -> "PiecewisePolynomial":
        p = np.asarray(position, dtype=float).reshape(-1)
        c = np.zeros((1, NCOEF, p.size))
        c[0, 0] = p
        return cls(c, [duration])

    @property
    def dims(self) -> int:
        return self.coeffs.shape[2]

    @property
    def n_pieces(self) -> int:
        return self.durations.shape[0]

    @property
    def pieces(self):
        return list(zip(self.coeffs, self.durations))

    @property
    def total_duration(self) -> float:
        return float(self.breaks[-1])

    def stacked(self) -> np.ndarray:
        return self.coeffs.reshape(-1, self.dims)

    def locate(self, t):
        """Piece index and local time; interior junctions belong to the right piece."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.breaks, t, side="right") - 1
        idx = np.clip(idx, 0, self.n_pieces - 1)
        return idx, t - self.breaks[idx]

    def evaluate(self, t: float, deriv_order: int = 0) -> np.ndarray:
        T = self.total_duration
        if t < -DOMAIN_TOL or t > T + DOMAIN_TOL:
            raise OutOfDomain(f"t={t} outside [0, {T}]")
        t = min(max(t, 0.0), T)
        return self.sample(np.array([t]), deriv_order)[0]

    def sample(self, ts, deriv_order: int = 0) -> np.ndarray:
        """Vectorized evaluation; times are clamped into ``[0, T]``."""
        ts = np.clip(np.asarray(ts, dtype=float), 0.0, self.total_duration)
        idx, local = self.locate(ts)
        k = np.arange(NCOEF)
        coef = np.ones(NCOEF)
        for r in range(deriv_order):
            coef = coef * (k - r)
        powers = np.clip(k - deriv_order, 0, None)
        B = coef[None, :] * local[:, None] ** powers[None, :]
        return np.einsum("nk,nkd->nd", B, self.coeffs[idx])

    def state_at(self, t: float):
        """Position, velocity and acceleration; beyond the end the vehicle hovers."""
        if t >= self.total_duration:
            p = self.sample(np.array([self.total_duration]), 0)[0]
            return p, np.zeros_like(p), np.zeros_like(p)
        t = max(t, 0.0)
        return tuple(self.sample(np.array([t]), d)[0] for d in range(3))

    def __repr__(self):
        return f"PiecewisePolynomial(M={self.n_pieces}, T={self.total_duration:.3f}s)"


def _check_durations(durations) -> np.ndarray:
    T = np.asarray(durations, dtype=float).reshape(-1)
    if T.size < 1:
        raise ValueError("need at least one duration")
    if np.any(~(T > 0.0)) or not np.all(np.isfinite(T)):
        raise NonPositiveDuration(f"durations must be finite and > 0, got {T}")
    return T


def solve_mapping(waypoints, durations, bc0: BoundaryCondition, bcf: BoundaryCondition) -> PiecewisePolynomial:
    """Minimum-jerk spline through ``waypoints`` with the given piece durations."""
    T = _check_durations(durations)
    M = T.size
    dims = bc0.position.size
    q = np.asarray(waypoints, dtype=float).reshape(-1, dims) if M > 1 else np.zeros((0, dims))
    if q.shape[0] != M - 1:
        raise ShapeMismatch(f"{q.shape[0]} waypoints for {M} pieces")
    system = BandedSystem(M, dims)
    system.assemble(q, T, bc0.as_matrix(), bcf.as_matrix())
    system.factorize()
    c = system.solve()
    return PiecewisePolynomial(c, T, system)


def evaluate(traj: PiecewisePolynomial, t: float, deriv_order: int = 0) -> np.ndarray:
    return traj.evaluate(t, deriv_order)


def propagate_gradient(traj: PiecewisePolynomial, durations, grad_c, grad_T_partial):
    """Map ``dF/dc`` and ``dF/dT`` to ``dH/dq`` and total ``dH/dT``.

    ``H(q, T) = F(c(q, T), T)``.  One transposed banded solve with the factors
    kept from :func:`solve_mapping`.
    """
    T = _check_durations(durations)
    M, dims = traj.n_pieces, traj.dims
    grad_c = np.asarray(grad_c, dtype=float).reshape(-1, dims) if np.size(grad_c) == NCOEF * M * dims else None
    if grad_c is None or grad_c.shape != (NCOEF * M, dims):
        raise ShapeMismatch(f"grad_c must be ({NCOEF * M}, {dims})")
    gT = np.array(grad_T_partial, dtype=float).reshape(-1)
    if gT.size != M or T.size != M:
        raise ShapeMismatch(f"grad_T_partial must have {M} entries")
    system = traj._system
    if system is None or not system.factorized:
        system = BandedSystem(M, dims)
        system.assemble(traj.sample(traj.breaks[1:-1]), T, np.zeros((3, dims)), np.zeros((3, dims)))
        system.factorize()
    adj = system.solve_transposed(grad_c)
    grad_q = adj[6 * np.arange(M - 1) + 5].copy()
    _time_gradient(traj.stacked(), T, adj, gT)
    return grad_q, gT


class MincoMap:
    """Preallocated forward/adjoint mapping for repeated use inside an optimizer."""

    def __init__(self, n_pieces: int, bc0: BoundaryCondition, bcf: BoundaryCondition):
        self.n_pieces = n_pieces
        self.dims = bc0.position.size
        self.system = BandedSystem(n_pieces, self.dims)
        self.start = bc0.as_matrix()
        self.end = bcf.as_matrix()
        self.T = np.ones(n_pieces)
        self.c = np.zeros((NCOEF * n_pieces, self.dims))

    def generate(self, q, T):
        self.T = np.asarray(T, dtype=float)
        self.system.assemble(q, self.T, self.start, self.end)
        self.system.factorize()
        self.c = self.system.solve()
        return self.c

    def propagate(self, grad_c, grad_T):
        adj = self.system.solve_transposed(grad_c)
        grad_q = adj[5:NCOEF * (self.n_pieces - 1):NCOEF].copy()
        gT = np.array(grad_T, dtype=float)
        _time_gradient(self.c, self.T, adj, gT)
        return grad_q, gT

    def trajectory(self) -> PiecewisePolynomial:
        return PiecewisePolynomial(self.c.copy(), self.T.copy())
