"""Cost terms over a piecewise quintic with analytic gradients in ``(c, T)``.

Continuous-time constraints ``G(p(t), ...) <= 0`` are transcribed by sampling
each piece at ``kappa + 1`` evenly spaced constraint points and summing the
cubic violation ``max(G, 0)^3`` with trapezoidal weights ``(1/2, 1, ..., 1/2)``
scaled by ``T_i / kappa``.

Every kernel *adds* ``weight * dJ/dc`` into ``grad_c`` (shape ``(6M, m)``) and
``weight * dJ/dT`` into ``grad_T`` and returns ``weight * J``.  The public
wrappers below allocate fresh gradients and take a :class:`PiecewisePolynomial`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ClockSkew
from .minco import NCOEF, PiecewisePolynomial, basis

TIME_CLAMP = 20.0


@dataclass(frozen=True)
class SafePair:
    """Plane-like obstacle record: point ``s`` on the surface, unit normal ``v`` to free space."""

    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.point, dtype=float).reshape(-1)
        v = np.asarray(self.direction, dtype=float).reshape(-1)
        n = np.linalg.norm(v)
        if not abs(n - 1.0) <= 1e-9:
            raise ValueError(f"safe vector must be unit length, |v|={n}")
        object.__setattr__(self, "point", s)
        object.__setattr__(self, "direction", v)

    def distance(self, p) -> float:
        return float(np.dot(np.asarray(p) - self.point, self.direction))


@dataclass
class ConstraintPoint:
    piece: int
    sample: int
    time: float
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray
    pairs: list = field(default_factory=list)


@dataclass
class PenaltyWeights:
    """Objective weights, limits and clearances of one agent's planner."""

    effort: float = 1.0
    time: float = 200.0
    feasibility: float = 1e5
    obstacle: float = 1e5
    swarm: float = 1e5
    uniform: float = 1e2
    # per-family cubic weights (chi) for velocity, acceleration, jerk
    chi: tuple = (1.0, 1.0, 1.0)
    v_max: float = 1.7
    a_max: float = 6.0
    j_max: float = 20.0
    clearance_obstacle: float = 0.25
    clearance_swarm: float = 0.5
    downwash: float = 2.0
    kappa: int = 8
    # the optimizer aims this fraction beyond each clearance, so soft cubic
    # penalties settle outside the post-check threshold rather than on it
    margin: float = 0.1

    def __post_init__(self):
        vals = [self.effort, self.time, self.feasibility, self.obstacle, self.swarm, self.uniform,
                *self.chi, self.v_max, self.a_max, self.j_max, self.clearance_obstacle, self.clearance_swarm,
                self.margin]
        if min(vals) < 0:
            raise ValueError("weights, limits and clearances must be nonnegative")
        if not self.downwash > 1.0:
            raise ValueError("downwash coefficient must exceed 1")
        if self.kappa < 2:
            raise ValueError("kappa must be at least 2")

    def limits(self) -> np.ndarray:
        return np.array([self.v_max, self.a_max, self.j_max])

    def ellipsoid(self) -> np.ndarray:
        """Diagonal of E = diag(1, 1, 1/c)."""
        return np.array([1.0, 1.0, 1.0 / self.downwash])


# ----------------------------------------------------------------------------
# numba kernels
# ----------------------------------------------------------------------------

@njit(cache=True)
def _dot_piece(b, c, row, d):
    acc = 0.0
    for k in range(NCOEF):
        acc += b[k] * c[row + k, d]
    return acc


@njit(cache=True)
def effort_kernel(c, T, weight, grad_c, grad_T):
    M = T.shape[0]
    m = c.shape[1]
    cost = 0.0
    for i in range(M):
        t1 = T[i]
        t2 = t1 * t1
        t3 = t2 * t1
        t4 = t2 * t2
        t5 = t4 * t1
        r = NCOEF * i
        for d in range(m):
            c3 = c[r + 3, d]
            c4 = c[r + 4, d]
            c5 = c[r + 5, d]
            cost += weight * (36.0 * c3 * c3 * t1 + 144.0 * c3 * c4 * t2
                              + (192.0 * c4 * c4 + 240.0 * c3 * c5) * t3
                              + 720.0 * c4 * c5 * t4 + 720.0 * c5 * c5 * t5)
            grad_c[r + 3, d] += weight * (72.0 * c3 * t1 + 144.0 * c4 * t2 + 240.0 * c5 * t3)
            grad_c[r + 4, d] += weight * (144.0 * c3 * t2 + 384.0 * c4 * t3 + 720.0 * c5 * t4)
            grad_c[r + 5, d] += weight * (240.0 * c3 * t3 + 720.0 * c4 * t4 + 1440.0 * c5 * t5)
            jerk = 6.0 * c3 + 24.0 * c4 * t1 + 60.0 * c5 * t2
            grad_T[i] += weight * jerk * jerk
    return cost


@njit(cache=True)
def feasibility_kernel(c, T, kappa, limits, chi, weight, grad_c, grad_T):
    M = T.shape[0]
    m = c.shape[1]
    cost = 0.0
    bs = np.empty((5, NCOEF))
    der = np.empty((5, m))
    for i in range(M):
        h = T[i] / kappa
        r = NCOEF * i
        for j in range(kappa + 1):
            omg = 0.5 if (j == 0 or j == kappa) else 1.0
            t = j * h
            for n in range(1, 5):
                basis(t, n, bs[n])
                for d in range(m):
                    der[n, d] = _dot_piece(bs[n], c, r, d)
            for n in range(1, 4):
                sq = 0.0
                for d in range(m):
                    sq += der[n, d] * der[n, d]
                lim = limits[n - 1]
                g = sq - lim * lim
                if g > 0.0:
                    w = weight * chi[n - 1] * omg
                    cost += w * h * g * g * g
                    dJdG = 3.0 * w * h * g * g
                    for k in range(NCOEF):
                        for d in range(m):
                            grad_c[r + k, d] += dJdG * 2.0 * bs[n, k] * der[n, d]
                    dGdt = 0.0
                    for d in range(m):
                        dGdt += 2.0 * der[n, d] * der[n + 1, d]
                    grad_T[i] += w * g * g * g / kappa + dJdG * dGdt * j / kappa
    return cost


@njit(cache=True)
def obstacle_kernel(c, T, kappa, pair_piece, pair_sample, pair_s, pair_v, clearance, weight, grad_c, grad_T):
    m = c.shape[1]
    cost = 0.0
    b0 = np.empty(NCOEF)
    b1 = np.empty(NCOEF)
    for p in range(pair_piece.shape[0]):
        i = pair_piece[p]
        j = pair_sample[p]
        if j <= 0 or j > kappa or i >= T.shape[0]:
            continue
        h = T[i] / kappa
        t = j * h
        r = NCOEF * i
        basis(t, 0, b0)
        basis(t, 1, b1)
        dist = 0.0
        vdot = 0.0
        for d in range(m):
            dist += (_dot_piece(b0, c, r, d) - pair_s[p, d]) * pair_v[p, d]
            vdot += _dot_piece(b1, c, r, d) * pair_v[p, d]
        g = clearance - dist
        if g > 0.0:
            omg = 0.5 if j == kappa else 1.0
            w = weight * omg
            cost += w * h * g * g * g
            dJdG = 3.0 * w * h * g * g
            for k in range(NCOEF):
                for d in range(m):
                    grad_c[r + k, d] -= dJdG * b0[k] * pair_v[p, d]
            grad_T[i] += w * g * g * g / kappa - dJdG * vdot * j / kappa
    return cost


@njit(cache=True)
def _peer_state(peer_c, peer_T, start, stop, local, pos, vel, b):
    """Peer position/velocity at its local time, hovering outside its span."""
    m = peer_c.shape[1]
    if local <= 0.0:
        basis(0.0, 0, b)
        for d in range(m):
            pos[d] = _dot_piece(b, peer_c, NCOEF * start, d)
            vel[d] = 0.0
        return
    acc = 0.0
    for i in range(start, stop):
        if local <= acc + peer_T[i] or i == stop - 1:
            tl = local - acc
            if tl >= peer_T[i]:
                basis(peer_T[i], 0, b)
                for d in range(m):
                    pos[d] = _dot_piece(b, peer_c, NCOEF * i, d)
                    vel[d] = 0.0
                return
            basis(tl, 0, b)
            for d in range(m):
                pos[d] = _dot_piece(b, peer_c, NCOEF * i, d)
            basis(tl, 1, b)
            for d in range(m):
                vel[d] = _dot_piece(b, peer_c, NCOEF * i, d)
            return
        acc += peer_T[i]


@njit(cache=True)
def swarm_kernel(c, T, kappa, t0, peer_c, peer_T, peer_offset, peer_t0, clearance, ellipse, weight, grad_c, grad_T):
    M = T.shape[0]
    m = c.shape[1]
    K = peer_t0.shape[0]
    cost = 0.0
    b0 = np.empty(NCOEF)
    b1 = np.empty(NCOEF)
    bp = np.empty(NCOEF)
    pos = np.empty(m)
    vel = np.empty(m)
    ppos = np.empty(m)
    pvel = np.empty(m)
    ediff = np.empty(m)
    tail = np.zeros(M)
    c2 = clearance * clearance
    elapsed = 0.0
    for i in range(M):
        h = T[i] / kappa
        r = NCOEF * i
        for j in range(kappa + 1):
            omg = 0.5 if (j == 0 or j == kappa) else 1.0
            t = j * h
            stamp = t0 + elapsed + t
            basis(t, 0, b0)
            basis(t, 1, b1)
            for d in range(m):
                pos[d] = _dot_piece(b0, c, r, d)
                vel[d] = _dot_piece(b1, c, r, d)
            for k in range(K):
                _peer_state(peer_c, peer_T, peer_offset[k], peer_offset[k + 1], stamp - peer_t0[k], ppos, pvel, bp)
                d2 = 0.0
                for d in range(m):
                    diff = pos[d] - ppos[d]
                    ediff[d] = ellipse[d] * diff
                    d2 += diff * ediff[d]
                g = c2 - d2
                if g > 0.0:
                    w = weight * omg
                    cost += w * h * g * g * g
                    dJdG = 3.0 * w * h * g * g
                    dGdt = 0.0
                    dGdtau = 0.0
                    for d in range(m):
                        dGdt -= 2.0 * ediff[d] * vel[d]
                        dGdtau += 2.0 * ediff[d] * pvel[d]
                    for kk in range(NCOEF):
                        for d in range(m):
                            grad_c[r + kk, d] -= dJdG * 2.0 * b0[kk] * ediff[d]
                    grad_T[i] += w * g * g * g / kappa + dJdG * (dGdt + dGdtau) * j / kappa
                    tail[i] += dJdG * dGdtau
        elapsed += T[i]
    # the absolute stamp of every sample on piece i shifts with all T_l, l < i
    run = 0.0
    for i in range(M - 1, -1, -1):
        grad_T[i] += run
        run += tail[i]
    return cost


@njit(cache=True)
def uniform_kernel(c, T, kappa, weight, grad_c, grad_T):
    M = T.shape[0]
    m = c.shape[1]
    N = M * kappa
    pts = np.empty((N + 1, m))
    vels = np.empty((N + 1, m))
    b0 = np.empty(NCOEF)
    b1 = np.empty(NCOEF)
    basis(0.0, 0, b0)
    for d in range(m):
        pts[0, d] = _dot_piece(b0, c, 0, d)
        vels[0, d] = 0.0
    for i in range(M):
        h = T[i] / kappa
        for j in range(1, kappa + 1):
            basis(j * h, 0, b0)
            basis(j * h, 1, b1)
            for d in range(m):
                pts[i * kappa + j, d] = _dot_piece(b0, c, NCOEF * i, d)
                vels[i * kappa + j, d] = _dot_piece(b1, c, NCOEF * i, d)
    D = np.empty(N)
    s1 = 0.0
    s2 = 0.0
    for k in range(N):
        acc = 0.0
        for d in range(m):
            diff = pts[k + 1, d] - pts[k, d]
            acc += diff * diff
        D[k] = acc
        s1 += acc
        s2 += acc * acc
    mean = s1 / N
    cost = weight * (s2 / N - mean * mean)
    # dJ/dD_k = 2 (D_k - mean) / N
    gp = np.zeros((N + 1, m))
    for k in range(N):
        coef = weight * 4.0 * (D[k] - mean) / N
        for d in range(m):
            diff = pts[k + 1, d] - pts[k, d]
            gp[k + 1, d] += coef * diff
            gp[k, d] -= coef * diff
    basis(0.0, 0, b0)
    for kk in range(NCOEF):
        for d in range(m):
            grad_c[kk, d] += b0[kk] * gp[0, d]
    for i in range(M):
        h = T[i] / kappa
        for j in range(1, kappa + 1):
            idx = i * kappa + j
            basis(j * h, 0, b0)
            acc = 0.0
            for d in range(m):
                acc += gp[idx, d] * vels[idx, d]
                for kk in range(NCOEF):
                    grad_c[NCOEF * i + kk, d] += b0[kk] * gp[idx, d]
            grad_T[i] += acc * j / kappa
    return cost


# ----------------------------------------------------------------------------
# public API
# ----------------------------------------------------------------------------

def trapezoid_weights(kappa: int) -> np.ndarray:
    w = np.ones(kappa + 1)
    w[0] = w[-1] = 0.5
    return w


def quadrature_penalty(coeffs, duration, kappa, constraint_fn, chi=1.0):
    """Cubic-penalty trapezoidal transcription of ``G <= 0`` on one piece.

    ``constraint_fn(coeffs, t)`` returns ``(g, dg_dc, dg_dt)`` with shapes
    ``(n_g,)``, ``(n_g, 6, m)``, ``(n_g,)``.  Returns ``(J, dJ/dc, dJ/dT)``.
    """
    if kappa < 2:
        raise ValueError("kappa must be at least 2")
    coeffs = np.asarray(coeffs, dtype=float)
    T = float(duration)
    h = T / kappa
    J = 0.0
    grad_c = np.zeros_like(coeffs)
    grad_T = 0.0
    for j, omg in enumerate(trapezoid_weights(kappa)):
        g, dg_dc, dg_dt = constraint_fn(coeffs, j * h)
        g = np.atleast_1d(np.asarray(g, dtype=float))
        chi_v = np.broadcast_to(np.asarray(chi, dtype=float), g.shape)
        viol = np.maximum(g, 0.0)
        J += h * omg * float(chi_v @ viol**3)
        dJdG = 3.0 * h * omg * chi_v * viol**2
        grad_c += np.einsum("g,gkd->kd", dJdG, np.asarray(dg_dc, dtype=float).reshape(g.size, *coeffs.shape))
        grad_T += float(dJdG @ np.atleast_1d(dg_dt)) * j / kappa
    grad_T += J / T if T > 0 else 0.0
    return J, grad_c, grad_T


def _zeros(traj: PiecewisePolynomial):
    return np.zeros((NCOEF * traj.n_pieces, traj.dims)), np.zeros(traj.n_pieces)


def control_effort(traj: PiecewisePolynomial):
    """Integral of squared jerk, closed form per piece."""
    gc, gT = _zeros(traj)
    J = effort_kernel(traj.stacked(), traj.durations, 1.0, gc, gT)
    return J, gc, gT


def execution_time(durations):
    T = np.asarray(durations, dtype=float).reshape(-1)
    return float(T.sum()), 0.0, np.ones_like(T)


def dynamic_feasibility(traj: PiecewisePolynomial, limits, kappa: int, chi=(1.0, 1.0, 1.0)):
    """Velocity, acceleration and jerk magnitude limits (squared-norm form)."""
    gc, gT = _zeros(traj)
    J = feasibility_kernel(traj.stacked(), traj.durations, int(kappa), np.asarray(limits, dtype=float),
                           np.asarray(chi, dtype=float), 1.0, gc, gT)
    return J, gc, gT


def pairs_to_arrays(points, dims=3):
    """Flatten ConstraintPoint records into the arrays consumed by the obstacle kernel."""
    piece, sample, s, v = [], [], [], []
    for cp in points:
        for pair in cp.pairs:
            piece.append(cp.piece)
            sample.append(cp.sample)
            s.append(pair.point)
            v.append(pair.direction)
    if not piece:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, dims)), np.zeros((0, dims)))
    return (np.asarray(piece, np.int64), np.asarray(sample, np.int64), np.asarray(s, float), np.asarray(v, float))


def obstacle_penalty(traj: PiecewisePolynomial, points, clearance: float, kappa: int):
    """Penalty of ``clearance - (p - s).v`` at key points carrying safe pairs."""
    gc, gT = _zeros(traj)
    piece, sample, s, v = pairs_to_arrays(points, traj.dims)
    J = obstacle_kernel(traj.stacked(), traj.durations, int(kappa), piece, sample, s, v, float(clearance), 1.0, gc, gT)
    return J, gc, gT


def pack_peers(peers, dims=3):
    """``peers`` is a sequence of ``(PiecewisePolynomial, start_stamp)``."""
    if not peers:
        return np.zeros((0, dims)), np.zeros(0), np.zeros(1, np.int64), np.zeros(0)
    coeffs = np.concatenate([p.stacked() for p, _ in peers], axis=0)
    durations = np.concatenate([p.durations for p, _ in peers])
    offsets = np.concatenate([[0], np.cumsum([p.n_pieces for p, _ in peers])]).astype(np.int64)
    stamps = np.array([float(t) for _, t in peers])
    return coeffs, durations, offsets, stamps


def swarm_penalty(traj: PiecewisePolynomial, start_stamp: float, peers, clearance: float,
                  ellipse=(1.0, 1.0, 0.5), kappa: int = 8):
    """Reciprocal avoidance against peers sampled at the same absolute stamps."""
    end = start_stamp + traj.total_duration
    for p, t in peers:
        if t > end:
            raise ClockSkew(f"peer trajectory starts at {t}, after own trajectory ends at {end}")
    gc, gT = _zeros(traj)
    pc, pT, off, st = pack_peers(peers, traj.dims)
    J = swarm_kernel(traj.stacked(), traj.durations, int(kappa), float(start_stamp), pc, pT, off, st,
                     float(clearance), np.asarray(ellipse, dtype=float), 1.0, gc, gT)
    return J, gc, gT


def uniform_distribution_penalty(traj: PiecewisePolynomial, kappa: int):
    """Variance of squared gaps between consecutive constraint points."""
    gc, gT = _zeros(traj)
    J = uniform_kernel(traj.stacked(), traj.durations, int(kappa), 1.0, gc, gT)
    return J, gc, gT


def squared_gaps(traj: PiecewisePolynomial, kappa: int) -> np.ndarray:
    frac = np.arange(1, kappa + 1) / kappa
    stamps = np.concatenate([[0.0], (traj.breaks[:-1, None] + traj.durations[:, None] * frac).ravel()])
    pts = traj.sample(stamps)
    return np.sum(np.diff(pts, axis=0) ** 2, axis=1)


def constraint_points(traj: PiecewisePolynomial, kappa: int):
    """All ``(i, j)`` samples, ``j = 0..kappa`` on every piece."""
    out = []
    for i, (coef, T) in enumerate(traj.pieces):
        for j in range(kappa + 1):
            t = j * T / kappa
            b = np.empty((4, NCOEF))
            for n in range(4):
                basis(t, n, b[n])
            der = b @ coef
            out.append(ConstraintPoint(i, j, t, der[0], der[1], der[2], der[3]))
    return out


def forward_time_map(tau):
    tau = np.asarray(tau, dtype=float)
    if np.any(np.abs(tau) > TIME_CLAMP):
        warnings.warn("virtual time outside [-20, 20]; clamping", RuntimeWarning, stacklevel=2)
        tau = np.clip(tau, -TIME_CLAMP, TIME_CLAMP)
    return np.exp(tau)


def backward_time_grad(grad_T, tau):
    tau = np.clip(np.asarray(tau, dtype=float), -TIME_CLAMP, TIME_CLAMP)
    return np.asarray(grad_T, dtype=float) * np.exp(tau)


def log_time(T):
    return np.log(np.asarray(T, dtype=float))


def ellipsoidal_distance(a, b, downwash: float) -> np.ndarray:
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    scale = np.ones(diff.shape[-1])
    scale[-1] = 1.0 / downwash
    return np.sqrt(np.sum(diff * diff * scale, axis=-1))


__all__ = [
    "SafePair", "ConstraintPoint", "PenaltyWeights", "quadrature_penalty", "control_effort",
    "execution_time", "dynamic_feasibility", "obstacle_penalty", "swarm_penalty",
    "uniform_distribution_penalty", "forward_time_map", "backward_time_grad", "constraint_points",
    "squared_gaps", "ellipsoidal_distance", "trapezoid_weights",
]
