"""Per-agent replanning: build the weighted objective over ``(q, tau)`` and solve it."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from numba import njit

from . import penalties as pen
from .errors import ClockSkew, NoPath, PlanFailed
from .frontend import (OccupancyGrid, generate_safe_pairs, piece_count, plan_guide_path, records_of,
                       remap_records, seed_initial_guess, warm_start_guess)
from .minco import (BAND, NCOEF, BoundaryCondition, MincoMap, PiecewisePolynomial, _fill_band, _fill_rhs,
                    _time_gradient, band_factorize, band_solve, band_solve_transposed)
from .optimizer import REASONS, LbfgsOptions, SolveReport, _two_loop, minimize
from .penalties import TIME_CLAMP, PenaltyWeights, forward_time_map

log = logging.getLogger(__name__)

POSTCHECK_DYN = 0.01
POSTCHECK_DIST = 0.05
ACCEPT_LIMIT = 0.10
# peers stamped this far past our own clock are treated as clock faults
PEER_FUTURE_LIMIT = 60.0
VERTICAL_BIAS = 0.5


class PeerTrajectory(NamedTuple):
    agent_id: int
    trajectory: PiecewisePolynomial
    start: float  # in the planning agent's clock


@dataclass
class PlanRequest:
    state: BoundaryCondition
    goal: np.ndarray
    horizon: float = 7.5
    grid: OccupancyGrid | None = None
    peers: list = field(default_factory=list)
    now: float = 0.0
    filter_peers: bool = True
    # own previous plan (trajectory, start stamp) for warm starting
    previous: tuple | None = None

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float)
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")


@dataclass
class PlannerOptions:
    rounds: int = 3
    piece_length: float = 1.5
    min_pieces: int = 2
    max_pieces: int = 12
    warm_start: bool = True
    lbfgs: LbfgsOptions = field(default_factory=LbfgsOptions)


@dataclass
class PlanResult:
    trajectory: PiecewisePolynomial
    start: float
    report: SolveReport
    postcheck: dict
    kappa: int
    n_peers: int
    solver_time: float
    local_goal: np.ndarray


@njit(cache=True)
def objective_kernel(x, grad, args):
    """Full cost and gradient w.r.t. ``x = (q, tau)`` in one compiled call.

    ``args`` is the tuple built by :class:`SwarmObjective`; its ``wts`` entry
    holds (effort, time, feasibility, obstacle, swarm, uniform).  Returns
    inf when the banded system is singular.
    """
    (n_q, start, end, band, rhs, kappa, wts, limits, chi, ellipse, pair_piece, pair_sample, pair_s, pair_v,
     c_obs, t0, peer_c, peer_T, peer_offset, peer_t0, c_swarm, terms) = args
    dims = rhs.shape[1]
    M = rhs.shape[0] // NCOEF
    q = x[:n_q].reshape((M - 1, dims))
    T = np.exp(np.minimum(np.maximum(x[n_q:], -TIME_CLAMP), TIME_CLAMP))
    _fill_band(T, band)
    _fill_rhs(q, start, end, rhs)
    if band_factorize(band) >= 0:
        return np.inf
    band_solve(band, rhs)
    c = rhs
    gc = np.zeros_like(c)
    gT = np.zeros(M)
    terms[0] = pen.effort_kernel(c, T, wts[0], gc, gT)
    terms[1] = wts[1] * T.sum()
    gT += wts[1]
    terms[2] = pen.feasibility_kernel(c, T, kappa, limits, chi, wts[2], gc, gT)
    terms[3] = pen.obstacle_kernel(c, T, kappa, pair_piece, pair_sample, pair_s, pair_v, c_obs, wts[3], gc, gT)
    terms[4] = pen.swarm_kernel(c, T, kappa, t0, peer_c, peer_T, peer_offset, peer_t0, c_swarm, ellipse,
                                wts[4], gc, gT)
    terms[5] = pen.uniform_kernel(c, T, kappa, wts[5], gc, gT)
    band_solve_transposed(band, gc)
    for i in range(M - 1):
        for d in range(dims):
            grad[i * dims + d] = gc[NCOEF * i + 5, d]
    _time_gradient(c, T, gc, gT)
    for i in range(M):
        grad[n_q + i] = gT[i] * T[i]
    return terms.sum()


@njit(cache=True)
def _solve_kernel(args, x0, memory, g_tol, max_iter, past, delta, c1, c2, max_ls):
    """The iteration of :func:`optimizer.minimize`, compiled around :func:`objective_kernel`.

    Numba cannot cache a loop that takes the objective as a function
    argument, hence this specialization.  Returns ``(x, f, g, iterations,
    evaluations, reason index)``; reason -1 flags a non-finite initial cost.
    """
    n = x0.size
    x = x0.copy()
    g = np.zeros(n)
    f = objective_kernel(x, g, args)
    evals = 1
    if not np.isfinite(f):
        return x, f, g, 0, evals, -1
    S = np.zeros((memory, n))
    Y = np.zeros((memory, n))
    rho = np.zeros(memory)
    head = 0
    count = 0
    history = np.empty(max_iter + 1)
    history[0] = f
    it = 0
    reason = 2
    xn = np.empty(n)
    gn = np.zeros(n)
    bx = np.empty(n)
    bg = np.empty(n)
    while True:
        gnorm = np.max(np.abs(g)) if n > 0 else 0.0
        if gnorm <= g_tol:
            reason = 0
            break
        if it >= max_iter:
            reason = 2
            break
        d = _two_loop(g, S, Y, rho, head, count)
        gd = np.dot(g, d)
        if gd >= 0.0:
            count = 0
            d = -g
            gd = np.dot(g, d)
        step = 1.0 if count > 0 else 1.0 / max(np.sqrt(np.dot(d, d)), 1e-12)
        # weak Wolfe bracketing
        lo = 0.0
        hi = np.inf
        found = False
        ok = False
        bf = 0.0
        for _ in range(max_ls):
            for k in range(n):
                xn[k] = x[k] + step * d[k]
            gn[:] = 0.0
            fn = objective_kernel(xn, gn, args)
            evals += 1
            if not np.isfinite(fn) or fn > f + c1 * step * gd:
                hi = step
            else:
                found = True
                bx[:] = xn
                bg[:] = gn
                bf = fn
                if np.dot(gn, d) < c2 * gd:
                    lo = step
                else:
                    ok = True
                    break
            step = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * step
            if hi - lo < 1e-16 * max(1.0, hi if np.isfinite(hi) else lo):
                break
        it += 1
        if not found:
            reason = 4
            break
        s = bx - x
        y = bg - g
        sy = np.dot(s, y)
        if sy > 1e-10 * np.dot(s, s) * max(1.0, gnorm):
            S[head] = s
            Y[head] = y
            rho[head] = 1.0 / sy
            head = (head + 1) % memory
            count = min(count + 1, memory)
        x[:] = bx
        g[:] = bg
        f = bf
        history[it] = f
        if not ok:
            reason = 4
            break
        if it > past:
            ref = history[it - past]
            if ref - f <= delta * max(1.0, abs(f)):
                reason = 1
                break
    return x, f, g, it, evals, reason


TERMS = ("effort", "time", "feasibility", "obstacle", "swarm", "uniform")


class SwarmObjective:
    """Weighted sum of effort, time, feasibility, obstacle, swarm and uniformity terms.

    Decision vector: intermediate waypoints (flattened) followed by virtual
    times ``tau`` with ``T = exp(tau)``.
    """

    def __init__(self, bc0, bcf, n_pieces, weights: PenaltyWeights, kappa=None,
                 start_stamp=0.0, peers=(), pairs=None):
        self.weights = weights
        self.kappa = int(kappa or weights.kappa)
        self.n_pieces = n_pieces
        self.map = MincoMap(n_pieces, bc0, bcf)
        self.dims = self.map.dims
        self.start_stamp = float(start_stamp)
        self.peers = pen.pack_peers([(p.trajectory, p.start) if isinstance(p, PeerTrajectory) else p for p in peers],
                                    self.dims)
        if pairs is None:
            pairs = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, self.dims)), np.zeros((0, self.dims)))
        self.pairs = pairs
        w = weights
        self.wts = np.array([w.effort, w.time, w.feasibility, w.obstacle, w.swarm, w.uniform])
        self.limits = w.limits()
        self.chi = np.asarray(w.chi, dtype=float)
        self.ellipse = w.ellipsoid() if self.dims == 3 else np.ones(self.dims)
        self.c_obs = w.clearance_obstacle * (1.0 + w.margin)
        self.c_swarm = w.clearance_swarm * (1.0 + w.margin)
        self.n_q = self.dims * (n_pieces - 1)
        self._band = np.zeros((2 * BAND + 1, NCOEF * n_pieces))
        self._rhs = np.zeros((NCOEF * n_pieces, self.dims))
        self.terms = np.zeros(len(TERMS))
        self.args = (self.n_q, self.map.start, self.map.end, self._band, self._rhs, self.kappa, self.wts,
                     self.limits, self.chi, self.ellipse, *(np.ascontiguousarray(a) for a in self.pairs),
                     self.c_obs, self.start_stamp, *self.peers, self.c_swarm, self.terms)

    def minimize(self, x0, opts: LbfgsOptions | None = None):
        """Compiled L-BFGS; a wall-clock budget falls back to the interpreted loop."""
        opts = opts or LbfgsOptions()
        if opts.max_time is not None:
            return minimize(self, x0, opts)
        start = time.perf_counter()
        x, f, g, it, evals, code = _solve_kernel(
            self.args, np.ascontiguousarray(x0, dtype=float), max(int(opts.memory), 1), float(opts.g_tol),
            int(opts.max_iter), int(opts.past), float(opts.delta), float(opts.c1), float(opts.c2),
            int(opts.max_linesearch))
        if code < 0:
            raise ValueError("objective is not finite at the initial point")
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        return x, SolveReport(float(f), gnorm, int(it), int(evals), time.perf_counter() - start, REASONS[code])

    def pack(self, q, T) -> np.ndarray:
        return np.concatenate([np.asarray(q, dtype=float).ravel(), np.log(np.asarray(T, dtype=float))])

    def unpack(self, x):
        q = x[:self.n_q].reshape(self.n_pieces - 1, self.dims)
        return q, forward_time_map(x[self.n_q:])

    def trajectory(self, x) -> PiecewisePolynomial:
        q, T = self.unpack(x)
        self.map.generate(q, T)
        return self.map.trajectory()

    def __call__(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        grad = np.zeros_like(x)
        cost = objective_kernel(x, grad, self.args)
        if not np.isfinite(cost):
            return np.inf, np.zeros_like(x)
        return cost, grad

    def breakdown(self, x) -> dict:
        self(x)
        return dict(zip(TERMS, self.terms.tolist()))


def filter_peers(peers, position, horizon, clearance, now=0.0, margin_ratio=0.25, enabled=True, dt=0.1):
    """Drop peers whose remaining trajectory never comes near the own horizon sphere."""
    if not enabled:
        return list(peers)
    position = np.asarray(position, dtype=float)
    keep = []
    reach = horizon + clearance + margin_ratio * horizon
    for peer in peers:
        traj = peer.trajectory
        t_from = min(max(now - peer.start, 0.0), traj.total_duration)
        n = max(int(np.ceil((traj.total_duration - t_from) / dt)), 1)
        ts = np.linspace(t_from, traj.total_duration, n + 1)
        d = np.linalg.norm(traj.sample(ts) - position, axis=1)
        if float(d.min()) < reach:
            keep.append(peer)
    return keep


def _merge(reports):
    return SolveReport(
        cost=reports[-1].cost,
        grad_norm=reports[-1].grad_norm,
        iterations=sum(r.iterations for r in reports),
        evaluations=sum(r.evaluations for r in reports),
        wall_time=sum(r.wall_time for r in reports),
        reason=reports[-1].reason,
    )


def postcheck(traj: PiecewisePolynomial, weights: PenaltyWeights, kappa: int, grid=None, peers=(), start=0.0):
    """Audit limits and clearances at ``4 * kappa`` samples per piece.

    Returns a dict of per-family violation ratios (0 when satisfied) plus
    the raw extrema.
    """
    n = 4 * kappa
    frac = np.arange(n) / n
    ts = np.concatenate([(traj.breaks[:-1, None] + traj.durations[:, None] * frac).ravel(), [traj.total_duration]])
    out = {}
    for name, order, lim in (("velocity", 1, weights.v_max), ("acceleration", 2, weights.a_max),
                             ("jerk", 3, weights.j_max)):
        peak = float(np.max(np.linalg.norm(traj.sample(ts, order), axis=1)))
        out[f"max_{name}"] = peak
        out[name] = max(peak / lim - (1.0 + POSTCHECK_DYN), 0.0) if lim > 0 else 0.0
    pos = traj.sample(ts)
    out["obstacle"] = 0.0
    out["min_obstacle_distance"] = np.inf
    if grid is not None:
        dist = grid_distance(grid, pos)
        dmin = float(dist.min())
        out["min_obstacle_distance"] = dmin
        need = (1.0 - POSTCHECK_DIST) * weights.clearance_obstacle
        out["obstacle"] = max((need - dmin) / need, 0.0) if need > 0 else 0.0
    out["swarm"] = 0.0
    out["min_peer_distance"] = np.inf
    for peer in peers:
        local = start + ts - peer.start
        ppos = peer.trajectory.sample(local)
        d = pen.ellipsoidal_distance(pos, ppos, weights.downwash)
        need = (1.0 - POSTCHECK_DIST) * min(weights.clearance_swarm, float(d[0]))
        dmin = float(d.min())
        out["min_peer_distance"] = min(out["min_peer_distance"], dmin)
        if need > 0:
            out["swarm"] = max(out["swarm"], (need - dmin) / need)
    out["worst"] = max(out[k] for k in ("velocity", "acceleration", "jerk", "obstacle", "swarm"))
    out["passed"] = out["worst"] <= 0.0
    return out


def grid_distance(grid: OccupancyGrid, pts) -> np.ndarray:
    """Exact distance to primitives when the grid carries them, else the voxel bound."""
    if getattr(grid, "field", None) is not None and len(grid.field):
        return grid.field.distance(pts)
    return grid.distance(pts)


def local_goal(position, goal, horizon, grid=None):
    position = np.asarray(position, dtype=float)
    goal = np.asarray(goal, dtype=float)
    delta = goal - position
    dist = float(np.linalg.norm(delta))
    target = goal if dist <= horizon else position + delta * (horizon / dist)
    if grid is not None and grid.is_occupied(target):
        target = grid.nearest_free(target)
    return target


def clear_of_peers(target, origin, peers, clearance, downwash, grid=None, step=0.1):
    """Pull ``target`` back toward ``origin`` until no peer comes to rest inside its keep-out.

    A fixed terminal state cannot be moved by the swarm penalty, so a goal
    still occupied by a (possibly not yet departed) peer would make every
    replan fail.
    """
    target = np.asarray(target, dtype=float)
    origin = np.asarray(origin, dtype=float)
    if not peers:
        return target
    ends = np.array([p.trajectory.sample(np.array([p.trajectory.total_duration]))[0] for p in peers])
    need = (1.0 + POSTCHECK_DIST) * clearance
    delta = target - origin
    dist = float(np.linalg.norm(delta))
    n = int(np.ceil(dist / step))
    for k in range(n + 1):
        cand = target - delta * (k / n) if n else target
        if pen.ellipsoidal_distance(ends, cand[None, :], downwash).min() >= need:
            if grid is None or not grid.is_occupied(cand):
                return cand
    return origin


def keep_right(q, T, origin, target, peers, clearance, downwash, now=0.0):
    """Shift seed waypoints that sit inside a peer keep-out to the right of travel.

    Head-on encounters are symmetric: the swarm gradient points along the
    line of approach and cannot pick a side.  A shared right-hand rule picks
    opposite sides for opposing agents and turns a ring exchange into a
    roundabout.  Waypoints already clear are left alone.
    """
    q = np.array(q, dtype=float)
    if not peers or q.shape[0] == 0:
        return q
    chain = np.vstack([origin, q, target])
    times = now + np.cumsum(T)[:-1]
    for i in range(q.shape[0]):
        heading = chain[i + 2, :2] - chain[i, :2]
        norm = float(np.hypot(*heading))
        if norm < 1e-9:
            continue
        right = np.zeros(q.shape[1])
        right[:2] = heading[1] / norm, -heading[0] / norm
        if right.size > 2:
            # opposing headings also take opposite vertical sides
            right[2] = VERTICAL_BIAS * np.sign(heading[1] if abs(heading[1]) > 1e-9 else heading[0])
        shift = 0.0
        for peer in peers:
            pos = peer.trajectory.sample(np.array([times[i] - peer.start]))
            d = float(pen.ellipsoidal_distance(q[i:i + 1], pos, downwash)[0])
            shift = max(shift, clearance - d)
        if shift > 0.0:
            q[i] += right * shift
    return q


def replan(req: PlanRequest, weights: PenaltyWeights, options: PlannerOptions | None = None) -> PlanResult:
    """guide path -> seed -> rounds of {safe pairs; L-BFGS} -> post-check (with one refined retry)."""
    options = options or PlannerOptions()
    t_start = time.perf_counter()
    p0 = req.state.position
    grid = req.grid
    target = local_goal(p0, req.goal, req.horizon, grid)
    peers = []
    for peer in req.peers:
        if peer.start > req.now + PEER_FUTURE_LIMIT:
            log.warning("%s", ClockSkew(f"peer {peer.agent_id} starts {peer.start - req.now:.2f}s in the future"))
            continue
        peers.append(peer)
    peers = filter_peers(peers, p0, req.horizon, weights.clearance_swarm, req.now, enabled=req.filter_peers)
    target = clear_of_peers(target, p0, peers, weights.clearance_swarm, weights.downwash, grid)

    seed = None
    try:
        if req.previous is not None and options.warm_start:
            prev, prev_start = req.previous
            seed = warm_start_guess(prev, req.now - prev_start, target, grid, weights.v_max,
                                    options.piece_length, options.min_pieces, options.max_pieces)
        if seed is None:
            guide = plan_guide_path(grid, p0, target)
            M = piece_count(guide.length, options.piece_length, options.min_pieces, options.max_pieces)
            q, T = seed_initial_guess(guide, M, weights.v_max)
        else:
            guide, q, T = seed
            M = T.size
    except NoPath as exc:
        raise PlanFailed(f"front-end: {exc}") from exc
    shifted = keep_right(q, T, p0, target, peers, weights.clearance_swarm, weights.downwash, req.now)
    if grid is not None and shifted.shape[0]:
        blocked = grid.is_occupied(shifted)
        shifted[blocked] = q[blocked]
    q = shifted
    bcf = BoundaryCondition.rest(target)

    kappa = weights.kappa
    records = {}
    reports = []
    x = np.concatenate([q.ravel(), np.log(T)])
    objective = SwarmObjective(req.state, bcf, M, weights, kappa, req.now, peers)
    for rnd in range(options.rounds):
        if grid is not None:
            upd = generate_safe_pairs(objective.trajectory(x), grid, kappa, records)
            if rnd > 0 and upd.added == 0:
                break
            records = records_of(upd.points)
            pairs = pen.pairs_to_arrays(upd.points, objective.dims)
        elif rnd > 0:
            break
        else:
            pairs = None
        objective = SwarmObjective(req.state, bcf, M, weights, kappa, req.now, peers, pairs)
        x, rep = objective.minimize(x, options.lbfgs)
        reports.append(rep)

    traj = objective.trajectory(x)
    check = postcheck(traj, weights, kappa, grid, peers, req.now)
    if not check["passed"]:
        fine = 2 * kappa
        pairs = None
        if grid is not None:
            upd = generate_safe_pairs(traj, grid, fine, remap_records(records, kappa, fine))
            pairs = pen.pairs_to_arrays(upd.points, objective.dims)
        objective = SwarmObjective(req.state, bcf, M, replace(weights, kappa=fine), fine, req.now, peers, pairs)
        x, rep = objective.minimize(x, options.lbfgs)
        reports.append(rep)
        kappa = fine
        traj = objective.trajectory(x)
        check = postcheck(traj, weights, kappa, grid, peers, req.now)
        if check["worst"] > ACCEPT_LIMIT:
            raise PlanFailed(f"post-check violation {check['worst']:.3f}", check)
    report = _merge(reports)
    check["total_time"] = time.perf_counter() - t_start
    return PlanResult(traj, req.now, report, check, kappa, len(peers), report.wall_time, target)

