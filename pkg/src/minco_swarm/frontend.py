"""Static environment and collision front-end.

Obstacles are boxes and vertical cylinders rasterized into a voxel grid.  The
grid is inflated for path search; voxels outside the grid bounds are free.
Colliding constraint points get ``{s, v}`` records from a collision-free
guide path, matched to the trajectory by arc-length fraction.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import DegenerateDirection, NoPath
from .penalties import ConstraintPoint, SafePair, constraint_points

SQRT3_2 = math.sqrt(3.0) / 2.0


# ----------------------------------------------------------------------------
# obstacle primitives
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    """``box``: full extents ``size``; ``cylinder``: vertical, diameter ``size[0]``, height ``size[2]``."""

    kind: str
    center: tuple
    size: tuple

    def __post_init__(self):
        if self.kind not in ("box", "cylinder"):
            raise ValueError(f"unknown primitive {self.kind!r}")

    def signed_distance(self, pts) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=float)) - np.asarray(self.center)
        half = np.asarray(self.size, dtype=float) / 2.0
        if self.kind == "box":
            q = np.abs(p) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(np.max(q, axis=1), 0.0)
            return outside + inside
        # vertical cylinder
        radial = np.hypot(p[:, 0], p[:, 1]) - half[0]
        axial = np.abs(p[:, 2]) - half[2]
        q = np.stack([radial, axial], axis=1)
        return np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(np.max(q, axis=1), 0.0)

    def to_line(self) -> str:
        return " ".join([self.kind, *(f"{v:.6g}" for v in (*self.center, *self.size))])

    @classmethod
    def from_line(cls, line: str) -> "Primitive":
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"expected 'type cx cy cz dx dy dz', got {line!r}")
        vals = tuple(float(v) for v in parts[1:])
        return cls(parts[0], vals[:3], vals[3:])


def read_obstacles(path) -> list:
    out = []
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                out.append(Primitive.from_line(line))
    return out


def write_obstacles(path, primitives):
    with open(path, "w") as fh:
        fh.write("# type cx cy cz dx dy dz (meters)\n")
        for prim in primitives:
            fh.write(prim.to_line() + "\n")


def random_obstacles(n, lower, upper, rng, keep_out=()) -> list:
    """Seeded field of thin columns and low boxes inside ``[lower, upper]``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    out = []
    while len(out) < n:
        xy = rng.uniform(lower[:2], upper[:2])
        if rng.random() < 0.7:
            diam = rng.uniform(0.2, 0.5)
            height = upper[2] - lower[2]
            prim = Primitive("cylinder", (xy[0], xy[1], lower[2] + height / 2), (diam, diam, height))
        else:
            sx, sy = rng.uniform(0.3, 0.8, size=2)
            sz = rng.uniform(1.0, upper[2] - lower[2])
            prim = Primitive("box", (xy[0], xy[1], lower[2] + sz / 2), (sx, sy, sz))
        if any(np.linalg.norm(xy - np.asarray(k)[:2]) < 1.0 for k in keep_out):
            continue
        out.append(prim)
    return out


class ObstacleField:
    """All primitives packed into arrays for vectorized exact signed distance."""

    def __init__(self, primitives):
        self.primitives = list(primitives)
        boxes = [p for p in self.primitives if p.kind == "box"]
        cyls = [p for p in self.primitives if p.kind == "cylinder"]
        self.box_c = np.array([p.center for p in boxes], dtype=float).reshape(-1, 3)
        self.box_h = np.array([p.size for p in boxes], dtype=float).reshape(-1, 3) / 2.0
        self.cyl_c = np.array([p.center for p in cyls], dtype=float).reshape(-1, 3)
        self.cyl_r = np.array([p.size[0] for p in cyls], dtype=float) / 2.0
        self.cyl_h = np.array([p.size[2] for p in cyls], dtype=float) / 2.0

    def __len__(self):
        return len(self.primitives)

    def distance(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.full(len(pts), np.inf)
        if len(self.box_c):
            q = np.abs(pts[:, None, :] - self.box_c[None]) - self.box_h[None]
            d = np.linalg.norm(np.maximum(q, 0.0), axis=2) + np.minimum(q.max(axis=2), 0.0)
            out = np.minimum(out, d.min(axis=1))
        if len(self.cyl_c):
            rel = pts[:, None, :] - self.cyl_c[None]
            radial = np.hypot(rel[..., 0], rel[..., 1]) - self.cyl_r[None]
            axial = np.abs(rel[..., 2]) - self.cyl_h[None]
            d = (np.hypot(np.maximum(radial, 0.0), np.maximum(axial, 0.0))
                 + np.minimum(np.maximum(radial, axial), 0.0))
            out = np.minimum(out, d.min(axis=1))
        return out


def obstacle_distance(primitives, pts) -> np.ndarray:
    """Exact signed distance from each point to the nearest primitive (inf when none)."""
    field = primitives if isinstance(primitives, ObstacleField) else ObstacleField(primitives or [])
    return field.distance(pts)


# ----------------------------------------------------------------------------
# occupancy grid
# ----------------------------------------------------------------------------

@njit(cache=True)
def _lookup(src, origin, res, pts):
    out = np.zeros(pts.shape[0], dtype=np.bool_)
    nx, ny, nz = src.shape
    for n in range(pts.shape[0]):
        i = int(np.floor((pts[n, 0] - origin[0]) / res))
        j = int(np.floor((pts[n, 1] - origin[1]) / res))
        k = int(np.floor((pts[n, 2] - origin[2]) / res))
        if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
            out[n] = src[i, j, k]
    return out


class OccupancyGrid:
    """Voxel map with an inflated copy for planning.

    A voxel is inflated-occupied when its center lies closer than
    ``inflation + half voxel diagonal`` to an occupied voxel center, so every
    point reported free keeps at least ``inflation`` from occupied centers.
    """

    def __init__(self, origin, resolution, occupied, inflation=0.3):
        if not resolution > 0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(origin, dtype=float)
        self.resolution = float(resolution)
        self.occupied = np.asarray(occupied, dtype=bool)
        self.shape = self.occupied.shape
        self.inflation = float(inflation)
        self.primitives = []
        self.field = None
        self._scratch = None
        if self.occupied.any():
            self._edt = ndimage.distance_transform_edt(~self.occupied, sampling=self.resolution)
        else:
            self._edt = np.full(self.shape, np.inf)
        self.inflated = self._edt < self.inflation + SQRT3_2 * self.resolution
        self.free = ~self.inflated
        if self.inflated.any() and not self.inflated.all():
            _, idx = ndimage.distance_transform_edt(self.inflated, return_indices=True)
            self._nearest_free = idx
        else:
            self._nearest_free = None

    @classmethod
    def empty(cls, lower, upper, resolution=0.2, inflation=0.3):
        lower = np.asarray(lower, dtype=float)
        dims = np.maximum(np.ceil((np.asarray(upper) - lower) / resolution).astype(int), 1)
        return cls(lower, resolution, np.zeros(tuple(dims), dtype=bool), inflation)

    @classmethod
    def from_primitives(cls, primitives, lower, upper, resolution=0.1, inflation=0.3):
        grid = cls.empty(lower, upper, resolution, inflation)
        occ = np.zeros(grid.shape, dtype=bool)
        for prim in primitives:
            c = np.asarray(prim.center)
            reach = np.asarray(prim.size) / 2.0
            lo = np.maximum(np.floor((c - reach - grid.origin) / resolution).astype(int), 0)
            hi = np.minimum(np.ceil((c + reach - grid.origin) / resolution).astype(int) + 1, grid.shape)
            if np.any(hi <= lo):
                continue
            axes = [grid.origin[a] + (np.arange(lo[a], hi[a]) + 0.5) * resolution for a in range(3)]
            X, Y, Z = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
            inside = (prim.signed_distance(pts) <= 0.0).reshape(X.shape)
            occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= inside
        out = cls(grid.origin, resolution, occ, inflation)
        out.primitives = list(primitives)
        out.field = ObstacleField(primitives)
        return out

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.shape) * self.resolution

    def index(self, p):
        return np.floor((np.asarray(p, dtype=float) - self.origin) / self.resolution).astype(int)

    def center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def in_bounds(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=-1)

    def is_occupied(self, pts, inflated=True):
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        out = _lookup(self.inflated if inflated else self.occupied, self.origin, self.resolution,
                      np.ascontiguousarray(pts.reshape(-1, 3)))
        return bool(out[0]) if single else out

    def distance(self, pts) -> np.ndarray:
        """Lower bound on the distance to the nearest occupied voxel surface."""
        idx = self.index(np.atleast_2d(pts))
        ok = self.in_bounds(idx)
        out = np.full(len(idx), np.inf)
        if ok.any():
            j = idx[ok]
            out[ok] = self._edt[j[:, 0], j[:, 1], j[:, 2]] - 2.0 * SQRT3_2 * self.resolution
        return out

    def nearest_free(self, p) -> np.ndarray:
        """Center of the closest inflated-free voxel (``p`` itself if already free)."""
        p = np.asarray(p, dtype=float)
        if not self.is_occupied(p):
            return p.copy()
        if self._nearest_free is None:
            raise NoPath("grid has no free voxel")
        i = self.index(p)
        j = self._nearest_free[:, i[0], i[1], i[2]]
        return self.center(j)

    def segment_free(self, a, b) -> bool:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        n = max(int(np.ceil(np.linalg.norm(b - a) / (0.5 * self.resolution))), 1)
        pts = a + np.linspace(0.0, 1.0, n + 1)[:, None] * (b - a)
        return not self.is_occupied(pts).any()


# ----------------------------------------------------------------------------
# guide path
# ----------------------------------------------------------------------------

@dataclass
class GuidePath:
    points: np.ndarray

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))

    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(self.points, axis=0), axis=1))])

    def at_fraction(self, frac) -> np.ndarray:
        cum = self.cumulative()
        if cum[-1] <= 0.0:
            return np.repeat(self.points[:1], np.size(frac), axis=0)
        s = np.clip(np.atleast_1d(frac), 0.0, 1.0) * cum[-1]
        return np.stack([np.interp(s, cum, self.points[:, d]) for d in range(self.points.shape[1])], axis=1)


_OFFSETS = np.array([o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)], dtype=np.int64)
_STEP = np.linalg.norm(_OFFSETS, axis=1)


@njit(cache=True)
def _astar_kernel(free, start, goal, offsets, steps, g, parent, closed, max_expansions):
    """26-connected A* over flat voxel indices.

    ``g``, ``parent`` and ``closed`` are caller-owned scratch arrays that are
    restored to their initial state before returning.  Returns the path as
    flat indices from start to goal, or an empty array.
    """
    nx, ny, nz = free.shape
    s = (start[0] * ny + start[1]) * nz + start[2]
    t = (goal[0] * ny + goal[1]) * nz + goal[2]
    touched = [s]
    g[s] = 0.0
    h0 = np.sqrt(float((start[0] - goal[0]) ** 2 + (start[1] - goal[1]) ** 2 + (start[2] - goal[2]) ** 2))
    heap = [(h0, h0, 0, s)]
    counter = 1
    expanded = 0
    found = False
    while len(heap) > 0:
        _, _, _, node = heapq.heappop(heap)
        if closed[node]:
            continue
        if node == t:
            found = True
            break
        closed[node] = True
        expanded += 1
        if expanded > max_expansions:
            break
        k = node % nz
        j = (node // nz) % ny
        i = node // (ny * nz)
        base = g[node]
        for o in range(offsets.shape[0]):
            a = i + offsets[o, 0]
            b = j + offsets[o, 1]
            c = k + offsets[o, 2]
            if a < 0 or a >= nx or b < 0 or b >= ny or c < 0 or c >= nz:
                continue
            if not free[a, b, c]:
                continue
            nb = (a * ny + b) * nz + c
            if closed[nb]:
                continue
            cand = base + steps[o]
            if cand < g[nb]:
                if g[nb] == np.inf:
                    touched.append(nb)
                g[nb] = cand
                parent[nb] = node
                hn = np.sqrt(float((a - goal[0]) ** 2 + (b - goal[1]) ** 2 + (c - goal[2]) ** 2))
                heapq.heappush(heap, (cand + hn, hn, counter, nb))
                counter += 1
    path = []
    if found:
        node = t
        while node != -1:
            path.append(node)
            node = parent[node]
    for n in touched:
        g[n] = np.inf
        parent[n] = -1
        closed[n] = False
    out = np.empty(len(path), dtype=np.int64)
    for q in range(len(path)):
        out[q] = path[len(path) - 1 - q]
    return out


def _astar(grid: OccupancyGrid, start_idx, goal_idx, max_expansions=400_000):
    if grid._scratch is None:
        n = int(np.prod(grid.shape))
        grid._scratch = (np.full(n, np.inf), np.full(n, -1, dtype=np.int64), np.zeros(n, dtype=np.bool_))
    g, parent, closed = grid._scratch
    path = _astar_kernel(grid.free, np.asarray(start_idx, dtype=np.int64), np.asarray(goal_idx, dtype=np.int64),
                         _OFFSETS, _STEP, g, parent, closed, max_expansions)
    if path.size == 0:
        raise NoPath(f"no path from {grid.center(start_idx)} to {grid.center(goal_idx)} ({grid.resolution} m grid)")
    idx = np.stack(np.unravel_index(path, grid.shape), axis=1)
    return list(grid.center(idx))


def _shortcut(grid: OccupancyGrid, pts):
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not grid.segment_free(pts[i], pts[j]):
            j -= 1
        out.append(pts[j])
        i = j
    return out


def plan_guide_path(grid: OccupancyGrid | None, start, goal) -> GuidePath:
    """26-connected A* on the inflated grid followed by greedy shortcutting.

    Endpoints inside inflated space are connected through the nearest free
    voxel.  Endpoints outside the grid keep the open-world convention.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if grid is None or grid.segment_free(start, goal):
        return GuidePath(np.stack([start, goal]))
    s_free = grid.nearest_free(start)
    g_free = grid.nearest_free(goal)
    s_idx = np.clip(grid.index(s_free), 0, np.asarray(grid.shape) - 1)
    g_idx = np.clip(grid.index(g_free), 0, np.asarray(grid.shape) - 1)
    if grid.inflated[tuple(g_idx)] or grid.inflated[tuple(s_idx)]:
        raise NoPath("endpoint clamps into occupied space")
    # the goal may be completely enclosed: look at the reachable set
    cells = _astar(grid, s_idx, g_idx)
    pts = [start] + cells[1:-1] + [goal]
    if not np.allclose(s_free, start):
        pts.insert(1, s_free)
    if not np.allclose(g_free, goal):
        pts.insert(len(pts) - 1, g_free)
    pts = _shortcut(grid, pts)
    return GuidePath(np.asarray(pts))


# ----------------------------------------------------------------------------
# seeding and safe pairs
# ----------------------------------------------------------------------------

def seed_initial_guess(guide: GuidePath, n_pieces: int, v_max: float, min_duration: float = 0.1):
    """Waypoints at uniform arc-length fractions, durations at 60% of ``v_max``."""
    if n_pieces < 1:
        raise ValueError("need at least one piece")
    frac = np.arange(1, n_pieces) / n_pieces
    q = guide.at_fraction(frac) if n_pieces > 1 else np.zeros((0, guide.points.shape[1]))
    seg = guide.length / n_pieces
    T = np.full(n_pieces, max(seg / (0.6 * v_max), min_duration))
    return q, T


def warm_start_guess(previous, elapsed: float, target, grid: OccupancyGrid | None, v_max: float,
                     spacing: float = 1.5, lo: int = 2, hi: int = 12, samples: int = 16):
    """Seed from the unexecuted remainder of the previous plan, extended to ``target``.

    Keeps the avoidance geometry and timing the last solve found; waypoints
    sit at equal time fractions of the combined timeline.  Returns
    ``(guide, q, T)`` or None when nothing useful remains.
    """
    remaining = previous.total_duration - elapsed
    if remaining <= 0.05:
        return None
    ts = np.linspace(elapsed, previous.total_duration, samples)
    pts = previous.sample(ts)
    tail = plan_guide_path(grid, pts[-1], target)
    ext = np.linalg.norm(np.diff(tail.points, axis=0), axis=1)
    times = np.concatenate([ts - elapsed, remaining + np.cumsum(ext) / (0.6 * v_max)])
    pts = np.vstack([pts, tail.points[1:]])
    keep = np.concatenate([[True], np.diff(times) > 1e-9])
    times, pts = times[keep], pts[keep]
    guide = GuidePath(pts)
    M = piece_count(guide.length, spacing, lo, hi)
    total = float(times[-1])
    cuts = total * np.arange(1, M) / M
    q = np.stack([np.interp(cuts, times, pts[:, d]) for d in range(pts.shape[1])], axis=1)
    return guide, q, np.full(M, total / M)


def piece_count(length: float, spacing: float = 1.5, lo: int = 2, hi: int = 12) -> int:
    return int(min(max(math.ceil(length / spacing), lo), hi))


@dataclass
class PairUpdate:
    points: list
    added: int = 0
    reseed: bool = False
    colliding: int = 0
    skipped: list = field(default_factory=list)


def _boundary_crossing(grid: OccupancyGrid, p, v, max_dist):
    """First point along ``p + t v`` that is inflated-free, to 1/20 of a voxel."""
    step = 0.05 * grid.resolution
    n = max(int(math.ceil(max_dist / step)), 1)
    ts = np.arange(1, n + 1) * step
    occ = grid.is_occupied(p + ts[:, None] * v)
    free = np.flatnonzero(~occ)
    if free.size == 0:
        return None
    return p + ts[free[0]] * v


def remap_records(records, old_kappa: int, new_kappa: int) -> dict:
    """Carry records to a finer sampling ``(i, j) -> (i, j * new/old)``."""
    ratio = new_kappa // old_kappa
    return {(i, j * ratio): list(pairs) for (i, j), pairs in records.items()}


def generate_safe_pairs(traj, grid: OccupancyGrid, kappa: int, records=None, guide: GuidePath | None = None):
    """Stack ``{s, v}`` records on key points that sit inside inflated obstacles.

    ``records`` maps ``(piece, sample)`` to existing pairs and is carried over.
    Each maximal run of colliding key points is matched by arc-length
    fraction to a guide path between the free points bracketing the run
    (``guide`` overrides the per-run search).
    """
    points = constraint_points(traj, kappa)
    records = records or {}
    for cp in points:
        cp.pairs = list(records.get((cp.piece, cp.sample), []))
    update = PairUpdate(points)
    if grid is None:
        return update
    # ordered key points: the trajectory start, then j = 1..kappa of every piece
    seq = [points[0]] + [cp for cp in points if cp.sample > 0]
    pos = np.array([cp.position for cp in seq])
    hit = grid.is_occupied(pos)
    hit[0] = False
    update.colliding = int(hit.sum())
    if not hit.any():
        return update
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])
    k = 1
    n = len(seq)
    while k < n:
        if not hit[k]:
            k += 1
            continue
        a = k
        while k < n and hit[k]:
            k += 1
        b = k - 1
        lo_i, hi_i = a - 1, min(b + 1, n - 1)
        run = list(range(a, b + 1))
        if guide is not None:
            path = guide
        else:
            try:
                path = plan_guide_path(grid, pos[lo_i], pos[hi_i])
            except NoPath:
                update.skipped.extend(run)
                update.reseed = True
                continue
        span = arc[hi_i] - arc[lo_i]
        for r in run:
            cp = seq[r]
            frac = (arc[r] - arc[lo_i]) / span if span > 0 else 0.5
            g = path.at_fraction(frac)[0]
            # a point already pushed by a record of this obstacle needs no new one
            if any(pair.distance(cp.position) < 0.0 for pair in cp.pairs):
                continue
            try:
                pair = make_pair(grid, cp.position, g)
            except DegenerateDirection:
                update.skipped.append(r)
                update.reseed = True
                continue
            if pair is None:
                update.skipped.append(r)
                continue
            cp.pairs.append(pair)
            update.added += 1
    return update


def make_pair(grid: OccupancyGrid, p, guide_point):
    p = np.asarray(p, dtype=float)
    direction = np.asarray(guide_point, dtype=float) - p
    dist = float(np.linalg.norm(direction))
    if dist < 1e-6:
        raise DegenerateDirection("constraint point coincides with its guide point")
    v = direction / dist
    s = _boundary_crossing(grid, p, v, dist + grid.resolution)
    if s is None:
        return None
    return SafePair(s, v)


def records_of(points) -> dict:
    return {(cp.piece, cp.sample): list(cp.pairs) for cp in points if cp.pairs}


__all__ = [
    "Primitive", "OccupancyGrid", "GuidePath", "plan_guide_path", "generate_safe_pairs",
    "seed_initial_guess", "piece_count", "read_obstacles", "write_obstacles", "random_obstacles",
    "obstacle_distance", "make_pair", "records_of", "remap_records", "ConstraintPoint",
]
