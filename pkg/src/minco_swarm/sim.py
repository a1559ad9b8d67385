"""Deterministic event-driven swarm simulation.

One logical timeline drives three event kinds: message deliveries, replans
and 100 Hz execution ticks.  Agents share no planner state; everything they
know about each other arrives as encoded bytes over a lossy, delayed bus.
Vehicles track their latest trajectory perfectly.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import wire
from .errors import MincoError, PlanFailed, ScenarioInvalid
from .frontend import ObstacleField, OccupancyGrid, Primitive, obstacle_distance, random_obstacles
from .minco import NCOEF, BoundaryCondition, PiecewisePolynomial
from .optimizer import LbfgsOptions
from .penalties import PenaltyWeights
from .planner import PeerTrajectory, PlannerOptions, PlanRequest, replan

log = logging.getLogger(__name__)

# tie-break at equal global time: deliveries first, then replans, then the monitor tick
DELIVER, REPLAN, TICK = 0, 1, 2

ARRIVE_DIST = 0.1
ARRIVE_SPEED = 0.1
STOP_SPEED = 0.05
SYNC_SAMPLES = 5


@dataclass
class AgentConfig:
    id: int
    start: np.ndarray
    goal: np.ndarray
    radius: float = 0.25
    skew: float = 0.0
    drift: float = 0.0
    replan_period: float = 0.1
    phase: float = 0.0
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    horizon: float = 7.5

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        if not self.radius > 0:
            raise ScenarioInvalid(f"agent {self.id}: radius must be positive")
        if not self.replan_period > 0:
            raise ScenarioInvalid(f"agent {self.id}: replan period must be positive")

    def local_time(self, t):
        return t + self.skew + self.drift * t

    def global_time(self, local):
        return (local - self.skew) / (1.0 + self.drift)


@dataclass
class BusConfig:
    latency: float = 0.0
    jitter: float = 0.0
    loss: float = 0.0
    seed: int = 0
    sync: bool = True

    def __post_init__(self):
        if not 0.0 <= self.loss <= 1.0:
            raise ScenarioInvalid(f"loss probability {self.loss} outside [0, 1]")
        if self.latency < 0 or self.jitter < 0:
            raise ScenarioInvalid("latency and jitter must be non-negative")

    def delay(self, rng) -> float:
        if self.jitter > 0:
            return max(self.latency + rng.uniform(-self.jitter, self.jitter), 0.0)
        return self.latency


@dataclass
class Scenario:
    agents: list
    bus: BusConfig = field(default_factory=BusConfig)
    duration: float = 30.0
    tick: float = 0.01
    obstacles: list = field(default_factory=list)
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    resolution: float = 0.1
    inflation: float = 0.3
    filter_peers: bool = True
    options: PlannerOptions = field(default_factory=PlannerOptions)
    name: str = "scenario"

    def grid(self):
        if self.lower is None:
            return None
        return OccupancyGrid.from_primitives(self.obstacles, self.lower, self.upper, self.resolution,
                                             self.inflation)

    def validate(self):
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ScenarioInvalid("duplicate agent ids")
        for i, a in enumerate(self.agents):
            for b in self.agents[i + 1:]:
                need = max(a.weights.clearance_swarm, a.radius + b.radius)
                if np.linalg.norm(a.start - b.start) < need:
                    raise ScenarioInvalid(f"agents {a.id} and {b.id} start closer than {need:.2f} m")
        if self.obstacles:
            starts = np.array([a.start for a in self.agents])
            d = obstacle_distance(self.obstacles, starts)
            bad = np.flatnonzero(d < np.array([a.radius for a in self.agents]))
            if bad.size:
                raise ScenarioInvalid(f"agent {self.agents[bad[0]].id} starts inside an obstacle")


@dataclass
class SimTrace:
    """Event log plus per-tick kinematics.  ``states`` has shape (ticks, agents, 4, 3)
    holding position, velocity, acceleration and jerk."""

    scenario: Scenario
    events: list
    times: np.ndarray
    states: np.ndarray
    replan_times: dict
    solver_times: dict
    min_pair_distance: np.ndarray
    min_ellipsoid_distance: np.ndarray
    min_obstacle_distance: np.ndarray

    @property
    def agent_ids(self):
        return [a.id for a in self.scenario.agents]

    def write_states(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(states_csv(self))

    def write_events(self, path):
        with open(path, "w") as fh:
            fh.write(events_jsonl(self))


def states_csv(trace: SimTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    axes = ("x", "y", "z")
    w.writerow(["t_s", "agent"] + [f"{k}{a}" for k in ("p", "v", "a", "j") for a in axes])
    for k, t in enumerate(trace.times):
        for j, aid in enumerate(trace.agent_ids):
            w.writerow([f"{t:.2f}", aid] + [f"{v:.9g}" for v in trace.states[k, j].ravel()])
    return buf.getvalue()


def events_jsonl(trace: SimTrace) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in trace.events)


class _Agent:
    def __init__(self, cfg: AgentConfig):
        self.cfg = cfg
        self.traj = PiecewisePolynomial.hover(cfg.start)
        self.traj_start = 0.0  # global
        self.seq = 0
        self.inbox = {}  # peer id -> TrajectoryMessage
        self.offsets = {}  # peer id -> estimated peer clock minus own clock
        self.stopped = False

    def kinematics(self, t_global) -> np.ndarray:
        return kinematics(self.traj, t_global - self.traj_start)


def kinematics(traj: PiecewisePolynomial, t: float) -> np.ndarray:
    """Position through jerk at ``t``; the vehicle hovers outside the trajectory."""
    out = np.zeros((4, traj.dims))
    if t >= traj.total_duration:
        out[0] = traj.sample(np.array([traj.total_duration]))[0]
        return out
    t = max(t, 0.0)
    idx, tau = traj.locate(t)
    c = traj.coeffs[int(idx)]
    k = np.arange(NCOEF)
    for d in range(4):
        coef = np.ones(NCOEF)
        for r in range(d):
            coef = coef * (k - r)
        out[d] = (coef * float(tau) ** np.clip(k - d, 0, None)) @ c
    return out


def _sync_samples(rx: AgentConfig, tx: AgentConfig, t, bus: BusConfig, rng):
    samples = []
    for _ in range(SYNC_SAMPLES):
        d1, d2 = bus.delay(rng), bus.delay(rng)
        t1 = rx.local_time(t)
        t2 = tx.local_time(t + d1)
        samples.append(wire.SyncSample(tx.id, t1, t2, t2, rx.local_time(t + d1 + d2)))
        t += d1 + d2
    return samples


def run(scenario: Scenario, grid=None) -> SimTrace:
    """Simulate until every agent has settled at its goal or ``duration`` elapses."""
    scenario.validate()
    if grid is None:
        grid = scenario.grid()
    bus = scenario.bus
    bus_rng = np.random.default_rng([bus.seed, 1])
    sync_rng = np.random.default_rng([bus.seed, 2])
    agents = {a.id: _Agent(a) for a in scenario.agents}
    order = sorted(agents)
    downwash = agents[order[0]].cfg.weights.downwash
    scale = np.array([1.0, 1.0, 1.0 / np.sqrt(downwash)])

    events = []
    replan_times = {aid: [] for aid in order}
    solver_times = {aid: [] for aid in order}
    heap = []
    counter = 0

    def push(t, kind, aid, payload=None):
        nonlocal counter
        heapq.heappush(heap, (t, kind, aid, counter, payload))
        counter += 1

    def broadcast(agent: _Agent, t):
        cfg = agent.cfg
        msg = wire.TrajectoryMessage.from_trajectory(cfg.id, agent.seq, agent.traj,
                                                     cfg.local_time(agent.traj_start))
        agent.seq += 1
        data = wire.encode(msg)
        events.append({"t": round(t, 9), "kind": "broadcast", "agent": cfg.id, "seq": msg.seq,
                       "bytes": len(data)})
        for rid in order:
            if rid == cfg.id:
                continue
            if bus.loss > 0 and bus_rng.random() < bus.loss:
                events.append({"t": round(t, 9), "kind": "drop", "from": cfg.id, "to": rid, "seq": msg.seq})
                continue
            push(t + bus.delay(bus_rng), DELIVER, rid, data)

    for aid in order:
        broadcast(agents[aid], 0.0)
        cfg = agents[aid].cfg
        first = cfg.global_time(cfg.local_time(0.0) + cfg.phase)
        push(max(first, 0.0), REPLAN, aid, 0)

    n_ticks = int(np.floor(scenario.duration / scenario.tick + 1e-9)) + 1
    push(0.0, TICK, -1, 0)
    times, states, dmin, emin, omin = [], [], [], [], []
    prims = ObstacleField(scenario.obstacles)

    while heap:
        t, kind, aid, _, payload = heapq.heappop(heap)
        if kind == DELIVER:
            agent = agents[aid]
            try:
                msg = wire.decode(payload)
            except wire.WireError as exc:
                events.append({"t": round(t, 9), "kind": "corrupt", "to": aid, "error": str(exc)})
                continue
            if bus.sync and msg.agent_id not in agent.offsets:
                samples = _sync_samples(agent.cfg, agents[msg.agent_id].cfg, t, bus, sync_rng)
                agent.offsets[msg.agent_id] = wire.estimate_offset(samples)
                events.append({"t": round(t, 9), "kind": "sync", "agent": aid, "peer": msg.agent_id,
                               "offset": agent.offsets[msg.agent_id]})
            prev = agent.inbox.get(msg.agent_id)
            if prev is None or msg.seq > prev.seq:
                agent.inbox[msg.agent_id] = msg
            events.append({"t": round(t, 9), "kind": "deliver", "from": msg.agent_id, "to": aid, "seq": msg.seq})
        elif kind == REPLAN:
            agent = agents[aid]
            cfg = agent.cfg
            n = payload
            push(cfg.global_time(cfg.local_time(0.0) + cfg.phase + (n + 1) * cfg.replan_period), REPLAN, aid, n + 1)
            if agent.stopped:
                continue
            kin = agent.kinematics(t)
            if (np.linalg.norm(kin[0] - cfg.goal) < ARRIVE_DIST and np.linalg.norm(kin[1]) < STOP_SPEED
                    and t - agent.traj_start >= agent.traj.total_duration):
                agent.stopped = True
                events.append({"t": round(t, 9), "kind": "settled", "agent": aid})
                continue
            now = cfg.local_time(t)
            peers = [PeerTrajectory(pid, m.trajectory(), m.start - agent.offsets.get(pid, 0.0))
                     for pid, m in sorted(agent.inbox.items())]
            req = PlanRequest(BoundaryCondition(kin[0], kin[1], kin[2]), cfg.goal, cfg.horizon, grid, peers, now,
                              scenario.filter_peers, (agent.traj, cfg.local_time(agent.traj_start)))
            wall = time.perf_counter()
            try:
                res = replan(req, cfg.weights, scenario.options)
            except (PlanFailed, MincoError) as exc:
                replan_times[aid].append(time.perf_counter() - wall)
                events.append({"t": round(t, 9), "kind": "replan_failed", "agent": aid, "error": str(exc)})
                continue
            replan_times[aid].append(time.perf_counter() - wall)
            solver_times[aid].append(res.solver_time)
            agent.traj, agent.traj_start = res.trajectory, t
            ev = {"t": round(t, 9), "kind": "replan", "agent": aid, "peers": res.n_peers, "kappa": res.kappa,
                  "pieces": res.trajectory.n_pieces, "duration": res.trajectory.total_duration,
                  "postcheck": bool(res.postcheck["passed"])}
            ev.update(res.report.as_dict())
            events.append(ev)
            broadcast(agent, t)
        else:
            k = payload
            kin = np.stack([agents[a].kinematics(t) for a in order])
            pos = kin[:, 0]
            times.append(t)
            states.append(kin)
            if len(order) > 1:
                diff = pos[:, None, :] - pos[None, :, :]
                iu = np.triu_indices(len(order), 1)
                dmin.append(float(np.linalg.norm(diff, axis=2)[iu].min()))
                emin.append(float(np.linalg.norm(diff * scale, axis=2)[iu].min()))
            else:
                dmin.append(np.inf)
                emin.append(np.inf)
            omin.append(float(prims.distance(pos).min()))
            done = all(a.stopped for a in agents.values())
            if k + 1 < n_ticks and not done:
                push((k + 1) * scenario.tick, TICK, -1, k + 1)
            else:
                break

    return SimTrace(scenario, events, np.array(times), np.array(states), replan_times, solver_times,
                    np.array(dmin), np.array(emin), np.array(omin))


@dataclass
class AgentMetrics:
    agent: int
    arrived: bool
    trajectory_time: float
    length: float
    int_a2: float
    int_j2: float
    safety_ratio: float
    min_obstacle_distance: float
    final_error: float
    straight_line: float
    replans: int
    failures: int
    solver_time: float  # mean per replan, wall clock

    def row(self, with_time=False):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if not with_time:
            d.pop("solver_time")
        return d


@dataclass
class MetricsTable:
    agents: list
    safety_ratio: float
    min_obstacle_distance: float
    collisions: int

    def mean(self, name):
        vals = [getattr(a, name) for a in self.agents]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def all_arrived(self) -> bool:
        return all(a.arrived for a in self.agents)

    def summary(self) -> dict:
        return {
            "solver_time_ms": 1e3 * self.mean("solver_time"),
            "trajectory_time_s": self.mean("trajectory_time"),
            "length_m": self.mean("length"),
            "int_a2": self.mean("int_a2"),
            "int_j2": self.mean("int_j2"),
            "safety_ratio": self.safety_ratio,
            "min_obstacle_m": self.min_obstacle_distance,
        }


def _trapezoid(y, x):
    if len(x) < 2:
        return 0.0
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def metrics(trace: SimTrace) -> MetricsTable:
    cfgs = trace.scenario.agents
    radii = np.array([a.radius for a in cfgs])
    t = trace.times
    rows = []
    failures = {a.id: 0 for a in cfgs}
    for e in trace.events:
        if e["kind"] == "replan_failed":
            failures[e["agent"]] += 1
    pair_ratio = float(np.min(trace.min_pair_distance)) / (2.0 * float(radii.min())) if len(t) else np.inf
    for j, cfg in enumerate(cfgs):
        st = trace.states[:, j] if len(t) else np.zeros((0, 4, 3))
        err = np.linalg.norm(st[:, 0] - cfg.goal, axis=1)
        speed = np.linalg.norm(st[:, 1], axis=1)
        hit = np.flatnonzero((err <= ARRIVE_DIST) & (speed <= ARRIVE_SPEED))
        arrived = hit.size > 0
        end = int(hit[0]) + 1 if arrived else len(t)
        tt, s = t[:end], st[:end]
        steps = np.linalg.norm(np.diff(s[:, 0], axis=0), axis=1)
        obs = trace.min_obstacle_distance
        rows.append(AgentMetrics(
            agent=cfg.id,
            arrived=bool(arrived),
            trajectory_time=float(tt[-1] - tt[0]) if arrived else float("nan"),
            length=float(steps.sum()),
            int_a2=_trapezoid(np.sum(s[:, 2] ** 2, axis=1), tt),
            int_j2=_trapezoid(np.sum(s[:, 3] ** 2, axis=1), tt),
            safety_ratio=pair_ratio,
            min_obstacle_distance=float(obstacle_distance(trace.scenario.obstacles, st[:, 0]).min())
            if trace.scenario.obstacles and len(t) else float(obs.min()) if len(obs) else np.inf,
            final_error=float(err[-1]) if len(err) else float("nan"),
            straight_line=float(np.linalg.norm(cfg.goal - cfg.start)),
            replans=len(trace.replan_times[cfg.id]),
            failures=failures[cfg.id],
            solver_time=float(np.mean(trace.solver_times[cfg.id])) if trace.solver_times[cfg.id] else 0.0,
        ))
    collisions = 0
    if len(t) and len(cfgs) > 1:
        collisions = int(np.sum(trace.min_pair_distance < 2.0 * radii.min()))
    min_obs = float(np.min(trace.min_obstacle_distance)) if len(t) else np.inf
    if trace.scenario.obstacles and len(t):
        collisions += int(np.sum(trace.min_obstacle_distance < radii.min()))
    return MetricsTable(rows, pair_ratio, min_obs, collisions)


# --- scenario files -------------------------------------------------------

def _weights_from(d, base=None) -> PenaltyWeights:
    base = base or PenaltyWeights()
    if not d:
        return base
    known = {f.name for f in fields(PenaltyWeights)}
    unknown = set(d) - known
    if unknown:
        raise ScenarioInvalid(f"unknown weight keys {sorted(unknown)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return replace(base, **d)


def scenario_from_dict(d: dict) -> Scenario:
    """Build a scenario from the structure of a YAML scenario file."""
    seed = int(d.get("seed", 0))
    rng = np.random.default_rng([seed, 3])
    weights = _weights_from(d.get("weights"))
    bus = BusConfig(**{**{"seed": seed}, **(d.get("bus") or {})})
    skew = float(d.get("clock_skew", 0.0))
    period = float(d.get("replan_period", 0.1))
    horizon = float(d.get("horizon", 7.5))
    agents = []
    for i, a in enumerate(d.get("agents") or []):
        a = dict(a)
        aid = int(a.pop("id", i))
        w = _weights_from(a.pop("weights", None), weights)
        agents.append(AgentConfig(
            id=aid, start=a.pop("start"), goal=a.pop("goal"),
            radius=float(a.pop("radius", d.get("radius", 0.25))),
            skew=float(a.pop("skew", rng.uniform(-skew, skew) if skew else 0.0)),
            drift=float(a.pop("drift", 0.0)),
            replan_period=float(a.pop("replan_period", period)),
            phase=float(a.pop("phase", rng.uniform(0.0, period))),
            weights=w, horizon=float(a.pop("horizon", horizon)),
        ))
        if a:
            raise ScenarioInvalid(f"unknown agent keys {sorted(a)}")
    if not agents:
        raise ScenarioInvalid("scenario has no agents")
    m = d.get("map") or {}
    obstacles = [Primitive.from_line(s) for s in m.get("obstacles", [])]
    rand = m.get("random")
    if rand:
        keep = [a.start for a in agents] + [a.goal for a in agents]
        obstacles += random_obstacles(int(rand["count"]), m["lower"], m["upper"],
                                      np.random.default_rng(int(rand.get("seed", seed))), keep_out=keep)
    lower = np.asarray(m["lower"], dtype=float) if "lower" in m else None
    upper = np.asarray(m["upper"], dtype=float) if "upper" in m else None
    if obstacles and lower is None:
        raise ScenarioInvalid("a map with obstacles needs lower/upper bounds")
    planner = dict(d.get("planner") or {})
    if isinstance(planner.get("lbfgs"), dict):
        planner["lbfgs"] = LbfgsOptions(**planner["lbfgs"])
    try:
        opts = PlannerOptions(**planner)
    except TypeError as exc:
        raise ScenarioInvalid(f"planner options: {exc}") from exc
    return Scenario(agents, bus, float(d.get("duration", 30.0)), float(d.get("tick", 0.01)), obstacles,
                    lower, upper, float(m.get("resolution", 0.1)), float(m.get("inflation", 0.3)),
                    bool(d.get("filter_peers", True)), opts, str(d.get("name", "scenario")))


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise ScenarioInvalid(f"{path}: expected a mapping at the top level")
    sc = scenario_from_dict(d)
    if sc.name == "scenario":
        sc.name = Path(path).stem
    return sc
