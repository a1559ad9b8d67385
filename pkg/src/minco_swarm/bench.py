"""Benchmark presets, batch runs and scalability sweeps."""
from __future__ import annotations

import contextlib
import csv
import gc
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frontend import random_obstacles
from .penalties import PenaltyWeights
from .optimizer import LbfgsOptions
from .planner import PlannerOptions
from .sim import AgentConfig, BusConfig, MetricsTable, Scenario, metrics, run

log = logging.getLogger(__name__)

SCHEMA = "minco-swarm metrics v1"
PRESETS = ("empty8", "obstacles8", "circle40", "scale-worst", "scale-line", "scale-plane")
SCALE_MODES = ("worst", "line", "plane")

METRIC_COLUMNS = (
    ("arrived", "arrived[bool]"),
    ("trajectory_time", "trajectory_time[s]"),
    ("length", "length[m]"),
    ("int_a2", "int_a2[m2/s3]"),
    ("int_j2", "int_j2[m2/s5]"),
    ("safety_ratio", "safety_ratio[1]"),
    ("min_obstacle_distance", "min_obstacle_distance[m]"),
    ("final_error", "final_error[m]"),
    ("straight_line", "straight_line[m]"),
    ("replans", "replans[count]"),
    ("failures", "failures[count]"),
)


@dataclass
class ScenarioSpec:
    preset: str
    agents: int = 8
    radius: float = 0.25
    v_max: float = 1.7
    a_max: float = 6.0
    j_max: float = 20.0
    kappa: int = 5
    horizon: float = 7.5
    clearance_swarm: float = 0.6
    clearance_obstacle: float = 0.3
    latency: float = 0.0
    jitter: float = 0.0
    loss: float = 0.0
    skew: float = 0.0
    sync: bool = True
    obstacles: int = 0
    duration: float = 40.0
    seed: int = 1
    filter_peers: bool = True
    extent: tuple = (8.0, 8.0, 5.0)
    inflation: float = 0.35
    resolution: float = 0.1
    replan_period: float = 0.1
    weights: dict = field(default_factory=dict)
    rounds: int = 3
    spacing: float = 3.5
    max_iter: int = 40

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.agents < 1:
            raise ValueError("need at least one agent")

    def planner_weights(self) -> PenaltyWeights:
        return PenaltyWeights(v_max=self.v_max, a_max=self.a_max, j_max=self.j_max, kappa=self.kappa,
                              clearance_swarm=self.clearance_swarm, clearance_obstacle=self.clearance_obstacle,
                              **self.weights)

    def planner_options(self) -> PlannerOptions:
        return PlannerOptions(rounds=self.rounds, lbfgs=LbfgsOptions(max_iter=self.max_iter))


def preset(name: str, **overrides) -> ScenarioSpec:
    """Documented parameter sets; keyword overrides win."""
    base = {
        "empty8": dict(agents=8, extent=(8.0, 8.0, 5.0), duration=30.0),
        "obstacles8": dict(agents=8, extent=(20.0, 20.0, 5.0), obstacles=100, duration=45.0, rounds=2, max_iter=30),
        "circle40": dict(agents=40, extent=(25.0, 25.0, 5.0), duration=45.0),
        "scale-worst": dict(agents=8, filter_peers=False, duration=3.0),
        "scale-line": dict(agents=8, duration=3.0),
        "scale-plane": dict(agents=8, duration=3.0),
    }[name]
    base.update(overrides)
    return ScenarioSpec(name, **base)


def _square_ring(n, half):
    """``n`` points spread evenly around the perimeter of a square of side ``2 * half``."""
    per = 8.0 * half
    out = []
    for k in range(n):
        s = (k * per / n + half) % per  # start on a corner
        side, u = divmod(s, 2.0 * half)
        x, y = [(half, half - u), (half - u, -half), (-half, -half + u), (-half + u, half)][int(side)]
        out.append((x, y))
    return np.array(out)


def _layout(spec: ScenarioSpec, run_index: int):
    """Start and goal positions, plus obstacle field and bounds when the preset has one."""
    rng = np.random.default_rng([spec.seed, run_index, 7])
    U = spec.agents
    z = 1.5
    obstacles, lower, upper = [], None, None
    if spec.preset == "empty8":
        xy = _square_ring(U, spec.extent[0] / 2.0)
        starts = np.column_stack([xy, np.full(U, z)])
        goals = np.column_stack([-xy, np.full(U, z)])
    elif spec.preset == "circle40":
        r = spec.extent[0] / 2.0
        ang = 2.0 * np.pi * np.arange(U) / U
        xy = r * np.column_stack([np.cos(ang), np.sin(ang)])
        starts = np.column_stack([xy, np.full(U, z)])
        goals = np.column_stack([-xy, np.full(U, z)])
    elif spec.preset == "obstacles8":
        w, d, h = spec.extent
        ys = np.linspace(-d / 2 + 2.0, d / 2 - 2.0, U)
        starts = np.column_stack([np.full(U, -w / 2 - 2.0), ys, np.full(U, z)])
        goals = np.column_stack([np.full(U, w / 2 + 2.0), ys[::-1], np.full(U, z)])
        lower = np.array([-w / 2 - 3.0, -d / 2 - 1.0, 0.0])
        upper = np.array([w / 2 + 3.0, d / 2 + 1.0, h])
        obstacles = random_obstacles(spec.obstacles, [-w / 2, -d / 2, 0.0], [w / 2, d / 2, h],
                                     np.random.default_rng([spec.seed, run_index, 11]))
    else:
        # line (and worst-case) or plane arrangement, targets 50 m away in a random order
        if spec.preset == "scale-plane":
            cols = int(np.ceil(np.sqrt(U)))
            idx = np.arange(U)
            yz = np.column_stack([spec.spacing * (idx % cols), 1.0 + spec.spacing * (idx // cols)])
        else:
            yz = np.column_stack([spec.spacing * np.arange(U), np.full(U, z)])
        yz[:, 0] -= yz[:, 0].mean()
        starts = np.column_stack([np.zeros(U), yz])
        perm = rng.permutation(U)
        goals = np.column_stack([np.full(U, 50.0), yz[perm]])
    return starts, goals, obstacles, lower, upper


def build_scenario(spec: ScenarioSpec, run_index: int = 0) -> Scenario:
    starts, goals, obstacles, lower, upper = _layout(spec, run_index)
    rng = np.random.default_rng([spec.seed, run_index, 3])
    weights = spec.planner_weights()
    agents = [
        AgentConfig(i, starts[i], goals[i], radius=spec.radius,
                    skew=float(rng.uniform(-spec.skew, spec.skew)) if spec.skew else 0.0,
                    replan_period=spec.replan_period, phase=float(rng.uniform(0.0, spec.replan_period)),
                    weights=weights, horizon=spec.horizon)
        for i in range(spec.agents)
    ]
    bus = BusConfig(spec.latency, spec.jitter, spec.loss, seed=spec.seed * 1000 + run_index, sync=spec.sync)
    return Scenario(agents, bus, spec.duration, 0.01, obstacles, lower, upper, spec.resolution, spec.inflation,
                    spec.filter_peers, spec.planner_options(), f"{spec.preset}-run{run_index}")


@dataclass
class RunResult:
    index: int
    table: MetricsTable
    trace: object
    wall_time: float

    @property
    def ok(self) -> bool:
        return self.table.collisions == 0 and self.table.all_arrived


@dataclass
class BenchResult:
    spec: ScenarioSpec
    runs: list

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.runs)

    def _rows(self):
        return [a for r in self.runs for a in r.table.agents]

    def mean(self, name) -> float:
        vals = [getattr(a, name) for a in self._rows()]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        """Means over agents x runs; safety ratio and obstacle distance are minima."""
        return {
            "solver_time_ms": 1e3 * self.mean_solver_time(),
            "trajectory_time_s": self.mean("trajectory_time"),
            "length_m": self.mean("length"),
            "int_a2": self.mean("int_a2"),
            "int_j2": self.mean("int_j2"),
            "safety_ratio": min(r.table.safety_ratio for r in self.runs),
            "min_obstacle_m": min(r.table.min_obstacle_distance for r in self.runs),
            "collisions": sum(r.table.collisions for r in self.runs),
            "unfinished": sum(not a.arrived for a in self._rows()),
        }

    def mean_solver_time(self) -> float:
        times = [t for r in self.runs for v in r.trace.solver_times.values() for t in v]
        return float(np.mean(times)) if times else float("nan")


def fmt_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def metrics_csv(result: BenchResult) -> str:
    """Per-agent rows sorted by (run, agent) plus one aggregate row.  Wall-clock
    quantities are excluded so the file is reproducible byte for byte."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buf.write(f"# {SCHEMA}\n")
    w.writerow(["preset", "kappa", "run", "agent"] + [c for _, c in METRIC_COLUMNS])
    spec = result.spec
    for r in sorted(result.runs, key=lambda r: r.index):
        for a in sorted(r.table.agents, key=lambda a: a.agent):
            w.writerow([spec.preset, spec.kappa, r.index, a.agent] + [fmt_value(getattr(a, k)) for k, _ in METRIC_COLUMNS])
    s = result.summary()
    agg = {"arrived": s["unfinished"] == 0, "trajectory_time": s["trajectory_time_s"], "length": s["length_m"],
           "int_a2": s["int_a2"], "int_j2": s["int_j2"], "safety_ratio": s["safety_ratio"],
           "min_obstacle_distance": s["min_obstacle_m"], "final_error": result.mean("final_error"),
           "straight_line": result.mean("straight_line"), "replans": sum(a.replans for a in result._rows()),
           "failures": sum(a.failures for a in result._rows())}
    w.writerow([spec.preset, spec.kappa, "all", "all"] + [fmt_value(agg[k]) for k, _ in METRIC_COLUMNS])
    return buf.getvalue()


def timing_csv(result: BenchResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "agent", "replans", "mean_solver_time[ms]", "p95_solver_time[ms]", "mean_replan_time[ms]",
                "run_wall_time[s]"])
    for r in sorted(result.runs, key=lambda r: r.index):
        for aid in sorted(r.trace.solver_times):
            st = np.asarray(r.trace.solver_times[aid]) * 1e3
            rt = np.asarray(r.trace.replan_times[aid]) * 1e3
            w.writerow([r.index, aid, len(rt), f"{st.mean() if st.size else 0:.4f}",
                        f"{np.percentile(st, 95) if st.size else 0:.4f}", f"{rt.mean() if rt.size else 0:.4f}",
                        f"{r.wall_time:.3f}"])
    return buf.getvalue()


@contextlib.contextmanager
def quiet_gc():
    """Keep the cyclic collector out of timed regions, as timeit does."""
    was = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def _timed_run(scenario):
    with quiet_gc():
        return run(scenario)


def _warm_up():
    """Trigger JIT loading outside any timed region."""
    spec = preset("empty8", agents=2, duration=0.3)
    run(build_scenario(spec))


def run_benchmark(spec: ScenarioSpec, runs: int, out_dir=None, plots: bool = True) -> BenchResult:
    if runs < 1:
        raise ValueError("number of runs must be at least 1")
    _warm_up()
    results = []
    for k in range(runs):
        sc = build_scenario(spec, k)
        t0 = time.perf_counter()
        trace = _timed_run(sc)
        wall = time.perf_counter() - t0
        table = metrics(trace)
        results.append(RunResult(k, table, trace, wall))
        log.info("%s run %d: %.1fs wall, safety %.3f, collisions %d, arrived %s", spec.preset, k, wall,
                 table.safety_ratio, table.collisions, table.all_arrived)
    res = BenchResult(spec, results)
    if out_dir is not None:
        write_outputs(res, out_dir, plots)
    return res


def write_outputs(result: BenchResult, out_dir, plots=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result))
    (out / "timing.csv").write_text(timing_csv(result))
    for r in result.runs:
        r.trace.write_states(out / f"trace_{r.index}.csv")
        r.trace.write_events(out / f"events_{r.index}.jsonl")
    if plots:
        from .plotting import plot_paths
        for r in result.runs[:1]:
            plot_paths(r.trace, out / f"paths_{r.index}.png")


@dataclass
class ScalePoint:
    agents: int
    mean: float
    p95: float
    replans: int
    peers: float


def run_scalability(mode: str, counts, seed: int = 1, duration: float = 3.0, out_dir=None, plots=True, **overrides):
    """Mean and 95th percentile per-replan solver time for each swarm size."""
    if mode not in SCALE_MODES:
        raise ValueError(f"mode must be one of {SCALE_MODES}")
    counts = [int(c) for c in counts]
    if counts != sorted(counts) or not counts or counts[0] < 1:
        raise ValueError("agent counts must be positive and ascending")
    _warm_up()
    points = []
    for U in counts:
        spec = preset(f"scale-{mode}", agents=U, seed=seed, duration=duration, **overrides)
        trace = _timed_run(build_scenario(spec))
        times = np.array([t for v in trace.solver_times.values() for t in v])
        peers = [e["peers"] for e in trace.events if e["kind"] == "replan"]
        points.append(ScalePoint(U, float(times.mean()), float(np.percentile(times, 95)), times.size,
                                 float(np.mean(peers)) if peers else 0.0))
        log.info("scale-%s U=%d: %.3f ms mean over %d replans", mode, U, 1e3 * points[-1].mean, times.size)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"scale_{mode}.csv").write_text(scale_csv(points))
        if plots:
            from .plotting import plot_scalability
            plot_scalability({mode: points}, out / f"scale_{mode}.png")
    return points


def scale_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agents[count]", "mean_solver_time[ms]", "p95_solver_time[ms]", "replans[count]", "mean_peers[count]"])
    for p in points:
        w.writerow([p.agents, f"{1e3 * p.mean:.4f}", f"{1e3 * p.p95:.4f}", p.replans, f"{p.peers:.3f}"])
    return buf.getvalue()


def linear_fit(x, y):
    """Least-squares line; returns (slope, intercept, r2).  Needs two or more points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("a fit needs at least two points")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), r2
