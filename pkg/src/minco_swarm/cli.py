"""``bench`` command line: preset batches, scalability sweeps, scenario files.

Exit status is 0 when every safety check passed, 1 when a run collided or
left an agent short of its goal (or, with ``--strict``, logged any failed
replan), and 2 for usage errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path

from . import bench
from .errors import ScenarioInvalid
from .sim import load_scenario, metrics, run

SUMMARY_FORMAT = (
    ("solver_time_ms", "solver time", "{:.3f} ms"),
    ("trajectory_time_s", "trajectory time", "{:.2f} s"),
    ("length_m", "trajectory length", "{:.2f} m"),
    ("int_a2", "int(a^2)", "{:.2f}"),
    ("int_j2", "int(j^2)", "{:.2f}"),
    ("safety_ratio", "safety ratio", "{:.3f}"),
    ("min_obstacle_m", "dist. to obstacles", "{:.3f} m"),
)


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _counts(text):
    try:
        counts = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma separated list of integers") from None
    if not counts or min(counts) < 1 or counts != sorted(counts):
        raise argparse.ArgumentTypeError("agent counts must be positive and ascending")
    return counts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="batch runs of a named preset")
    p.add_argument("preset", choices=bench.PRESETS)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--runs", type=_positive_int, default=10)
    p.add_argument("--kappa", type=_positive_int, help="quadrature samples per piece")
    p.add_argument("--agents", type=_positive_int, help="override the preset agent count")
    p.add_argument("--duration", type=float, help="simulated seconds per run")
    p.add_argument("--out", type=Path, default=Path("bench-out"))
    p.add_argument("--no-plots", action="store_true", help="write CSV only")
    p.add_argument("--strict", action="store_true", help="also fail when any replan was rejected")

    p = sub.add_parser("scale", help="solver time against swarm size")
    p.add_argument("mode", choices=bench.SCALE_MODES)
    p.add_argument("--agents", type=_counts, default=[4, 8, 16, 32], help="ascending, e.g. 4,8,16,32")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--out", type=Path, default=Path("bench-out"))
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("sim", help="run a YAML scenario file")
    p.add_argument("scenario", type=Path)
    p.add_argument("--out", type=Path, help="directory for trace, events and metrics")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--strict", action="store_true")
    return parser


def format_summary(summary: dict) -> str:
    lines = []
    for key, label, fmt in SUMMARY_FORMAT:
        value = summary.get(key)
        if value is None or not math.isfinite(value):
            continue
        lines.append(f"  {label:<20}{fmt.format(value)}")
    for key in ("collisions", "unfinished", "failed_replans"):
        if key in summary:
            lines.append(f"  {key.replace('_', ' '):<20}{summary[key]}")
    return "\n".join(lines)


def agents_csv(table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agent"] + [c for _, c in bench.METRIC_COLUMNS])
    for a in sorted(table.agents, key=lambda a: a.agent):
        w.writerow([a.agent] + [bench.fmt_value(getattr(a, k)) for k, _ in bench.METRIC_COLUMNS])
    return buf.getvalue()


def _verdict(collisions, unfinished, failed, strict) -> int:
    problems = []
    if collisions:
        problems.append(f"{collisions} collision ticks")
    if unfinished:
        problems.append(f"{unfinished} agents short of their goal")
    if strict and failed:
        problems.append(f"{failed} rejected replans")
    if problems:
        print("FAILED: " + ", ".join(problems), file=sys.stderr)
        return 1
    return 0


def cmd_run(args) -> int:
    overrides = {k: v for k, v in (("seed", args.seed), ("kappa", args.kappa), ("agents", args.agents),
                                   ("duration", args.duration)) if v is not None}
    spec = bench.preset(args.preset, **overrides)
    result = bench.run_benchmark(spec, args.runs, args.out, plots=not args.no_plots)
    s = result.summary()
    failed = sum(a.failures for r in result.runs for a in r.table.agents)
    s["failed_replans"] = failed
    print(f"{spec.preset}: {spec.agents} agents, kappa {spec.kappa}, {args.runs} runs, seed {spec.seed}")
    print(format_summary(s))
    print(f"outputs in {args.out}")
    return _verdict(s["collisions"], s["unfinished"], failed, args.strict)


def cmd_scale(args) -> int:
    points = bench.run_scalability(args.mode, args.agents, args.seed, args.duration, args.out,
                                   plots=not args.no_plots)
    print(f"scale-{args.mode}")
    for p in points:
        print(f"  U={p.agents:<4d} mean {1e3 * p.mean:8.3f} ms  p95 {1e3 * p.p95:8.3f} ms  peers {p.peers:6.2f}")
    if len(points) >= 2:
        slope, icpt, r2 = bench.linear_fit([p.agents for p in points], [p.mean for p in points])
        print(f"  linear fit: {1e3 * slope:.4f} ms/agent + {1e3 * icpt:.3f} ms, R^2 {r2:.3f}")
    return 0


def cmd_sim(args) -> int:
    scenario = load_scenario(args.scenario)
    trace = run(scenario)
    table = metrics(trace)
    s = table.summary()
    unfinished = sum(not a.arrived for a in table.agents)
    failed = sum(a.failures for a in table.agents)
    s.update(collisions=table.collisions, unfinished=unfinished, failed_replans=failed)
    print(f"{scenario.name}: {len(scenario.agents)} agents, {trace.times[-1] if len(trace.times) else 0:.2f} s")
    print(format_summary(s))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.csv").write_text(agents_csv(table))
        trace.write_states(args.out / "trace.csv")
        trace.write_events(args.out / "events.jsonl")
        if not args.no_plots:
            from .plotting import plot_paths
            plot_paths(trace, args.out / "paths.png")
        print(f"outputs in {args.out}")
    return _verdict(table.collisions, unfinished, failed, args.strict)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "scale": cmd_scale, "sim": cmd_sim}[args.command]
    try:
        return handler(args)
    except (ScenarioInvalid, FileNotFoundError, ValueError) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
