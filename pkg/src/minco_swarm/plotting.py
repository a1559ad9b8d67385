"""Figures for benchmark reports.  Rendering goes to files via the Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle, Rectangle  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _obstacle_patch(prim):
    cx, cy = prim.center[0], prim.center[1]
    if prim.kind == "cylinder":
        return Circle((cx, cy), prim.size[0] / 2.0, color="0.35", lw=0)
    return Rectangle((cx - prim.size[0] / 2.0, cy - prim.size[1] / 2.0), prim.size[0], prim.size[1],
                     color="0.55", lw=0)


def plot_paths(trace, path):
    """Top view of executed paths with starts, goals and obstacles."""
    sc = trace.scenario
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for prim in sc.obstacles:
            ax.add_patch(_obstacle_patch(prim))
        cmap = plt.get_cmap("viridis", max(len(sc.agents), 2))
        for j, cfg in enumerate(sc.agents):
            xy = trace.states[:, j, 0, :2]
            ax.plot(xy[:, 0], xy[:, 1], color=cmap(j), lw=1.0)
            ax.plot(*cfg.start[:2], "o", color=cmap(j), ms=3)
            ax.plot(*cfg.goal[:2], "x", color=cmap(j), ms=4)
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_title(sc.name)
        fig.savefig(path)
        plt.close(fig)


def plot_scalability(series: dict, path):
    """Mean per-replan solver time against agent count, one line per mode."""
    markers = {"worst": "s", "line": "o", "plane": "^"}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for mode, points in series.items():
            U = np.array([p.agents for p in points])
            ms = 1e3 * np.array([p.mean for p in points])
            ax.plot(U, ms, marker=markers.get(mode, "o"), lw=1.0, ms=4, label=mode)
        ax.set_xlabel("agents")
        ax.set_ylabel("solver time per replan [ms]")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
