"""Decentralized spatial-temporal trajectory planning for quadrotor swarms.

Each agent parameterizes its trajectory as a MINCO quintic spline (waypoints
plus durations), penalizes dynamic limits, obstacle clearance and peer
separation by quadrature, and solves the result with L-BFGS.  Agents share
plans over a simulated broadcast bus.
"""
from .errors import (
    ClockSkew, CrcMismatch, DegenerateDirection, MalformedMessage, MincoError, NonPositiveDuration, NoPath,
    OutOfDomain, PlanFailed, ScenarioInvalid, ShapeMismatch, SingularSystem, TruncatedMessage, VersionMismatch,
    WireError,
)
from .minco import BoundaryCondition, MincoMap, PiecewisePolynomial, evaluate, propagate_gradient, solve_mapping
from .optimizer import LbfgsOptions, SolveReport, minimize
from .penalties import PenaltyWeights
from .planner import PeerTrajectory, PlannerOptions, PlanRequest, PlanResult, SwarmObjective, replan

__version__ = "0.1.0"

__all__ = [
    "BoundaryCondition", "ClockSkew", "CrcMismatch", "DegenerateDirection", "LbfgsOptions", "MalformedMessage",
    "MincoError", "MincoMap", "NoPath", "NonPositiveDuration", "OutOfDomain", "PeerTrajectory", "PenaltyWeights",
    "PiecewisePolynomial", "PlanFailed", "PlanRequest", "PlanResult", "PlannerOptions", "ScenarioInvalid",
    "ShapeMismatch", "SingularSystem", "SolveReport", "SwarmObjective", "TruncatedMessage", "VersionMismatch",
    "WireError", "evaluate", "minimize", "propagate_gradient", "replan", "solve_mapping",
]
