"""Distributed multi-robot patrolling simulator on 3D point-cloud terrain."""

from .params import Params
from .graph import Edge, Node, PatrollingGraph
from .terrain import TerrainMap, TraversableMap, FutureTrail
from .planner import Path, PlannerCommand, PlannerSession, PlannerStatus
from .agent import PatrollingAgent, StrategyToggles, toggles_for
from .engine import Engine, MetricsRecord, Scenario, load_scenario, run_scenario

__version__ = "0.1.0"

__all__ = [
    "Params",
    "Edge",
    "Node",
    "PatrollingGraph",
    "TerrainMap",
    "TraversableMap",
    "FutureTrail",
    "Path",
    "PlannerCommand",
    "PlannerSession",
    "PlannerStatus",
    "PatrollingAgent",
    "StrategyToggles",
    "toggles_for",
    "Engine",
    "MetricsRecord",
    "Scenario",
    "load_scenario",
    "run_scenario",
]
