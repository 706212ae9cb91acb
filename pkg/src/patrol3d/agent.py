"""Topological-level patrolling agent: goal selection, conflicts, escapes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import PatrollingGraph, neighbors_at_depth
from .knowledge import (
    IdlenessVector,
    TeamModel,
    apply_message,
    detect_node_conflict,
)
from .network import Message
from .params import Params
from .planner import PlannerCommand, PlannerStatus


class AgentError(Exception):
    pass


@dataclass(frozen=True)
class StrategyToggles:
    """Feature switches realizing the three strategy variants."""

    conflict_detection: bool = True
    shared_idleness: bool = True
    idleness_broadcast: bool = True
    use_trails: bool = True


VARIANTS = ("cc", "cwmc", "nocc")


def toggles_for(variant: str) -> StrategyToggles:
    v = variant.lower().replace("-", "").replace("_", "")
    if v == "cc":
        return StrategyToggles()
    if v == "cwmc":
        return StrategyToggles(use_trails=False)
    if v == "nocc":
        return StrategyToggles(
            conflict_detection=False,
            shared_idleness=False,
            idleness_broadcast=False,
            use_trails=True,
        )
    raise AgentError(f"unknown strategy variant {variant!r}")


def build_search_set(
    graph: PatrollingGraph, current_node: int, contended: int | None = None
) -> set[int]:
    """Depth-1 neighborhood of the current node, minus the contended node."""
    out = set(graph.neighbors(current_node))
    if contended is not None:
        out.discard(contended)
    return out


def compute_next_best_node(candidates, idleness: IdlenessVector, t: float) -> int:
    """Candidate with the highest idleness estimate; ties go to the lowest id."""
    cand = sorted(candidates)
    if not cand:
        raise AgentError("empty candidate set")
    return max(cand, key=lambda n: (idleness.idleness(n, t), -n))


def compute_random_node(
    graph: PatrollingGraph,
    current_node: int,
    depth: int,
    rng: np.random.Generator,
    exclude=frozenset(),
    full_graph: bool = False,
) -> int:
    """Uniform draw from the depth-d ring around the current node.

    Empty rings escalate the depth; past the graph diameter (or when
    ``full_graph`` is set) the draw is uniform over all other nodes.
    """
    banned = set(exclude) | {current_node}
    if not full_graph:
        d = max(depth, 1)
        for _ in range(len(graph)):
            ring = sorted(neighbors_at_depth(graph, current_node, d) - banned)
            if ring:
                return int(rng.choice(ring))
            d += 1
    pool = sorted(set(graph.node_ids) - banned)
    if not pool:
        pool = sorted(set(graph.node_ids) - {current_node})
    if not pool:
        raise AgentError("graph has no alternative node to draw")
    return int(rng.choice(pool))


class PatrollingAgent:
    """One robot's decision loop over the patrolling graph.

    ``receive`` folds in teammate broadcasts, ``update`` refreshes the
    condition flags from planner statuses and node entries, ``step`` runs
    the goal-selection control flow and returns broadcasts plus planner
    commands.
    """

    def __init__(
        self,
        robot_id: int,
        graph: PatrollingGraph,
        params: Params,
        toggles: StrategyToggles,
        rng: np.random.Generator,
        robot_ids,
        start_position,
    ):
        self.robot_id = robot_id
        self.graph = graph
        self.params = params
        self.toggles = toggles
        self.rng = rng
        priorities = {n.id: n.priority for n in graph.nodes.values()}
        self.idleness = IdlenessVector(robot_id, graph.node_ids, priorities=priorities)
        self.team = TeamModel([r for r in robot_ids if r != robot_id])
        self.current_node = graph.nearest_node(start_position)
        self.goal_node: int | None = None

        self.is_goal_reached = False
        self.is_node_conflict = False
        self.is_goal_visited = False
        self.is_path_planning_failure = False
        self.is_critical_path_planning_failure = False
        self.is_critical_node_conflict = False
        self.failure_since: float | None = None
        self.conflict_since: float | None = None
        self.contended_node: int | None = None
        self.consecutive_criticals = 0
        self._recover_at = -math.inf

        self.path_cost: float | None = None   # latest planner route cost
        self.last_idln_broadcast = 0.0
        self._dijkstra_cache: dict[int, dict[int, float]] = {}

    # -- message intake ----------------------------------------------------

    def receive(self, messages, t: float) -> None:
        for msg in messages:
            events = apply_message(
                self.team,
                self.idleness,
                msg,
                t,
                apply_idleness=self.toggles.shared_idleness,
            )
            if self.goal_node is not None and self.goal_node in events["zeroed_nodes"]:
                self.is_goal_visited = True

    # -- per-tick flag refresh ---------------------------------------------

    def update(self, t: float, statuses, entered_nodes, pose) -> list[Message]:
        """Refresh condition flags; returns broadcasts emitted this tick."""
        out: list[Message] = []

        for st in statuses:
            if st.kind == "success":
                self.is_path_planning_failure = False
                self.failure_since = None
                self.path_cost = st.cost
                out.append(
                    Message(
                        self.robot_id,
                        t,
                        "path",
                        cost=st.cost,
                        path=st.path.waypoints,
                        position=tuple(float(v) for v in pose),
                    )
                )
            elif st.kind == "failure":
                self.is_path_planning_failure = True
                if self.failure_since is None:
                    self.failure_since = t
            elif st.kind == "reached":
                self.is_goal_reached = True

        self.team.expire(t, self.params.T_exp)

        # node entered along the way: zero own idleness, announce non-goal
        # nodes as visited (the goal itself is announced by the reached path)
        for n in entered_nodes:
            self.idleness.zero(n, t)
            self.current_node = n
            if n != self.goal_node:
                out.append(Message(self.robot_id, t, "visited", node=n))

        if self.toggles.conflict_detection and self.goal_node is not None:
            conflict, rid = detect_node_conflict(
                self.robot_id, self.goal_node, self._current_cost(), self.team
            )
            if conflict:
                if not self.is_node_conflict:
                    self.conflict_since = t
                self.is_node_conflict = True
                self.contended_node = self.goal_node
            else:
                self.is_node_conflict = False
                self.conflict_since = None
        else:
            self.is_node_conflict = False
            self.conflict_since = None

        self.is_critical_path_planning_failure = (
            self.failure_since is not None
            and (t - self.failure_since) >= self.params.T_pcr
        )
        self.is_critical_node_conflict = (
            self.conflict_since is not None
            and (t - self.conflict_since) >= self.params.T_ncr
        )

        if (
            self.toggles.idleness_broadcast
            and (t - self.last_idln_broadcast) >= self.params.T_idln
        ):
            self.last_idln_broadcast = t
            out.append(
                Message(
                    self.robot_id,
                    t,
                    "idleness",
                    idleness=tuple(float(v) for v in self.idleness.last_visit),
                )
            )
        return out

    # -- control flow ------------------------------------------------------

    def step(self, t: float) -> tuple[list[Message], list[PlannerCommand]]:
        msgs: list[Message] = []
        cmds: list[PlannerCommand] = []

        if self.goal_node is None and not self.is_goal_reached:
            self._select_goal(t, msgs, cmds, critical=False)
            return msgs, cmds

        if self.is_goal_reached:
            self.is_goal_reached = False
            if self.goal_node is not None:
                self.current_node = self.goal_node
                self.idleness.zero(self.goal_node, t)
                msgs.append(Message(self.robot_id, t, "reached", node=self.goal_node))
            self.consecutive_criticals = 0
            self._clear_conflict()
            self.is_goal_visited = False
            self._select_goal(t, msgs, cmds, critical=False)
            return msgs, cmds

        critical = self.is_critical_path_planning_failure or self.is_critical_node_conflict
        trouble = (
            self.is_path_planning_failure
            or self.is_goal_visited
            or critical
            or (self.toggles.conflict_detection and self.is_node_conflict)
        )
        if trouble:
            if t < self._recover_at:
                return msgs, cmds
            cmds.append(PlannerCommand("abort"))
            if self.goal_node is not None:
                msgs.append(Message(self.robot_id, t, "aborted", node=self.goal_node))
            if critical:
                self.consecutive_criticals += 1
            else:
                self.consecutive_criticals = 0
            self.is_goal_visited = False
            self.is_path_planning_failure = False
            # back off exponentially while recovery keeps failing so a
            # robot jammed against a teammate does not replan every tick
            self._recover_at = t + min(
                self.params.T_wait * (2.0 ** self.consecutive_criticals), 8.0
            )
            self._select_goal(t, msgs, cmds, critical=critical)
            return msgs, cmds

        msgs.append(
            Message(
                self.robot_id, t, "selected", node=self.goal_node, cost=self._current_cost()
            )
        )
        return msgs, cmds

    def plan_next_goal(self, t: float, critical: bool) -> int:
        contended = self.contended_node
        exclude = {contended} if contended is not None else set()
        if critical:
            depth = 1 + max(self.consecutive_criticals - 1, 0)
            return compute_random_node(
                self.graph,
                self.current_node,
                depth,
                self.rng,
                exclude=exclude,
                full_graph=self.consecutive_criticals >= self.params.d_full,
            )
        candidates = build_search_set(self.graph, self.current_node, contended)
        if not candidates:
            return compute_random_node(
                self.graph, self.current_node, 1, self.rng, exclude=exclude
            )
        return compute_next_best_node(candidates, self.idleness, t)

    # -- internals ---------------------------------------------------------

    def _select_goal(self, t, msgs, cmds, critical: bool) -> None:
        node = self.plan_next_goal(t, critical)
        self.goal_node = node
        self.path_cost = None
        self._clear_conflict()
        msgs.append(Message(self.robot_id, t, "planned", node=node))
        cmds.append(
            PlannerCommand(
                "go",
                goal=tuple(float(v) for v in self.graph.position(node)),
                goal_node=node,
            )
        )

    def _clear_conflict(self) -> None:
        self.is_node_conflict = False
        self.conflict_since = None
        self.contended_node = None

    def _current_cost(self) -> float:
        if self.path_cost is not None:
            return self.path_cost
        if self.goal_node is None:
            return math.inf
        costs = self._dijkstra_cache.get(self.current_node)
        if costs is None:
            costs = self.graph.shortest_costs(self.current_node)
            self._dijkstra_cache[self.current_node] = costs
        return costs.get(self.goal_node, math.inf)
