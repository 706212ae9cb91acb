"""Per-robot distributed state: idleness estimates, team model, conflicts."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .network import Message


class KnowledgeError(Exception):
    pass


class IdlenessVector:
    """Per-node idleness estimate, stored as last-visit times.

    Min-merging idleness values is equivalent to max-merging visit times,
    which keeps synchronization a single elementwise max and avoids
    rewriting the vector every tick.
    """

    def __init__(self, owner_robot: int, node_ids, t0: float = 0.0, priorities=None):
        self.owner_robot = owner_robot
        self.node_ids = tuple(sorted(node_ids))
        self._index = {nid: k for k, nid in enumerate(self.node_ids)}
        self.last_visit = np.full(len(self.node_ids), float(t0))
        if priorities is None:
            self.priorities = np.ones(len(self.node_ids))
        else:
            self.priorities = np.array([priorities[nid] for nid in self.node_ids], float)

    def __len__(self) -> int:
        return len(self.node_ids)

    def has_node(self, node_id: int) -> bool:
        return node_id in self._index

    def idleness(self, node_id: int, t: float) -> float:
        k = self._index[node_id]
        return float(self.priorities[k] * (t - self.last_visit[k]))

    def idleness_all(self, t: float) -> np.ndarray:
        return self.priorities * (t - self.last_visit)

    def zero(self, node_id: int, t: float) -> None:
        k = self._index[node_id]
        if t > self.last_visit[k]:
            self.last_visit[k] = t

    def copy(self) -> "IdlenessVector":
        out = IdlenessVector(self.owner_robot, self.node_ids)
        out.last_visit = self.last_visit.copy()
        out.priorities = self.priorities.copy()
        return out


def synchronize_idleness(local: IdlenessVector, received: IdlenessVector) -> IdlenessVector:
    """Elementwise minimum of idleness (maximum of last-visit times), in place."""
    if len(local) != len(received):
        raise KnowledgeError(
            f"idleness vector length mismatch: {len(local)} vs {len(received)}"
        )
    np.maximum(local.last_visit, received.last_visit, out=local.last_visit)
    return local


@dataclass
class TeamModelEntry:
    robot_id: int
    goal_node: int | None = None
    path: tuple | None = None
    travel_cost: float | None = None
    timestamp: float = -math.inf
    position: tuple | None = None  # last known position, from path messages

    def reset(self) -> None:
        self.goal_node = None
        self.path = None
        self.travel_cost = None
        self.position = None


class TeamModel:
    """Belief about teammate plans: one (goal, path, cost, timestamp) per robot."""

    def __init__(self, robot_ids):
        self.entries: dict[int, TeamModelEntry] = {
            r: TeamModelEntry(r) for r in robot_ids
        }

    def entry(self, robot_id: int) -> TeamModelEntry:
        return self.entries[robot_id]

    def expire(self, t: float, T_exp: float) -> None:
        """Reset every entry strictly older than T_exp; entries stay, zeroed."""
        if T_exp <= 0:
            raise KnowledgeError("T_exp must be > 0")
        for e in self.entries.values():
            if e.goal_node is not None and (t - e.timestamp) > T_exp:
                e.reset()


def expire_entries(model: TeamModel, t: float, T_exp: float) -> TeamModel:
    model.expire(t, T_exp)
    return model


def apply_message(
    model: TeamModel,
    idleness: IdlenessVector,
    msg: Message,
    t: float,
    *,
    apply_idleness: bool = True,
) -> dict:
    """Apply one received broadcast message; returns event flags.

    ``apply_idleness=False`` suppresses all idleness estimate updates
    (No-CC wiring) while still maintaining the team model.
    Messages older than the stored entry timestamp for the same robot are
    ignored (losses plus delay make reordering possible).
    """
    if msg.sender == idleness.owner_robot:
        raise KnowledgeError("a robot never applies its own broadcast")
    events = {"zeroed_nodes": [], "traversability_dirty": False}

    if msg.kind == "idleness":
        if apply_idleness:
            if len(msg.idleness) != len(idleness):
                raise KnowledgeError("idleness payload length mismatch")
            np.maximum(
                idleness.last_visit,
                np.asarray(msg.idleness, float),
                out=idleness.last_visit,
            )
        return events

    if msg.kind in ("reached", "visited", "planned", "selected", "aborted"):
        if msg.node is not None and not idleness.has_node(msg.node):
            warnings.warn(
                f"dropping {msg.kind} message for unknown node {msg.node}",
                stacklevel=2,
            )
            return events

    entry = model.entries.get(msg.sender)
    if entry is None:
        entry = TeamModelEntry(msg.sender)
        model.entries[msg.sender] = entry
    stale = msg.timestamp < entry.timestamp

    if msg.kind == "reached":
        # idleness zeroing is monotone and safe even for reordered messages
        if apply_idleness:
            idleness.zero(msg.node, msg.timestamp)
        events["zeroed_nodes"].append(msg.node)
        if not stale:
            entry.reset()
            entry.timestamp = msg.timestamp
    elif stale and msg.kind != "visited":
        return events  # stale, reordered message
    elif msg.kind == "visited":
        if apply_idleness:
            idleness.zero(msg.node, msg.timestamp)
        events["zeroed_nodes"].append(msg.node)
    elif msg.kind == "planned":
        entry.goal_node = msg.node
        entry.travel_cost = math.inf
        entry.path = None
        entry.timestamp = msg.timestamp
    elif msg.kind == "selected":
        if entry.goal_node != msg.node:
            entry.path = None
        entry.goal_node = msg.node
        entry.travel_cost = msg.cost
        entry.timestamp = msg.timestamp
    elif msg.kind == "path":
        entry.path = msg.path
        entry.travel_cost = msg.cost
        entry.position = msg.position
        entry.timestamp = msg.timestamp
        events["traversability_dirty"] = True
    elif msg.kind == "aborted":
        entry.reset()
        entry.timestamp = msg.timestamp
    else:
        raise KnowledgeError(f"unknown message type {msg.kind!r}")
    return events


def detect_node_conflict(
    self_id: int,
    self_goal: int,
    self_cost: float,
    model: TeamModel,
) -> tuple[bool, int | None]:
    """Node conflict check: the higher-cost robot (ties by higher id) yields.

    Returns (conflict, contending robot id); when conflict is True the
    caller is the loser and must abort.
    """
    if self_goal is None:
        raise KnowledgeError("detect_node_conflict requires a set goal")
    for rid in sorted(model.entries):
        e = model.entries[rid]
        if rid == self_id or e.goal_node != self_goal:
            continue
        other_cost = e.travel_cost if e.travel_cost is not None else math.inf
        if self_cost > other_cost or (self_cost == other_cost and self_id > rid):
            return True, rid
    return False, None
