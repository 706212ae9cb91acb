"""Simulated lossy broadcast medium with per-link Bernoulli delivery."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

MESSAGE_KINDS = (
    "reached",
    "visited",
    "planned",
    "selected",
    "path",
    "aborted",
    "idleness",
)


class NetworkError(Exception):
    pass


@dataclass(frozen=True)
class Message:
    sender: int
    timestamp: float
    kind: str
    node: int | None = None
    cost: float | None = None
    path: tuple | None = None          # tuple of (x, y, z) waypoints
    position: tuple | None = None      # sender position (path messages)
    idleness: tuple | None = None      # last-visit-time vector payload

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise NetworkError(f"unknown message kind {self.kind!r}")
        if self.kind in ("reached", "visited", "planned", "aborted") and self.node is None:
            raise NetworkError(f"{self.kind} message requires a node id")
        if self.kind == "selected" and (self.node is None or self.cost is None):
            raise NetworkError("selected message requires (node, cost)")
        if self.kind == "path" and (self.path is None or self.cost is None):
            raise NetworkError("path message requires (path, cost)")
        if self.kind == "idleness" and self.idleness is None:
            raise NetworkError("idleness message requires the idleness vector")


class LinkModel:
    """Symmetric per-pair delivery probabilities plus a fixed delay."""

    def __init__(self, delivery_prob, delay: float = 0.2, n_robots: int | None = None):
        if np.isscalar(delivery_prob):
            if n_robots is None:
                raise NetworkError("scalar delivery_prob requires n_robots")
            p = np.full((n_robots, n_robots), float(delivery_prob))
        else:
            p = np.asarray(delivery_prob, dtype=float)
            if p.ndim != 2 or p.shape[0] != p.shape[1]:
                raise NetworkError("delivery_prob must be a square matrix")
            if not np.allclose(p, p.T):
                raise NetworkError("delivery_prob must be symmetric")
        if np.any(p < 0) or np.any(p > 1):
            raise NetworkError("delivery probabilities must be in [0, 1]")
        self.prob = p
        self.delay = float(delay)

    @property
    def n_robots(self) -> int:
        return self.prob.shape[0]


class InFlightQueue:
    """Messages awaiting delivery, drained strictly by the engine clock."""

    def __init__(self):
        self._heap: list[tuple[float, int, int, Message]] = []
        self._seq = 0

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, deliver_at: float, receiver: int, msg: Message) -> None:
        heapq.heappush(self._heap, (deliver_at, self._seq, receiver, msg))
        self._seq += 1

    def drain(self, t: float) -> list[tuple[int, Message]]:
        out = []
        while self._heap and self._heap[0][0] <= t:
            _, _, receiver, msg = heapq.heappop(self._heap)
            out.append((receiver, msg))
        return out


def broadcast(
    link: LinkModel,
    queue: InFlightQueue,
    msg: Message,
    t: float,
    rng: np.random.Generator,
) -> int:
    """One independent Bernoulli draw per receiver; returns deliveries enqueued.

    The delivered count is engine-side instrumentation only: agents get no
    acknowledgments.
    """
    delivered = 0
    for receiver in range(link.n_robots):
        if receiver == msg.sender:
            continue
        p = link.prob[msg.sender, receiver]
        if rng.random() < p:
            queue.push(t + link.delay, receiver, msg)
            delivered += 1
    return delivered


def drain(queue: InFlightQueue, t: float) -> list[tuple[int, Message]]:
    return queue.drain(t)


def format_log_line(t: float, msg: Message) -> str:
    """One tab-separated log line: t sender kind node cost (payloads by length)."""
    node = msg.node if msg.node is not None else -1
    if msg.kind == "path":
        cost = f"{msg.cost:.3f}" if msg.cost is not None else ""
        extra = f"len={len(msg.path)}"
    elif msg.kind == "idleness":
        cost, extra = "", f"len={len(msg.idleness)}"
    else:
        cost = f"{msg.cost:.3f}" if msg.cost is not None else ""
        extra = ""
    cols = [f"{t:.3f}", str(msg.sender), msg.kind, str(node), cost]
    if extra:
        cols.append(extra)
    return "\t".join(cols)
