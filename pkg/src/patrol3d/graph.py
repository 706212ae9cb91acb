"""Patrolling graph: nodes, edges, idleness bookkeeping and graph builders."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class GraphError(Exception):
    pass


class DisconnectedGraphError(GraphError):
    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(
            "patrolling graph is disconnected; components: "
            + "; ".join(str(c) for c in self.components)
        )


@dataclass(frozen=True)
class Node:
    id: int
    position: tuple[float, float, float]
    priority: float = 1.0
    visit_radius: float = 0.5

    def __post_init__(self):
        if self.priority <= 0:
            raise GraphError(f"node {self.id}: priority must be > 0")
        if self.visit_radius <= 0:
            raise GraphError(f"node {self.id}: visit radius must be > 0")


@dataclass(frozen=True)
class Edge:
    i: int
    j: int
    travel_cost: float

    def __post_init__(self):
        if self.i == self.j:
            raise GraphError(f"self-loop edge on node {self.i}")
        if self.travel_cost <= 0:
            raise GraphError(f"edge ({self.i},{self.j}): travel cost must be > 0")

    def key(self) -> tuple[int, int]:
        return (self.i, self.j) if self.i < self.j else (self.j, self.i)


class PatrollingGraph:
    """Undirected connected graph of regions of interest."""

    def __init__(self, nodes: list[Node], edges: list[Edge], require_connected: bool = True):
        self.nodes: dict[int, Node] = {}
        for n in nodes:
            if n.id in self.nodes:
                raise GraphError(f"duplicate node id {n.id}")
            self.nodes[n.id] = n
        self.edges: dict[tuple[int, int], Edge] = {}
        self._adj: dict[int, dict[int, float]] = {i: {} for i in self.nodes}
        for e in edges:
            if e.i not in self.nodes or e.j not in self.nodes:
                raise GraphError(f"edge ({e.i},{e.j}) references unknown node")
            self.edges[e.key()] = e
            self._adj[e.i][e.j] = e.travel_cost
            self._adj[e.j][e.i] = e.travel_cost
        if require_connected:
            comps = self.connected_components()
            if len(self.nodes) == 0:
                raise GraphError("empty graph")
            if len(comps) > 1:
                raise DisconnectedGraphError(comps)

    @property
    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def position(self, node_id: int) -> np.ndarray:
        return np.asarray(self.nodes[node_id].position, dtype=float)

    def neighbors(self, node_id: int) -> dict[int, float]:
        if node_id not in self.nodes:
            raise GraphError(f"unknown node id {node_id}")
        return dict(self._adj[node_id])

    def edge_cost(self, i: int, j: int) -> float:
        key = (i, j) if i < j else (j, i)
        return self.edges[key].travel_cost

    def set_edge_cost(self, i: int, j: int, cost: float) -> None:
        key = (i, j) if i < j else (j, i)
        if key not in self.edges:
            raise GraphError(f"unknown edge ({i},{j})")
        self.edges[key] = Edge(key[0], key[1], cost)
        self._adj[i][j] = cost
        self._adj[j][i] = cost

    def connected_components(self) -> list[set[int]]:
        seen: set[int] = set()
        comps = []
        for start in self.nodes:
            if start in seen:
                continue
            comp = {start}
            queue = deque([start])
            while queue:
                u = queue.popleft()
                for v in self._adj[u]:
                    if v not in comp:
                        comp.add(v)
                        queue.append(v)
            seen |= comp
            comps.append(comp)
        return comps

    def nearest_node(self, position) -> int:
        p = np.asarray(position, dtype=float)
        ids = self.node_ids
        pos = np.array([self.nodes[i].position for i in ids])
        return ids[int(np.argmin(np.linalg.norm(pos - p, axis=1)))]

    def shortest_costs(self, source: int) -> dict[int, float]:
        """Dijkstra over edge travel costs from ``source``."""
        import heapq

        dist = {source: 0.0}
        heap = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, math.inf):
                continue
            for v, c in self._adj[u].items():
                nd = d + c
                if nd < dist.get(v, math.inf):
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        return dist


@dataclass
class NodeIdlenessRecord:
    node_id: int
    last_visit_time: float
    priority: float = 1.0


def instantaneous_idleness(record: NodeIdlenessRecord, t: float) -> float:
    """Priority-weighted time since the last visit."""
    if t < record.last_visit_time:
        raise GraphError(
            f"clock regression: t={t} < last visit {record.last_visit_time}"
        )
    return record.priority * (t - record.last_visit_time)


def graph_average_idleness(graph: PatrollingGraph, per_node_averages) -> float:
    vals = list(per_node_averages)
    if len(vals) != len(graph):
        raise GraphError(
            f"expected {len(graph)} per-node averages, got {len(vals)}"
        )
    return float(sum(vals)) / len(vals)


def window_idleness_stats(samples, window) -> tuple[float, float, float]:
    """(avg, std, max) of time-stamped idleness samples inside ``window``.

    The averages approximate the defining integrals by a Riemann sum at the
    (uniform) sampling period, which for equally spaced samples reduces to
    plain sample statistics.
    """
    t1, t2 = window
    vals = np.array([v for (t, v) in samples if t1 <= t <= t2], dtype=float)
    if vals.size == 0:
        raise GraphError(f"no samples in window [{t1}, {t2}]")
    avg = float(vals.mean())
    std = float(np.sqrt(np.mean((vals - avg) ** 2)))
    return avg, std, float(vals.max())


def neighbors_at_depth(graph: PatrollingGraph, node_id: int, depth: int) -> set[int]:
    """All nodes reachable within ``depth`` edges, excluding the query node."""
    if node_id not in graph.nodes:
        raise GraphError(f"unknown node id {node_id}")
    if depth < 1:
        raise GraphError("depth must be >= 1")
    frontier = {node_id}
    seen = {node_id}
    for _ in range(depth):
        nxt = set()
        for u in frontier:
            for v in graph._adj[u]:
                if v not in seen:
                    nxt.add(v)
        seen |= nxt
        frontier = nxt
        if not frontier:
            break
    seen.discard(node_id)
    return seen


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------

def _segment_hits_map(p_i, p_j, map_tree: cKDTree, clearance: float, step: float) -> bool:
    """Any map point within ``clearance`` of a sample along the segment counts."""
    p_i = np.asarray(p_i, float)
    p_j = np.asarray(p_j, float)
    length = float(np.linalg.norm(p_j - p_i))
    n = max(2, int(math.ceil(length / step)) + 1)
    samples = p_i + np.outer(np.linspace(0.0, 1.0, n), p_j - p_i)
    dists, _ = map_tree.query(samples)
    return bool(np.any(dists < clearance))


def build_from_waypoints(
    points,
    terrain_map,
    planner_probe,
    d_max: float,
    alpha_max: float,
    *,
    priority: float = 1.0,
    visit_radius: float = 0.5,
    clearance: float = 0.47,
    sample_step: float = 0.25,
) -> PatrollingGraph:
    """Build a graph from user waypoints.

    An edge (i, j) is added iff the endpoints are closer than ``d_max``, the
    straight segment between them stays clear of the map, its elevation angle
    is at most ``alpha_max`` and ``planner_probe`` confirms a traversable
    path. The probe returns a path length (edge cost) or None. Isolated
    points are dropped; a disconnected result raises.
    """
    pts = [np.asarray(p, float) for p in points]
    if not pts:
        raise GraphError("no waypoints given")
    if d_max <= 0:
        raise GraphError("d_max must be > 0")
    map_tree = None
    if terrain_map is not None:
        # only obstacle points matter; the segment naturally lies on the ground
        obs = terrain_map.points
        labels = getattr(terrain_map, "labels", None)
        if labels is not None:
            obs = obs[np.asarray(labels) == "wall"]
        if len(obs):
            map_tree = cKDTree(obs)

    edges = []
    degree = [0] * len(pts)
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            delta = pts[j] - pts[i]
            dist = float(np.linalg.norm(delta))
            if dist > d_max or dist == 0.0:
                continue
            horiz = float(np.hypot(delta[0], delta[1]))
            elev = math.atan2(abs(delta[2]), horiz)
            if elev > alpha_max:
                continue
            if map_tree is not None and _segment_hits_map(
                pts[i], pts[j], map_tree, clearance, sample_step
            ):
                continue
            length = planner_probe(pts[i], pts[j])
            if length is None or length is False:
                continue
            cost = float(length) if not isinstance(length, bool) else dist
            edges.append((i, j, max(cost, 1e-9)))
            degree[i] += 1
            degree[j] += 1

    keep = [i for i in range(len(pts)) if degree[i] > 0]
    if len(pts) == 1:
        keep = [0]
    if not keep:
        raise GraphError("no connected waypoints; resulting graph is empty")
    nodes = [
        Node(i, tuple(pts[i]), priority=priority, visit_radius=visit_radius)
        for i in keep
    ]
    kept_edges = [Edge(i, j, c) for (i, j, c) in edges]
    return PatrollingGraph(nodes, kept_edges)


def _resample_polyline(poses: np.ndarray, step: float) -> np.ndarray:
    if len(poses) == 1:
        return poses.copy()
    seg = np.linalg.norm(np.diff(poses, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0.0:
        return poses[:1].copy()
    targets = np.arange(0.0, total + step / 2, step)
    out = np.empty((len(targets), 3))
    for k, s in enumerate(targets):
        idx = int(np.searchsorted(cum, s, side="right")) - 1
        idx = min(idx, len(seg) - 1)
        frac = (s - cum[idx]) / seg[idx] if seg[idx] > 0 else 0.0
        out[k] = poses[idx] + frac * (poses[idx + 1] - poses[idx])
    return out


def build_from_trajectories(
    trajectories,
    sample_step: float,
    voxel_size: float,
    *,
    priority: float = 1.0,
    visit_radius: float = 0.5,
    max_link_iters: int = 20,
) -> PatrollingGraph:
    """Build a graph automatically from recorded robot trajectories.

    Poses are uniformly subsampled along arc length (orientation discarded),
    voxel filtered, turned into one node per surviving point, and connected
    by a fixed-radius search. Remaining connected components are linked by an
    iterative radius search with a growing radius until a single component
    remains.
    """
    clouds = []
    for traj in trajectories:
        arr = np.asarray([p[:3] for p in traj], dtype=float)
        if arr.size == 0:
            continue
        clouds.append(_resample_polyline(arr, sample_step))
    if not clouds:
        raise GraphError("no trajectory poses given")
    pts = np.vstack(clouds)

    # voxel filter: one representative (centroid) per occupied voxel
    keys = np.floor(pts / voxel_size).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    n_vox = inverse.max() + 1
    centers = np.zeros((n_vox, 3))
    counts = np.bincount(inverse, minlength=n_vox).astype(float)
    for d in range(3):
        centers[:, d] = np.bincount(inverse, weights=pts[:, d], minlength=n_vox) / counts
    order = np.lexsort((centers[:, 2], centers[:, 1], centers[:, 0]))
    centers = centers[order]

    nodes = [
        Node(i, tuple(centers[i]), priority=priority, visit_radius=visit_radius)
        for i in range(len(centers))
    ]
    if len(centers) == 1:
        return PatrollingGraph(nodes, [])

    tree = cKDTree(centers)
    radius = 2.0 * voxel_size
    edge_set: dict[tuple[int, int], float] = {}
    for i, j in tree.query_pairs(radius):
        key = (min(i, j), max(i, j))
        edge_set[key] = float(np.linalg.norm(centers[i] - centers[j]))

    def components() -> list[set[int]]:
        g = PatrollingGraph(
            nodes,
            [Edge(i, j, max(c, 1e-9)) for (i, j), c in edge_set.items()],
            require_connected=False,
        )
        return g.connected_components()

    comps = components()
    iters = 0
    while len(comps) > 1 and iters < max_link_iters:
        radius *= 1.5
        iters += 1
        label = np.empty(len(centers), dtype=int)
        for ci, comp in enumerate(comps):
            for i in comp:
                label[i] = ci
        # link the closest cross-component pair within the grown radius
        linked = False
        for i, j in sorted(tree.query_pairs(radius)):
            if label[i] != label[j]:
                key = (min(i, j), max(i, j))
                if key not in edge_set:
                    edge_set[key] = float(np.linalg.norm(centers[i] - centers[j]))
                    linked = True
        if linked:
            comps = components()
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)
    return PatrollingGraph(
        nodes, [Edge(i, j, max(c, 1e-9)) for (i, j), c in edge_set.items()]
    )


# ---------------------------------------------------------------------------
# graph file format: "NODE <id> <x> <y> <z> <w> <Rv>" / "EDGE <i> <j> [cost]"
# ---------------------------------------------------------------------------

def save_graph(graph: PatrollingGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write("# patrolling graph (units: meters)\n")
        for i in graph.node_ids:
            n = graph.nodes[i]
            x, y, z = n.position
            fh.write(f"NODE {n.id} {x:.6f} {y:.6f} {z:.6f} {n.priority:.6f} {n.visit_radius:.6f}\n")
        for key in sorted(graph.edges):
            e = graph.edges[key]
            fh.write(f"EDGE {e.i} {e.j} {e.travel_cost:.6f}\n")


def load_graph(path, require_connected: bool = True) -> PatrollingGraph:
    nodes: list[Node] = []
    raw_edges: list[tuple[int, int, float | None]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            kind = parts[0].upper()
            try:
                if kind == "NODE":
                    nid = int(parts[1])
                    x, y, z = (float(v) for v in parts[2:5])
                    w = float(parts[5]) if len(parts) > 5 else 1.0
                    rv = float(parts[6]) if len(parts) > 6 else 0.5
                    nodes.append(Node(nid, (x, y, z), priority=w, visit_radius=rv))
                elif kind == "EDGE":
                    i, j = int(parts[1]), int(parts[2])
                    cost = float(parts[3]) if len(parts) > 3 else None
                    raw_edges.append((i, j, cost))
                else:
                    raise GraphError(f"{path}:{lineno}: unknown record {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                raise GraphError(f"{path}:{lineno}: malformed record: {line!r}") from exc
    by_id = {n.id: n for n in nodes}
    edges = []
    for i, j, cost in raw_edges:
        if cost is None:
            # no stored cost: seed with the straight-line estimate; the
            # planner refreshes it with real path lengths at runtime
            cost = float(
                np.linalg.norm(np.asarray(by_id[i].position) - np.asarray(by_id[j].position))
            )
        edges.append(Edge(i, j, cost))
    return PatrollingGraph(nodes, edges, require_connected=require_connected)
