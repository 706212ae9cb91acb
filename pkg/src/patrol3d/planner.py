"""Metric-level planning: randomized A*, windowed search, replanning sessions."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .params import Params
from .terrain import TraversableMap


class PlannerError(Exception):
    pass


@dataclass(frozen=True)
class Path:
    """Waypoint polyline on the traversable map."""

    waypoints: tuple

    def __post_init__(self):
        wps = tuple(tuple(float(v) for v in p) for p in self.waypoints)
        if len(wps) == 0:
            raise PlannerError("a path needs at least one waypoint")
        object.__setattr__(self, "waypoints", wps)

    @property
    def length(self) -> float:
        pts = np.asarray(self.waypoints)
        if len(pts) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())

    def __len__(self) -> int:
        return len(self.waypoints)


@dataclass(frozen=True)
class PlannerStatus:
    kind: str                     # success | failure | reached
    path: Path | None = None
    cost: float | None = None

    def __post_init__(self):
        if self.kind not in ("success", "failure", "reached"):
            raise PlannerError(f"unknown status {self.kind!r}")
        if self.kind == "success" and (self.path is None or len(self.path) == 0):
            raise PlannerError("success status requires a path")


@dataclass(frozen=True)
class PlannerCommand:
    action: str                   # go | abort
    goal: tuple | None = None
    goal_node: int | None = None

    def __post_init__(self):
        if self.action not in ("go", "abort"):
            raise PlannerError(f"unknown command {self.action!r}")
        if self.action == "go" and self.goal is None:
            raise PlannerError("go command requires a goal position")
        if self.action == "abort" and self.goal is not None:
            raise PlannerError("abort carries no goal")


def mixed_step_cost(
    n_t,
    n_t1,
    goal,
    trav_t1: float,
    trav_bounds: tuple[float, float],
    lambda_z: float,
    lambda_t: float,
    omega2: float = 1.0,
    eps: float = 1e-6,
) -> float:
    """Step cost (d + h + lambda_z |dz|) * omega1 * omega2 with omega1 the
    normalized traversability of the new node mapped into [1, 1+lambda_t]."""
    n_t = np.asarray(n_t, float)
    n_t1 = np.asarray(n_t1, float)
    lo, hi = trav_bounds
    if not (lo <= trav_t1 <= hi):
        raise PlannerError("trav_t1 outside trav_bounds")
    d = float(np.linalg.norm(n_t1 - n_t))
    h = float(np.linalg.norm(np.asarray(goal, float) - n_t1))
    dz = abs(float(n_t1[2] - n_t[2]))
    omega1 = lambda_t * (trav_t1 - lo) / (hi - lo + eps) + 1.0
    return (d + h + lambda_z * dz) * omega1 * omega2


def _project(tmap: TraversableMap, p, radius: float) -> int | None:
    """Nearest traversable point index within ``radius`` of p, else None."""
    p = np.asarray(p, float)
    idxs = tmap.base.tree.query_ball_point(p, radius)
    if not idxs:
        return None
    idxs = np.asarray(idxs)
    ok = idxs[tmap.mask[idxs]]
    if len(ok) == 0:
        return None
    d = np.linalg.norm(tmap.base.points[ok] - p, axis=1)
    return int(ok[np.argmin(d)])


def expansion_budget(tmap: TraversableMap) -> int:
    return max(200, int(50.0 * math.sqrt(len(tmap))))


def randomized_astar(
    start,
    goal,
    tmap: TraversableMap,
    params: Params,
    rng: np.random.Generator,
    *,
    goal_tol: float | None = None,
    omega2=None,
    budget: int | None = None,
) -> Path | None:
    """Randomized best-first search over the traversable map points.

    Each expansion caps the step at the node's clearance (at most
    ``max_step``), samples a handful of children weighted toward cheap
    terrain, and orders the queue by accumulated mixed step cost. Returns
    None when start or goal cannot be projected, the queue empties, or the
    expansion budget runs out.
    """
    if goal_tol is None:
        goal_tol = params.goal_tolerance()
    goal = np.asarray(goal, float)
    start = np.asarray(start, float)

    if np.linalg.norm(goal - start) <= goal_tol:
        return Path((tuple(start),))

    proj_r = 2.0 * params.R_b
    s = _project(tmap, start, proj_r)
    g = _project(tmap, goal, proj_r)
    if s is None or g is None:
        return None
    if budget is None:
        budget = expansion_budget(tmap)

    pts = tmap.base.points
    cost = tmap.cost
    lo, hi = tmap.cost_min, tmap.cost_max
    denom = hi - lo + params.eps_cost
    om2 = omega2
    n = len(pts)

    parent = np.full(n, -2, dtype=np.int64)
    gscore = np.full(n, np.inf)
    closed = np.zeros(n, dtype=bool)
    parent[s] = -1
    gscore[s] = 0.0
    heap = [(0.0, 0, s)]
    seq = 1
    expansions = 0
    accept = None

    if s == g or np.linalg.norm(pts[s] - goal) <= goal_tol:
        accept = s
    while heap and accept is None and expansions < budget:
        f, _, i = heapq.heappop(heap)
        if closed[i]:
            continue
        closed[i] = True
        expansions += 1

        delta = min(tmap.clearance[i], params.max_step)
        nbrs, dists = tmap.base.neighbors_of(i)
        sel = (dists <= delta) & tmap.mask[nbrs] & ~closed[nbrs]
        cand = nbrs[sel]
        if len(cand) == 0:
            continue
        dcand = dists[sel]

        # goal test on freshly generated children; the projected goal index
        # always counts as a hit so tiny tolerances stay solvable
        dg = np.linalg.norm(pts[cand] - goal, axis=1)
        ok = (dg <= goal_tol) | (cand == g)

        k = min(params.max_children, len(cand))
        if ok.any():
            hit = np.flatnonzero(ok)
            pick = hit[np.argmin(dg[hit])]
            children = cand[pick : pick + 1]
            dchild = dcand[pick : pick + 1]
        elif k == len(cand):
            children = cand
            dchild = dcand
        else:
            # weighted sampling without replacement via the exponential race
            keys = rng.exponential(size=len(cand)) * cost[cand]
            pick = np.argpartition(keys, k - 1)[:k]
            children = cand[pick]
            dchild = dcand[pick]

        # batched mixed step cost (distance + goal heuristic + weighted
        # climb, scaled by normalized traversability)
        pj = pts[children]
        h = np.sqrt(((pj - goal) ** 2).sum(axis=1))
        dz = np.abs(pj[:, 2] - pts[i, 2])
        omega1 = params.lambda_t * (cost[children] - lo) / denom + 1.0
        steps = (dchild + h + params.lambda_z * dz) * omega1
        if om2 is not None:
            steps = steps * np.array([om2(int(j)) for j in children])
        new_g = gscore[i] + steps

        if ok.any():
            j = int(children[0])
            parent[j] = i
            gscore[j] = float(new_g[0])
            accept = j
            break
        better = new_g < gscore[children]
        for j, gj in zip(children[better], new_g[better]):
            j = int(j)
            gscore[j] = gj
            parent[j] = i
            heapq.heappush(heap, (float(gj), seq, j))
            seq += 1

    if accept is None:
        return None
    chain = []
    i = accept
    while i != -1:
        chain.append(tuple(pts[i]))
        i = parent[i]
    chain.reverse()
    return Path(tuple(chain))


def _boxed_view(
    tmap: TraversableMap, start, goal, half_cross: float, pad: float
) -> TraversableMap | None:
    """Restrict the map to a rectangular corridor around the start-goal
    segment; None when nothing survives."""
    start = np.asarray(start, float)
    goal = np.asarray(goal, float)
    axis = goal - start
    L = np.linalg.norm(axis)
    if L < 1e-9:
        return tmap
    u = axis / L
    a = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    v = np.cross(u, a)
    v /= np.linalg.norm(v)
    w = np.cross(u, v)
    rel = tmap.base.points - start
    su = rel @ u
    box = (
        (su >= -pad)
        & (su <= L + pad)
        & (np.abs(rel @ v) <= half_cross)
        & (np.abs(rel @ w) <= half_cross)
    )
    mask = tmap.mask & box
    if not mask.any():
        return None
    cost = np.where(box, tmap.cost, np.inf)
    return TraversableMap(tmap.base, mask, cost, tmap.clearance, stamp=tmap.stamp)


def windowed_search(
    start,
    goal,
    map_provider,
    params: Params,
    rng: np.random.Generator,
    *,
    goal_tol: float | None = None,
) -> Path | None:
    """Corridor-first search: a narrow box around the start-goal segment,
    doubled per failed attempt, then one unrestricted attempt.

    ``map_provider`` is either a TraversableMap or a zero-argument callable
    returning the freshest map, queried once per attempt.
    """
    half = 2.0 * params.R_b
    pad = 1.0
    for attempt in range(params.boxed_attempts + 1):
        tmap = map_provider() if callable(map_provider) else map_provider
        if attempt < params.boxed_attempts:
            view = _boxed_view(tmap, start, goal, half, pad)
            half *= 2.0
            if view is None:
                continue
        else:
            view = tmap
        path = randomized_astar(start, goal, view, params, rng, goal_tol=goal_tol)
        if path is not None:
            return path
    return None


def local_replan(
    pose,
    global_path: Path,
    tmap: TraversableMap,
    params: Params,
    rng: np.random.Generator,
) -> tuple[Path | None, int]:
    """Plan from the pose to the first global waypoint at distance >= R_l
    (the goal itself when nearer); returns (path, target waypoint index)."""
    if len(global_path) == 0:
        raise PlannerError("local_replan needs a non-empty global path")
    pose = np.asarray(pose, float)
    wps = np.asarray(global_path.waypoints)
    d = np.linalg.norm(wps - pose, axis=1)
    beyond = np.flatnonzero(d >= params.R_l)
    target_idx = int(beyond[0]) if len(beyond) else len(wps) - 1
    target = wps[target_idx]
    # global waypoints are map points; when the target's own point has been
    # knocked out of the mask (a teammate body or trail sits on it) the path
    # ahead is blocked and the replan must fail rather than slide the target
    # onto a nearby survivor and creep into the obstacle
    ni = tmap.base.nearest_index(target)
    if not tmap.mask[ni] or np.linalg.norm(tmap.base.points[ni] - target) > 1e-6:
        return None, target_idx
    # the target is an exact map point: accept only that point so slack does
    # not accumulate across successive replans
    path = randomized_astar(
        pose, target, tmap, params, rng, goal_tol=1e-9,
    )
    return path, target_idx


class PlannerSession:
    """Continuous planning loop for one robot.

    ``go`` starts a session: up to ``l_max`` initial windowed searches with
    ``T_wait`` pauses, then periodic local replans that track the global
    path. Statuses stream back to the agent; ``abort`` kills the session.
    ``map_provider`` is a zero-argument callable giving the freshest
    traversable map (the engine closes it over current trails).
    """

    def __init__(self, robot_id: int, params: Params, rng: np.random.Generator, map_provider):
        self.robot_id = robot_id
        self.params = params
        self.rng = rng
        self.map_provider = map_provider
        self.phase = "idle"
        self.goal = None
        self.goal_node = None
        self.attempts = 0
        self._next_attempt_t = 0.0
        self._next_replan_t = 0.0
        self.global_path: Path | None = None
        self._route: list[np.ndarray] = []
        self._goal_tol = None

    # -- agent-facing API --------------------------------------------------

    def command(self, cmd: PlannerCommand, t: float, pose) -> list[PlannerStatus]:
        if cmd.action == "abort":
            self._clear()
            return []
        self._clear()
        self.goal = np.asarray(cmd.goal, float)
        self.goal_node = cmd.goal_node
        self.phase = "initial"
        self.attempts = 0
        self._next_attempt_t = t
        return self.step(t, pose)

    def step(self, t: float, pose) -> list[PlannerStatus]:
        events: list[PlannerStatus] = []
        pose = np.asarray(pose, float)
        if self.phase == "idle":
            return events

        if np.linalg.norm(pose - self.goal) <= self._tol():
            events.append(PlannerStatus("reached"))
            self._clear()
            return events

        if self.phase == "initial" and t >= self._next_attempt_t:
            path = windowed_search(
                pose, self.goal, self.map_provider, self.params, self.rng,
                goal_tol=self._tol(),
            )
            self.attempts += 1
            if path is not None:
                self.global_path = path
                self._route = self._forward_from(
                    pose,
                    self._ending_at_goal(
                        [np.asarray(w, float) for w in path.waypoints]
                    ),
                )
                self.phase = "tracking"
                self._next_replan_t = t + self.params.replan_period_s
                events.append(PlannerStatus("success", path=path, cost=self.route_length(pose)))
            elif self.attempts >= self.params.l_max:
                events.append(PlannerStatus("failure"))
                self._clear()
            else:
                # small random stagger keeps symmetric robots from retrying
                # in lockstep forever
                self._next_attempt_t = t + self.params.T_wait * (
                    1.0 + 0.2 * self.rng.random()
                )
            return events

        if self.phase == "tracking" and t >= self._next_replan_t:
            self._next_replan_t = t + self.params.replan_period_s
            tmap = self.map_provider()
            if self._route_blocked(tmap, pose):
                events.append(PlannerStatus("failure"))
                self._clear()
                return events
            local, target_idx = local_replan(
                pose, self.global_path, tmap, self.params, self.rng
            )
            if local is None:
                events.append(PlannerStatus("failure"))
                self._clear()
                return events
            # drop the traversed global prefix so later replans never aim
            # at a waypoint behind the robot
            self.global_path = Path(self.global_path.waypoints[target_idx:])
            tail = list(self.global_path.waypoints[1:])
            # drop the start projection (it may sit behind the robot); the
            # appended goal keeps the route non-empty in degenerate cases
            self._route = self._forward_from(
                pose,
                self._ending_at_goal(
                    [np.asarray(w, float) for w in local.waypoints[1:]]
                    + [np.asarray(w, float) for w in tail]
                ),
            )
            full = Path(tuple(tuple(w) for w in self._route))
            events.append(PlannerStatus("success", path=full, cost=self.route_length(pose)))
        return events

    @staticmethod
    def _forward_from(pose, route: list[np.ndarray]) -> list[np.ndarray]:
        """Drop leading waypoints the pose has effectively passed.

        Planned routes start at the map point nearest the search pose,
        which can sit slightly behind the robot; with frequent replans the
        robot would spend every cycle walking back to it and never make
        progress. A waypoint is dropped when the pose is already at least
        as close to its successor as the waypoint itself is.
        """
        pose = np.asarray(pose, float)
        while len(route) >= 2 and (
            np.linalg.norm(route[1] - pose)
            <= np.linalg.norm(route[1] - route[0]) + 1e-9
        ):
            route.pop(0)
        return route

    # -- engine-facing motion helpers --------------------------------------

    @property
    def active(self) -> bool:
        return self.phase != "idle"

    def route_length(self, pose) -> float:
        pts = [np.asarray(pose, float)] + self._route
        return float(
            sum(np.linalg.norm(b - a) for a, b in zip(pts[:-1], pts[1:]))
        )

    def remaining_route(self) -> list:
        return [w.copy() for w in self._route]

    def route_waypoints(self, pose) -> tuple:
        return tuple(tuple(w) for w in ([np.asarray(pose, float)] + self._route))

    def move(self, pose, dist: float) -> np.ndarray:
        """Advance ``dist`` meters along the remaining route from ``pose``."""
        p = np.asarray(pose, float).copy()
        while dist > 1e-12 and self._route:
            seg = self._route[0] - p
            L = float(np.linalg.norm(seg))
            if L <= dist:
                p = self._route.pop(0).astype(float).copy()
                dist -= L
            else:
                p = p + seg * (dist / L)
                dist = 0.0
        return p

    # -- internals ---------------------------------------------------------

    def _route_blocked(self, tmap, pose) -> bool:
        """True when an upcoming route waypoint (within R_t of travel) has
        been knocked out of the traversable mask by a fresh obstacle.

        Waypoints are map points, so a knocked-out point is detected by an
        exact nearest-point lookup; off-grid points (the appended goal) are
        skipped.
        """
        dist = 0.0
        prev = np.asarray(pose, float)
        for w in self._route:
            dist += float(np.linalg.norm(w - prev))
            prev = w
            if dist > self.params.R_t:
                break
            i = tmap.base.nearest_index(w)
            if (
                np.linalg.norm(tmap.base.points[i] - w) <= 1e-6
                and not tmap.mask[i]
            ):
                return True
        return False

    def _ending_at_goal(self, waypoints: list) -> list:
        """Route always terminates at the exact goal point."""
        if self.goal is None:
            return waypoints
        if not waypoints or np.linalg.norm(waypoints[-1] - self.goal) > 1e-9:
            waypoints = waypoints + [self.goal.copy()]
        return waypoints

    def _tol(self) -> float:
        return self.params.goal_tolerance() if self._goal_tol is None else self._goal_tol

    def _clear(self) -> None:
        self.phase = "idle"
        self.goal = None
        self.goal_node = None
        self.global_path = None
        self._route = []
        self.attempts = 0
