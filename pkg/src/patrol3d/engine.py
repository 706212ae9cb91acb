"""Deterministic discrete-time simulation loop, metrics, scenario plumbing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from . import network
from .agent import PatrollingAgent, StrategyToggles, toggles_for
from .graph import PatrollingGraph, load_graph
from .params import Params
from .planner import PlannerCommand, PlannerSession
from .terrain import TerrainMap, build_traversable_map, future_trail, load_map

WINDOW_S = 600.0           # moving window for idleness statistics
RECORD_PERIOD_S = 5.0      # 0.2 Hz recording
INTERFERENCE_PERIOD_S = 0.5  # 2 Hz interference checks
DEADLOCK_SAMPLE_S = 1.0


class EngineError(Exception):
    pass


class ScenarioError(EngineError):
    pass


class InvariantError(EngineError):
    pass


# -- metrics ----------------------------------------------------------------

CSV_HEADER = "t,node,event,robot,value"
EVENTS = ("visit", "interference", "avg_idl", "std_idl", "max_idl", "deadlock")


class MetricsRecord:
    """Flat event log: visits, interference, windowed idleness, deadlocks."""

    def __init__(self):
        self.rows: list[tuple[float, int, str, int, float]] = []
        self.deadlock = False
        self.interference_total = 0

    def add(self, t: float, node: int, event: str, robot: int, value: float) -> None:
        if event not in EVENTS:
            raise EngineError(f"unknown metrics event {event!r}")
        self.rows.append((t, node, event, robot, value))

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(CSV_HEADER + "\n")
            for t, node, event, robot, value in self.rows:
                fh.write(f"{t:.3f},{node},{event},{robot},{value:.6f}\n")

    def visits(self, node: int | None = None) -> list[tuple[float, int, int]]:
        return [
            (t, n, r)
            for t, n, ev, r, _ in self.rows
            if ev == "visit" and (node is None or n == node)
        ]

    def series(self, event: str) -> list[tuple[float, float]]:
        return [(t, v) for t, n, ev, r, v in self.rows if ev == event]

    def summary(self) -> dict:
        avg = self.series("avg_idl")
        mx = self.series("max_idl")
        return {
            "final_avg_idleness": avg[-1][1] if avg else float("nan"),
            "final_max_idleness": mx[-1][1] if mx else float("nan"),
            "mean_avg_idleness": float(np.mean([v for _, v in avg])) if avg else float("nan"),
            "interference_total": self.interference_total,
            "deadlock": self.deadlock,
            "visit_count": len(self.visits()),
        }


# -- scenario ---------------------------------------------------------------


@dataclass
class Scenario:
    map: str
    graph: str | None
    robots: list
    strategy: str = "cc"
    duration_s: float = 600.0
    tick_s: float = 0.1
    seed: int = 0
    link_prob: float = 1.0
    link_delay_s: float = 0.2
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.tick_s <= 0:
            raise ScenarioError("tick_s must be > 0")
        if self.duration_s <= 0:
            raise ScenarioError("duration_s must be > 0")
        if len(self.robots) < 1:
            raise ScenarioError("at least one robot start is required")
        if not (0.0 <= self.link_prob <= 1.0):
            raise ScenarioError("link_prob must be in [0, 1]")
        starts = np.asarray(self.robots, float)
        if starts.ndim != 2 or starts.shape[1] != 3:
            raise ScenarioError("robots must be a list of [x, y, z] starts")
        p = Params().with_overrides(self.params)
        for i in range(len(starts)):
            for j in range(i + 1, len(starts)):
                if np.linalg.norm(starts[i] - starts[j]) <= p.D_s:
                    raise ScenarioError(
                        f"robot starts {i} and {j} closer than the safety distance"
                    )


def load_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ScenarioError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid scenario JSON in {path}: {exc}") from exc
    known = {
        "map", "graph", "robots", "strategy", "duration_s", "tick_s",
        "seed", "link_prob", "link_delay_s", "params",
    }
    bad = set(raw) - known
    if bad:
        raise ScenarioError(f"unknown scenario keys: {sorted(bad)}")
    if "map" not in raw or "robots" not in raw:
        raise ScenarioError("scenario requires at least 'map' and 'robots'")
    base = FsPath(path).parent
    sc = Scenario(
        map=str(raw["map"]),
        graph=raw.get("graph"),
        robots=raw["robots"],
        strategy=raw.get("strategy", "cc"),
        duration_s=float(raw.get("duration_s", 600.0)),
        tick_s=float(raw.get("tick_s", 0.1)),
        seed=int(raw.get("seed", 0)),
        link_prob=float(raw.get("link_prob", 1.0)),
        link_delay_s=float(raw.get("link_delay_s", 0.2)),
        params=dict(raw.get("params", {})),
    )
    # paths are resolved relative to the scenario file
    if not FsPath(sc.map).is_absolute():
        sc.map = str(base / sc.map)
    if sc.graph is not None and not FsPath(sc.graph).is_absolute():
        sc.graph = str(base / sc.graph)
    sc.validate()
    return sc


# -- engine -----------------------------------------------------------------


class Engine:
    """Single owner of the clock, robot states, queues, and metrics.

    Two modes share the loop: the full patrolling mode (agents pick graph
    nodes) and a planner-only mode where each robot cycles through a fixed
    list of metric waypoints. The latter isolates the metric coordination
    layer for stress scenarios.
    """

    def __init__(
        self,
        terrain: TerrainMap,
        graph: PatrollingGraph | None,
        starts,
        params: Params,
        *,
        strategy: str = "cc",
        seed: int = 0,
        link_prob: float = 1.0,
        link_delay_s: float = 0.2,
        goal_scripts=None,
        retry_delay_s: float = 1.0,
        use_trails: bool | None = None,
        message_log=None,
    ):
        self.terrain = terrain
        self.graph = graph
        self.params = params
        self.positions = [np.asarray(p, float).copy() for p in starts]
        self.n = len(self.positions)
        self.toggles = toggles_for(strategy)
        if use_trails is not None:
            self.toggles = StrategyToggles(
                conflict_detection=self.toggles.conflict_detection,
                shared_idleness=self.toggles.shared_idleness,
                idleness_broadcast=self.toggles.idleness_broadcast,
                use_trails=use_trails,
            )
        self.seed = seed
        self.message_log = message_log

        self.net_rng = np.random.default_rng(np.random.SeedSequence((seed, 999983)))
        self.link = network.LinkModel(link_prob, delay=link_delay_s, n_robots=self.n)
        self.queue = network.InFlightQueue()

        self.sessions: list[PlannerSession] = []
        self.agents: list[PatrollingAgent] | None = None
        rids = list(range(self.n))
        for rid in rids:
            ss = np.random.SeedSequence((seed, rid))
            a_seed, p_seed = ss.spawn(2)
            self.sessions.append(
                PlannerSession(
                    rid,
                    params,
                    np.random.default_rng(p_seed),
                    self._map_provider(rid),
                )
            )
            if goal_scripts is None:
                if graph is None:
                    raise EngineError("patrolling mode requires a graph")
                if self.agents is None:
                    self.agents = []
                self.agents.append(
                    PatrollingAgent(
                        rid,
                        graph,
                        params,
                        self.toggles,
                        np.random.default_rng(a_seed),
                        rids,
                        self.positions[rid],
                    )
                )
        self.goal_scripts = goal_scripts
        self.script_idx = [0] * self.n
        self.retry_delay_s = retry_delay_s
        self._retry_at = [0.0] * self.n
        self._retry_fails = [0] * self.n

        self.pending: list[list] = [[] for _ in range(self.n)]
        self.inbox: list[list] = [[] for _ in range(self.n)]
        self.entered: list[list[int]] = [[] for _ in range(self.n)]
        self.inside: list[set[int]] = [set() for _ in range(self.n)]

        self.metrics = MetricsRecord()
        self.t = 0.0
        self._tick_index = 0
        if graph is not None:
            self.true_last_visit = {nid: 0.0 for nid in graph.node_ids}
            self._idl_samples = {nid: [] for nid in graph.node_ids}
        self._pos_history: list[tuple[float, np.ndarray]] = []
        self._deadlock_latched = False
        self._yield_target: list[np.ndarray | None] = [None] * self.n
        self._static_mask: np.ndarray | None = None

    @classmethod
    def from_scenario(cls, sc: Scenario, *, message_log=None) -> "Engine":
        params = Params().with_overrides(sc.params)
        try:
            terrain = load_map(sc.map)
        except FileNotFoundError as exc:
            raise ScenarioError(f"map file not found: {sc.map}") from exc
        terrain.prepare(
            eps_neigh=params.eps_neigh, neighbor_radius=params.max_step
        )
        graph = None
        if sc.graph is not None:
            try:
                graph = load_graph(sc.graph)
            except FileNotFoundError as exc:
                raise ScenarioError(f"graph file not found: {sc.graph}") from exc
        eng = cls(
            terrain,
            graph,
            sc.robots,
            params,
            strategy=sc.strategy,
            seed=sc.seed,
            link_prob=sc.link_prob,
            link_delay_s=sc.link_delay_s,
            message_log=message_log,
        )
        eng.duration_s = sc.duration_s
        eng.tick_s = sc.tick_s
        return eng

    # -- traversable map construction ---------------------------------------

    def _map_provider(self, rid: int):
        def provider():
            trails = []
            if self.toggles.use_trails:
                if self.agents is not None:
                    team = self.agents[rid].team
                    for other, e in team.entries.items():
                        if e.path and e.position is not None:
                            trails.append(
                                future_trail(
                                    e.position, e.path, self.params.R_c,
                                    self.params.R_b, other,
                                )
                            )
                else:
                    # planner-only mode: teammates' true remaining routes
                    for other in range(self.n):
                        if other == rid:
                            continue
                        route = self.sessions[other].remaining_route()
                        trails.append(
                            future_trail(
                                self.positions[other], route, self.params.R_c,
                                self.params.R_b, other,
                            )
                        )
            dyn = []
            for other in range(self.n):
                if other == rid:
                    continue
                d = np.linalg.norm(self.positions[other] - self.positions[rid])
                if d <= self.params.sense_range + self.params.R_b:
                    dyn.append((self.positions[other].copy(), self.params.R_b))
            return build_traversable_map(
                self.terrain,
                trails,
                rid,
                self.positions[rid],
                exclusion=self.params.exclusion,
                D_s=self.params.D_s,
                R_t=self.params.R_t,
                dynamic_obstacles=dyn,
                stamp=self._tick_index,
            )

        return provider

    # -- one tick -----------------------------------------------------------

    def step(self, dt: float) -> None:
        if dt <= 0:
            raise EngineError("dt must be > 0")
        t = self.t

        # 1. deliveries
        for receiver, msg in self.queue.drain(t):
            self.inbox[receiver].append(msg)
        if self.agents is not None:
            for rid in range(self.n):
                if self.inbox[rid]:
                    self.agents[rid].receive(self.inbox[rid], t)
                self.inbox[rid].clear()

        # 2. planner sessions
        statuses = []
        for rid in range(self.n):
            ev = self.pending[rid] + self.sessions[rid].step(t, self.positions[rid])
            self.pending[rid] = []
            statuses.append(ev)

        # 3/4. decisions and commands
        if self.agents is not None:
            for rid in range(self.n):
                agent = self.agents[rid]
                msgs = agent.update(t, statuses[rid], self.entered[rid], self.positions[rid])
                self.entered[rid] = []
                step_msgs, cmds = agent.step(t)
                for m in msgs + step_msgs:
                    self._broadcast(m, t)
                for cmd in cmds:
                    self.pending[rid].extend(
                        self.sessions[rid].command(cmd, t, self.positions[rid])
                    )
        else:
            for rid in range(self.n):
                for st in statuses[rid]:
                    if st.kind == "reached":
                        self.script_idx[rid] = (self.script_idx[rid] + 1) % len(
                            self.goal_scripts[rid]
                        )
                        self._retry_at[rid] = t
                        self._retry_fails[rid] = 0
                    elif st.kind == "failure":
                        # back off exponentially while blocked to keep
                        # jammed runs cheap; reset on the next success
                        delay = self.retry_delay_s * min(
                            2 ** self._retry_fails[rid], 8.0
                        )
                        self._retry_fails[rid] += 1
                        self._retry_at[rid] = t + delay
                if (
                    not self.sessions[rid].active
                    and self._yield_target[rid] is None
                    and t >= self._retry_at[rid]
                ):
                    goal = self.goal_scripts[rid][self.script_idx[rid]]
                    cmd = PlannerCommand("go", goal=tuple(float(v) for v in goal))
                    self.pending[rid].extend(
                        self.sessions[rid].command(cmd, t, self.positions[rid])
                    )

        # 4b. cooperative yielding: a stopped robot that can see it is parked
        # on a teammate's intended route steps aside to the nearest clear
        # point; without route knowledge the robot has no way to notice it is
        # in the way and simply stays put
        if self.toggles.use_trails:
            for rid in range(self.n):
                if self.sessions[rid].active:
                    self._yield_target[rid] = None
                    continue
                if self._yield_target[rid] is None:
                    if self._has_pending_goal(rid) and self._blocking_known_route(rid):
                        self._yield_target[rid] = self._pick_yield_target(rid)
                tgt = self._yield_target[rid]
                if tgt is not None:
                    step = self.params.v_max * dt
                    delta = tgt - self.positions[rid]
                    dlen = float(np.linalg.norm(delta))
                    if dlen <= step:
                        self.positions[rid] = tgt.copy()
                        self._yield_target[rid] = None
                    else:
                        nxt = self.positions[rid] + delta * (step / dlen)
                        near = min(
                            (
                                float(np.linalg.norm(self.positions[o] - nxt))
                                for o in range(self.n)
                                if o != rid
                            ),
                            default=float("inf"),
                        )
                        if near >= self.params.D_s:
                            self.positions[rid] = nxt

        # 5. motion
        for rid in range(self.n):
            sess = self.sessions[rid]
            if sess.active:
                before = self.positions[rid].copy()
                self.positions[rid] = sess.move(before, self.params.v_max * dt)
                moved = np.linalg.norm(self.positions[rid] - before)
                if moved > self.params.v_max * dt + 1e-9:
                    raise InvariantError(f"robot {rid} teleported {moved:.4f} m")

        # 6. visit detection
        if self.graph is not None:
            for rid in range(self.n):
                inside_now = set()
                for nid in self.graph.node_ids:
                    node = self.graph.nodes[nid]
                    if (
                        np.linalg.norm(self.positions[rid] - node.position)
                        <= node.visit_radius
                    ):
                        inside_now.add(nid)
                for nid in sorted(inside_now - self.inside[rid]):
                    true_idl = (t + dt) - self.true_last_visit[nid]
                    self.metrics.add(t + dt, nid, "visit", rid, true_idl)
                    self.true_last_visit[nid] = t + dt
                    self.entered[rid].append(nid)
                self.inside[rid] = inside_now

        self._tick_index += 1
        self.t = round(self._tick_index * dt, 9)
        self._sample_metrics(dt)

    # -- cooperative yielding ------------------------------------------------

    def _known_routes(self, rid: int) -> list[tuple[np.ndarray, list]]:
        """Teammate (position, remaining route) pairs as known to robot rid."""
        routes = []
        if self.agents is not None:
            team = self.agents[rid].team
            for other, e in team.entries.items():
                if other == rid or e.position is None:
                    continue
                pos = np.asarray(e.position, float)
                route = [np.asarray(w, float) for w in (e.path or [])]
                if not route and e.goal_node is not None and self.graph is not None:
                    # teammate is between plans; assume it still wants the
                    # straight line toward its announced goal so a mutual
                    # stand-off is recognized as blocking too
                    b = np.asarray(self.graph.nodes[e.goal_node].position, float)
                    n = max(int(np.linalg.norm(b - pos) / 0.5), 1)
                    route = [pos + (b - pos) * (k / n) for k in range(1, n + 1)]
                routes.append((pos, route))
        else:
            for other in range(self.n):
                if other == rid:
                    continue
                routes.append(
                    (self.positions[other], self.sessions[other].remaining_route())
                )
        return routes

    def _blocking_known_route(self, rid: int) -> bool:
        """True when this robot's body intrudes on a teammate's known route."""
        kill = self.params.R_b + self.params.exclusion + 0.25
        me = self.positions[rid]
        for _, route in self._known_routes(rid):
            for w in route:
                if np.linalg.norm(np.asarray(w, float) - me) < kill:
                    return True
        return False

    def _static_traversable_mask(self) -> np.ndarray:
        if self._static_mask is None:
            m = build_traversable_map(
                self.terrain,
                [],
                -1,
                np.zeros(3),
                exclusion=self.params.exclusion,
                D_s=self.params.D_s,
                R_t=self.params.R_t,
                dynamic_obstacles=[],
                stamp=-1,
            )
            self._static_mask = m.mask
        return self._static_mask

    def _pick_yield_target(self, rid: int) -> np.ndarray | None:
        """Nearest statically traversable point that is clear of every known
        teammate route and reachable by a straight walk."""
        mask = self._static_traversable_mask()
        me = self.positions[rid]
        pts = self.terrain.points
        d_me = np.linalg.norm(pts - me, axis=1)
        cand = np.where(mask & (d_me <= 3.0) & (d_me >= 0.3))[0]
        if len(cand) == 0:
            return None
        clear = self.params.R_b + self.params.exclusion + 0.35
        ok = np.ones(len(cand), bool)
        for pos, route in self._known_routes(rid):
            for w in [pos, *route]:
                ok &= (
                    np.linalg.norm(pts[cand] - np.asarray(w, float), axis=1) >= clear
                )
        cand = cand[ok]
        for i in cand[np.argsort(d_me[cand])]:
            if self._line_clear(me, pts[i], mask):
                return pts[i].copy()
        return None

    def _line_clear(self, a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> bool:
        """Straight segment stays on the statically traversable grid."""
        L = float(np.linalg.norm(b - a))
        n = max(int(math.ceil(L / 0.2)), 1)
        pts = self.terrain.points
        for k in range(1, n):
            s = a + (b - a) * (k / n)
            i = self.terrain.nearest_index(s)
            if not mask[i] or np.linalg.norm(pts[i] - s) > 0.25:
                return False
        return True

    def _is_obstructed(self, rid: int) -> bool:
        """True when the robot has somewhere to go but no live route."""
        if self.sessions[rid].active:
            return False
        if self.agents is not None:
            return self.agents[rid].goal_node is not None
        return self._has_pending_goal(rid)

    def _broadcast(self, msg, t: float) -> None:
        network.broadcast(self.link, self.queue, msg, t, self.net_rng)
        if self.message_log is not None:
            self.message_log.append(network.format_log_line(t, msg))

    # -- metrics sampling ----------------------------------------------------

    def _sample_metrics(self, dt: float) -> None:
        t = self.t
        k = self._tick_index

        every_intf = max(1, round(INTERFERENCE_PERIOD_S / dt))
        if k % every_intf == 0:
            # a pair interferes when the bodies are closer than the safety
            # distance, or when one robot wants to move but is held routeless
            # inside the range at which a teammate invalidates its paths
            # a teammate's body plus its trail (cropped at R_c) excludes
            # points out to R_c + R_b + exclusion, and routes are checked
            # R_t ahead, so blocked robots can stand off that far apart
            block_range = (
                self.params.D_s
                + self.params.R_t
                + self.params.R_c
                + self.params.R_b
                + self.params.exclusion
            )
            for i in range(self.n):
                for j in range(i + 1, self.n):
                    d = float(np.linalg.norm(self.positions[i] - self.positions[j]))
                    if d < self.params.D_s or (
                        d < block_range
                        and (self._is_obstructed(i) or self._is_obstructed(j))
                    ):
                        self.metrics.interference_total += 1

        every_rec = max(1, round(RECORD_PERIOD_S / dt))
        if k % every_rec == 0:
            self.metrics.add(t, -1, "interference", -1, self.metrics.interference_total)
            if self.graph is not None:
                lo = t - WINDOW_S
                means, stds, maxes = [], [], []
                for nid in self.graph.node_ids:
                    node = self.graph.nodes[nid]
                    idl = node.priority * (t - self.true_last_visit[nid])
                    samples = self._idl_samples[nid]
                    samples.append((t, idl))
                    while samples and samples[0][0] < lo:
                        samples.pop(0)
                    vals = np.array([v for _, v in samples])
                    means.append(vals.mean())
                    stds.append(vals.std())
                    maxes.append(vals.max())
                self.metrics.add(t, -1, "avg_idl", -1, float(np.mean(means)))
                self.metrics.add(t, -1, "std_idl", -1, float(np.mean(stds)))
                self.metrics.add(t, -1, "max_idl", -1, float(np.max(maxes)))

        every_dl = max(1, round(DEADLOCK_SAMPLE_S / dt))
        if k % every_dl == 0:
            self._pos_history.append((t, np.array(self.positions)))
            lo = t - self.params.deadlock_window_s
            while len(self._pos_history) > 1 and self._pos_history[1][0] <= lo:
                self._pos_history.pop(0)
            if self._pos_history[0][0] <= lo and self.detect_deadlock():
                if not self._deadlock_latched:
                    self._deadlock_latched = True
                    self.metrics.deadlock = True
                    self.metrics.add(t, -1, "deadlock", -1, 1.0)

    def _has_pending_goal(self, rid: int) -> bool:
        if self.agents is not None:
            return self.agents[rid].goal_node is not None
        return True  # scripted robots always have a target

    def detect_deadlock(self) -> bool:
        """True iff every robot with a pending goal barely moved over the
        trailing window (team-level: one progressing robot clears the flag)."""
        old = self._pos_history[0][1]
        new = self._pos_history[-1][1]
        pending = [r for r in range(self.n) if self._has_pending_goal(r)]
        if not pending:
            return False
        disp = np.linalg.norm(new[pending] - old[pending], axis=1)
        return bool(np.all(disp < self.params.deadlock_eps_d))

    # -- full run -------------------------------------------------------------

    def run(self, duration_s: float | None = None, tick_s: float | None = None) -> MetricsRecord:
        duration = duration_s if duration_s is not None else getattr(self, "duration_s", 600.0)
        dt = tick_s if tick_s is not None else getattr(self, "tick_s", self.params.tick_s)
        n_ticks = int(round(duration / dt))
        for _ in range(n_ticks):
            self.step(dt)
        return self.metrics


def run_scenario(sc: Scenario, *, message_log=None) -> MetricsRecord:
    eng = Engine.from_scenario(sc, message_log=message_log)
    return eng.run(sc.duration_s, sc.tick_s)
