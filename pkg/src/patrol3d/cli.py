"""Command line entry point: run scenarios, build graphs, compare variants."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .agent import VARIANTS
from .engine import Engine, EngineError, InvariantError, ScenarioError, load_scenario
from .graph import (
    DisconnectedGraphError,
    GraphError,
    build_from_trajectories,
    build_from_waypoints,
    save_graph,
)
from .params import Params
from .planner import randomized_astar
from .terrain import TerrainError, build_traversable_map, load_map

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DISCONNECTED = 3
EXIT_INVARIANT = 4


def _parse_params(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ScenarioError(f"--param expects KEY=VAL, got {item!r}")
        key, val = item.split("=", 1)
        try:
            out[key] = int(val)
        except ValueError:
            try:
                out[key] = float(val)
            except ValueError:
                raise ScenarioError(f"--param {key}: non-numeric value {val!r}")
    return out


def _apply_overrides(sc, args) -> None:
    if args.strategy:
        sc.strategy = args.strategy
    if args.seed is not None:
        sc.seed = args.seed
    if args.duration is not None:
        sc.duration_s = args.duration
    if args.tick is not None:
        sc.tick_s = args.tick
    sc.params.update(_parse_params(args.param))
    sc.validate()


def _out_dir(args) -> Path:
    out = Path(args.out or "patrol3d_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    _apply_overrides(sc, args)
    out = _out_dir(args)
    log: list[str] = []
    eng = Engine.from_scenario(sc, message_log=log)
    metrics = eng.run(sc.duration_s, sc.tick_s)
    csv_path = out / f"metrics_{sc.strategy}_{sc.seed}.csv"
    metrics.write_csv(csv_path)
    (out / f"messages_{sc.strategy}_{sc.seed}.log").write_text("\n".join(log) + "\n")
    s = metrics.summary()
    overrides = " ".join(f"{k}={v}" for k, v in sorted(sc.params.items()))
    print(f"# strategy={sc.strategy} seed={sc.seed} duration={sc.duration_s}s {overrides}")
    print(f"final_avg_idleness={s['final_avg_idleness']:.3f}")
    print(f"final_max_idleness={s['final_max_idleness']:.3f}")
    print(f"interference_total={s['interference_total']}")
    print(f"deadlock={int(s['deadlock'])}")
    print(f"visits={s['visit_count']}")
    print(f"csv={csv_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    sc = load_scenario(args.scenario)
    _apply_overrides(sc, args)
    seeds = [int(s) for s in (args.seeds or str(sc.seed)).split(",")]
    out = _out_dir(args)
    rows = []
    for variant in VARIANTS:
        cells = []
        for seed in seeds:
            sc.strategy = variant
            sc.seed = seed
            metrics = Engine.from_scenario(sc).run(sc.duration_s, sc.tick_s)
            metrics.write_csv(out / f"metrics_{variant}_{seed}.csv")
            cells.append(metrics.summary())
        rows.append(
            (
                variant,
                float(np.mean([c["mean_avg_idleness"] for c in cells])),
                float(np.max([c["final_max_idleness"] for c in cells])),
                int(np.sum([c["interference_total"] for c in cells])),
                int(np.sum([c["deadlock"] for c in cells])),
            )
        )
    header = f"{'variant':8s} {'avg_idl':>10s} {'max_idl':>10s} {'interf':>8s} {'deadlocks':>9s}"
    print(header)
    lines = [header]
    for v, ai, mi, itf, dl in rows:
        line = f"{v:8s} {ai:10.3f} {mi:10.3f} {itf:8d} {dl:9d}"
        print(line)
        lines.append(line)
    (out / "compare.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    params = Params().with_overrides(_parse_params(args.param))
    terrain = load_map(args.map)
    terrain.prepare(eps_neigh=params.eps_neigh, neighbor_radius=params.max_step)

    if args.waypoints:
        points = _read_points(args.waypoints)
        tmap = build_traversable_map(
            terrain, [], -1, points[0],
            exclusion=params.exclusion, D_s=params.D_s, R_t=params.R_t,
        )
        rng = np.random.default_rng(args.seed or 0)

        def probe(a, b):
            path = randomized_astar(a, b, tmap, params, rng)
            return None if path is None else path.length

        graph = build_from_waypoints(
            points, terrain, probe, args.d_max, math.radians(args.alpha_max),
            clearance=params.R_b,
        )
    elif args.trajectory:
        trajectories = [_read_points(p) for p in args.trajectory]
        graph = build_from_trajectories(trajectories)
    else:
        raise ScenarioError("build-graph needs --waypoints or --trajectory")

    save_graph(graph, args.out_graph)
    print(f"graph: {len(graph)} nodes, {len(graph.edges)} edges, connected")
    print(f"written: {args.out_graph}")
    return EXIT_OK


def _read_points(path) -> np.ndarray:
    pts = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()[:3]]
            if len(vals) != 3:
                raise ScenarioError(f"{path}: expected 'x y z' lines")
            pts.append(vals)
    if not pts:
        raise ScenarioError(f"{path}: no points")
    return np.array(pts)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="patrol3d",
        description="Multi-robot patrolling simulator on 3D point-cloud terrain",
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--strategy", choices=VARIANTS)
        p.add_argument("--seed", type=int)
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--duration", type=float, help="simulated seconds")
        p.add_argument("--tick", type=float, help="tick length in seconds")
        p.add_argument("--param", action="append", metavar="KEY=VAL")
        p.add_argument("--out", help="output directory")

    p_run = sub.add_parser("run", help="run one scenario, write metrics CSV")
    p_run.add_argument("--scenario", required=True)
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_cmp = sub.add_parser("compare", help="run cc/cwmc/nocc over a seed list")
    p_cmp.add_argument("--scenario", required=True)
    common(p_cmp)
    p_cmp.set_defaults(fn=cmd_compare)

    p_bg = sub.add_parser("build-graph", help="build a patrol graph from inputs")
    p_bg.add_argument("--map", required=True)
    p_bg.add_argument("--waypoints", help="file of candidate node positions")
    p_bg.add_argument("--trajectory", action="append", help="robot trajectory file")
    p_bg.add_argument("--out-graph", required=True)
    p_bg.add_argument("--d-max", type=float, default=5.0, dest="d_max",
                      help="max edge length in meters")
    p_bg.add_argument("--alpha-max", type=float, default=30.0, dest="alpha_max",
                      help="max edge elevation angle in degrees")
    p_bg.add_argument("--seed", type=int)
    p_bg.add_argument("--param", action="append", metavar="KEY=VAL")
    p_bg.set_defaults(fn=cmd_build_graph)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DisconnectedGraphError as exc:
        print(f"error: graph is disconnected: {exc}", file=sys.stderr)
        return EXIT_DISCONNECTED
    except InvariantError as exc:
        print(f"error: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ScenarioError, TerrainError, GraphError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
