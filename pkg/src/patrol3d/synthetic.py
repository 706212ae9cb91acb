"""Procedurally generated maps, graphs, and scenarios for tests and demos."""

from __future__ import annotations

import json
import math

import numpy as np
from shapely.geometry import Point, Polygon, box
from shapely.ops import unary_union

from .graph import Edge, Node, PatrollingGraph
from .terrain import TerrainMap


def flat_grid(size_x: float, size_y: float, spacing: float = 0.5, z: float = 0.0) -> TerrainMap:
    """Open flat rectangle, terrain only, centered at the origin."""
    xs = np.arange(-size_x / 2, size_x / 2 + spacing / 2, spacing)
    ys = np.arange(-size_y / 2, size_y / 2 + spacing / 2, spacing)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])
    return TerrainMap(pts, ["terrain"] * len(pts))


def polygon_map(
    poly: Polygon,
    spacing: float = 0.25,
    wall_spacing: float = 0.25,
    z: float = 0.0,
    wall_height: float = 0.5,
) -> TerrainMap:
    """Interior grid points labeled terrain, densified boundary as walls.

    Wall points are stacked in two z layers so they read as a vertical
    surface to clearance queries from any height.
    """
    minx, miny, maxx, maxy = poly.bounds
    xs = np.arange(minx, maxx + spacing / 2, spacing)
    ys = np.arange(miny, maxy + spacing / 2, spacing)
    pts, labels = [], []
    for x in xs:
        for y in ys:
            if poly.contains(Point(x, y)):
                pts.append((x, y, z))
                labels.append("terrain")
    rings = [poly.exterior, *poly.interiors]
    for ring in rings:
        L = ring.length
        n = max(int(math.ceil(L / wall_spacing)), 4)
        for k in range(n):
            p = ring.interpolate(k * L / n)
            for zz in (z, z + wall_height):
                pts.append((p.x, p.y, zz))
                labels.append("wall")
    if not pts:
        raise ValueError("polygon produced no points; check spacing vs size")
    return TerrainMap(np.array(pts, float), labels)


def corridor_polygon(length: float, width: float) -> Polygon:
    return box(-length / 2, -width / 2, length / 2, width / 2)


def crossroad_polygon(arm_length: float, width: float) -> Polygon:
    h = box(-arm_length, -width / 2, arm_length, width / 2)
    v = box(-width / 2, -arm_length, width / 2, arm_length)
    return unary_union([h, v])


def three_ways_polygon(
    corridor_length: float = 4.0,
    corridor_width: float = 2.2,
    junction_radius: float = 2.2,
    tip_length: float = 2.5,
    tip_width: float = 4.5,
) -> Polygon:
    """Three arms at 120 degrees: a wide junction, one narrow single-lane
    corridor per arm, and a wide turnaround bulb at each tip."""
    parts = [Point(0, 0).buffer(junction_radius, quad_segs=24)]
    for k in range(3):
        ang = math.radians(90 + 120 * k)
        u = np.array([math.cos(ang), math.sin(ang)])
        v = np.array([-u[1], u[0]])

        def rect(a, b, half_w):
            corners = [
                a * u + half_w * v,
                a * u - half_w * v,
                b * u - half_w * v,
                b * u + half_w * v,
            ]
            return Polygon([(c[0], c[1]) for c in corners])

        r1 = junction_radius + corridor_length
        # rectangles overlap a little so the union never leaves a seam of
        # coincident edges between corridor and bulb
        parts.append(rect(0.0, r1 + 0.2, corridor_width / 2))
        parts.append(rect(r1 - 0.2, r1 + tip_length, tip_width / 2))
        # tapered mouth so a robot idling at the corridor exit can still be
        # passed on the wide side
        a, b = r1 - 1.2, r1 + 0.8
        quad = [
            a * u + (corridor_width / 2) * v,
            a * u - (corridor_width / 2) * v,
            b * u - (tip_width / 2) * v,
            b * u + (tip_width / 2) * v,
        ]
        parts.append(Polygon([(c[0], c[1]) for c in quad]))
    return unary_union(parts).buffer(0)


def arm_tip(k: int, dist: float) -> tuple[float, float, float]:
    ang = math.radians(90 + 120 * k)
    return (dist * math.cos(ang), dist * math.sin(ang), 0.0)


# -- graphs -----------------------------------------------------------------


def line_graph(points, visit_radius: float = 0.5) -> PatrollingGraph:
    nodes = [
        Node(i, tuple(float(v) for v in p), visit_radius=visit_radius)
        for i, p in enumerate(points)
    ]
    edges = []
    for i in range(len(points) - 1):
        c = float(np.linalg.norm(np.asarray(points[i + 1], float) - np.asarray(points[i], float)))
        edges.append(Edge(i, i + 1, c))
    return PatrollingGraph(nodes, edges)


def star_graph(center, tips, visit_radius: float = 0.5) -> PatrollingGraph:
    """Hub node 0 with one spoke per tip."""
    nodes = [Node(0, tuple(float(v) for v in center), visit_radius=visit_radius)]
    edges = []
    for i, p in enumerate(tips, start=1):
        nodes.append(Node(i, tuple(float(v) for v in p), visit_radius=visit_radius))
        c = float(np.linalg.norm(np.asarray(p, float) - np.asarray(center, float)))
        edges.append(Edge(0, i, c))
    return PatrollingGraph(nodes, edges)


# -- scenario files ---------------------------------------------------------


def write_scenario(
    path,
    *,
    map_path,
    graph_path=None,
    robots,
    strategy="cc",
    duration_s=600.0,
    tick_s=0.1,
    seed=0,
    link_prob=1.0,
    link_delay_s=0.2,
    params=None,
) -> None:
    doc = {
        "map": str(map_path),
        "robots": [list(map(float, r)) for r in robots],
        "strategy": strategy,
        "duration_s": duration_s,
        "tick_s": tick_s,
        "seed": seed,
        "link_prob": link_prob,
        "link_delay_s": link_delay_s,
        "params": params or {},
    }
    if graph_path is not None:
        doc["graph"] = str(graph_path)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
