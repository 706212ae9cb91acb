"""Labeled point-cloud terrain, traversability weights, trails, clearance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

LABELS = ("terrain", "ramp", "surmountable_obstacle", "wall")

# label weights in the traversability product (walls never enter the map)
W_L = {"terrain": 1.0, "ramp": 1.5, "surmountable_obstacle": 2.0}

WALL_ANGLE_DEG = 60.0
RAMP_ANGLE_DEG = 20.0
STEP_HEIGHT = 0.15        # max height of a surmountable obstacle
GROUND_RADIUS = 1.0       # radius of the local ground estimate
CLUSTER_RADIUS = 0.5      # radius used to check a low obstacle is low everywhere


class TerrainError(Exception):
    pass


class TerrainMap:
    """Immutable labeled point cloud with precomputed per-point weights.

    ``prepare`` builds everything that does not depend on teammates: the
    spatial index, distance to the nearest wall, density and roughness
    weights, and a fixed-radius neighbor structure reused by the planner.
    """

    def __init__(self, points, labels=None):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise TerrainError("map needs a non-empty (n, 3) point array")
        if labels is None:
            self.labels = None
        else:
            self.labels = np.asarray(labels, dtype=object)
            if len(self.labels) != len(self.points):
                raise TerrainError("labels length mismatch")
            bad = set(self.labels) - set(LABELS)
            if bad:
                raise TerrainError(f"unknown labels: {sorted(bad)}")
        self.tree = cKDTree(self.points)
        self._prepared = False

    def __len__(self) -> int:
        return len(self.points)

    # -- segmentation ------------------------------------------------------

    def segment(self, k_nn: int = 12) -> "TerrainMap":
        """Label points from local plane-fit normals, in place.

        wall if the normal deviates from vertical by more than 60 degrees,
        ramp in (20, 60], terrain otherwise. Wall-labeled points that sit
        low over the local ground, together with all their wall neighbors,
        become surmountable obstacles.
        """
        n = len(self.points)
        if n < k_nn:
            raise TerrainError(f"segmentation needs at least {k_nn} points, got {n}")
        _, idx = self.tree.query(self.points, k=k_nn)
        neigh = self.points[idx]                              # (n, k, 3)
        centered = neigh - neigh.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered)
        _, vecs = np.linalg.eigh(cov)
        normals = vecs[:, :, 0]                               # smallest eigenvector
        angle = np.degrees(np.arccos(np.clip(np.abs(normals[:, 2]), 0.0, 1.0)))

        labels = np.empty(n, dtype=object)
        labels[:] = "terrain"
        labels[angle > RAMP_ANGLE_DEG] = "ramp"
        labels[angle > WALL_ANGLE_DEG] = "wall"

        wall_idx = np.flatnonzero(labels == "wall")
        if len(wall_idx):
            # height over a robust local ground level (low percentile of
            # neighboring z); a point qualifies as surmountable only if no
            # nearby wall point is tall, so real walls keep their label
            ground_n = self.tree.query_ball_point(self.points[wall_idx], GROUND_RADIUS)
            height = np.array(
                [
                    self.points[i, 2] - np.percentile(self.points[nb, 2], 10)
                    for i, nb in zip(wall_idx, ground_n)
                ]
            )
            low = dict(zip(wall_idx.tolist(), (height <= STEP_HEIGHT).tolist()))
            wall_tree = cKDTree(self.points[wall_idx])
            near = wall_tree.query_ball_point(self.points[wall_idx], CLUSTER_RADIUS)
            for row, nb_rows in enumerate(near):
                i = wall_idx[row]
                if low[i] and all(low[wall_idx[r]] for r in nb_rows):
                    labels[i] = "surmountable_obstacle"

        self.labels = labels
        self._prepared = False
        return self

    # -- static precomputation ---------------------------------------------

    def prepare(self, eps_neigh: float = 0.3, neighbor_radius: float = 0.5) -> "TerrainMap":
        """Precompute weights and neighbor lists; requires labels."""
        if self.labels is None:
            raise TerrainError("segment the map before prepare()")
        pts = self.points
        n = len(pts)

        wall_mask = self.labels == "wall"
        self.wall_mask = wall_mask
        if wall_mask.any():
            wall_tree = cKDTree(pts[wall_mask])
            self.static_clearance, _ = wall_tree.query(pts)
            self.wall_tree = wall_tree
        else:
            self.static_clearance = np.full(n, np.inf)
            self.wall_tree = None

        counts = np.array(
            self.tree.query_ball_point(pts, eps_neigh, return_length=True), dtype=float
        )
        counts -= 1.0  # the point itself is not its own neighbor
        self.n_ref = max(float(np.median(counts)), 1.0)
        self.w_dn = np.maximum(0.0, 1.0 - counts / self.n_ref)

        self.w_rg = np.array(
            [
                _roughness(pts[self.tree.query_ball_point(pts[i], eps_neigh)], eps_neigh)
                for i in range(n)
            ]
        )

        self.w_l = np.array([W_L.get(lab, np.inf) for lab in self.labels])

        # CSR fixed-radius adjacency shared by every planner instance
        pairs = self.tree.query_pairs(neighbor_radius, output_type="ndarray")
        if len(pairs):
            src = np.concatenate([pairs[:, 0], pairs[:, 1]])
            dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
            order = np.argsort(src, kind="stable")
            src, dst = src[order], dst[order]
            dist = np.linalg.norm(pts[src] - pts[dst], axis=1)
        else:
            src = dst = np.empty(0, dtype=int)
            dist = np.empty(0)
        self.neigh_indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=self.neigh_indptr[1:])
        self.neigh_indices = dst
        self.neigh_dists = dist
        self.neighbor_radius = float(neighbor_radius)
        self.eps_neigh = float(eps_neigh)
        self._prepared = True
        return self

    def neighbors_of(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.neigh_indptr[i], self.neigh_indptr[i + 1]
        return self.neigh_indices[a:b], self.neigh_dists[a:b]

    def nearest_index(self, p) -> int:
        return int(self.tree.query(np.asarray(p, float))[1])

    def density_weight(self, p, eps: float | None = None) -> float:
        """w_Dn = max(0, 1 - n_eps / n_ref); sparse regions cost more."""
        if eps is None:
            eps = self.eps_neigh
        if eps <= 0:
            raise TerrainError("eps must be > 0")
        n_eps = self.tree.query_ball_point(np.asarray(p, float), eps, return_length=True)
        n_ref = getattr(self, "n_ref", None)
        if n_ref is None:
            raise TerrainError("prepare() the map before density queries")
        return max(0.0, 1.0 - n_eps / n_ref)

    def roughness_weight(self, p, eps: float | None = None) -> float:
        if eps is None:
            eps = self.eps_neigh
        idx = self.tree.query_ball_point(np.asarray(p, float), eps)
        return _roughness(self.points[idx], eps)


def _roughness(neigh: np.ndarray, eps: float) -> float:
    """Mean |distance| of >1 sigma outliers from the least-squares plane.

    Fewer than 3 neighbors cannot define a plane; return the conservative
    maximum 1.0 so isolated points stay expensive.
    """
    if len(neigh) < 3:
        return 1.0
    centered = neigh - neigh.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    resid = np.abs(centered @ vt[-1])
    sigma = resid.std()
    if sigma == 0.0:
        return 0.0
    outliers = resid[resid > sigma]
    if len(outliers) == 0:
        return 0.0
    return float(min(outliers.mean() / eps, 1.0))


def traversability_cost(w_l: float, w_cl: float, w_dn: float, w_rg: float) -> float:
    """Point cost as the product w_L (1+w_Cl)(1+w_Dn)(1+w_Rg)."""
    if w_l <= 0 or w_cl < 0 or w_dn < 0 or w_rg < 0:
        raise TerrainError("weights must be nonnegative with w_l > 0")
    return w_l * (1.0 + w_cl) * (1.0 + w_dn) * (1.0 + w_rg)


def clearance_penalty(gamma: float, D_s: float) -> float:
    """Clearance gamma mapped to the additive cost term max(0, (D_s-gamma)/D_s)."""
    return max(0.0, (D_s - gamma) / D_s)


# -- future trails ---------------------------------------------------------


@dataclass(frozen=True)
class FutureTrail:
    """Swept region a teammate is about to occupy: balls along its path."""

    robot_id: int
    centers: np.ndarray      # (m, 3), first center is the robot position
    radius: float

    def __post_init__(self):
        c = np.asarray(self.centers, float).reshape(-1, 3)
        object.__setattr__(self, "centers", c)
        if len(c) == 0:
            raise TerrainError("a trail needs at least one ball")
        if self.radius <= 0:
            raise TerrainError("trail radius must be > 0")


def future_trail(position, path, R_c: float, R_b: float, robot_id: int = -1) -> FutureTrail:
    """Balls of radius R_b sampled along ``path`` while inside B(position, R_c).

    Samples are at most R_b/2 apart starting at the robot position; sampling
    stops at the first sample leaving the crop ball. ``path`` None or empty
    degenerates to the single bounding ball at the robot position.
    """
    if R_c <= 0 or R_b <= 0:
        raise TerrainError("R_c and R_b must be > 0")
    p = np.asarray(position, float)
    if path is None:
        return FutureTrail(robot_id, p[None, :], R_b)
    wps = np.asarray(path, float).reshape(-1, 3)
    if len(wps) == 0:
        return FutureTrail(robot_id, p[None, :], R_b)
    poly = np.vstack([p[None, :], wps])
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    total = float(seg.sum())
    if total == 0.0:
        return FutureTrail(robot_id, p[None, :], R_b)
    step = R_b / 2.0
    s_vals = np.arange(0.0, total + step / 2, step)
    s_vals = np.minimum(s_vals, total)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    centers = [p]
    for s in s_vals[1:]:
        k = int(np.searchsorted(cum, s, side="right")) - 1
        k = min(k, len(seg) - 1)
        frac = (s - cum[k]) / seg[k] if seg[k] > 0 else 0.0
        q = poly[k] + frac * (poly[k + 1] - poly[k])
        if np.linalg.norm(q - p) > R_c:
            break
        centers.append(q)
    return FutureTrail(robot_id, np.array(centers), R_b)


def trail_in_range(trail: FutureTrail, self_pos, R_t: float) -> bool:
    """A trail counts only if some ball intersects B(self_pos, R_t)."""
    d = np.linalg.norm(trail.centers - np.asarray(self_pos, float), axis=1)
    return bool(np.min(d) - trail.radius <= R_t)


def multi_robot_clearance(
    p,
    terrain: TerrainMap,
    trails,
    self_pos,
    R_t: float,
    dynamic_obstacles=None,
) -> float:
    """Distance from p to the nearest wall point, in-range trail ball
    surface, or dynamic obstacle ball surface; clamped at 0."""
    p = np.asarray(p, float)
    gamma = math.inf
    if terrain.wall_tree is not None:
        gamma = float(terrain.wall_tree.query(p)[0])
    for tr in trails:
        if not trail_in_range(tr, self_pos, R_t):
            continue
        d = np.linalg.norm(tr.centers - p, axis=1).min() - tr.radius
        gamma = min(gamma, d)
    if dynamic_obstacles:
        for center, radius in dynamic_obstacles:
            d = np.linalg.norm(np.asarray(center, float) - p) - radius
            gamma = min(gamma, d)
    return max(gamma, 0.0)


# -- multi-robot traversable map -------------------------------------------


class TraversableMap:
    """Per-robot view of the base map: mask plus per-point cost and clearance."""

    def __init__(self, base: TerrainMap, mask, cost, clearance, stamp: int = 0):
        self.base = base
        self.mask = np.asarray(mask, bool)
        self.cost = np.asarray(cost, float)
        self.clearance = np.asarray(clearance, float)
        self.stamp = int(stamp)
        if not self.mask.any():
            raise TerrainError("traversable map is empty: robot is enclosed")
        self.indices = np.flatnonzero(self.mask)

    def __len__(self) -> int:
        return int(self.mask.sum())

    @property
    def cost_min(self) -> float:
        return float(self.cost[self.mask].min())

    @property
    def cost_max(self) -> float:
        return float(self.cost[self.mask].max())


def build_traversable_map(
    terrain: TerrainMap,
    trails,
    self_id: int,
    self_pos,
    *,
    exclusion: float,
    D_s: float,
    R_t: float,
    dynamic_obstacles=None,
    stamp: int = 0,
) -> TraversableMap:
    """Non-wall points with combined clearance above ``exclusion``.

    Clearance combines static walls, in-range teammate trails, and dynamic
    obstacle balls injected by the engine; each surviving point carries the
    full traversability product with the clearance penalty folded in.
    """
    if not getattr(terrain, "_prepared", False):
        raise TerrainError("prepare() the map before building traversable maps")
    pts = terrain.points
    gamma = terrain.static_clearance.copy()

    self_pos = np.asarray(self_pos, float)
    balls = []
    for tr in trails:
        if tr.robot_id == self_id:
            continue
        if not trail_in_range(tr, self_pos, R_t):
            continue
        for c in tr.centers:
            balls.append((c, tr.radius))
    if dynamic_obstacles:
        balls.extend(
            (np.asarray(c, float), float(r)) for c, r in dynamic_obstacles
        )
    if balls:
        centers = np.array([b[0] for b in balls])
        radii = np.array([b[1] for b in balls])
        # chunked to bound the (n_points x n_balls) distance matrix
        for a in range(0, len(pts), 4096):
            block = pts[a : a + 4096]
            d = np.linalg.norm(block[:, None, :] - centers[None, :, :], axis=2) - radii
            gamma[a : a + 4096] = np.minimum(gamma[a : a + 4096], d.min(axis=1))
    np.maximum(gamma, 0.0, out=gamma)

    mask = (~terrain.wall_mask) & (gamma > exclusion)
    w_cl = np.maximum(0.0, (D_s - gamma) / D_s)
    cost = terrain.w_l * (1.0 + w_cl) * (1.0 + terrain.w_dn) * (1.0 + terrain.w_rg)
    cost = np.where(mask, cost, np.inf)
    return TraversableMap(terrain, mask, cost, gamma, stamp=stamp)


# -- map file I/O ----------------------------------------------------------


def save_map(terrain: TerrainMap, path) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(terrain.points):
            lab = "" if terrain.labels is None else f" {terrain.labels[i]}"
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}{lab}\n")


def load_map(path, *, k_nn: int = 12) -> TerrainMap:
    """Read `x y z [label]` lines; unlabeled points trigger segmentation."""
    pts, labs = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise TerrainError(f"{path}:{ln}: expected 'x y z [label]'")
            try:
                xyz = [float(v) for v in parts[:3]]
            except ValueError as exc:
                raise TerrainError(f"{path}:{ln}: bad coordinate") from exc
            pts.append(xyz)
            labs.append(parts[3] if len(parts) == 4 else None)
    if not pts:
        raise TerrainError(f"{path}: empty map")
    if any(l is None for l in labs):
        if any(l is not None for l in labs):
            raise TerrainError(f"{path}: mixed labeled and unlabeled points")
        m = TerrainMap(pts)
        m.segment(k_nn=k_nn)
        return m
    return TerrainMap(pts, labs)
