"""Point-cloud terrain: segmentation, costs, trails, traversable maps."""

import math

import numpy as np
import pytest

from patrol3d import Params, synthetic
from patrol3d.terrain import (
    FutureTrail,
    TerrainError,
    TerrainMap,
    build_traversable_map,
    clearance_penalty,
    future_trail,
    load_map,
    multi_robot_clearance,
    save_map,
    trail_in_range,
    traversability_cost,
)


def grid(x0, x1, y0, y1, step=0.25, z=0.0):
    xs = np.arange(x0, x1 + step / 2, step)
    ys = np.arange(y0, y1 + step / 2, step)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])


class TestConstruction:
    def test_empty_rejected(self):
        with pytest.raises(TerrainError):
            TerrainMap(np.empty((0, 3)))

    def test_label_length_mismatch(self):
        with pytest.raises(TerrainError):
            TerrainMap(np.zeros((3, 3)), ["terrain"] * 2)

    def test_unknown_label(self):
        with pytest.raises(TerrainError):
            TerrainMap(np.zeros((2, 3)), ["terrain", "lava"])

    def test_prepare_requires_labels(self):
        m = TerrainMap(grid(0, 2, 0, 2))
        with pytest.raises(TerrainError):
            m.prepare()


class TestSegmentation:
    def test_floor_wall_and_ramp(self):
        floor = grid(0, 4, 0, 4)
        # vertical plane at x=5 (detached so plane fits stay clean)
        ys, zs = np.meshgrid(np.arange(0, 4.01, 0.25), np.arange(0, 2.01, 0.25))
        wall = np.column_stack([np.full(ys.size, 5.0), ys.ravel(), zs.ravel()])
        # 40 degree ramp, detached in y
        xs, us = np.meshgrid(np.arange(0, 4.01, 0.25), np.arange(0, 3.01, 0.25))
        ramp = np.column_stack(
            [
                xs.ravel(),
                8.0 + us.ravel() * math.cos(math.radians(40)),
                us.ravel() * math.sin(math.radians(40)),
            ]
        )
        m = TerrainMap(np.vstack([floor, wall, ramp]))
        m.segment()
        labels = m.labels
        nf, nw = len(floor), len(wall)
        floor_labels = set(labels[:nf])
        assert floor_labels == {"terrain"}
        # interior wall points are vertical; edge fits may differ
        wall_core = [
            i
            for i in range(nf, nf + nw)
            if 0.5 < m.points[i, 1] < 3.5 and 0.5 < m.points[i, 2] < 1.5
        ]
        assert all(labels[i] == "wall" for i in wall_core)
        ramp_core = [
            i
            for i in range(nf + nw, len(m.points))
            if 0.5 < m.points[i, 0] < 3.5 and 0.3 < m.points[i, 2] < 1.6
        ]
        assert all(labels[i] == "ramp" for i in ramp_core)

    def test_low_obstacle_is_surmountable(self):
        floor = grid(0, 4, 0, 4)
        # a short vertical fence only 10 cm high
        ys = np.arange(1.0, 3.01, 0.1)
        fence = []
        for y in ys:
            for z in (0.05, 0.10):
                fence.append((2.0, y, z))
        m = TerrainMap(np.vstack([floor, np.array(fence)]))
        m.segment()
        fence_labels = set(m.labels[len(floor):])
        assert "wall" not in fence_labels


class TestCostFormulas:
    def test_traversability_oracle(self, rng):
        for _ in range(200):
            w_l = float(rng.uniform(0.5, 3.0))
            w_cl, w_dn, w_rg = rng.uniform(0.0, 1.0, 3)
            got = traversability_cost(w_l, w_cl, w_dn, w_rg)
            want = w_l * (1 + w_cl) * (1 + w_dn) * (1 + w_rg)
            assert got == pytest.approx(want, rel=1e-12)

    def test_traversability_monotone(self):
        base = traversability_cost(1.0, 0.2, 0.2, 0.2)
        assert traversability_cost(1.0, 0.4, 0.2, 0.2) > base
        assert traversability_cost(1.0, 0.2, 0.4, 0.2) > base
        assert traversability_cost(1.0, 0.2, 0.2, 0.4) > base
        assert traversability_cost(2.0, 0.2, 0.2, 0.2) == pytest.approx(2 * base)

    def test_invalid_weights(self):
        with pytest.raises(TerrainError):
            traversability_cost(0.0, 0, 0, 0)
        with pytest.raises(TerrainError):
            traversability_cost(1.0, -0.1, 0, 0)

    def test_clearance_penalty(self):
        assert clearance_penalty(0.0, 1.2) == 1.0
        assert clearance_penalty(0.6, 1.2) == pytest.approx(0.5)
        assert clearance_penalty(5.0, 1.2) == 0.0


class TestFutureTrail:
    def test_ball_spacing_and_first_center(self):
        p = (0.0, 0.0, 0.0)
        path = [(4.0, 0.0, 0.0)]
        tr = future_trail(p, path, R_c=10.0, R_b=0.47)
        assert np.allclose(tr.centers[0], p)
        gaps = np.linalg.norm(np.diff(tr.centers, axis=0), axis=1)
        assert np.all(gaps <= 0.47 / 2 + 1e-9)
        # the swept tube reaches within one sample step of the path end
        assert np.linalg.norm(tr.centers[-1] - np.array(path[0])) <= 0.47 / 2

    def test_crop_radius(self):
        tr = future_trail((0, 0, 0), [(10.0, 0, 0)], R_c=2.0, R_b=0.47)
        d = np.linalg.norm(tr.centers - np.zeros(3), axis=1)
        assert np.all(d <= 2.0 + 1e-9)

    def test_empty_path_degenerates_to_body_ball(self):
        tr = future_trail((1, 2, 0), None, R_c=2.0, R_b=0.47)
        assert len(tr.centers) == 1
        tr = future_trail((1, 2, 0), [], R_c=2.0, R_b=0.47)
        assert len(tr.centers) == 1

    def test_invalid_radii(self):
        with pytest.raises(TerrainError):
            future_trail((0, 0, 0), None, R_c=0.0, R_b=0.47)
        with pytest.raises(TerrainError):
            FutureTrail(0, np.zeros((1, 3)), radius=0.0)

    def test_in_range_counts_ball_surface(self):
        tr = FutureTrail(1, np.array([[3.0, 0.0, 0.0]]), radius=0.5)
        assert trail_in_range(tr, (0, 0, 0), R_t=2.5)
        assert not trail_in_range(tr, (0, 0, 0), R_t=2.4)


def random_walled_map(rng, n_interior=360, n_wall=40):
    pts = np.column_stack(
        [rng.uniform(-5, 5, n_interior), rng.uniform(-5, 5, n_interior),
         np.zeros(n_interior)]
    )
    ang = rng.uniform(0, 2 * math.pi, n_wall)
    wall = np.column_stack(
        [6.0 * np.cos(ang), 6.0 * np.sin(ang), rng.uniform(0, 0.5, n_wall)]
    )
    labels = ["terrain"] * n_interior + ["wall"] * n_wall
    m = TerrainMap(np.vstack([pts, wall]), labels)
    m.prepare(eps_neigh=0.6, neighbor_radius=0.8)
    return m


def random_trails(rng, k):
    out = []
    for rid in range(1, k + 1):
        p = rng.uniform(-4, 4, 3)
        p[2] = 0.0
        path = [p + rng.uniform(-2, 2, 3) * np.array([1, 1, 0]) for _ in range(3)]
        out.append(future_trail(p, path, R_c=3.0, R_b=0.47, robot_id=rid))
    return out


def brute_clearance(p, m, trails, self_pos, R_t, dyn=()):
    """Straight restatement of the clearance definition, no spatial index."""
    gamma = math.inf
    for q, lab in zip(m.points, m.labels):
        if lab == "wall":
            gamma = min(gamma, float(np.linalg.norm(q - p)))
    for tr in trails:
        if np.min(np.linalg.norm(tr.centers - self_pos, axis=1)) - tr.radius > R_t:
            continue
        gamma = min(
            gamma, float(np.min(np.linalg.norm(tr.centers - p, axis=1)) - tr.radius)
        )
    for c, r in dyn:
        gamma = min(gamma, float(np.linalg.norm(np.asarray(c, float) - p) - r))
    return max(gamma, 0.0)


class TestMultiRobotClearance:
    def test_matches_brute_force(self, rng, params):
        m = random_walled_map(rng)
        trails = random_trails(rng, 2)
        self_pos = np.zeros(3)
        for _ in range(50):
            p = np.append(rng.uniform(-5, 5, 2), 0.0)
            got = multi_robot_clearance(p, m, trails, self_pos, params.R_t)
            want = brute_clearance(p, m, trails, self_pos, params.R_t)
            assert got == pytest.approx(want, abs=1e-9)


class TestTraversableMap:
    def test_exclusion_soundness_brute_force(self, params):
        # every retained point clears the threshold, every excluded non-wall
        # point violates it, against a brute-force distance oracle
        for seed in range(5):
            rng = np.random.default_rng(seed)
            m = random_walled_map(rng)
            trails = random_trails(rng, 1 + seed % 3)
            self_pos = np.zeros(3)
            tm = build_traversable_map(
                m, trails, 0, self_pos,
                exclusion=params.exclusion, D_s=params.D_s, R_t=params.R_t,
            )
            for i in range(len(m.points)):
                gamma = brute_clearance(m.points[i], m, trails, self_pos, params.R_t)
                if tm.mask[i]:
                    assert m.labels[i] != "wall"
                    assert gamma > params.exclusion
                elif m.labels[i] != "wall":
                    assert gamma <= params.exclusion

    def test_trail_locality(self, params):
        # a trail entirely beyond R_t leaves the map bit-identical
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            m = random_walled_map(rng)
            self_pos = np.zeros(3)
            base = build_traversable_map(
                m, [], 0, self_pos,
                exclusion=params.exclusion, D_s=params.D_s, R_t=params.R_t,
            )
            far = np.array([params.R_t + 0.47 + 3.0, 0.0, 0.0])
            tr = future_trail(far, [far + (1, 0, 0)], R_c=3.0, R_b=0.47, robot_id=1)
            with_far = build_traversable_map(
                m, [tr], 0, self_pos,
                exclusion=params.exclusion, D_s=params.D_s, R_t=params.R_t,
            )
            assert np.array_equal(base.mask, with_far.mask)
            assert np.array_equal(base.cost, with_far.cost)

    def test_own_trail_ignored(self, params, rng):
        m = random_walled_map(rng)
        own = future_trail((0, 0, 0), [(1.0, 0, 0)], R_c=3.0, R_b=0.47, robot_id=0)
        tm0 = build_traversable_map(
            m, [], 0, np.zeros(3),
            exclusion=params.exclusion, D_s=params.D_s, R_t=params.R_t,
        )
        tm1 = build_traversable_map(
            m, [own], 0, np.zeros(3),
            exclusion=params.exclusion, D_s=params.D_s, R_t=params.R_t,
        )
        assert np.array_equal(tm0.mask, tm1.mask)

    def test_dynamic_obstacle_carves_hole(self, params, flat_map):
        center = np.array([3.0, 3.0, 0.0])
        tm = build_traversable_map(
            flat_map, [], 0, np.zeros(3),
            exclusion=params.exclusion, D_s=params.D_s, R_t=params.R_t,
            dynamic_obstacles=[(center, params.R_b)],
        )
        d = np.linalg.norm(flat_map.points - center, axis=1)
        killed = d - params.R_b <= params.exclusion
        assert not tm.mask[killed].any()
        assert tm.mask[~killed].all()

    def test_enclosed_robot_raises(self, params, flat_map):
        big = [(np.array([0.0, 0.0, 0.0]), 100.0)]
        with pytest.raises(TerrainError):
            build_traversable_map(
                flat_map, [], 0, np.zeros(3),
                exclusion=params.exclusion, D_s=params.D_s, R_t=params.R_t,
                dynamic_obstacles=big,
            )

    def test_cost_formula_on_mask(self, params, rng):
        m = random_walled_map(rng)
        tm = build_traversable_map(
            m, [], 0, np.zeros(3),
            exclusion=params.exclusion, D_s=params.D_s, R_t=params.R_t,
        )
        i = int(tm.indices[0])
        w_cl = max(0.0, (params.D_s - tm.clearance[i]) / params.D_s)
        want = traversability_cost(m.w_l[i], w_cl, m.w_dn[i], m.w_rg[i])
        assert tm.cost[i] == pytest.approx(want, rel=1e-12)


class TestMapIO:
    def test_roundtrip(self, tmp_path):
        m = TerrainMap(grid(0, 1, 0, 1), ["terrain"] * len(grid(0, 1, 0, 1)))
        path = tmp_path / "m.map"
        save_map(m, path)
        m2 = load_map(path)
        assert np.allclose(m2.points, m.points)
        assert list(m2.labels) == list(m.labels)

    def test_unlabeled_triggers_segmentation(self, tmp_path):
        path = tmp_path / "m.map"
        pts = grid(0, 3, 0, 3)
        path.write_text("".join(f"{x} {y} {z}\n" for x, y, z in pts))
        m = load_map(path)
        assert set(m.labels) == {"terrain"}

    def test_mixed_labels_rejected(self, tmp_path):
        path = tmp_path / "m.map"
        path.write_text("0 0 0 terrain\n1 0 0\n" + "0 1 0\n" * 12)
        with pytest.raises(TerrainError):
            load_map(path)

    def test_bad_line_rejected(self, tmp_path):
        path = tmp_path / "m.map"
        path.write_text("0 0\n")
        with pytest.raises(TerrainError):
            load_map(path)

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "m.map"
        path.write_text("# nothing\n")
        with pytest.raises(TerrainError):
            load_map(path)
