import io

import numpy as np
import pytest

from voxplan.errors import InfeasiblePlanError
from voxplan.grid import FREE, OCCUPIED, VoxelMap
from voxplan.topo import (
    PolyPath,
    Roadmap,
    TopoConfig,
    build_roadmap,
    extract_path_ids,
    extract_paths,
    find_guide_paths,
    prune_and_select,
    shorten_path,
    uvd_equivalent,
)


def open_map(dims=(60, 60, 20), resolution=0.1):
    m = VoxelMap([0.0, 0.0, 0.0], resolution, dims)
    m.occupancy[:] = FREE
    return m


def wall_map():
    """Thin wall at x ~ 3.0 covering the middle band of y, full height."""
    m = open_map()
    m.occupancy[30, 10:50, :] = OCCUPIED
    m.compute_esdf()
    return m


def dense_uvd_oracle(a, b, vmap, steps=200):
    """Fine-grained re-check of the equivalence relation."""
    for i in range(steps + 1):
        s = i / steps
        if not vmap.segment_free(a.point_at(s), b.point_at(s)):
            return False
    return True


class TestPolyPath:
    def test_uniform_parameterization(self):
        p = PolyPath([[0, 0, 0], [1, 0, 0], [1, 2, 0]])
        assert p.length == pytest.approx(3.0)
        assert np.allclose(p.point_at(1 / 3), [1, 0, 0])
        assert np.allclose(p.point_at(0.5), [1, 0.5, 0])
        # constant speed w.r.t. s on both sides of the joint
        h = 1e-4
        for s in (0.15, 0.7):
            v = np.linalg.norm(p.point_at(s + h) - p.point_at(s - h)) / (2 * h)
            assert v == pytest.approx(p.length, rel=1e-6)

    def test_duplicate_waypoints_dropped(self):
        p = PolyPath([[0, 0, 0], [0, 0, 0], [1, 0, 0]])
        assert len(p.waypoints) == 2


class TestUvdEquivalence:
    def test_identical_paths_equivalent(self):
        m = open_map()
        a = PolyPath([[0.5, 3.0, 1.0], [5.5, 3.0, 1.0]])
        assert uvd_equivalent(a, a, m, steps=8)

    def test_empty_map_everything_equivalent(self):
        m = open_map()
        a = PolyPath([[0.5, 0.5, 1.0], [3.0, 5.0, 1.0], [5.5, 0.5, 1.0]])
        b = PolyPath([[0.5, 0.5, 1.0], [3.0, 1.0, 0.5], [5.5, 0.5, 1.0]])
        assert uvd_equivalent(a, b, m, steps=32)

    def test_wall_separates_detours(self):
        m = wall_map()
        left = PolyPath([[1.0, 3.0, 1.0], [3.0, 0.5, 1.0], [5.0, 3.0, 1.0]])
        right = PolyPath([[1.0, 3.0, 1.0], [3.0, 5.5, 1.0], [5.0, 3.0, 1.0]])
        assert not uvd_equivalent(left, right, m, steps=32)
        assert not dense_uvd_oracle(left, right, m)

    def test_endpoint_mismatch_raises(self):
        m = open_map()
        a = PolyPath([[0.5, 0.5, 1.0], [5.0, 0.5, 1.0]])
        b = PolyPath([[0.5, 2.5, 1.0], [5.0, 0.5, 1.0]])
        with pytest.raises(ValueError):
            uvd_equivalent(a, b, m)


class TestRoadmap:
    def test_empty_map_single_class(self):
        m = open_map()
        cfg = TopoConfig(n_max=400)
        rng = np.random.default_rng(5)
        start, goal = np.array([0.5, 3.0, 1.0]), np.array([5.5, 3.0, 1.0])
        roadmap = build_roadmap(m, start, goal, cfg, rng)
        paths = extract_paths(roadmap, cfg.raw_path_cap)
        assert len(paths) >= 1
        for i in range(len(paths)):
            for j in range(i + 1, len(paths)):
                assert uvd_equivalent(paths[i], paths[j], m, cfg.uvd_steps)
        kept = prune_and_select(paths, m, cfg)
        assert len(kept) == 1

    def test_single_box_yields_distinct_classes(self):
        m = open_map()
        m.occupancy[25:35, 20:40, :] = OCCUPIED  # box fully blocking the line
        m.compute_esdf()
        start, goal = np.array([1.0, 3.0, 1.0]), np.array([5.0, 3.0, 1.0])
        cfg = TopoConfig(n_max=1200)
        hits = 0
        runs = 20
        for seed in range(runs):
            rng = np.random.default_rng(seed)
            paths, _ = find_guide_paths(m, start, goal, cfg, rng)
            classes = 0
            reps = []
            for p in paths:
                if not any(dense_uvd_oracle(p, r, m) for r in reps):
                    reps.append(p)
                    classes += 1
            if classes >= 2:
                hits += 1
        assert hits >= int(0.95 * runs)

    def test_visible_goal_two_edge_connection_near_straight(self):
        m = open_map()
        start, goal = np.array([1.0, 3.0, 1.0]), np.array([5.0, 3.0, 1.0])
        cfg = TopoConfig(n_max=2500, inflate=(1.5, 1.5, 1.0))
        roadmap = build_roadmap(m, start, goal, cfg, np.random.default_rng(17))
        straight = np.linalg.norm(goal - start)
        best = np.inf
        for conn in roadmap.connectors():
            nbrs = roadmap.adjacency[conn.uid]
            if roadmap.start_id in nbrs and roadmap.goal_id in nbrs:
                length = (np.linalg.norm(conn.position - start)
                          + np.linalg.norm(conn.position - goal))
                best = min(best, length)
        assert best <= 1.05 * straight

    def test_guard_mutual_invisibility(self):
        m = wall_map()
        cfg = TopoConfig(n_max=800)
        roadmap = build_roadmap(
            m, [1.0, 3.0, 1.0], [5.0, 3.0, 1.0], cfg, np.random.default_rng(2)
        )
        guards = roadmap.guards()
        for i in range(len(guards)):
            for j in range(i + 1, len(guards)):
                assert not m.segment_free(guards[i].position, guards[j].position)

    def test_connectors_touch_exactly_two_guards(self):
        m = wall_map()
        cfg = TopoConfig(n_max=800)
        roadmap = build_roadmap(
            m, [1.0, 3.0, 1.0], [5.0, 3.0, 1.0], cfg, np.random.default_rng(3)
        )
        for conn in roadmap.connectors():
            nbrs = roadmap.adjacency[conn.uid]
            assert len(nbrs) == 2
            assert all(roadmap.nodes[x].kind == "guard" for x in nbrs)

    def test_determinism(self):
        m = wall_map()
        cfg = TopoConfig(n_max=500)
        args = (m, [1.0, 3.0, 1.0], [5.0, 3.0, 1.0], cfg)
        r1 = build_roadmap(*args, np.random.default_rng(11))
        r2 = build_roadmap(*args, np.random.default_rng(11))
        assert set(r1.nodes) == set(r2.nodes)
        for uid in r1.nodes:
            assert np.array_equal(r1.nodes[uid].position, r2.nodes[uid].position)
            assert r1.adjacency[uid] == r2.adjacency[uid]

    def test_occupied_start_raises(self):
        m = wall_map()
        with pytest.raises(InfeasiblePlanError):
            build_roadmap(m, [3.05, 3.0, 1.0], [5.0, 3.0, 1.0], TopoConfig(),
                          np.random.default_rng(0))

    def test_dump_jsonl(self):
        m = open_map()
        roadmap = build_roadmap(m, [1.0, 3.0, 1.0], [5.0, 3.0, 1.0],
                                TopoConfig(n_max=200), np.random.default_rng(0))
        buf = io.StringIO()
        roadmap.dump_jsonl(buf)
        lines = buf.getvalue().strip().splitlines()
        assert len(lines) == len(roadmap.nodes) + sum(
            len(v) for v in roadmap.adjacency.values()) // 2


class TestExtractPaths:
    @staticmethod
    def manual_roadmap(positions, edges, start=0, goal=1):
        rm = Roadmap()
        for pos in positions:
            rm.add_node(np.asarray(pos, dtype=float), "guard")
        for a, b in edges:
            rm.connect(a, b)
        rm.start_id, rm.goal_id = start, goal
        return rm

    def test_two_node_direct_path(self):
        rm = self.manual_roadmap([[0, 0, 0], [1, 0, 0]], [(0, 1)])
        assert extract_path_ids(rm) == [[0, 1]]

    def test_diamond_two_paths(self):
        rm = self.manual_roadmap(
            [[0, 0, 0], [2, 0, 0], [1, 1, 0], [1, -1, 0]],
            [(0, 2), (2, 1), (0, 3), (3, 1)],
        )
        ids = {tuple(p) for p in extract_path_ids(rm)}
        assert ids == {(0, 2, 1), (0, 3, 1)}

    def test_random_graphs_match_bruteforce(self):
        rng = np.random.default_rng(23)

        def brute(adj, start, goal):
            found = []

            def rec(node, seq, visited):
                if node == goal:
                    found.append(tuple(seq))
                    return
                for nbr in adj[node]:
                    if nbr not in visited:
                        rec(nbr, seq + [nbr], visited | {nbr})

            rec(start, [start], {start})
            return set(found)

        for _ in range(30):
            n = int(rng.integers(3, 11))
            edges = set()
            for _ in range(int(rng.integers(n, 2 * n))):
                a, b = rng.integers(0, n, 2)
                if a != b:
                    edges.add((min(a, b), max(a, b)))
            rm = self.manual_roadmap(
                [[i, 0, 0] for i in range(n)], sorted(edges), start=0, goal=1
            )
            got = {tuple(p) for p in extract_path_ids(rm, cap=10_000)}
            want = brute(rm.adjacency, 0, 1)
            assert got == want

    def test_no_path_gives_empty(self):
        rm = self.manual_roadmap([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [(0, 2)])
        assert extract_paths(rm) == []


class TestShortenPath:
    def test_straight_path_unchanged(self):
        m = open_map()
        p = PolyPath([[0.5, 3.0, 1.0], [5.5, 3.0, 1.0]])
        out = shorten_path(p, m, TopoConfig())
        assert np.allclose(out.waypoints, p.waypoints, atol=1e-9)

    def test_open_space_detour_shortened(self):
        m = open_map()
        p = PolyPath([[0.5, 1.0, 1.0], [3.0, 4.5, 1.0], [5.5, 1.0, 1.0]])
        out = shorten_path(p, m, TopoConfig())
        straight = np.linalg.norm(p.waypoints[-1] - p.waypoints[0])
        assert out.length <= 1.02 * straight

    def test_wall_detour_stays_equivalent_and_never_longer(self):
        m = wall_map()
        cfg = TopoConfig()
        rng = np.random.default_rng(31)
        for _ in range(25):
            mid_y = rng.uniform(0.3, 0.9)
            p = PolyPath([
                [1.0, 3.0, 1.0],
                [rng.uniform(2.0, 3.0), mid_y, rng.uniform(0.6, 1.4)],
                [3.0, mid_y, 1.0],
                [rng.uniform(3.2, 4.0), mid_y, rng.uniform(0.6, 1.4)],
                [5.0, 3.0, 1.0],
            ])
            if any(not m.segment_free(p.waypoints[i], p.waypoints[i + 1])
                   for i in range(len(p.waypoints) - 1)):
                continue
            out = shorten_path(p, m, cfg)
            assert out.length <= p.length + 1e-9
            assert dense_uvd_oracle(out, p, m)
            assert np.allclose(out.waypoints[0], p.waypoints[0])
            assert np.allclose(out.waypoints[-1], p.waypoints[-1])


class TestPruneAndSelect:
    def make_paths(self):
        a = PolyPath([[0, 0, 0], [10, 0, 0]])
        b = PolyPath([[0, 0, 0], [5, 3.3166, 0], [10, 0, 0]])   # ~12 long
        c = PolyPath([[0, 0, 0], [5, 14.15, 0], [10, 0, 0]])    # ~30 long
        return a, b, c

    def test_ratio_rule(self):
        m = VoxelMap([-1, -16, -1], 0.5, [44, 64, 8])
        m.occupancy[:] = FREE
        a, b, c = self.make_paths()
        cfg = TopoConfig(r_max=2.0, k_max=5)
        kept = prune_and_select([a, b, c], m, cfg)
        lengths = [p.length for p in kept]
        assert max(lengths) <= 2.0 * a.length
        assert len(kept) == 1  # all three are equivalent in an empty map

    def test_equivalent_pair_keeps_shorter(self):
        m = VoxelMap([-1, -16, -1], 0.5, [44, 64, 8])
        m.occupancy[:] = FREE
        a, b, _ = self.make_paths()
        kept = prune_and_select([b, a], m, TopoConfig())
        assert len(kept) == 1
        assert kept[0].length == a.length

    def test_kmax_one_keeps_shortest(self):
        m = wall_map()
        left = PolyPath([[1.0, 3.0, 1.0], [3.0, 0.5, 1.0], [5.0, 3.0, 1.0]])
        right = PolyPath([[1.0, 3.0, 1.0], [3.0, 5.8, 1.0], [5.0, 3.0, 1.0]])
        cfg = TopoConfig(k_max=1)
        kept = prune_and_select([right, left], m, cfg)
        assert len(kept) == 1
        assert kept[0].length == min(left.length, right.length)

    def test_empty_input(self):
        m = open_map()
        assert prune_and_select([], m, TopoConfig()) == []
