import math

import numpy as np
import pytest

from voxplan.bspline import UniformBSpline
from voxplan.grid import FREE, OCCUPIED, UNKNOWN, SensorModel, VoxelMap
from voxplan.yaw import (
    IgConfig,
    TrajectoryContext,
    YawPlanConfig,
    _ray_reaches,
    dijkstra_layered,
    information_gain,
    optimize_yaw_bspline,
    search_yaw_sequence,
    velocity_tracking_yaw,
    wrap_angle,
    yaw_cost_grad,
)


def straight_traj(start=(0.5, 3.0, 1.0), end=(5.5, 3.0, 1.0), n_ctrl=12, dt=0.3):
    ctrl = np.linspace(np.asarray(start, float), np.asarray(end, float), n_ctrl)
    return UniformBSpline(ctrl, dt)


def brute_force_path(gains, angles, mu, start_angle):
    """Exhaustive enumeration oracle over the layered graph."""
    m = len(gains)
    best_cost, best_idx = np.inf, None
    counts = [len(g) for g in gains]
    idx = [0] * m
    while True:
        cost = 0.0
        prev = start_angle
        for i in range(m):
            a = angles[i][idx[i]]
            cost += -gains[i][idx[i]] + mu * wrap_angle(a - prev) ** 2
            prev = a
        if cost < best_cost - 1e-15:
            best_cost, best_idx = cost, list(idx)
        # odometer increment
        k = m - 1
        while k >= 0:
            idx[k] += 1
            if idx[k] < counts[k]:
                break
            idx[k] = 0
            k -= 1
        if k < 0:
            return best_idx, best_cost


class TestWrap:
    def test_wrap_range(self):
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(0.3) == pytest.approx(0.3)
        arr = wrap_angle(np.array([2 * math.pi + 0.1, -2 * math.pi - 0.1]))
        assert np.allclose(arr, [0.1, -0.1])


class TestVelocityTrackingYaw:
    def test_cardinal_directions(self):
        for direction, expected in (
            ((1.0, 0.0), 0.0),
            ((0.0, 1.0), math.pi / 2),
            ((-1.0, 0.0), math.pi),
        ):
            end = (0.5 + 5 * direction[0], 3.0 + 5 * direction[1], 1.0)
            traj = straight_traj(end=end)
            t_mid = 0.5 * (traj.t_start + traj.t_end)
            assert velocity_tracking_yaw(traj, t_mid) == pytest.approx(expected)

    def test_hover_holds_previous(self):
        traj = UniformBSpline(np.tile([1.0, 1.0, 1.0], (6, 1)), 0.4)
        t_mid = 0.5 * (traj.t_start + traj.t_end)
        assert velocity_tracking_yaw(traj, t_mid, prev_yaw=0.7) == 0.7


class TestInformationGain:
    def unknown_map(self, dims=(40, 40, 20)):
        return VoxelMap([0.0, 0.0, 0.0], 0.1, dims)

    def test_fully_known_map_zero_gain(self):
        m = self.unknown_map()
        m.occupancy[:] = FREE
        traj = straight_traj(end=(3.5, 3.0, 1.0))
        ctx = TrajectoryContext(traj)
        sensor = SensorModel()
        g = information_gain(m, [1.0, 3.0, 1.0], 0.0, sensor, IgConfig(), ctx)
        assert g == 0.0

    def test_unbiased_gain_equals_bruteforce_frustum_count(self):
        m = self.unknown_map()
        traj = straight_traj(end=(3.5, 3.0, 1.0))
        ctx = TrajectoryContext(traj)
        sensor = SensorModel(horizontal_fov=np.deg2rad(80),
                             vertical_fov=np.deg2rad(60), max_range=2.0)
        cfg = IgConfig(w_lateral=0.0, w_longitudinal=0.0, stride=2)
        pos = np.array([1.05, 3.05, 1.05])
        yaw = 0.3
        g = information_gain(m, pos, yaw, sensor, cfg, ctx)
        # oracle: enumerate every stride-aligned voxel and test conditions
        count = 0
        heading = np.array([math.cos(yaw), math.sin(yaw)])
        for i in range(0, m.dims[0], cfg.stride):
            for j in range(0, m.dims[1], cfg.stride):
                for k in range(0, m.dims[2], cfg.stride):
                    if m.occupancy[i, j, k] != UNKNOWN:
                        continue
                    c = m.index_to_center([i, j, k])
                    d = c - pos
                    dist = np.linalg.norm(d)
                    if dist > sensor.max_range:
                        continue
                    h = math.hypot(d[0], d[1])
                    if h > 0:
                        ang = math.acos(
                            np.clip((d[0] * heading[0] + d[1] * heading[1]) / h, -1, 1)
                        )
                        if ang > sensor.horizontal_fov / 2:
                            continue
                    if abs(math.atan2(d[2], h)) > sensor.vertical_fov / 2:
                        continue
                    count += 1  # empty map: always visible
        assert g == count

    def test_single_voxel_bias_value(self):
        # Ig = exp(-w_l * 1 - w_s * 2) with w_l=0.5, w_s=0.25 -> e^-1
        assert math.exp(-0.5 * 1.0 - 0.25 * 2.0) == pytest.approx(math.exp(-1.0))

    def test_occlusion_blocks_gain(self):
        m = self.unknown_map()
        m.occupancy[:15, :, :] = FREE
        m.occupancy[15, :, :] = OCCUPIED  # wall; everything behind unknown
        traj = straight_traj(end=(3.5, 3.0, 1.0))
        ctx = TrajectoryContext(traj)
        sensor = SensorModel(horizontal_fov=np.deg2rad(60),
                             vertical_fov=np.deg2rad(40), max_range=3.5)
        pos = m.index_to_center([5, 20, 10])
        g = information_gain(m, pos, 0.0, sensor, IgConfig(), ctx)
        assert g == 0.0  # unknown space exists but is fully occluded

    def test_cache_transparency(self):
        m = self.unknown_map()
        rng = np.random.default_rng(4)
        m.occupancy[rng.random(tuple(m.dims)) < 0.1] = OCCUPIED
        m.occupancy[rng.random(tuple(m.dims)) < 0.3] = FREE
        traj = straight_traj(end=(3.5, 3.0, 1.0))
        ctx = TrajectoryContext(traj)
        sensor = SensorModel(max_range=2.5)
        cfg = IgConfig()
        pos = np.array([1.5, 2.0, 1.0])
        cache = {}
        yaws = np.linspace(-math.pi, math.pi, 7)
        with_cache = [
            information_gain(m, pos, y, sensor, cfg, ctx, cache) for y in yaws
        ]
        without = [information_gain(m, pos, y, sensor, cfg, ctx) for y in yaws]
        assert with_cache == without

    def test_cached_visibility_matches_reference_rays(self):
        m = self.unknown_map()
        rng = np.random.default_rng(9)
        m.occupancy[rng.random(tuple(m.dims)) < 0.15] = OCCUPIED
        pos = np.array([2.05, 2.05, 1.05])
        sensor = SensorModel(max_range=1.5)
        traj = straight_traj(end=(3.5, 3.0, 1.0))
        ctx = TrajectoryContext(traj)
        cache = {}
        information_gain(m, pos, 0.0, sensor, IgConfig(), ctx, cache)
        for key, visible in cache.items():
            center = m.index_to_center(key)
            assert visible == _ray_reaches(m, pos, center, key)

    def test_monotone_gain_under_new_unknowns(self):
        m = self.unknown_map()
        m.occupancy[:] = FREE
        m.occupancy[18:22, 18:22, 8:12] = UNKNOWN
        traj = straight_traj(end=(3.5, 3.0, 1.0))
        ctx = TrajectoryContext(traj)
        sensor = SensorModel(max_range=3.0)
        cfg = IgConfig(w_lateral=0.3, w_longitudinal=0.2)
        pos = np.array([1.0, 2.0, 1.0])
        before = information_gain(m, pos, 0.5, sensor, cfg, ctx)
        m.occupancy[22:26, 18:22, 8:12] = UNKNOWN  # reveal more unknowns
        after = information_gain(m, pos, 0.5, sensor, cfg, ctx)
        assert after >= before


class TestDijkstra:
    def test_single_layer_zero_mu_is_argmax_gain(self):
        rng = np.random.default_rng(2)
        gains = [rng.uniform(0, 5, 9)]
        angles = [np.linspace(-1, 1, 9)]
        idx, cost = dijkstra_layered(gains, angles, 0.0, 0.0)
        assert idx[0] == int(np.argmax(gains[0]))
        assert cost == pytest.approx(-gains[0].max())

    def test_zero_gain_prefers_smooth_chain(self):
        angles = [np.array([-0.5, 0.0, 0.5])] * 4
        gains = [np.zeros(3)] * 4
        idx, cost = dijkstra_layered(gains, angles, 1.0, 0.0)
        assert idx == [1, 1, 1, 1]   # stay at the start angle
        assert cost == pytest.approx(0.0)

    def test_ties_resolve_to_lowest_index(self):
        angles = [np.array([0.0, 0.0, 0.0])] * 3
        gains = [np.ones(3)] * 3
        idx, _ = dijkstra_layered(gains, angles, 0.7, 0.0)
        assert idx == [0, 0, 0]

    def test_matches_bruteforce_on_random_graphs(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            m = int(rng.integers(1, 7))
            j = int(rng.integers(1, 9))
            gains = [rng.uniform(0, 3, j + 1) for _ in range(m)]
            angles = [rng.uniform(-math.pi, math.pi, j + 1) for _ in range(m)]
            mu = float(rng.uniform(0, 1.5))
            start = float(rng.uniform(-math.pi, math.pi))
            idx, cost = dijkstra_layered(gains, angles, mu, start)
            b_idx, b_cost = brute_force_path(gains, angles, mu, start)
            assert cost == pytest.approx(b_cost, abs=1e-9)

    def test_wrap_invariance_of_selected_indices(self):
        rng = np.random.default_rng(12)
        gains = [rng.uniform(0, 2, 5) for _ in range(4)]
        angles = [rng.uniform(-math.pi, math.pi, 5) for _ in range(4)]
        idx1, _ = dijkstra_layered(gains, angles, 0.8, 0.3)
        shifted = [a + 2 * math.pi for a in angles]
        idx2, _ = dijkstra_layered(gains, shifted, 0.8, 0.3)
        assert idx1 == idx2


class TestYawSpline:
    def cfg(self):
        return YawPlanConfig(gamma_waypoint=1e4, yaw_rate_max=3.0, yaw_acc_max=6.0)

    def test_constant_sequence_gives_constant_spline(self):
        xi = np.full(7, 0.8)
        times = np.linspace(0, 3, 7)
        sp = optimize_yaw_bspline(xi, times, self.cfg())
        ts = np.linspace(sp.t_start, sp.t_end, 50)
        vals = np.array([sp.evaluate(t) for t in ts])
        assert np.allclose(vals, 0.8, atol=1e-6)

    def test_strong_waypoint_weight_tracks_sequence(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            times = np.linspace(0, 6, 7)
            xi = np.cumsum(rng.uniform(-0.25, 0.25, 7)) + 0.2
            sp = optimize_yaw_bspline(xi, times, self.cfg())
            errs = [abs(float(sp.evaluate(min(t, sp.t_end))) - x)
                    for t, x in zip(times, np.unwrap(xi))]
            assert max(errs) < 0.01

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        times = np.linspace(0, 2.4, 6)
        xi = rng.uniform(-1.5, 1.5, 6)
        cfg = YawPlanConfig(gamma_waypoint=30.0, gamma_feasible=10.0,
                            yaw_rate_max=0.8, yaw_acc_max=1.5)
        span = float(times[1] - times[0])
        n_ctrl = max(int(np.ceil((times[-1] - times[0]) / span)), 1) + 3
        t0 = times[0] - 3 * span
        for _ in range(30):
            ctrl = rng.uniform(-2, 2, n_ctrl)
            spline = UniformBSpline(ctrl, span, degree=3, t_origin=t0)
            _, an = yaw_cost_grad(ctrl, spline, times, xi, cfg)
            h = 1e-6
            fd = np.zeros(n_ctrl)
            for i in range(n_ctrl):
                cp, cm = ctrl.copy(), ctrl.copy()
                cp[i] += h
                cm[i] -= h
                fd[i] = (yaw_cost_grad(cp, spline, times, xi, cfg)[0]
                         - yaw_cost_grad(cm, spline, times, xi, cfg)[0]) / (2 * h)
            denom = max(np.abs(fd).max(), np.abs(an).max(), 1e-9)
            assert np.abs(an - fd).max() / denom < 1e-4

    def test_feasibility_repair(self):
        times = np.linspace(0, 1.2, 5)
        xi = np.array([0.0, 1.5, -1.5, 1.5, -1.5])  # violently twisting
        cfg = YawPlanConfig(gamma_waypoint=1e5, gamma_feasible=1e-6,
                            yaw_rate_max=1.0, yaw_acc_max=2.0)
        sp = optimize_yaw_bspline(xi, times, cfg)
        assert sp.hull_feasible(cfg.yaw_rate_max, cfg.yaw_acc_max)


class TestSearchYawSequence:
    def test_search_prefers_side_with_unknown_space(self):
        m = VoxelMap([0.0, 0.0, 0.0], 0.1, (60, 60, 20))
        m.occupancy[:] = FREE
        m.occupancy[:, 30:, :] = UNKNOWN   # unknown half-space at y >= 3
        m.compute_esdf()
        traj = straight_traj(start=(0.8, 1.5, 1.0), end=(5.2, 1.5, 1.0))
        sensor = SensorModel(max_range=3.0)
        plan_cfg = YawPlanConfig(layers=4, candidates=6, mu=0.01)
        xi, times, diag = search_yaw_sequence(
            traj, m, sensor, 0.0, plan_cfg, IgConfig(stride=2)
        )
        assert len(xi) == plan_cfg.layers + 1
        assert xi[0] == 0.0
        # chosen yaws should lean toward +y (the unknown side)
        assert np.mean(xi[1:]) > 0.05

    def test_determinism(self):
        m = VoxelMap([0.0, 0.0, 0.0], 0.1, (60, 60, 20))
        m.occupancy[:20, :, :] = FREE
        traj = straight_traj()
        sensor = SensorModel(max_range=2.5)
        out1 = search_yaw_sequence(traj, m, sensor, 0.1, YawPlanConfig(layers=3),
                                   IgConfig())
        out2 = search_yaw_sequence(traj, m, sensor, 0.1, YawPlanConfig(layers=3),
                                   IgConfig())
        assert np.array_equal(out1[0], out2[0])
        assert out1[2]["cost"] == out2[2]["cost"]
