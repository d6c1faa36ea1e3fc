"""End-to-end local replanning simulation in initially unknown worlds.

The vehicle tracks the commanded spline perfectly (kinematic execution); a
limited-FOV sensor reveals the world into a belief map between replans.
Replanning runs on a fixed period plus an event trigger when a newly revealed
obstacle intersects the commanded trajectory; an emergency stop fires when
the detected collision point is closer than the emergency distance.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .bspline import UniformBSpline, cubic_boundary_ctrl
from .errors import (
    ConfigError,
    InfeasiblePlanError,
    MapGenerationError,
    RefineFailureError,
)
from .grid import FREE, OCCUPIED, SensorModel, VoxelMap
from .pgo import PgoConfig, pgo_parallel
from .refine import RefineConfig, refine_trajectory
from .topo import PolyPath, TopoConfig, find_guide_paths
from .yaw import (
    IgConfig,
    YawPlanConfig,
    optimize_yaw_bspline,
    search_yaw_sequence,
    velocity_tracking_yaw,
)


@dataclass
class ObstacleParams:
    pillar_fraction: float = 0.6
    pillar_radius: tuple = (0.15, 0.45)
    box_side: tuple = (0.3, 0.9)
    height_range: tuple = (1.4, 3.0)
    clearance: float = 1.0          # keep-out radius around start/goal
    max_retries: int = 60


@dataclass
class ScenarioConfig:
    # world: either a file, a scripted scene, or the random generator
    map_file: str | None = None
    scripted: str | None = None
    area: tuple = (10.0, 10.0)
    height: float = 3.0
    resolution: float = 0.15
    density: float = 0.3
    map_seed: int = 0
    obstacles: ObstacleParams = field(default_factory=ObstacleParams)
    # mission
    start: tuple = (1.0, 5.0, 1.0)
    goal: tuple = (9.0, 5.0, 1.0)
    goal_tolerance: float = 0.5
    horizon: float = 7.0
    v_max: float = 3.0
    a_max: float = 2.5
    risk_aware: bool = True
    active_yaw: bool = True
    # execution
    replan_period: float = 0.2
    lookahead: float = 2.5
    emergency_distance: float = 0.5
    timeout: float = 120.0
    sim_dt: float = 0.02
    seed: int = 0
    r_quad: float = 0.2
    cruise_fraction: float = 0.5
    knot_span: float = 0.4
    initial_yaw: float | None = None
    sensor: SensorModel = field(default_factory=SensorModel)
    topo: TopoConfig = field(default_factory=lambda: TopoConfig(n_max=400, k_max=3))
    pgo: PgoConfig = field(default_factory=PgoConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    yaw_plan: YawPlanConfig = field(default_factory=lambda: YawPlanConfig(layers=5))
    ig: IgConfig = field(default_factory=IgConfig)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be > 0")
        if self.density < 0:
            raise ConfigError("density must be >= 0")
        if np.allclose(self.start, self.goal):
            raise ConfigError("goal must differ from start")
        # keep the per-axis limits consistent with the optimizer config
        self.pgo.v_max = self.v_max
        self.pgo.a_max = self.a_max

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kwargs = {}
        nested = {
            "obstacles": ObstacleParams,
            "sensor": SensorModel,
            "topo": TopoConfig,
            "pgo": PgoConfig,
            "refine": RefineConfig,
            "yaw_plan": YawPlanConfig,
            "ig": IgConfig,
        }
        valid = {f.name for f in fields(cls)}
        for key, value in data.items():
            if key not in valid:
                raise ConfigError(f"unknown scenario key: {key}")
            if key in nested and isinstance(value, dict):
                kwargs[key] = nested[key](**value)
            elif key in ("area", "start", "goal") and isinstance(value, list):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass
class ScenarioResult:
    success: bool
    failure_cause: str | None
    flight_distance: float
    flight_time: float
    energy: float
    energy_closed_form: float
    replan_count: int
    emergency_stops: int
    revealed_voxels: int
    replan_times_ms: list = field(default_factory=list)
    executed_path: list = field(default_factory=list)
    executed_yaw: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def metrics_dict(self):
        """Deterministic metrics only; wall-clock timings stay out."""
        return {
            "success": self.success,
            "failure_cause": self.failure_cause,
            "flight_distance": round(self.flight_distance, 9),
            "flight_time": round(self.flight_time, 9),
            "energy": round(self.energy, 9),
            "energy_closed_form": round(self.energy_closed_form, 9),
            "replan_count": self.replan_count,
            "emergency_stops": self.emergency_stops,
            "revealed_voxels": self.revealed_voxels,
        }

    def timing_dict(self):
        ms = sorted(self.replan_times_ms)
        med = ms[len(ms) // 2] if ms else 0.0
        return {
            "replan_times_ms": self.replan_times_ms,
            "median_replan_ms": med,
            "max_replan_ms": max(ms) if ms else 0.0,
        }


# ----------------------------------------------------------------------
# world construction

def generate_map(density, area, seed, params=None, resolution=0.15, height=3.0,
                 start=(1.0, 5.0, 1.0), goal=(9.0, 5.0, 1.0)):
    """Random pillar/box world, deterministic in the seed.

    Obstacles are rejected while they intersect the keep-out discs around
    start and goal; placement failing repeatedly raises MapGenerationError.
    """
    params = params or ObstacleParams()
    rng = np.random.default_rng(seed)
    dims = [
        int(round(area[0] / resolution)),
        int(round(area[1] / resolution)),
        int(round(height / resolution)),
    ]
    world = VoxelMap([0.0, 0.0, 0.0], resolution, dims)
    world.occupancy[:] = FREE
    n_obs = int(round(density * area[0] * area[1]))
    keep_clear = [np.asarray(start[:2]), np.asarray(goal[:2])]
    boxes, cylinders = [], []
    for _ in range(n_obs):
        placed = False
        for _ in range(params.max_retries):
            cx = rng.uniform(0.3, area[0] - 0.3)
            cy = rng.uniform(0.3, area[1] - 0.3)
            h = rng.uniform(*params.height_range)
            if rng.uniform() < params.pillar_fraction:
                r = rng.uniform(*params.pillar_radius)
                margin = r + params.clearance
                if any(np.hypot(cx - p[0], cy - p[1]) < margin for p in keep_clear):
                    continue
                cylinders.append(((cx, cy), r, (0.0, h)))
            else:
                sx = rng.uniform(*params.box_side)
                sy = rng.uniform(*params.box_side)
                margin = math.hypot(sx, sy) / 2.0 + params.clearance
                if any(np.hypot(cx - p[0], cy - p[1]) < margin for p in keep_clear):
                    continue
                boxes.append((
                    (cx - sx / 2.0, cy - sy / 2.0, 0.0),
                    (cx + sx / 2.0, cy + sy / 2.0, h),
                ))
            placed = True
            break
        if not placed:
            raise MapGenerationError(
                f"could not place obstacle {len(boxes) + len(cylinders) + 1} "
                f"of {n_obs} within {params.max_retries} retries"
            )
    world.set_occupied_boxes(boxes)
    world.set_occupied_cylinders(cylinders)
    world.obstacle_count = n_obs
    return world


def corner_scene():
    """Scripted occluded-corner scene: the reference hugs a wall corner and
    an obstacle hides right behind it, invisible until the turn.

    Returns (world, overrides) where overrides adjusts the mission setup.
    """
    resolution = 0.1
    world = VoxelMap([0.0, 0.0, 0.0], resolution, (100, 60, 20))
    world.occupancy[:] = FREE
    # wall along y, pierced corridor: the corner sits at (4.2, 3.0)
    world.set_occupied_boxes([
        ((4.0, 0.0, 0.0), (4.4, 3.0, 2.0)),     # main wall
        ((4.8, 1.6, 0.0), (5.9, 2.9, 2.0)),     # hidden box behind the corner
    ])
    overrides = {
        "start": (1.0, 1.6, 1.0),
        "goal": (9.0, 1.6, 1.0),
        "initial_yaw": 0.0,
        "horizon": 7.0,
    }
    return world, overrides


def build_world_from_spec(data):
    """Rasterize a human-editable scene description (boxes/cylinders)."""
    origin = data.get("origin", [0.0, 0.0, 0.0])
    resolution = float(data["resolution"])
    if "dims" in data:
        dims = data["dims"]
    else:
        size = data["size"]
        dims = [int(round(s / resolution)) for s in size]
    world = VoxelMap(origin, resolution, dims)
    world.occupancy[:] = FREE
    boxes = [(b["min"], b["max"]) for b in data.get("boxes", [])]
    cylinders = [
        ((c["center"][0], c["center"][1]), float(c["radius"]),
         (c["z"][0], c["z"][1]))
        for c in data.get("cylinders", [])
    ]
    world.set_occupied_boxes(boxes)
    world.set_occupied_cylinders(cylinders)
    return world


def load_world(path):
    path = str(path)
    if path.endswith((".yaml", ".yml")):
        with open(path) as fh:
            return build_world_from_spec(yaml.safe_load(fh))
    return VoxelMap.load(path)


def make_world(cfg):
    if cfg.scripted == "corner":
        world, overrides = corner_scene()
        return world, overrides
    if cfg.map_file:
        return load_world(cfg.map_file), {}
    world = generate_map(
        cfg.density, cfg.area, cfg.map_seed, cfg.obstacles,
        resolution=cfg.resolution, height=cfg.height,
        start=cfg.start, goal=cfg.goal,
    )
    return world, {}


# ----------------------------------------------------------------------
# yaw plans

class ActiveYawPlan:
    def __init__(self, spline):
        self.spline = spline

    def at(self, t):
        t = min(max(t, self.spline.t_start), self.spline.t_end)
        return float(self.spline.evaluate(t))


class TrackingYawPlan:
    """Velocity-tracking yaw evaluated on the position spline; holds the
    last heading through hover phases.  Query times must be monotone."""

    def __init__(self, traj, initial_yaw):
        self.traj = traj
        self.last = float(initial_yaw)

    def at(self, t):
        t = min(max(t, self.traj.t_start), self.traj.t_end)
        self.last = velocity_tracking_yaw(self.traj, t, prev_yaw=self.last)
        return self.last


# ----------------------------------------------------------------------
# replanning

def _local_goal(belief, position, goal, horizon):
    """Point on the straight reference at most `horizon` ahead, nudged back
    along the line while it sits inside a known obstacle."""
    position = np.asarray(position, dtype=float)
    goal = np.asarray(goal, dtype=float)
    to_goal = goal - position
    dist = np.linalg.norm(to_goal)
    if dist <= horizon:
        target = goal.copy()
    else:
        target = position + to_goal / dist * horizon
    # clamp inside the map with a small margin
    margin = belief.resolution
    target = np.clip(target, belief.origin + margin, belief.upper_corner - margin)
    direction = target - position
    span = np.linalg.norm(direction)
    if span < 1e-9:
        return target
    direction /= span
    steps = int(span / belief.resolution)
    for k in range(steps + 1):
        candidate = target - direction * (k * belief.resolution)
        if belief.state_at(candidate) != OCCUPIED:
            return candidate
    return position.copy()


def _seed_spline(state, local_goal, cfg, t_now):
    pos, vel, acc = state
    local_goal = np.asarray(local_goal, dtype=float)
    dist = np.linalg.norm(local_goal - pos)
    cruise = max(cfg.cruise_fraction * cfg.v_max, 0.1)
    duration = max(dist / cruise, 4.0 * cfg.knot_span)
    dt = cfg.knot_span
    n_spans = max(int(np.ceil(duration / dt)), 4)
    n_ctrl = n_spans + 3
    head = cubic_boundary_ctrl(pos, vel, acc, dt, "start")
    tail = cubic_boundary_ctrl(local_goal, np.zeros(3), np.zeros(3), dt, "end")
    inner_count = n_ctrl - 6
    alphas = np.linspace(0.0, 1.0, inner_count + 2)[1:-1]
    inner = pos[None, :] + alphas[:, None] * (local_goal - pos)[None, :]
    ctrl = np.vstack([head, inner, tail])
    return UniformBSpline(ctrl, dt, t_origin=t_now - 3 * dt)


def replan_once(state, belief, cfg, rng, t_now=0.0, current_yaw=0.0):
    """One full replanning cycle on the current belief map.

    Returns (position spline, yaw plan, diagnostics).  Raises
    InfeasiblePlanError when no collision-free trajectory exists.
    """
    t_wall = time.perf_counter()
    pos = np.asarray(state[0], dtype=float)
    local_goal = _local_goal(belief, pos, cfg.goal, cfg.horizon)
    if np.linalg.norm(local_goal - pos) < 2.0 * belief.resolution:
        raise InfeasiblePlanError("no progress possible along the reference")

    guides, roadmap = find_guide_paths(belief, pos, local_goal, cfg.topo, rng)
    if not guides:
        guides = [PolyPath([pos, local_goal])]
    seed = _seed_spline(state, local_goal, cfg, t_now)
    outcome = pgo_parallel(seed, guides, belief, cfg.pgo)
    traj = outcome.best
    diag = {
        "t": t_now,
        "guides": len(guides),
        "pgo": outcome.diagnostics(),
    }
    if cfg.risk_aware:
        result = refine_trajectory(traj, belief, cfg.pgo, cfg.refine)
        traj = result.trajectory
        diag["refine"] = result.diagnostics()
    if cfg.active_yaw:
        xi, times, search_diag = search_yaw_sequence(
            traj, belief, cfg.sensor, current_yaw, cfg.yaw_plan, cfg.ig,
            t_now=traj.t_start,
        )
        yaw_spline = optimize_yaw_bspline(xi, times, cfg.yaw_plan)
        yaw_plan = ActiveYawPlan(yaw_spline)
        diag["yaw"] = {"cost": search_diag["cost"], "chosen": search_diag["chosen"]}
    else:
        yaw_plan = TrackingYawPlan(traj, current_yaw)
    diag["wall_ms"] = (time.perf_counter() - t_wall) * 1e3
    return traj, yaw_plan, diag


# ----------------------------------------------------------------------
# execution loop

def _jerk_energy_segments(segments):
    """Jerk energy over executed spline windows, twice.

    Numeric: trapezoid at step knot_span/10 aligned per span (exact for the
    piecewise-constant cubic jerk).  Closed form: sum of |jerk|^2 * overlap
    per span.  Both are returned for cross-checking.
    """
    numeric = 0.0
    closed = 0.0
    for spline, t_a, t_b in segments:
        if t_b <= t_a:
            continue
        jerk_pts = (spline.control_points[3:] - 3 * spline.control_points[2:-1]
                    + 3 * spline.control_points[1:-2] - spline.control_points[:-3])
        jerk_pts = jerk_pts / spline.knot_span**3
        for span_i in range(len(jerk_pts)):
            lo = spline.t_origin + (span_i + 3) * spline.knot_span
            hi = lo + spline.knot_span
            a = max(lo, t_a)
            b = min(hi, t_b)
            if b <= a:
                continue
            j2 = float(np.sum(jerk_pts[span_i] ** 2))
            closed += j2 * (b - a)
            n = 11  # 10 sub-steps of knot_span/10
            ts = np.linspace(a, b, n)
            vals = np.full(n, j2)
            numeric += float(np.trapezoid(vals, ts))
    return numeric, closed


def run_scenario(cfg, world=None):
    """Run one flight; never raises for in-flight failures, encoding them in
    the result instead."""
    overrides = {}
    if world is None:
        world, overrides = make_world(cfg)
    start = np.asarray(overrides.get("start", cfg.start), dtype=float)
    goal = np.asarray(overrides.get("goal", cfg.goal), dtype=float)
    horizon = overrides.get("horizon", cfg.horizon)
    cfg_goal = goal

    world_esdf = VoxelMap(world.origin, world.resolution, world.dims,
                          clamp_distance=world.clamp_distance)
    world_esdf.occupancy = world.occupancy
    world_esdf.compute_esdf()

    belief = VoxelMap(world.origin, world.resolution, world.dims,
                      clamp_distance=world.clamp_distance)
    rng = np.random.default_rng(cfg.seed)

    if cfg.initial_yaw is not None:
        yaw = float(cfg.initial_yaw)
    elif "initial_yaw" in overrides:
        yaw = float(overrides["initial_yaw"])
    else:
        d = goal - start
        yaw = math.atan2(d[1], d[0])

    pos = start.copy()
    vel = np.zeros(3)
    acc = np.zeros(3)
    t = 0.0
    traj = None
    yaw_plan = None
    segments = []
    executed_path = [(t, *pos)]
    executed_yaw = [(t, yaw)]
    result = ScenarioResult(
        success=False, failure_cause=None, flight_distance=0.0, flight_time=0.0,
        energy=0.0, energy_closed_form=0.0, replan_count=0, emergency_stops=0,
        revealed_voxels=0,
    )

    def sense_now():
        result.revealed_voxels += belief.sense(world, pos, yaw, cfg.sensor)
        if belief.esdf_dirty or belief.esdf is None:
            belief.compute_esdf()

    def record_segment(upto):
        if traj is not None and upto > segment_start[0]:
            segments.append((traj, segment_start[0], upto))

    def detect_collision_ahead():
        """Arc distance to the first belief-occupied sample on the commanded
        trajectory, or None."""
        if traj is None:
            return None
        step = cfg.sim_dt * max(np.linalg.norm(vel), 0.5)
        step = max(step, belief.resolution / 2.0)
        arc = 0.0
        t_probe = t
        prev = pos
        while arc <= cfg.lookahead and t_probe < traj.t_end:
            t_probe = min(t_probe + step / max(np.linalg.norm(vel), 0.5), traj.t_end)
            p = np.asarray(traj.evaluate(t_probe))
            arc += float(np.linalg.norm(p - prev))
            prev = p
            if belief.state_at(np.clip(
                p, belief.origin + 1e-9, belief.upper_corner - 1e-9
            )) == OCCUPIED:
                return arc
            if t_probe >= traj.t_end:
                break
        return None

    def emergency_stop():
        nonlocal pos, t
        result.emergency_stops += 1
        speed = float(np.linalg.norm(vel))
        if speed < 1e-6:
            result.failure_cause = "emergency_stop_deadlock"
            return
        direction = vel / speed
        t_stop = speed / cfg.a_max
        tau = 0.0
        p0 = pos.copy()
        while tau < t_stop:
            tau = min(tau + cfg.sim_dt, t_stop)
            dist = speed * tau - 0.5 * cfg.a_max * tau**2
            pos = p0 + direction * dist
            t += cfg.sim_dt
            executed_path.append((t, *pos))
            d_true, _ = world_esdf.distance_and_gradient(
                np.clip(pos, world.origin + 1e-9, world.upper_corner - 1e-9))
            if d_true <= cfg.r_quad:
                result.failure_cause = "collision"
                return
        result.flight_distance += speed**2 / (2 * cfg.a_max)
        result.failure_cause = "emergency_stop_deadlock"

    segment_start = [0.0]
    last_replan = -math.inf
    sense_now()

    while True:
        if t >= cfg.timeout:
            result.failure_cause = "timeout"
            break
        if np.linalg.norm(pos - cfg_goal) <= cfg.goal_tolerance:
            result.success = True
            break

        need_replan = (t - last_replan) >= cfg.replan_period
        danger = detect_collision_ahead()
        if danger is not None:
            if danger <= cfg.emergency_distance:
                record_segment(t)
                emergency_stop()
                break
            need_replan = True

        if need_replan or traj is None:
            record_segment(t)
            sense_now()
            state = (pos.copy(), vel.copy(), acc.copy())
            t0 = time.perf_counter()
            try:
                # keep goal/horizon overrides visible to the planner
                plan_cfg = cfg
                if overrides:
                    plan_cfg = _override_mission(cfg, goal, horizon)
                new_traj, new_plan, diag = replan_once(
                    state, belief, plan_cfg, rng, t_now=t, current_yaw=yaw
                )
            except (InfeasiblePlanError, RefineFailureError) as exc:
                result.diagnostics.append({"t": t, "error": str(exc)})
                record_segment(t)
                emergency_stop()
                if result.failure_cause == "emergency_stop_deadlock":
                    result.failure_cause = "planner_infeasible"
                break
            result.replan_times_ms.append((time.perf_counter() - t0) * 1e3)
            result.replan_count += 1
            traj = new_traj
            yaw_plan = new_plan
            segment_start[0] = t
            last_replan = t
            result.diagnostics.append(diag)

        # advance one control step along the commanded trajectory
        t_next = t + cfg.sim_dt
        t_eval = min(t_next, traj.t_end)
        new_pos = np.asarray(traj.evaluate(t_eval))
        vel = np.asarray(traj.evaluate(t_eval, 1))
        acc = np.asarray(traj.evaluate(t_eval, 2))
        result.flight_distance += float(np.linalg.norm(new_pos - pos))
        pos = new_pos
        yaw = yaw_plan.at(t_eval)
        t = t_next
        executed_path.append((t, *pos))
        executed_yaw.append((t, yaw))

        d_true, _ = world_esdf.distance_and_gradient(
            np.clip(pos, world.origin + 1e-9, world.upper_corner - 1e-9))
        if d_true <= cfg.r_quad:
            record_segment(t)
            result.failure_cause = "collision"
            break

    if result.failure_cause is None and result.success:
        record_segment(t)
    result.flight_time = t
    numeric, closed = _jerk_energy_segments(segments)
    result.energy = numeric
    result.energy_closed_form = closed
    result.executed_path = [
        (round(tt, 6), round(x, 6), round(y, 6), round(z, 6))
        for tt, x, y, z in executed_path
    ]
    result.executed_yaw = [(round(tt, 6), round(a, 6)) for tt, a in executed_yaw]
    return result


def _override_mission(cfg, goal, horizon):
    """Shallow mission override for scripted scenes (goal/horizon only)."""
    import copy

    clone = copy.copy(cfg)
    clone.goal = tuple(goal)
    clone.horizon = horizon
    return clone
