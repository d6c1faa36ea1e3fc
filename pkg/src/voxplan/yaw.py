"""Active-exploration yaw planning along the refined position trajectory.

A layered graph over sampled trajectory positions trades off information
gain of unknown space against yaw smoothness; the winning angle sequence is
then turned into a dynamically feasible 1D B-spline.  The baseline
velocity-tracking yaw (face where you fly) lives here too.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .bspline import UniformBSpline
from .errors import VoxplanError
from .grid import OCCUPIED, UNKNOWN

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = (a + math.pi) % TWO_PI - math.pi
    if isinstance(w, np.ndarray):
        w[w == -math.pi] = math.pi
        return w
    return math.pi if w == -math.pi else w


@dataclass
class IgConfig:
    w_lateral: float = 0.4      # 1/m, bias toward voxels near the path
    w_longitudinal: float = 0.2  # 1/m, bias toward voxels reached soon
    stride: int = 2             # voxel subsampling stride

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.w_lateral < 0 or self.w_longitudinal < 0:
            raise ValueError("bias weights must be >= 0")


@dataclass
class YawPlanConfig:
    layers: int = 6             # M positions after the current one
    candidates: int = 8         # J; J+1 yaw samples per layer
    mu: float = 0.2             # smoothness weight in the graph cost
    window: float = math.pi / 2  # half-width of the candidate window
    gamma_waypoint: float = 50.0
    gamma_feasible: float = 40.0
    yaw_rate_max: float = 3.0    # rad/s
    yaw_acc_max: float = 6.0     # rad/s^2
    knot_span: float | None = None  # default: layer spacing
    jerk_samples_per_span: int = 5


class TrajectoryContext:
    """Dense samples of the position trajectory for the gain bias terms."""

    def __init__(self, traj, t_now=None, step=None):
        step = traj.knot_span / 4.0 if step is None else step
        n = max(int(np.ceil(traj.duration / step)) + 1, 2)
        self.ts = np.linspace(traj.t_start, traj.t_end, n)
        self.points = np.array([traj.evaluate(t) for t in self.ts])
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.arc = np.concatenate([[0.0], np.cumsum(seg)])
        t_now = traj.t_start if t_now is None else t_now
        self.arc_now = float(np.interp(t_now, self.ts, self.arc))

    def bias_distances(self, centers):
        """Lateral distance to the path and arc length from the current
        time to the foot point, for each query point."""
        diff = centers[:, None, :] - self.points[None, :, :]
        d = np.linalg.norm(diff, axis=2)
        foot = np.argmin(d, axis=1)
        lateral = d[np.arange(len(centers)), foot]
        longitudinal = np.abs(self.arc[foot] - self.arc_now)
        return lateral, longitudinal


def information_gain(vmap, position, yaw, sensor, cfg, context, cache=None):
    """Biased count of unknown, in-FOV, visible voxels at (position, yaw).

    `cache` memoizes per-voxel visibility for one position so that sweeping
    many yaw candidates raycasts each voxel only once.
    """
    position = np.asarray(position, dtype=float)
    r = sensor.max_range
    if r <= 0.0:
        return 0.0
    res = vmap.resolution
    stride = cfg.stride
    lo = np.maximum(np.floor((position - r - vmap.origin) / res), 0).astype(int)
    hi = np.minimum(np.floor((position + r - vmap.origin) / res),
                    vmap.dims - 1).astype(int)
    lo = ((lo + stride - 1) // stride) * stride  # align to the stride lattice
    axes = [np.arange(lo[a], hi[a] + 1, stride) for a in range(3)]
    if any(len(ax) == 0 for ax in axes):
        return 0.0
    ii, jj, kk = np.meshgrid(*axes, indexing="ij")
    idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    state = vmap.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]]
    idx = idx[state == UNKNOWN]
    if idx.shape[0] == 0:
        return 0.0
    centers = vmap.origin + (idx + 0.5) * res
    d = centers - position
    dist = np.linalg.norm(d, axis=1)
    keep = dist <= r
    hnorm = np.hypot(d[:, 0], d[:, 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_h = (d[:, 0] * math.cos(yaw) + d[:, 1] * math.sin(yaw)) / hnorm
    ang_h = np.arccos(np.clip(cos_h, -1.0, 1.0))
    ang_h[hnorm == 0.0] = 0.0
    if sensor.horizontal_fov < TWO_PI:
        keep &= ang_h <= sensor.horizontal_fov / 2.0
    elev = np.arctan2(d[:, 2], hnorm)
    keep &= np.abs(elev) <= sensor.vertical_fov / 2.0
    idx = idx[keep]
    centers = centers[keep]
    if idx.shape[0] == 0:
        return 0.0

    visible = np.zeros(len(idx), dtype=bool)
    for row, (vox, center) in enumerate(zip(idx, centers)):
        key = (int(vox[0]), int(vox[1]), int(vox[2]))
        if cache is not None and key in cache:
            visible[row] = cache[key]
            continue
        # unknown voxels never block, so a free segment reaches the target
        vis = vmap.segment_free(position, center)
        if cache is not None:
            cache[key] = vis
        visible[row] = vis
    centers = centers[visible]
    if centers.shape[0] == 0:
        return 0.0
    if cfg.w_lateral == 0.0 and cfg.w_longitudinal == 0.0:
        return float(centers.shape[0])
    lateral, longitudinal = context.bias_distances(centers)
    return float(np.sum(np.exp(-cfg.w_lateral * lateral
                               - cfg.w_longitudinal * longitudinal)))


def _ray_reaches(vmap, position, center, target_key):
    """True when no occupied voxel blocks the ray before the target voxel."""
    for vox in vmap.raycast(position, center):
        tup = (int(vox[0]), int(vox[1]), int(vox[2]))
        if tup == target_key:
            return True
        if vmap.occupancy[tup] == OCCUPIED:
            return False
    return True


# ----------------------------------------------------------------------
# layered graph search

def dijkstra_layered(gains, angles, mu, start_angle):
    """Minimum-cost angle sequence through the layered yaw graph.

    Edge cost is -gain(node) + mu * wrapped_delta^2; gains are shifted by a
    per-edge constant to keep weights non-negative for Dijkstra (every full
    path has the same number of edges, so the argmin is unchanged).  Ties
    resolve toward lower node indices.
    """
    m = len(gains)
    if m == 0:
        raise ValueError("need at least one layer")
    offset = 0.0
    for g in gains:
        offset = max(offset, float(np.max(g)))

    dist = [np.full(len(g), np.inf) for g in gains]
    parent = [np.full(len(g), -1, dtype=int) for g in gains]
    heap = []
    for j, (g, ang) in enumerate(zip(gains[0], angles[0])):
        d = offset - g + mu * wrap_angle(ang - start_angle) ** 2
        dist[0][j] = d
        heapq.heappush(heap, (d, 0, j))
    while heap:
        d, layer, j = heapq.heappop(heap)
        if d > dist[layer][j]:
            continue
        if layer == m - 1:
            continue
        nxt = layer + 1
        for j2 in range(len(gains[nxt])):
            w = (offset - gains[nxt][j2]
                 + mu * wrap_angle(angles[nxt][j2] - angles[layer][j]) ** 2)
            nd = d + w
            if nd < dist[nxt][j2]:
                dist[nxt][j2] = nd
                parent[nxt][j2] = j
                heapq.heappush(heap, (nd, nxt, j2))
    last = int(np.argmin(dist[m - 1]))
    indices = [last]
    for layer in range(m - 1, 0, -1):
        indices.append(int(parent[layer][indices[-1]]))
    indices.reverse()
    total = float(dist[m - 1][last]) - m * offset
    return indices, total


def velocity_tracking_yaw(traj, t, prev_yaw=0.0, eps=1e-3):
    """Yaw that faces the horizontal velocity; holds prev_yaw when hovering."""
    v = np.asarray(traj.evaluate(t, 1))
    if math.hypot(v[0], v[1]) <= eps:
        return float(prev_yaw)
    return float(math.atan2(v[1], v[0]))


def search_yaw_sequence(traj, vmap, sensor, current_yaw, plan_cfg, ig_cfg,
                        t_now=None):
    """Sample layer positions along the trajectory and search the best
    sequence of yaw angles under the gain/smoothness path cost."""
    m = plan_cfg.layers
    if m < 1:
        raise ValueError("need at least one layer")
    times = np.linspace(traj.t_start, traj.t_end, m + 1)
    context = TrajectoryContext(traj, t_now=t_now)
    gains, angles = [], []
    prev_ref = current_yaw
    layer_diag = []
    for i in range(1, m + 1):
        pos = np.asarray(traj.evaluate(times[i]))
        ref = velocity_tracking_yaw(traj, times[i], prev_yaw=prev_ref)
        prev_ref = ref
        cand = ref + np.linspace(-plan_cfg.window, plan_cfg.window,
                                 plan_cfg.candidates + 1)
        cache = {}
        g = np.array([
            information_gain(vmap, pos, a, sensor, ig_cfg, context, cache)
            for a in cand
        ])
        gains.append(g)
        angles.append(cand)
        layer_diag.append({"position": pos.tolist(), "reference": ref})
    indices, cost = dijkstra_layered(gains, angles, plan_cfg.mu, current_yaw)
    xi = np.concatenate([[current_yaw],
                         [angles[i][indices[i]] for i in range(m)]])
    diagnostics = {
        "times": times.tolist(),
        "chosen": indices,
        "cost": cost,
        "gains": [g.tolist() for g in gains],
        "layers": layer_diag,
    }
    return xi, times, diagnostics


# ----------------------------------------------------------------------
# yaw spline optimization

class YawProblem:
    """Precomputed basis rows for the yaw objective over fixed knots."""

    def __init__(self, spline, times, xi, cfg):
        self.spline = spline
        self.times = np.asarray(times, dtype=float)
        self.xi = np.asarray(xi, dtype=float)
        self.cfg = cfg
        n = spline.n_ctrl
        spans = n - spline.degree
        per = cfg.jerk_samples_per_span
        sub = np.linspace(spline.t_start, spline.t_end, spans * per,
                          endpoint=False)
        sub = sub + (spline.t_end - spline.t_start) / (spans * per) / 2.0
        self.dt_num = (spline.t_end - spline.t_start) / len(sub)
        self.rows3 = np.array([spline.basis_weights(t, 3) for t in sub])
        self.rows0 = np.array([
            spline.basis_weights(min(max(t, spline.t_start), spline.t_end))
            for t in self.times
        ])

    def terms(self, ctrl):
        """(jerk, waypoint, feasibility) values with their gradients."""
        cfg = self.cfg
        n = len(ctrl)
        dt = self.spline.knot_span
        jerk = self.rows3 @ ctrl
        f_jerk = float(np.sum(jerk**2) * self.dt_num)
        g_jerk = 2.0 * self.dt_num * (self.rows3.T @ jerk)

        resid = self.rows0 @ ctrl - self.xi
        f_way = float(np.sum(resid**2))
        g_way = 2.0 * self.rows0.T @ resid

        vel = np.diff(ctrl) / dt
        acc = (ctrl[2:] - 2 * ctrl[1:-1] + ctrl[:-2]) / dt**2
        f_feas = 0.0
        g_feas = np.zeros(n)
        over_v = cfg.yaw_rate_max - np.abs(vel)
        act = over_v <= 0.0
        f_feas += float(np.sum(over_v[act] ** 2))
        dv = np.zeros_like(vel)
        dv[act] = -2.0 * over_v[act] * np.sign(vel[act])
        g_feas[:-1] += -dv / dt
        g_feas[1:] += dv / dt
        over_a = cfg.yaw_acc_max - np.abs(acc)
        act_a = over_a <= 0.0
        f_feas += float(np.sum(over_a[act_a] ** 2))
        da = np.zeros_like(acc)
        da[act_a] = -2.0 * over_a[act_a] * np.sign(acc[act_a])
        g_feas[:-2] += da / dt**2
        g_feas[1:-1] += -2.0 * da / dt**2
        g_feas[2:] += da / dt**2
        return (f_jerk, g_jerk), (f_way, g_way), (f_feas, g_feas)

    def cost_grad(self, ctrl):
        cfg = self.cfg
        (fj, gj), (fw, gw), (ff, gf) = self.terms(ctrl)
        cost = fj + cfg.gamma_waypoint * fw + cfg.gamma_feasible * ff
        grad = gj + cfg.gamma_waypoint * gw + cfg.gamma_feasible * gf
        return cost, grad


def yaw_cost_grad(ctrl, spline, times, xi, cfg):
    """One-shot evaluation of the yaw objective (testing convenience)."""
    return YawProblem(spline, times, xi, cfg).cost_grad(np.asarray(ctrl, float))


def optimize_yaw_bspline(xi, times, cfg):
    """Fit a feasible 1D yaw spline through the searched angle sequence.

    Angles are unwrapped to a continuous branch first; the result is
    repaired to hull feasibility by a knot-span stretch when the soft
    penalties leave violations.
    """
    xi = np.unwrap(np.asarray(xi, dtype=float))
    times = np.asarray(times, dtype=float)
    if len(xi) != len(times) or len(xi) < 2:
        raise ValueError("need matching times and angles, at least two")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    degree = 3
    span = cfg.knot_span if cfg.knot_span is not None else float(times[1] - times[0])
    duration = float(times[-1] - times[0])
    n_spans = max(int(np.ceil(duration / span - 1e-9)), 1)
    n_ctrl = n_spans + degree
    t_origin = times[0] - degree * span

    greville = t_origin + (np.arange(n_ctrl) + (degree + 1) / 2.0) * span
    ctrl0 = np.interp(np.clip(greville, times[0], times[-1]), times, xi)
    spline = UniformBSpline(ctrl0, span, degree=degree, t_origin=t_origin)
    problem = YawProblem(spline, times, xi, cfg)

    res = minimize(problem.cost_grad, ctrl0, jac=True, method="L-BFGS-B",
                   options={"maxiter": 150, "gtol": 1e-6, "ftol": 1e-14})
    if not np.isfinite(res.fun):
        raise VoxplanError("yaw optimization became non-finite")
    out = UniformBSpline(res.x, span, degree=degree, t_origin=t_origin)
    stretch = out.min_stretch_for_limits(cfg.yaw_rate_max, cfg.yaw_acc_max)
    if stretch > 1.0:
        out = out.time_stretched(stretch)
    return out
