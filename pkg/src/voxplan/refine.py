"""Risk-aware trajectory refinement against unknown space.

The refined trajectory must be able to observe the first unknown point it
will reach (the frontier point) early enough, and keep enough distance to it
that a worst-case obstacle right behind the frontier can be avoided by an
emergency stop.  Both requirements are soft-constrained at a single time
t_s and enforced through an iterative re-optimization that grows its speed
estimate geometrically until the stopping criterion holds on the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .bspline import UniformBSpline
from .errors import RefineFailureError, VoxplanError
from .grid import UNKNOWN
from .pgo import free_index_range, phase2_cost_grad


@dataclass
class RefineConfig:
    psi_min: float = 0.4          # expected visibility level (m)
    delta_v: float = 0.15         # slack of the view-ray constraint (m)
    r_quad: float = 0.3           # quadrotor radius + disturbance margin (m)
    alpha: float = 1.2            # speed-estimate growth factor (> 1)
    lambda_refine: float = 30.0   # weight of the view/stop penalties
    w_sf: float = 1.0             # relative weight of the stop-distance term
    search_step: float | None = None   # t scan step; default knot_span / 4
    max_outer: int | None = None       # default ceil(log_alpha(v_max/v0)) + 1

    def __post_init__(self):
        if self.alpha <= 1.0:
            raise ValueError("alpha must be > 1")
        if self.psi_min <= 0.0:
            raise ValueError("psi_min must be > 0")
        if self.r_quad < 0.0:
            raise ValueError("r_quad must be >= 0")


@dataclass
class VisibilityStatus:
    t_f: float
    p_f: np.ndarray
    visible_always: bool
    t_c: float | None = None
    p_c: np.ndarray | None = None
    v_c: np.ndarray | None = None
    degenerate: bool = False


@dataclass
class RefineResult:
    trajectory: UniformBSpline
    refined: bool
    success: bool
    status: VisibilityStatus | None = None
    iterations: int = 0
    fell_back: bool = False
    t_s: float | None = None
    v_s: float | None = None
    d_sf: float | None = None
    criteria_slack: float | None = None
    psi_profile: list = field(default_factory=list)

    def diagnostics(self):
        out = {
            "refined": self.refined,
            "success": self.success,
            "iterations": self.iterations,
            "fell_back": self.fell_back,
        }
        if self.status is not None:
            out["t_f"] = self.status.t_f
            out["t_c"] = self.status.t_c
            out["degenerate"] = self.status.degenerate
        for key in ("t_s", "v_s", "d_sf", "criteria_slack"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


# ----------------------------------------------------------------------
# visibility status

def frontier_intersection(traj, vmap, step):
    """First sampled trajectory time whose voxel is unknown, with position.

    Points outside the map are treated as unknown (the world beyond the map
    is unobserved by definition).  Returns None when the whole trajectory
    stays in known space.
    """
    ts = np.arange(traj.t_start, traj.t_end + step / 2.0, step)
    for t in ts:
        p = traj.evaluate(min(t, traj.t_end))
        if not vmap.contains(p) or vmap.state_at(p) == UNKNOWN:
            return float(t), np.asarray(p, dtype=float)
    return None


def visibility_level(p, p_f, vmap):
    """Minimum interpolated signed distance along the sight segment."""
    p = np.asarray(p, dtype=float)
    p_f = np.asarray(p_f, dtype=float)
    dist = np.linalg.norm(p_f - p)
    n = max(int(np.ceil(dist / vmap.resolution)) + 1, 2)
    pts = p[None, :] + np.linspace(0.0, 1.0, n)[:, None] * (p_f - p)[None, :]
    vals, _ = vmap.distance_and_gradient(pts)
    return float(np.min(vals))


def critical_view(traj, p_f, t_f, vmap, cfg, step):
    """Scan [t_start, t_f] for the time the frontier becomes reliably visible.

    Returns visible_always when every sample clears psi_min; otherwise the
    earliest time from which the visibility level stays at or above psi_min
    through t_f.  If the level never reaches psi_min the status is flagged
    degenerate with t_c = t_f.
    """
    ts = list(np.arange(traj.t_start, t_f, step)) + [t_f]
    psi = np.array([visibility_level(traj.evaluate(t), p_f, vmap) for t in ts])
    ok = psi >= cfg.psi_min
    if np.all(ok):
        return VisibilityStatus(t_f=t_f, p_f=p_f, visible_always=True), list(zip(ts, psi))
    if not ok[-1]:
        # never reliably visible before reaching the frontier
        t_c = t_f
        degenerate = True
    else:
        j = len(ok) - 1
        while j > 0 and ok[j - 1]:
            j -= 1
        t_c = ts[j]
        degenerate = False
    p_c = np.asarray(traj.evaluate(t_c), dtype=float)
    gap = p_c - p_f
    norm = np.linalg.norm(gap)
    if norm > 1e-9:
        v_c = gap / norm
    else:
        # frontier reached while still occluded; look back along the path
        t_back = max(traj.t_start, t_c - step)
        back = np.asarray(traj.evaluate(t_back), dtype=float) - p_f
        nb = np.linalg.norm(back)
        v_c = back / nb if nb > 1e-9 else np.array([1.0, 0.0, 0.0])
        degenerate = True
    status = VisibilityStatus(
        t_f=t_f, p_f=p_f, visible_always=False,
        t_c=float(t_c), p_c=p_c, v_c=v_c, degenerate=degenerate,
    )
    return status, list(zip(ts, psi))


def worst_case_safe(speed, dist, a_max, r_quad):
    """Stopping-distance inequality: v^2 / (2 a_max) <= d - r_quad."""
    return speed * speed / (2.0 * a_max) <= dist - r_quad


# ----------------------------------------------------------------------
# view / stop-distance penalties

def view_cost_grad(ctrl, spline, p_f, v_c, t_s, delta_v):
    """Penalty pushing p(t_s) onto the view ray from p_f along v_c."""
    w = spline.basis_weights(t_s)
    p = w @ ctrl
    e = p - p_f
    proj = np.eye(3) - np.outer(v_c, v_c)
    d_v = proj @ e
    n_dv = np.linalg.norm(d_v)
    grad = np.zeros_like(ctrl)
    if n_dv <= delta_v:
        return 0.0, grad
    cost = (delta_v - n_dv) ** 2
    dcost_dp = 2.0 * (n_dv - delta_v) / n_dv * (d_v @ proj)
    grad += w[:, None] * dcost_dp[None, :]
    return float(cost), grad


def stop_cost_grad(ctrl, spline, p_f, t_s, d_target):
    """Penalty pushing p(t_s) at least d_target away from the frontier."""
    w = spline.basis_weights(t_s)
    p = w @ ctrl
    e = p - p_f
    n_e = np.linalg.norm(e)
    grad = np.zeros_like(ctrl)
    if n_e >= d_target:
        return 0.0, grad
    cost = (n_e - d_target) ** 2
    if n_e > 1e-12:
        dcost_dp = 2.0 * (n_e - d_target) / n_e * e
        grad += w[:, None] * dcost_dp[None, :]
    return float(cost), grad


def fdv_fdsf_cost_grad(ctrl, spline, p_f, v_c, t_s, d_target, delta_v, w_sf):
    """Combined view + stop-distance penalty with its control-point gradient."""
    c_v, g_v = view_cost_grad(ctrl, spline, p_f, v_c, t_s, delta_v)
    c_s, g_s = stop_cost_grad(ctrl, spline, p_f, t_s, d_target)
    return c_v + w_sf * c_s, g_v + w_sf * g_s


# ----------------------------------------------------------------------
# the refinement loop

def _optimize_with_constraints(traj, vmap, pgo_cfg, cfg, p_f, v_c, t_s, d_target):
    p = traj.degree
    ctrl0 = traj.control_points.copy()
    n, dim = ctrl0.shape
    free = free_index_range(n, p)

    def fun(x):
        ctrl = ctrl0.copy()
        ctrl[free] = x.reshape(len(free), dim)
        base, base_grad = phase2_cost_grad(ctrl, vmap, pgo_cfg, traj.knot_span, p)
        extra, extra_grad = fdv_fdsf_cost_grad(
            ctrl, traj, p_f, v_c, t_s, d_target, cfg.delta_v, cfg.w_sf
        )
        cost = base + cfg.lambda_refine * extra
        grad = base_grad + cfg.lambda_refine * extra_grad[free]
        return cost, grad.ravel()

    res = minimize(
        fun, ctrl0[free].ravel(), jac=True, method="L-BFGS-B",
        options={"maxiter": pgo_cfg.max_iterations, "gtol": pgo_cfg.grad_tolerance,
                 "ftol": 1e-12},
    )
    if not np.isfinite(res.fun):
        raise VoxplanError("refinement cost became non-finite")
    ctrl = ctrl0.copy()
    ctrl[free] = res.x.reshape(len(free), dim)
    return UniformBSpline(ctrl, traj.knot_span, degree=p, t_origin=traj.t_origin)


def _speed(traj, t):
    return float(np.linalg.norm(traj.evaluate(t, 1)))


def _average_speed(traj, t0, t1, step):
    ts = np.arange(t0, t1 + step / 2.0, step)
    ts = np.clip(ts, traj.t_start, traj.t_end)
    if len(ts) == 0:
        ts = [t0]
    return float(np.mean([_speed(traj, t) for t in ts]))


def refine_trajectory(best, vmap, pgo_cfg, cfg):
    """Enforce early frontier observation and worst-case stopping distance.

    Mirrors the iterative scheme: estimate the speed at the constrained
    time, re-optimize with the view and stop-distance penalties, measure the
    result, and grow the estimate until the stopping criterion holds.  When
    the iteration budget runs out the trajectory is slowed down by the
    minimal knot-span stretch that restores the criterion.
    """
    step = cfg.search_step if cfg.search_step is not None else best.knot_span / 4.0
    frontier = frontier_intersection(best, vmap, step)
    if frontier is None:
        return RefineResult(trajectory=best, refined=False, success=True)
    t_f, p_f = frontier
    status, psi_profile = critical_view(best, p_f, t_f, vmap, cfg, step)
    if status.visible_always:
        return RefineResult(trajectory=best, refined=False, success=True,
                            status=status, psi_profile=psi_profile)

    speed_c = _speed(best, status.t_c)
    d_cf = float(np.linalg.norm(status.p_c - p_f))
    if not status.degenerate and worst_case_safe(speed_c, d_cf, pgo_cfg.a_max, cfg.r_quad):
        return RefineResult(trajectory=best, refined=False, success=True,
                            status=status, psi_profile=psi_profile)

    v_hat = max(_average_speed(best, best.t_start, t_f, step), 1e-3)
    if cfg.max_outer is not None:
        max_outer = cfg.max_outer
    else:
        ratio = max(pgo_cfg.v_max / v_hat, 1.0)
        max_outer = int(math.ceil(math.log(ratio) / math.log(cfg.alpha))) + 1

    scan_ts = list(np.arange(best.t_start, t_f, step)) + [t_f]
    refined = best
    t_s = status.t_c if status.t_c is not None else t_f
    v_s, d_sf = speed_c, d_cf
    iterations = 0
    for _ in range(max_outer):
        iterations += 1
        d_target = v_hat * v_hat / (2.0 * pgo_cfg.a_max) + cfg.r_quad
        violations = [
            fdv_fdsf_cost_grad(
                best.control_points, best, p_f, status.v_c, t,
                d_target, cfg.delta_v, cfg.w_sf,
            )[0]
            for t in scan_ts
        ]
        t_s = float(scan_ts[int(np.argmin(violations))])
        refined = _optimize_with_constraints(
            best, vmap, pgo_cfg, cfg, p_f, status.v_c, t_s, d_target
        )
        stretch = refined.min_stretch_for_limits(pgo_cfg.v_max, pgo_cfg.a_max)
        if stretch > 1.0:
            refined = refined.time_stretched(stretch)
            t_s = refined.t_start + (t_s - best.t_start) * stretch
        v_s = _speed(refined, t_s)
        d_sf = float(np.linalg.norm(np.asarray(refined.evaluate(t_s)) - p_f))
        if worst_case_safe(v_s, d_sf, pgo_cfg.a_max, cfg.r_quad):
            return RefineResult(
                trajectory=refined, refined=True, success=True, status=status,
                iterations=iterations, t_s=t_s, v_s=v_s, d_sf=d_sf,
                criteria_slack=(d_sf - cfg.r_quad) - v_s**2 / (2 * pgo_cfg.a_max),
                psi_profile=psi_profile,
            )
        v_hat *= cfg.alpha

    # iteration cap: slow the best candidate down until the criterion holds
    if d_sf <= cfg.r_quad:
        raise RefineFailureError(
            f"frontier distance {d_sf:.3f} m inside the safety margin "
            f"{cfg.r_quad:.3f} m; cannot stop in time at any speed"
        )
    needed = math.sqrt(2.0 * pgo_cfg.a_max * (d_sf - cfg.r_quad))
    factor = max(v_s / needed, 1.0) * (1.0 + 1e-9)
    slowed = refined.time_stretched(factor)
    t_s_slow = slowed.t_start + (t_s - refined.t_start) * factor
    v_slow = _speed(slowed, t_s_slow)
    d_slow = float(np.linalg.norm(np.asarray(slowed.evaluate(t_s_slow)) - p_f))
    success = worst_case_safe(v_slow, d_slow, pgo_cfg.a_max, cfg.r_quad)
    return RefineResult(
        trajectory=slowed, refined=True, success=success, status=status,
        iterations=iterations, fell_back=True, t_s=t_s_slow, v_s=v_slow,
        d_sf=d_slow,
        criteria_slack=(d_slow - cfg.r_quad) - v_slow**2 / (2 * pgo_cfg.a_max),
        psi_profile=psi_profile,
    )
