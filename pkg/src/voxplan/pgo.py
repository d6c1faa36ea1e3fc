"""Two-phase path-guided B-spline trajectory optimization.

Phase one pulls the free control points toward attractors sampled along a
guiding path; the objective is an unconstrained quadratic with a closed-form
minimizer.  Phase two descends the full nonlinear cost (smoothness,
clearance, per-axis dynamic limits) with analytic gradients.  Running the
two phases once per guiding path and keeping the cheapest feasible result
gives the planner several locally optimal candidates to choose from.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .bspline import UniformBSpline
from .errors import ConfigError, InfeasiblePlanError, VoxplanError


@dataclass
class PgoConfig:
    lambda_smooth: float = 10.0
    lambda_guide: float = 5.0
    lambda_collision: float = 40.0
    lambda_dynamic: float = 0.5
    d_min: float = 0.4            # clearance distance (m)
    v_max: float = 3.0            # per-axis (m/s)
    a_max: float = 2.5            # per-axis (m/s^2)
    max_iterations: int = 200
    grad_tolerance: float = 1e-4
    oob_distance: float | None = None   # distance assumed outside the map

    def __post_init__(self):
        for name in ("lambda_smooth", "lambda_guide", "lambda_collision", "lambda_dynamic"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.d_min <= 0 or self.v_max <= 0 or self.a_max <= 0:
            raise ConfigError("d_min, v_max, a_max must be positive")


@dataclass
class GuideResult:
    spline: UniformBSpline
    cost: float
    iterations: int
    wall_time: float
    feasible: bool
    collision_free: bool
    length: float


@dataclass
class PgoOutcome:
    best: UniformBSpline
    best_index: int
    results: list = field(default_factory=list)

    def diagnostics(self):
        return {
            "guide_count": len(self.results),
            "chosen": self.best_index,
            "per_guide": [
                {
                    "cost": r.cost,
                    "iterations": r.iterations,
                    "wall_time_ms": r.wall_time * 1e3,
                    "feasible": r.feasible,
                    "collision_free": r.collision_free,
                }
                for r in self.results
            ],
        }


def penalty(x, y):
    """Quadratic one-sided penalty: (x - y)^2 where x <= y, else 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.where(x <= y, (x - y) ** 2, 0.0)


def free_index_range(n_ctrl, degree):
    """Indices of the control points the optimizer may move."""
    return np.arange(degree, n_ctrl - degree)


# ----------------------------------------------------------------------
# cost terms (value + gradient w.r.t. every control point)

def smoothness_cost_grad(ctrl, degree):
    """Elastic-band cost on second differences of the control polygon."""
    n = len(ctrl)
    seconds = ctrl[2:] - 2.0 * ctrl[1:-1] + ctrl[:-2]
    lo = degree - 2           # term center i runs over [degree-1, N-degree+1]
    hi = n - degree - 1
    sel = seconds[lo:hi + 1]
    cost = float(np.sum(sel**2))
    grad = np.zeros_like(ctrl)
    for offset, coef in ((0, 1.0), (1, -2.0), (2, 1.0)):
        np.add.at(grad, np.arange(lo, hi + 1) + offset, 2.0 * coef * sel)
    return cost, grad


def collision_cost_grad(ctrl, vmap, d_min, degree, oob_distance=None):
    """One-sided clearance penalty on the free control points."""
    n = len(ctrl)
    free = free_index_range(n, degree)
    grad = np.zeros_like(ctrl)
    if len(free) == 0:
        return 0.0, grad
    pts = ctrl[free]
    inside = vmap.contains(pts)
    inside = np.atleast_1d(inside)
    cost = 0.0
    if np.any(inside):
        d, g = vmap.distance_and_gradient(pts[inside])
        d = np.atleast_1d(d)
        g = np.atleast_2d(g)
        active = d <= d_min
        if np.any(active):
            diff = d[active] - d_min
            cost += float(np.sum(diff**2))
            rows = free[inside][active]
            grad[rows] += 2.0 * diff[:, None] * g[active]
    if oob_distance is not None and not np.all(inside):
        # points outside the map are treated as oob_distance away, no gradient
        d_out = oob_distance
        if d_out <= d_min:
            cost += float(np.sum((d_out - d_min) ** 2) * np.count_nonzero(~inside))
    return cost, grad


def velocity_cost_grad(ctrl, knot_span, v_max, degree):
    """Per-axis penalty on squared velocity control points above v_max^2."""
    n = len(ctrl)
    qdot = np.diff(ctrl, axis=0) / knot_span
    lo, hi = degree - 1, n - 1 - degree      # velocity index i in [p-1, N-p]
    sel = qdot[lo:hi + 1]
    over = v_max**2 - sel**2                 # penalty active when <= 0
    active = over <= 0.0
    cost = float(np.sum(over[active] ** 2))
    dpen = np.zeros_like(sel)
    dpen[active] = -4.0 * over[active] * sel[active]
    grad = np.zeros_like(ctrl)
    idx = np.arange(lo, hi + 1)
    np.add.at(grad, idx, -dpen / knot_span)
    np.add.at(grad, idx + 1, dpen / knot_span)
    return cost, grad


def acceleration_cost_grad(ctrl, knot_span, a_max, degree):
    """Per-axis penalty on squared acceleration control points above a_max^2."""
    n = len(ctrl)
    qdd = (ctrl[2:] - 2.0 * ctrl[1:-1] + ctrl[:-2]) / knot_span**2
    lo, hi = degree - 2, n - 1 - degree      # acceleration index i in [p-2, N-p]
    sel = qdd[lo:hi + 1]
    over = a_max**2 - sel**2
    active = over <= 0.0
    cost = float(np.sum(over[active] ** 2))
    dpen = np.zeros_like(sel)
    dpen[active] = -4.0 * over[active] * sel[active]
    grad = np.zeros_like(ctrl)
    idx = np.arange(lo, hi + 1)
    dt2 = knot_span**2
    np.add.at(grad, idx, dpen / dt2)
    np.add.at(grad, idx + 1, -2.0 * dpen / dt2)
    np.add.at(grad, idx + 2, dpen / dt2)
    return cost, grad


def phase2_cost_grad(ctrl, vmap, cfg, knot_span, degree):
    """Full phase-two cost and its gradient restricted to free points."""
    fs, gs = smoothness_cost_grad(ctrl, degree)
    fc, gc = collision_cost_grad(ctrl, vmap, cfg.d_min, degree, cfg.oob_distance)
    fv, gv = velocity_cost_grad(ctrl, knot_span, cfg.v_max, degree)
    fa, ga = acceleration_cost_grad(ctrl, knot_span, cfg.a_max, degree)
    cost = (cfg.lambda_smooth * fs + cfg.lambda_collision * fc
            + cfg.lambda_dynamic * (fv + fa))
    grad = (cfg.lambda_smooth * gs + cfg.lambda_collision * gc
            + cfg.lambda_dynamic * (gv + ga))
    free = free_index_range(len(ctrl), degree)
    return cost, grad[free]


# ----------------------------------------------------------------------
# phase 1: closed form warmup

def guide_attractors(path, n_free):
    """Attractor points for the free control points, sampled uniformly
    along the interior of the guiding path."""
    ss = (np.arange(n_free) + 1.0) / (n_free + 1.0)
    return np.array([path.point_at(s) for s in ss])


def phase1_closed_form(seed, attractors, cfg):
    """Exact minimizer of the smoothness + guide-attraction quadratic.

    The boundary control points (`degree` at each end) stay fixed; the free
    block solves a symmetric positive-definite system per axis.
    """
    p = seed.degree
    ctrl = seed.control_points.copy()
    n = len(ctrl)
    if n < 2 * p + 1:
        raise ConfigError("seed needs at least 2*degree+1 control points")
    free = free_index_range(n, p)
    attractors = np.asarray(attractors, dtype=float)
    if attractors.shape != (len(free), ctrl.shape[1]):
        raise ValueError(
            f"expected {len(free)} attractors of dim {ctrl.shape[1]}, "
            f"got shape {attractors.shape}"
        )
    lam_s, lam_g = cfg.lambda_smooth, cfg.lambda_guide
    if lam_s == 0.0 and lam_g == 0.0:
        raise ConfigError("phase 1 needs lambda_smooth or lambda_guide > 0")

    # assemble the full quadratic's Hessian once; take the free block
    centers = np.arange(p - 1, n - p + 1)
    d_rows = np.zeros((len(centers), n))
    for r, i in enumerate(centers):
        d_rows[r, i - 1:i + 2] = (1.0, -2.0, 1.0)
    h = lam_s * d_rows.T @ d_rows
    h[free, free] += lam_g
    rhs = np.zeros_like(ctrl)
    rhs[free] = lam_g * attractors
    fixed = np.setdiff1d(np.arange(n), free)
    rhs_free = rhs[free] - h[np.ix_(free, fixed)] @ ctrl[fixed]
    sol = np.linalg.solve(h[np.ix_(free, free)], rhs_free)
    ctrl[free] = sol
    return UniformBSpline(ctrl, seed.knot_span, degree=p, t_origin=seed.t_origin)


def phase1_cost(ctrl, attractors, cfg, degree):
    """Value of the phase-one objective."""
    fs, _ = smoothness_cost_grad(ctrl, degree)
    free = free_index_range(len(ctrl), degree)
    fg = float(np.sum((ctrl[free] - attractors) ** 2))
    return cfg.lambda_smooth * fs + cfg.lambda_guide * fg


def phase1_gradient(ctrl, attractors, cfg, degree):
    fs, gs = smoothness_cost_grad(ctrl, degree)
    free = free_index_range(len(ctrl), degree)
    grad = cfg.lambda_smooth * gs
    grad[free] += 2.0 * cfg.lambda_guide * (ctrl[free] - attractors)
    return grad[free]


# ----------------------------------------------------------------------
# phase 2: gradient-based refinement

def phase2_optimize(warmup, vmap, cfg, trace=None):
    """L-BFGS descent of the phase-two cost from the warmup trajectory.

    Returns a spline whose cost is never above the warmup's; boundary
    control points are untouched.  When `trace` is a list the cost at each
    accepted iterate is appended to it.
    """
    p = warmup.degree
    ctrl0 = warmup.control_points.copy()
    n, dim = ctrl0.shape
    free = free_index_range(n, p)
    if len(free) == 0:
        return warmup, 0

    def fun(x):
        ctrl = ctrl0.copy()
        ctrl[free] = x.reshape(len(free), dim)
        cost, grad = phase2_cost_grad(ctrl, vmap, cfg, warmup.knot_span, p)
        return cost, grad.ravel()

    callback = None
    x0 = ctrl0[free].ravel()
    cost0 = fun(x0)[0]
    if trace is not None:
        trace.append(cost0)
        callback = lambda xk: trace.append(fun(xk)[0])
    res = minimize(
        fun, x0, jac=True, method="L-BFGS-B", callback=callback,
        options={"maxiter": cfg.max_iterations, "gtol": cfg.grad_tolerance,
                 "ftol": 1e-12},
    )
    if not np.isfinite(res.fun):
        raise VoxplanError(
            f"phase-two cost became non-finite after {res.nit} iterations"
        )
    if res.fun > cost0:
        return warmup, int(res.nit)
    ctrl = ctrl0.copy()
    ctrl[free] = res.x.reshape(len(free), dim)
    out = UniformBSpline(ctrl, warmup.knot_span, degree=p, t_origin=warmup.t_origin)
    return out, int(res.nit)


def trajectory_collision_free(spline, vmap, samples=200):
    """Dense check that the curve never enters an occupied voxel."""
    _, pts = spline.sample(samples)
    inside = np.atleast_1d(vmap.contains(pts))
    if not np.all(inside):
        return False
    d, _ = vmap.distance_and_gradient(pts)
    return bool(np.all(np.atleast_1d(d) > 0.0))


def pgo_parallel(seed, guide_paths, vmap, cfg):
    """Run both phases per guiding path and keep the best feasible result.

    Each candidate is repaired to hull feasibility by the minimal knot-span
    stretch before scoring.  Candidates are ranked by phase-two cost with
    trajectory length as the tie breaker.
    """
    if not guide_paths:
        raise InfeasiblePlanError("no guiding paths supplied")
    p = seed.degree
    n_free = len(free_index_range(seed.n_ctrl, p))
    results = []
    for path in guide_paths:
        t0 = time.perf_counter()
        attractors = guide_attractors(path, n_free)
        warm = phase1_closed_form(seed, attractors, cfg)
        refined, iters = phase2_optimize(warm, vmap, cfg)
        stretch = refined.min_stretch_for_limits(cfg.v_max, cfg.a_max)
        if stretch > 1.0:
            refined = refined.time_stretched(stretch)
        cost, _ = phase2_cost_grad(
            refined.control_points, vmap, cfg, refined.knot_span, p
        )
        feasible = refined.hull_feasible(cfg.v_max, cfg.a_max)
        collision_free = trajectory_collision_free(refined, vmap)
        results.append(GuideResult(
            spline=refined,
            cost=float(cost),
            iterations=iters,
            wall_time=time.perf_counter() - t0,
            feasible=feasible,
            collision_free=collision_free,
            length=refined.arc_length(),
        ))
    usable = [i for i, r in enumerate(results) if r.feasible and r.collision_free]
    if not usable:
        raise InfeasiblePlanError("every guided optimization ended infeasible")
    best = min(usable, key=lambda i: (results[i].cost, results[i].length))
    return PgoOutcome(best=results[best].spline, best_index=best, results=results)
