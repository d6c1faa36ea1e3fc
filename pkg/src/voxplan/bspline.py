"""Uniform B-splines for 3D position and 1D yaw trajectories.

Control points plus a uniform knot span fully define the curve.  Velocity and
acceleration control points follow from first and second differences divided
by the knot span, so dynamic limits can be enforced on the control points via
the convex hull property instead of sampling the curve.
"""

from __future__ import annotations

import numpy as np

from .errors import SplineDomainError

_DOMAIN_EPS = 1e-9


class UniformBSpline:
    """Degree-p uniform B-spline over knots t_i = t_origin + i * dt.

    The valid evaluation domain is [t_origin + p*dt, t_origin + (n+1)*dt]
    for n+1 control points.  Control points may be scalars (yaw) or 3D.
    """

    def __init__(self, control_points, knot_span, degree=3, t_origin=0.0):
        pts = np.asarray(control_points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if degree < 0:
            raise ValueError("degree must be >= 0")
        if len(pts) < degree + 1:
            raise ValueError(f"need at least {degree + 1} control points for degree {degree}")
        if knot_span <= 0.0:
            raise ValueError("knot span must be > 0")
        self.control_points = pts
        self.knot_span = float(knot_span)
        self.degree = int(degree)
        self.t_origin = float(t_origin)

    # ------------------------------------------------------------------

    @property
    def n_ctrl(self):
        return len(self.control_points)

    @property
    def dim(self):
        return self.control_points.shape[1]

    @property
    def t_start(self):
        return self.t_origin + self.degree * self.knot_span

    @property
    def t_end(self):
        return self.t_origin + self.n_ctrl * self.knot_span

    @property
    def duration(self):
        return self.t_end - self.t_start

    def _check_domain(self, t):
        if t < self.t_start - _DOMAIN_EPS or t > self.t_end + _DOMAIN_EPS:
            raise SplineDomainError(
                f"t={t} outside spline domain [{self.t_start}, {self.t_end}]"
            )

    # ------------------------------------------------------------------

    def derivative_ctrl_points(self, order):
        """First/second difference control points (velocity, acceleration)."""
        if order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        q = self.control_points
        if order == 1:
            return np.diff(q, axis=0) / self.knot_span
        return (q[2:] - 2.0 * q[1:-1] + q[:-2]) / self.knot_span**2

    def derivative_spline(self):
        """The degree-(p-1) spline traced by the velocity control points."""
        return UniformBSpline(
            np.diff(self.control_points, axis=0) / self.knot_span,
            self.knot_span,
            degree=self.degree - 1,
            t_origin=self.t_origin + self.knot_span,
        )

    def evaluate(self, t, order=0):
        """Point (order 0) or time derivative (order >= 1) at time t."""
        if order < 0 or order > self.degree:
            raise ValueError("derivative order must be in [0, degree]")
        self._check_domain(t)
        spline = self
        for _ in range(order):
            spline = spline.derivative_spline()
        value = spline._de_boor(t)
        return value[0] if self.dim == 1 else value

    def _de_boor(self, t):
        p = self.degree
        dt = self.knot_span
        t0 = self.t_origin
        n = self.n_ctrl - 1
        span = int(np.floor((t - t0) / dt))
        span = min(max(span, p), n)
        d = [self.control_points[span - p + j].copy() for j in range(p + 1)]
        for r in range(1, p + 1):
            for j in range(p, r - 1, -1):
                i = j + span - p
                denom = (p - r + 1) * dt
                alpha = (t - (t0 + i * dt)) / denom
                d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j]
        return d[p]

    def sample(self, n=100, order=0):
        """Evaluate at n uniformly spaced times over the domain."""
        ts = np.linspace(self.t_start, self.t_end, n)
        vals = np.array([self.evaluate(t, order) for t in ts])
        return ts, vals

    def basis_weights(self, t, order=0):
        """Row weights w such that evaluate(t, order) == w @ control_points.

        Returned as a dense length-n_ctrl vector (only p+1-order entries of
        the reduced-degree spline expand to at most p+1 nonzeros here).
        """
        if order < 0 or order > self.degree:
            raise ValueError("derivative order must be in [0, degree]")
        self._check_domain(t)
        n = self.n_ctrl
        w = np.zeros(n)
        # chain the difference operators of the derivative splines
        op = np.eye(n)
        spline = self
        for _ in range(order):
            m = spline.n_ctrl
            diff = (np.eye(m - 1, m, k=1) - np.eye(m - 1, m)) / spline.knot_span
            op = diff @ op
            spline = spline.derivative_spline()
        p = spline.degree
        dt = spline.knot_span
        t0 = spline.t_origin
        span = int(np.floor((t - t0) / dt))
        span = min(max(span, p), spline.n_ctrl - 1)
        local = np.zeros((p + 1, p + 1))
        np.fill_diagonal(local, 1.0)
        d = [local[j] for j in range(p + 1)]
        for r in range(1, p + 1):
            for j in range(p, r - 1, -1):
                i = j + span - p
                alpha = (t - (t0 + i * dt)) / ((p - r + 1) * dt)
                d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j]
        rows = op[span - p:span + 1]
        w = d[p] @ rows
        return w

    # ------------------------------------------------------------------

    def hull_feasible(self, v_max, a_max):
        """True iff all velocity/acceleration control points stay in limits."""
        vel = self.derivative_ctrl_points(1)
        acc = self.derivative_ctrl_points(2)
        return bool(np.all(np.abs(vel) <= v_max) and np.all(np.abs(acc) <= a_max))

    def time_stretched(self, factor):
        """Same control polygon, knot span scaled by `factor` (slows down).

        The domain start time is preserved; the domain end moves out.
        """
        new_span = self.knot_span * factor
        return UniformBSpline(
            self.control_points.copy(),
            new_span,
            degree=self.degree,
            t_origin=self.t_start - self.degree * new_span,
        )

    def min_stretch_for_limits(self, v_max, a_max):
        """Smallest knot-span factor >= 1 making the hull test pass."""
        vel = np.abs(self.derivative_ctrl_points(1)).max(initial=0.0)
        acc = np.abs(self.derivative_ctrl_points(2)).max(initial=0.0)
        s = max(1.0, vel / v_max, np.sqrt(acc / a_max) if acc > 0 else 0.0)
        if s > 1.0:
            s *= 1.0 + 1e-9  # keep strictly inside the limits after rounding
        return s

    def arc_length(self, n=200):
        _, pts = self.sample(n)
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))

    def to_dict(self):
        return {
            "degree": self.degree,
            "knot_span": self.knot_span,
            "t_origin": self.t_origin,
            "control_points": self.control_points.tolist(),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            payload["control_points"],
            payload["knot_span"],
            degree=payload["degree"],
            t_origin=payload["t_origin"],
        )


# ----------------------------------------------------------------------
# boundary-state mapping (cubic)

def cubic_boundary_ctrl(position, velocity, acceleration, knot_span, side):
    """Three control points pinning position/velocity/acceleration.

    For a cubic uniform spline the boundary state at the domain start maps to
    the first three control points (side="start") via

        pos = (q0 + 4 q1 + q2) / 6,  vel = (q2 - q0) / (2 dt),
        acc = (q0 - 2 q1 + q2) / dt^2

    and symmetrically at the end.  Returns the points ordered as they appear
    in the control polygon.
    """
    x = np.asarray(position, dtype=float)
    v = np.asarray(velocity, dtype=float)
    a = np.asarray(acceleration, dtype=float)
    dt = knot_span
    if side == "start":
        q0 = x - dt * v + a * dt**2 / 3.0
        q1 = x - a * dt**2 / 6.0
        q2 = x + dt * v + a * dt**2 / 3.0
        return np.stack([q0, q1, q2])
    if side == "end":
        qn2 = x - dt * v + a * dt**2 / 3.0
        qn1 = x - a * dt**2 / 6.0
        qn = x + dt * v + a * dt**2 / 3.0
        return np.stack([qn2, qn1, qn])
    raise ValueError("side must be 'start' or 'end'")


def fit_through_points(waypoints, knot_span, boundary_velocities=None,
                       boundary_accelerations=None, degree=3, smoothing=1e-6):
    """Least-squares cubic spline through waypoints with pinned boundaries.

    Boundary positions/velocities (and accelerations, default zero) are
    enforced exactly through the cubic boundary mapping; interior waypoints
    are approximated in least squares with a small second-difference
    regularizer that keeps the fit well-posed when waypoints are sparse.
    """
    if degree != 3:
        raise ValueError("fitting is implemented for cubic splines")
    wp = np.asarray(waypoints, dtype=float)
    if wp.ndim == 1:
        wp = wp[:, None]
    if len(wp) < 2:
        raise ValueError("need at least 2 waypoints")
    dim = wp.shape[1]
    zeros = np.zeros(dim)
    v0, v1 = (zeros, zeros) if boundary_velocities is None else boundary_velocities
    a0, a1 = (zeros, zeros) if boundary_accelerations is None else boundary_accelerations

    n_ctrl = max(len(wp) + degree - 1, 2 * degree)
    head = cubic_boundary_ctrl(wp[0], v0, a0, knot_span, "start")
    tail = cubic_boundary_ctrl(wp[-1], v1, a1, knot_span, "end")
    n_free = n_ctrl - 6
    if n_free <= 0:
        ctrl = np.vstack([head, tail])
        return UniformBSpline(ctrl, knot_span, degree=degree)

    # seed a full spline to borrow its basis layout
    seed = np.vstack([head, np.zeros((n_free, dim)), tail])
    spline = UniformBSpline(seed, knot_span, degree=degree)
    ts = np.linspace(spline.t_start, spline.t_end, len(wp))
    rows = np.array([spline.basis_weights(t) for t in ts])

    free = slice(3, 3 + n_free)
    fixed_idx = np.r_[0:3, 3 + n_free:n_ctrl]
    a_free = rows[:, free]
    contrib = rows[:, fixed_idx] @ seed[fixed_idx]
    rhs = wp - contrib

    # second-difference regularizer over the full polygon
    d2 = np.zeros((n_ctrl - 2, n_ctrl))
    for i in range(n_ctrl - 2):
        d2[i, i:i + 3] = (1.0, -2.0, 1.0)
    r_free = d2[:, free]
    r_rhs = -d2[:, fixed_idx] @ seed[fixed_idx]

    lhs = np.vstack([a_free, np.sqrt(smoothing) * r_free])
    rhs_full = np.vstack([rhs, np.sqrt(smoothing) * r_rhs])
    sol, *_ = np.linalg.lstsq(lhs, rhs_full, rcond=None)
    ctrl = seed.copy()
    ctrl[free] = sol
    return UniformBSpline(ctrl, knot_span, degree=degree)
