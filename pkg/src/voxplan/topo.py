"""Topologically distinct guiding paths between start and goal.

Two equal-endpoint paths are considered equivalent when every segment
connecting same-parameter points is collision-free (uniform visibility
deformation).  A compact guard/connector roadmap is sampled to capture one
or a few paths per equivalence class; extracted paths are shortcut and
pruned to a small set of distinct guides for the trajectory optimizer.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasiblePlanError
from .grid import OCCUPIED

GUARD = "guard"
CONNECTOR = "connector"


class PolyPath:
    """Piecewise-linear path with uniform arc-length parameterization."""

    def __init__(self, waypoints):
        wp = np.atleast_2d(np.asarray(waypoints, dtype=float))
        if len(wp) < 2:
            raise ValueError("a path needs at least 2 waypoints")
        keep = [0]
        for i in range(1, len(wp)):
            if np.linalg.norm(wp[i] - wp[keep[-1]]) > 1e-12:
                keep.append(i)
        if len(keep) < 2:
            raise ValueError("waypoints are all coincident")
        self.waypoints = wp[keep]
        seg = np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self._cum[-1])

    def point_at(self, s):
        """Position at normalized arc-length parameter s in [0, 1]."""
        s = np.clip(s, 0.0, 1.0)
        target = s * self.length
        i = int(np.searchsorted(self._cum, target, side="right") - 1)
        i = min(i, len(self.waypoints) - 2)
        seg_len = self._cum[i + 1] - self._cum[i]
        f = 0.0 if seg_len == 0.0 else (target - self._cum[i]) / seg_len
        return self.waypoints[i] + f * (self.waypoints[i + 1] - self.waypoints[i])

    def resample(self, n):
        return np.array([self.point_at(s) for s in np.linspace(0.0, 1.0, n)])


@dataclass
class TopoConfig:
    t_max: float | None = None      # wall-clock budget; None keeps runs deterministic
    n_max: int = 600                # sample budget
    k_max: int = 4                  # guiding paths kept after pruning
    r_max: float = 3.0              # prune paths longer than r_max * shortest
    uvd_steps: int = 32             # discretization K of the equivalence test
    inflate: tuple = (3.0, 3.0, 1.5)
    clearance: float = 0.0          # visibility margin; 0 = occupancy only
    raw_path_cap: int = 64
    shortcut_push_steps: int = 10

    def __post_init__(self):
        if self.uvd_steps < 2:
            raise ValueError("uvd_steps must be >= 2")
        if self.r_max <= 1.0:
            raise ValueError("r_max must be > 1")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")


@dataclass
class RoadmapNode:
    uid: int
    position: np.ndarray
    kind: str


@dataclass
class Roadmap:
    nodes: dict = field(default_factory=dict)
    adjacency: dict = field(default_factory=dict)
    start_id: int = 0
    goal_id: int = 1
    _next: int = 0

    def add_node(self, position, kind):
        uid = self._next
        self._next += 1
        self.nodes[uid] = RoadmapNode(uid, np.asarray(position, dtype=float), kind)
        self.adjacency[uid] = []
        return uid

    def connect(self, a, b):
        self.adjacency[a].append(b)
        self.adjacency[b].append(a)

    def guards(self):
        return [n for n in self.nodes.values() if n.kind == GUARD]

    def connectors(self):
        return [n for n in self.nodes.values() if n.kind == CONNECTOR]

    def dump_jsonl(self, fh):
        """Line-delimited node/edge records for external plotting."""
        for node in self.nodes.values():
            fh.write(json.dumps({
                "type": "node", "id": node.uid, "kind": node.kind,
                "position": [float(v) for v in node.position],
            }) + "\n")
        seen = set()
        for a, nbrs in self.adjacency.items():
            for b in nbrs:
                key = (min(a, b), max(a, b))
                if key in seen:
                    continue
                seen.add(key)
                fh.write(json.dumps({"type": "edge", "a": key[0], "b": key[1]}) + "\n")


# ----------------------------------------------------------------------


def uvd_equivalent(path_a, path_b, vmap, steps=32, clearance=0.0):
    """True when the straight segment between same-parameter points is free
    for every s = i/steps.  Unknown voxels count as free."""
    tol = vmap.resolution / 2.0
    for ia, ib in ((0.0, 0.0), (1.0, 1.0)):
        if np.linalg.norm(path_a.point_at(ia) - path_b.point_at(ib)) > tol:
            raise ValueError("paths must share endpoints for the equivalence test")
    for i in range(steps + 1):
        s = i / steps
        if not vmap.segment_free(path_a.point_at(s), path_b.point_at(s), clearance):
            return False
    return True


def _sample_region(vmap, start, goal, inflate):
    lo = np.minimum(start, goal) - np.asarray(inflate, dtype=float)
    hi = np.maximum(start, goal) + np.asarray(inflate, dtype=float)
    margin = vmap.resolution * 0.5
    lo = np.maximum(lo, vmap.origin + margin)
    hi = np.minimum(hi, vmap.upper_corner - margin)
    return lo, hi


def build_roadmap(vmap, start, goal, cfg, rng):
    """Sample a guard/connector roadmap capturing distinct path classes.

    Guards claim mutually invisible regions of free space; a sample seen by
    exactly two guards becomes a connector when the implied two-segment path
    is distinct from every existing connection of that guard pair, or moves
    an existing connector when it shortens an equivalent connection.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    for name, p in (("start", start), ("goal", goal)):
        if vmap.state_at(p) == OCCUPIED:
            raise InfeasiblePlanError(f"{name} position is inside an obstacle")

    roadmap = Roadmap()
    roadmap.start_id = roadmap.add_node(start, GUARD)
    roadmap.goal_id = roadmap.add_node(goal, GUARD)
    lo, hi = _sample_region(vmap, start, goal, cfg.inflate)
    clock = time.perf_counter
    deadline = None if cfg.t_max is None else clock() + cfg.t_max

    n_samples = 0
    while n_samples < cfg.n_max:
        if deadline is not None and clock() > deadline:
            break
        n_samples += 1
        p_s = rng.uniform(lo, hi)
        if vmap.state_at(p_s) == OCCUPIED:
            continue
        visible = [g for g in roadmap.guards()
                   if vmap.segment_free(p_s, g.position, cfg.clearance)]
        if len(visible) == 0:
            roadmap.add_node(p_s, GUARD)
        elif len(visible) == 2:
            g1, g2 = visible
            candidate = PolyPath([g1.position, p_s, g2.position])
            shared = [roadmap.nodes[c] for c in roadmap.adjacency[g1.uid]
                      if c in roadmap.adjacency[g2.uid]]
            distinct = True
            for conn in shared:
                existing = PolyPath([g1.position, conn.position, g2.position])
                if uvd_equivalent(candidate, existing, vmap,
                                  cfg.uvd_steps, cfg.clearance):
                    distinct = False
                    if candidate.length < existing.length:
                        conn.position = p_s.copy()
                    break
            if distinct:
                cid = roadmap.add_node(p_s, CONNECTOR)
                roadmap.connect(cid, g1.uid)
                roadmap.connect(cid, g2.uid)
        # samples seen by one or 3+ guards are discarded
    return roadmap


def extract_path_ids(roadmap, cap=64):
    """All acyclic start-goal node-id sequences via depth-first search."""
    paths = []
    target = roadmap.goal_id
    stack = [(roadmap.start_id, [roadmap.start_id], {roadmap.start_id})]
    while stack and len(paths) < cap:
        node, seq, visited = stack.pop()
        for nbr in reversed(roadmap.adjacency[node]):
            if nbr == target:
                paths.append(seq + [nbr])
                if len(paths) >= cap:
                    break
            elif nbr not in visited:
                stack.append((nbr, seq + [nbr], visited | {nbr}))
    return paths


def extract_paths(roadmap, cap=64):
    """Start-goal paths of the roadmap as PolyPaths."""
    return [
        PolyPath([roadmap.nodes[uid].position for uid in seq])
        for seq in extract_path_ids(roadmap, cap)
    ]


def _push_direction(segment_dir, gradient):
    """Unit push direction orthogonal to the segment and coplanar with the
    segment and the distance-field gradient."""
    l = segment_dir / max(np.linalg.norm(segment_dir), 1e-12)
    g_perp = gradient - np.dot(gradient, l) * l
    norm = np.linalg.norm(g_perp)
    if norm < 1e-9:
        # gradient parallel to the segment; fall back to any orthogonal axis
        pick = np.argmin(np.abs(l))
        axis = np.zeros(3)
        axis[pick] = 1.0
        g_perp = axis - np.dot(axis, l) * l
        norm = np.linalg.norm(g_perp)
    return g_perp / norm


def shorten_path(path, vmap, cfg):
    """Topologically equivalent shortcut of a detoured path.

    Blocking voxels between the shortcut head and the discretized input are
    pushed sideways (orthogonal to the sight line, within the plane spanned
    by the sight line and the ESDF gradient) until the connection clears.
    Falls back to the input whenever the candidate violates the contract
    (longer, colliding, or in a different class).
    """
    n = max(int(np.ceil(path.length / vmap.resolution)) + 1, 2)
    pts = path.resample(n)
    shortcut = [pts[0]]
    for p_d in pts[1:-1]:
        if vmap.segment_free(shortcut[-1], p_d, cfg.clearance):
            continue
        block = vmap.first_occupied_on_segment(shortcut[-1], p_d)
        if block is None:
            continue
        p_b = vmap.index_to_center(block)
        _, grad = vmap.distance_and_gradient(p_b)
        direction = _push_direction(p_d - shortcut[-1], grad)
        p_o = p_b
        for _ in range(cfg.shortcut_push_steps):
            p_o = p_o + direction * vmap.resolution
            if not vmap.contains(p_o):
                p_o = p_o - direction * vmap.resolution
                break
            if vmap.segment_free(shortcut[-1], p_o, cfg.clearance):
                break
        shortcut.append(p_o)
    shortcut.append(pts[-1])
    try:
        candidate = PolyPath(shortcut)
    except ValueError:
        return path
    if candidate.length > path.length + 1e-9:
        return path
    for i in range(len(candidate.waypoints) - 1):
        if not vmap.segment_free(candidate.waypoints[i], candidate.waypoints[i + 1],
                                 cfg.clearance):
            return path
    try:
        if not uvd_equivalent(candidate, path, vmap, cfg.uvd_steps, cfg.clearance):
            return path
    except ValueError:
        return path
    return candidate


def prune_and_select(paths, vmap, cfg):
    """Keep at most k_max pairwise-distinct shortest paths within the ratio."""
    if not paths:
        return []
    ordered = sorted(paths, key=lambda p: p.length)
    kept = []
    shortest = ordered[0].length
    for path in ordered:
        if path.length > cfg.r_max * shortest:
            break
        redundant = any(
            uvd_equivalent(path, other, vmap, cfg.uvd_steps, cfg.clearance)
            for other in kept
        )
        if not redundant:
            kept.append(path)
        if len(kept) >= cfg.k_max:
            break
    return kept


def find_guide_paths(vmap, start, goal, cfg, rng):
    """Full pipeline: roadmap, extraction, shortcut, prune."""
    roadmap = build_roadmap(vmap, start, goal, cfg, rng)
    raw = extract_paths(roadmap, cfg.raw_path_cap)
    shortened = [shorten_path(p, vmap, cfg) for p in raw]
    return prune_and_select(shortened, vmap, cfg), roadmap
