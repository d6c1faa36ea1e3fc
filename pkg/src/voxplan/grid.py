"""Voxel occupancy grid with signed distance field and simulated depth sensing.

The map stores one of three states per voxel (unknown / free / occupied)
together with a Euclidean signed distance field (ESDF) recomputed from the
occupancy after each sensing update.  All planner-facing queries (distance,
gradient, occupancy state, segment visibility) live here.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import MapBoundsError, StaleEsdfError

UNKNOWN = 0
FREE = 1
OCCUPIED = 2

STATE_NAMES = {UNKNOWN: "unknown", FREE: "free", OCCUPIED: "occupied"}

_FRAC_SNAP = 1e-9  # snap interpolation offsets to grid nodes
_DUMMY_ESDF = np.zeros((1, 1, 1))  # placeholder for kernel calls without clearance


@dataclass
class SensorModel:
    """Limited field-of-view range sensor, yaw-steered, zero pitch/roll."""

    horizontal_fov: float = np.deg2rad(80.0)
    vertical_fov: float = np.deg2rad(60.0)
    max_range: float = 4.5

    def __post_init__(self):
        if not (0.0 < self.horizontal_fov <= 2.0 * np.pi):
            raise ValueError("horizontal_fov must be in (0, 2*pi]")
        if not (0.0 < self.vertical_fov <= np.pi):
            raise ValueError("vertical_fov must be in (0, pi]")
        if self.max_range < 0.0:
            raise ValueError("max_range must be >= 0")


class VoxelMap:
    """Regular 3D grid of occupancy states plus an ESDF in meters.

    The ESDF is positive outside obstacles (distance to the nearest occupied
    voxel center, clamped at `clamp_distance`) and negative inside (distance
    to the nearest non-occupied voxel center).  Unknown voxels are treated as
    free space by the distance transform; risk handling against unknown space
    is the refinement stage's job, not the map's.
    """

    def __init__(self, origin, resolution, dims, clamp_distance=10.0):
        dims = np.asarray(dims, dtype=int)
        if np.any(dims < 1):
            raise ValueError("dims components must be >= 1")
        if resolution <= 0.0:
            raise ValueError("resolution must be > 0")
        self.origin = np.asarray(origin, dtype=float).copy()
        self.resolution = float(resolution)
        self.dims = dims
        self.clamp_distance = float(clamp_distance)
        self.occupancy = np.full(dims, UNKNOWN, dtype=np.uint8)
        self.esdf = None
        self.esdf_dirty = True

    # ------------------------------------------------------------------
    # geometry helpers

    @property
    def upper_corner(self):
        return self.origin + self.dims * self.resolution

    def contains(self, points):
        """True where points lie inside the map box (boundary inclusive)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.all((p >= self.origin) & (p <= self.upper_corner), axis=1)
        return ok if ok.size > 1 else bool(ok[0])

    def point_to_index(self, point):
        point = np.asarray(point, dtype=float)
        u = (point - self.origin) / self.resolution
        if np.any(u < 0.0) or np.any(u > self.dims):
            raise MapBoundsError(f"point {point} outside map bounds")
        idx = np.minimum(np.floor(u).astype(int), self.dims - 1)
        return idx

    def index_to_center(self, idx):
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def voxel_centers(self):
        """Centers of every voxel, shape dims + (3,)."""
        axes = [
            self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.resolution
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    # ------------------------------------------------------------------
    # occupancy

    def set_occupied_boxes(self, boxes):
        """Mark voxels whose center falls inside any axis-aligned box.

        boxes: iterable of (min_corner, max_corner) pairs in meters.
        """
        for lo, hi in boxes:
            lo = np.asarray(lo, dtype=float)
            hi = np.asarray(hi, dtype=float)
            i0 = np.maximum(np.ceil((lo - self.origin) / self.resolution - 0.5), 0).astype(int)
            i1 = np.minimum(
                np.floor((hi - self.origin) / self.resolution - 0.5), self.dims - 1
            ).astype(int)
            if np.any(i1 < i0):
                continue
            self.occupancy[i0[0]:i1[0] + 1, i0[1]:i1[1] + 1, i0[2]:i1[2] + 1] = OCCUPIED
        self.esdf_dirty = True

    def set_occupied_cylinders(self, cylinders):
        """Mark voxels inside vertical cylinders ((cx, cy), radius, (z0, z1))."""
        centers = self.voxel_centers()
        for (cx, cy), radius, (z0, z1) in cylinders:
            inside = (
                ((centers[..., 0] - cx) ** 2 + (centers[..., 1] - cy) ** 2 <= radius**2)
                & (centers[..., 2] >= z0)
                & (centers[..., 2] <= z1)
            )
            self.occupancy[inside] = OCCUPIED
        self.esdf_dirty = True

    def fill_free(self):
        self.occupancy[self.occupancy == UNKNOWN] = FREE
        self.esdf_dirty = True

    def state_at(self, point):
        """Occupancy state of the voxel containing `point`."""
        idx = self.point_to_index(point)
        return int(self.occupancy[idx[0], idx[1], idx[2]])

    # ------------------------------------------------------------------
    # raycasting

    def raycast(self, start, end):
        """Exact ordered list of voxel indices traversed by the segment.

        Both endpoints must be inside the map; the endpoint voxels are
        included.  Voxels are identified from the midpoints of the segment
        intervals cut by the grid planes, which yields the same set as an
        incremental traversal while staying vectorized.
        """
        a = np.asarray(start, dtype=float)
        b = np.asarray(end, dtype=float)
        ia = self.point_to_index(a)
        ib = self.point_to_index(b)
        d = b - a
        if np.all(ia == ib):
            return ia[None, :].copy()
        ts = [np.array([0.0, 1.0])]
        for axis in range(3):
            if d[axis] == 0.0:
                continue
            lo, hi = sorted((a[axis], b[axis]))
            k0 = int(np.ceil((lo - self.origin[axis]) / self.resolution))
            k1 = int(np.floor((hi - self.origin[axis]) / self.resolution))
            if k1 < k0:
                continue
            planes = self.origin[axis] + np.arange(k0, k1 + 1) * self.resolution
            t = (planes - a[axis]) / d[axis]
            ts.append(t[(t > 0.0) & (t < 1.0)])
        ts = np.unique(np.concatenate(ts))
        seg_len = np.diff(ts)
        mids = 0.5 * (ts[:-1] + ts[1:])
        mids = mids[seg_len > 1e-12]
        pts = a[None, :] + mids[:, None] * d[None, :]
        idx = np.floor((pts - self.origin) / self.resolution).astype(int)
        np.clip(idx, 0, self.dims - 1, out=idx)
        # exact plane hits can produce repeated rows; keep first of each run
        keep = np.ones(len(idx), dtype=bool)
        keep[1:] = np.any(idx[1:] != idx[:-1], axis=1)
        return idx[keep]

    def segment_free(self, start, end, clearance=0.0):
        """True when no traversed voxel is occupied (unknown counts as free).

        With a positive clearance the stored per-voxel ESDF must also stay at
        or above it along the segment.
        """
        use_clearance = clearance > 0.0
        if use_clearance and (self.esdf_dirty or self.esdf is None):
            raise StaleEsdfError("clearance check requires a current ESDF")
        if _kernels.HAVE_NUMBA:
            esdf = self.esdf if use_clearance else _DUMMY_ESDF
            code = _kernels.segment_query(
                self.occupancy, esdf, use_clearance, clearance,
                self.origin[0], self.origin[1], self.origin[2], self.resolution,
                float(start[0]), float(start[1]), float(start[2]),
                float(end[0]), float(end[1]), float(end[2]),
            )
            if code == _kernels.SEG_OOB:
                raise MapBoundsError("segment endpoint outside map bounds")
            return code == _kernels.SEG_FREE
        idx = self.raycast(start, end)
        occ = self.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]]
        if np.any(occ == OCCUPIED):
            return False
        if use_clearance:
            vals = self.esdf[idx[:, 0], idx[:, 1], idx[:, 2]]
            if np.any(vals < clearance):
                return False
        return True

    def first_occupied_on_segment(self, start, end):
        """Index of the first occupied voxel hit by the segment, or None."""
        if _kernels.HAVE_NUMBA:
            a = np.asarray(start, dtype=float)
            b = np.asarray(end, dtype=float)
            if not (self.contains(a) and self.contains(b)):
                raise MapBoundsError("segment endpoint outside map bounds")
            i, j, k = _kernels.first_blocking_voxel(
                self.occupancy,
                self.origin[0], self.origin[1], self.origin[2], self.resolution,
                a[0], a[1], a[2], b[0], b[1], b[2],
            )
            if i < 0:
                return None
            return np.array([i, j, k])
        idx = self.raycast(start, end)
        occ = self.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]]
        hits = np.nonzero(occ == OCCUPIED)[0]
        if hits.size == 0:
            return None
        return idx[hits[0]]

    # ------------------------------------------------------------------
    # ESDF

    def compute_esdf(self):
        """Exact Euclidean distance transform at voxel centers.

        Distances are computed on the voxel lattice (exact per-axis
        lower-envelope transform) and scaled by the resolution, then clamped
        to +-clamp_distance.  Occupied voxels get the negated distance to the
        nearest non-occupied voxel center.
        """
        occ = self.occupancy == OCCUPIED
        clamp = self.clamp_distance
        if not occ.any():
            self.esdf = np.full(self.dims, clamp, dtype=float)
        elif occ.all():
            self.esdf = np.full(self.dims, -clamp, dtype=float)
        else:
            outside = ndimage.distance_transform_edt(~occ) * self.resolution
            inside = ndimage.distance_transform_edt(occ) * self.resolution
            esdf = np.minimum(outside, clamp)
            esdf[occ] = np.maximum(-inside[occ], -clamp)
            self.esdf = esdf
        self.esdf_dirty = False
        return self

    def distance_and_gradient(self, points):
        """Trilinearly interpolated ESDF value(s) and analytic gradient(s).

        Accepts a single point (3,) or a batch (N, 3).  Near the outer
        half-voxel shell the interpolation cell is clamped to the boundary
        cell, which keeps the field continuous up to the map faces.
        """
        if self.esdf_dirty or self.esdf is None:
            raise StaleEsdfError("ESDF is stale; call compute_esdf() first")
        p = np.asarray(points, dtype=float)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        u = (p - self.origin) / self.resolution
        if np.any(u < 0.0) or np.any(u > self.dims):
            raise MapBoundsError("interpolation point outside map bounds")
        u = u - 0.5
        base = np.floor(u).astype(int)
        np.clip(base, 0, np.maximum(self.dims - 2, 0), out=base)
        f = u - base
        np.clip(f, 0.0, 1.0, out=f)
        f[f < _FRAC_SNAP] = 0.0
        f[f > 1.0 - _FRAC_SNAP] = 1.0

        i, j, k = base[:, 0], base[:, 1], base[:, 2]
        i1 = np.minimum(i + 1, self.dims[0] - 1)
        j1 = np.minimum(j + 1, self.dims[1] - 1)
        k1 = np.minimum(k + 1, self.dims[2] - 1)
        e = self.esdf
        c000 = e[i, j, k]
        c100 = e[i1, j, k]
        c010 = e[i, j1, k]
        c110 = e[i1, j1, k]
        c001 = e[i, j, k1]
        c101 = e[i1, j, k1]
        c011 = e[i, j1, k1]
        c111 = e[i1, j1, k1]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

        # collapse z, then y, then x
        c00 = c000 * (1 - fz) + c001 * fz
        c10 = c100 * (1 - fz) + c101 * fz
        c01 = c010 * (1 - fz) + c011 * fz
        c11 = c110 * (1 - fz) + c111 * fz
        c0 = c00 * (1 - fy) + c01 * fy
        c1 = c10 * (1 - fy) + c11 * fy
        value = c0 * (1 - fx) + c1 * fx

        dvdx = c1 - c0
        dc0_dy = c01 - c00
        dc1_dy = c11 - c10
        dvdy = dc0_dy * (1 - fx) + dc1_dy * fx
        dc_dz00 = c001 - c000
        dc_dz10 = c101 - c100
        dc_dz01 = c011 - c010
        dc_dz11 = c111 - c110
        dvdz = ((dc_dz00 * (1 - fy) + dc_dz01 * fy) * (1 - fx)
                + (dc_dz10 * (1 - fy) + dc_dz11 * fy) * fx)
        grad = np.stack([dvdx, dvdy, dvdz], axis=1) / self.resolution

        if single:
            return float(value[0]), grad[0]
        return value, grad

    # ------------------------------------------------------------------
    # sensing

    def frustum_voxels(self, position, yaw, sensor):
        """Indices of voxels whose center lies inside the sensor frustum."""
        position = np.asarray(position, dtype=float)
        if not self.contains(position):
            raise MapBoundsError("sensor position outside map bounds")
        r = sensor.max_range
        if r <= 0.0:
            return np.empty((0, 3), dtype=int)
        lo = np.maximum(np.floor((position - r - self.origin) / self.resolution), 0).astype(int)
        hi = np.minimum(
            np.floor((position + r - self.origin) / self.resolution), self.dims - 1
        ).astype(int)
        ii, jj, kk = np.meshgrid(
            np.arange(lo[0], hi[0] + 1),
            np.arange(lo[1], hi[1] + 1),
            np.arange(lo[2], hi[2] + 1),
            indexing="ij",
        )
        idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
        centers = self.origin + (idx + 0.5) * self.resolution
        d = centers - position
        dist = np.linalg.norm(d, axis=1)
        mask = dist <= r
        hnorm = np.hypot(d[:, 0], d[:, 1])
        heading = np.array([np.cos(yaw), np.sin(yaw)])
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_h = (d[:, 0] * heading[0] + d[:, 1] * heading[1]) / hnorm
        ang_h = np.arccos(np.clip(cos_h, -1.0, 1.0))
        ang_h[hnorm == 0.0] = 0.0
        if sensor.horizontal_fov < 2.0 * np.pi:
            mask &= ang_h <= sensor.horizontal_fov / 2.0
        elev = np.arctan2(d[:, 2], hnorm)
        mask &= np.abs(elev) <= sensor.vertical_fov / 2.0
        # the sensor's own voxel is always observed
        mask |= dist == 0.0
        return idx[mask]

    def sense(self, world, position, yaw, sensor):
        """Reveal world voxels visible from the pose into this belief map.

        For every frustum voxel a ray is cast from the sensor position; the
        voxels along it up to and including the first occupied world voxel
        are copied from `world`.  Returns the number of voxels that left the
        unknown state.  Marks the ESDF stale.
        """
        if not np.array_equal(world.dims, self.dims):
            raise ValueError("belief and world maps must share geometry")
        position = np.asarray(position, dtype=float)
        if not world.contains(position):
            raise MapBoundsError("sensor pose outside world bounds")
        targets = self.frustum_voxels(position, yaw, sensor)
        revealed = 0
        if targets.shape[0] == 0:
            return revealed

        res = self.resolution
        world_occ = world.occupancy
        belief = self.occupancy
        dims = self.dims
        strides = np.array([dims[1] * dims[2], dims[2], 1])

        start_idx = self.point_to_index(position)
        n = targets.shape[0]
        cur = np.tile(start_idx, (n, 1))
        tgt_centers = self.origin + (targets + 0.5) * res
        d = tgt_centers - position
        step = np.sign(d).astype(int)
        with np.errstate(divide="ignore"):
            tdelta = np.where(d != 0.0, res / np.abs(d), np.inf)
        next_plane = self.origin + (cur + (step > 0)) * res
        with np.errstate(divide="ignore", invalid="ignore"):
            tmax = np.where(d != 0.0, (next_plane - position) / d, np.inf)

        alive = np.ones(n, dtype=bool)
        max_steps = int(np.abs(targets - start_idx).sum(axis=1).max()) + 3
        world_flat = world_occ.ravel()
        belief_flat = belief.ravel()
        tgt_flat = targets @ strides

        for _ in range(max_steps + 1):
            if not alive.any():
                break
            cur_alive = cur[alive]
            flat = cur_alive @ strides
            uniq = np.unique(flat)
            newly = belief_flat[uniq] == UNKNOWN
            revealed += int(np.count_nonzero(newly))
            belief_flat[uniq] = world_flat[uniq]

            blocked = world_flat[flat] == OCCUPIED
            arrived = flat == tgt_flat[alive]
            done = blocked | arrived
            if done.any():
                alive_ids = np.nonzero(alive)[0]
                alive[alive_ids[done]] = False
            still = np.nonzero(alive)[0]
            if still.size == 0:
                break
            # advance every axis tied at the closest boundary so that exact
            # corner crossings skip the zero-chord voxel, matching raycast()
            tmin = tmax[still].min(axis=1)
            adv = tmax[still] <= (tmin + 1e-12)[:, None]
            cur[still] += np.where(adv, step[still], 0)
            tmax[still] += np.where(adv, tdelta[still], 0.0)
            oob = np.any((cur[still] < 0) | (cur[still] >= dims), axis=1)
            if oob.any():
                alive[still[oob]] = False
        if revealed:
            self.esdf_dirty = True
        return revealed

    # ------------------------------------------------------------------
    # serialization

    def save(self, path):
        """Write the voxel dump: text header, then row-major state bytes."""
        ox, oy, oz = (float(v) for v in self.origin)
        with open(path, "wb") as fh:
            fh.write(b"VXM1\n")
            fh.write(f"origin {ox!r} {oy!r} {oz!r}\n".encode())
            fh.write(f"resolution {self.resolution!r}\n".encode())
            fh.write(f"dims {self.dims[0]} {self.dims[1]} {self.dims[2]}\n".encode())
            fh.write(f"clamp {self.clamp_distance!r}\n".encode())
            fh.write(b"data\n")
            fh.write(np.ascontiguousarray(self.occupancy).tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        header_end = blob.index(b"data\n") + len(b"data\n")
        lines = blob[:header_end].decode().splitlines()
        if lines[0] != "VXM1":
            raise ValueError(f"{path}: not a VXM1 voxel dump")
        fields = {}
        for line in lines[1:-1]:
            key, *vals = line.split()
            fields[key] = vals
        origin = [float(v) for v in fields["origin"]]
        resolution = float(fields["resolution"][0])
        dims = [int(v) for v in fields["dims"]]
        clamp = float(fields.get("clamp", ["10.0"])[0])
        vmap = cls(origin, resolution, dims, clamp_distance=clamp)
        states = np.frombuffer(blob[header_end:], dtype=np.uint8)
        vmap.occupancy = states.reshape(dims).copy()
        return vmap

    def occupancy_digest(self):
        """Stable printable digest of the occupancy volume, for logs."""
        return base64.b16encode(
            np.packbits(self.occupancy.ravel() == OCCUPIED)[:16].tobytes()
        ).decode().lower()
