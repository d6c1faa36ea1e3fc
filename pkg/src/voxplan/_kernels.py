"""Hot-path voxel traversal kernels.

Visibility tests dominate roadmap construction, so the inner segment walk is
JIT-compiled when numba is available.  The traversal semantics mirror
VoxelMap.raycast exactly: axes whose boundary crossings coincide within a
1e-12 parameter tolerance advance together, skipping zero-chord corner
voxels.  Without numba the callers fall back to the numpy raycast.
"""

import math

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return deco

_TIE_EPS = 1e-12
OCCUPIED = 2


SEG_FREE = 0
SEG_BLOCKED = 1
SEG_OOB = 2


@njit(cache=True)
def segment_query(occ, esdf, use_clearance, clearance,
                  ox, oy, oz, res, ax, ay, az, bx, by, bz):
    """Walk the segment; returns SEG_FREE, SEG_BLOCKED, or SEG_OOB when an
    endpoint lies outside the grid."""
    nx, ny, nz = occ.shape
    ux = ox + nx * res
    uy = oy + ny * res
    uz = oz + nz * res
    if (ax < ox or ay < oy or az < oz or ax > ux or ay > uy or az > uz
            or bx < ox or by < oy or bz < oz or bx > ux or by > uy or bz > uz):
        return SEG_OOB
    ix = int(math.floor((ax - ox) / res))
    iy = int(math.floor((ay - oy) / res))
    iz = int(math.floor((az - oz) / res))
    if ix >= nx:
        ix = nx - 1
    if iy >= ny:
        iy = ny - 1
    if iz >= nz:
        iz = nz - 1
    tx = int(math.floor((bx - ox) / res))
    ty = int(math.floor((by - oy) / res))
    tz = int(math.floor((bz - oz) / res))
    if tx >= nx:
        tx = nx - 1
    if ty >= ny:
        ty = ny - 1
    if tz >= nz:
        tz = nz - 1

    dx = bx - ax
    dy = by - ay
    dz = bz - az

    if dx > 0.0:
        step_x = 1
        tdx = res / dx
        tmx = (ox + (ix + 1) * res - ax) / dx
    elif dx < 0.0:
        step_x = -1
        tdx = -res / dx
        tmx = (ox + ix * res - ax) / dx
    else:
        step_x = 0
        tdx = math.inf
        tmx = math.inf
    if dy > 0.0:
        step_y = 1
        tdy = res / dy
        tmy = (oy + (iy + 1) * res - ay) / dy
    elif dy < 0.0:
        step_y = -1
        tdy = -res / dy
        tmy = (oy + iy * res - ay) / dy
    else:
        step_y = 0
        tdy = math.inf
        tmy = math.inf
    if dz > 0.0:
        step_z = 1
        tdz = res / dz
        tmz = (oz + (iz + 1) * res - az) / dz
    elif dz < 0.0:
        step_z = -1
        tdz = -res / dz
        tmz = (oz + iz * res - az) / dz
    else:
        step_z = 0
        tdz = math.inf
        tmz = math.inf

    max_steps = abs(tx - ix) + abs(ty - iy) + abs(tz - iz) + 4
    for _ in range(max_steps):
        if occ[ix, iy, iz] == OCCUPIED:
            return SEG_BLOCKED
        if use_clearance and esdf[ix, iy, iz] < clearance:
            return SEG_BLOCKED
        if ix == tx and iy == ty and iz == tz:
            return SEG_FREE
        tmin = tmx
        if tmy < tmin:
            tmin = tmy
        if tmz < tmin:
            tmin = tmz
        if tmin > 1.0 + _TIE_EPS:
            return SEG_FREE
        thresh = tmin + _TIE_EPS
        if tmx <= thresh:
            ix += step_x
            tmx += tdx
        if tmy <= thresh:
            iy += step_y
            tmy += tdy
        if tmz <= thresh:
            iz += step_z
            tmz += tdz
        if ix < 0 or iy < 0 or iz < 0 or ix >= nx or iy >= ny or iz >= nz:
            return SEG_FREE
    return SEG_FREE


@njit(cache=True)
def first_blocking_voxel(occ, ox, oy, oz, res, ax, ay, az, bx, by, bz):
    """Index of the first occupied voxel on the segment, or (-1,-1,-1)."""
    nx, ny, nz = occ.shape
    ix = min(max(int(math.floor((ax - ox) / res)), 0), nx - 1)
    iy = min(max(int(math.floor((ay - oy) / res)), 0), ny - 1)
    iz = min(max(int(math.floor((az - oz) / res)), 0), nz - 1)
    tx = min(max(int(math.floor((bx - ox) / res)), 0), nx - 1)
    ty = min(max(int(math.floor((by - oy) / res)), 0), ny - 1)
    tz = min(max(int(math.floor((bz - oz) / res)), 0), nz - 1)

    dx = bx - ax
    dy = by - ay
    dz = bz - az
    if dx > 0.0:
        step_x, tdx = 1, res / dx
        tmx = (ox + (ix + 1) * res - ax) / dx
    elif dx < 0.0:
        step_x, tdx = -1, -res / dx
        tmx = (ox + ix * res - ax) / dx
    else:
        step_x, tdx, tmx = 0, math.inf, math.inf
    if dy > 0.0:
        step_y, tdy = 1, res / dy
        tmy = (oy + (iy + 1) * res - ay) / dy
    elif dy < 0.0:
        step_y, tdy = -1, -res / dy
        tmy = (oy + iy * res - ay) / dy
    else:
        step_y, tdy, tmy = 0, math.inf, math.inf
    if dz > 0.0:
        step_z, tdz = 1, res / dz
        tmz = (oz + (iz + 1) * res - az) / dz
    elif dz < 0.0:
        step_z, tdz = -1, -res / dz
        tmz = (oz + iz * res - az) / dz
    else:
        step_z, tdz, tmz = 0, math.inf, math.inf

    max_steps = abs(tx - ix) + abs(ty - iy) + abs(tz - iz) + 4
    for _ in range(max_steps):
        if occ[ix, iy, iz] == OCCUPIED:
            return ix, iy, iz
        if ix == tx and iy == ty and iz == tz:
            return -1, -1, -1
        tmin = tmx
        if tmy < tmin:
            tmin = tmy
        if tmz < tmin:
            tmin = tmz
        if tmin > 1.0 + _TIE_EPS:
            return -1, -1, -1
        thresh = tmin + _TIE_EPS
        if tmx <= thresh:
            ix += step_x
            tmx += tdx
        if tmy <= thresh:
            iy += step_y
            tmy += tdy
        if tmz <= thresh:
            iz += step_z
            tmz += tdz
        if ix < 0 or iy < 0 or iz < 0 or ix >= nx or iy >= ny or iz >= nz:
            return -1, -1, -1
    return -1, -1, -1
