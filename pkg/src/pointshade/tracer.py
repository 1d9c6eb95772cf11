"""Ground-truth shading via BVH ray tracing.

Supplies the supervision signal and reference images: cosine-weighted
ambient occlusion, diffuse path-traced direct/indirect irradiance under
point lights, a directional sun, a procedural gradient sky and (for
validation scenes) emissive surfaces, plus pinhole G-buffer rasterization.

All per-point and per-pixel estimators draw from counter-based random
streams keyed by the item index, so results are independent of the thread
schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from ._validation import check_array, check_scalar
from .meshes import TriangleMesh

RAY_EPSILON = 1e-4      # origin offset along the normal, normalized scene units
T_MIN = 1e-7
DEFAULT_AO_RAYS = 128
DEFAULT_GI_RAYS = 4096
DEFAULT_BOUNCES = 4
AO_RADIUS_FACTOR = 0.1  # of the scene radius

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


# -- lighting ------------------------------------------------------------------


@dataclass
class Lighting:
    """Point lights, optional directional sun, optional gradient sky."""

    point_positions: np.ndarray = field(default=None)   # (L, 3)
    point_intensity: np.ndarray = field(default=None)   # (L, 3), radiant intensity
    sun_direction: np.ndarray | None = None              # unit vector toward the sun
    sun_irradiance: np.ndarray | None = None             # (3,) at normal incidence
    sky_horizon: np.ndarray | None = None                # (3,) radiance
    sky_zenith: np.ndarray | None = None                 # (3,) radiance

    def __post_init__(self):
        if self.point_positions is None:
            self.point_positions = np.zeros((0, 3))
        if self.point_intensity is None:
            self.point_intensity = np.zeros((0, 3))
        self.point_positions = check_array(self.point_positions, "point_positions", shape=(None, 3), dtype=np.float64)
        self.point_intensity = check_array(self.point_intensity, "point_intensity", shape=(None, 3), dtype=np.float64)
        if len(self.point_positions) != len(self.point_intensity):
            raise ValueError("point light positions and intensities differ in length")
        if np.any(self.point_intensity < 0):
            raise ValueError("point light intensity must be non-negative")
        for name in ("sun_irradiance", "sky_horizon", "sky_zenith"):
            v = getattr(self, name)
            if v is not None:
                v = check_array(v, name, shape=(3,), dtype=np.float64)
                if np.any(v < 0):
                    raise ValueError(f"{name} must be non-negative")
                setattr(self, name, v)
        if self.sun_direction is not None:
            d = check_array(self.sun_direction, "sun_direction", shape=(3,), dtype=np.float64)
            norm = np.linalg.norm(d)
            if norm == 0:
                raise ValueError("sun_direction must be non-zero")
            self.sun_direction = d / norm
            if self.sun_irradiance is None:
                raise ValueError("sun_direction given without sun_irradiance")

    @property
    def has_sky(self) -> bool:
        return self.sky_horizon is not None and self.sky_zenith is not None

    @property
    def has_sun(self) -> bool:
        return self.sun_direction is not None

    @staticmethod
    def none() -> "Lighting":
        return Lighting()

    @staticmethod
    def default_sky() -> "Lighting":
        return Lighting(sky_horizon=np.full(3, 0.6), sky_zenith=np.full(3, 1.2))

    @staticmethod
    def random(seed: int) -> "Lighting":
        """A random mixture of sky, sun and up to two point lights."""
        from .seeding import spawn_rng

        rng = spawn_rng(seed, "lighting")
        kwargs = {}
        if rng.uniform() < 0.8:
            base = rng.uniform(0.2, 1.2, size=3)
            kwargs["sky_horizon"] = base * rng.uniform(0.3, 1.0)
            kwargs["sky_zenith"] = base * rng.uniform(0.8, 1.6)
        if rng.uniform() < 0.5:
            d = rng.normal(size=3)
            d[1] = abs(d[1]) + 0.5
            kwargs["sun_direction"] = d / np.linalg.norm(d)
            kwargs["sun_irradiance"] = rng.uniform(0.5, 3.0, size=3)
        n_points = int(rng.integers(0, 3))
        if n_points or not kwargs:
            n_points = max(n_points, 1)
            pos = np.column_stack([
                rng.uniform(-1.5, 1.5, n_points),
                rng.uniform(0.3, 1.8, n_points),
                rng.uniform(-1.5, 1.5, n_points),
            ])
            kwargs["point_positions"] = pos
            kwargs["point_intensity"] = rng.uniform(0.5, 4.0, size=(n_points, 3))
        return Lighting(**kwargs)

    def to_dict(self) -> dict:
        def arr(v):
            return None if v is None else np.asarray(v).tolist()

        return {
            "point_positions": arr(self.point_positions),
            "point_intensity": arr(self.point_intensity),
            "sun_direction": arr(self.sun_direction),
            "sun_irradiance": arr(self.sun_irradiance),
            "sky_horizon": arr(self.sky_horizon),
            "sky_zenith": arr(self.sky_zenith),
        }

    @staticmethod
    def from_dict(d: dict) -> "Lighting":
        def arr(v):
            return None if v is None else np.asarray(v, dtype=np.float64)

        return Lighting(
            point_positions=arr(d.get("point_positions")),
            point_intensity=arr(d.get("point_intensity")),
            sun_direction=arr(d.get("sun_direction")),
            sun_irradiance=arr(d.get("sun_irradiance")),
            sky_horizon=arr(d.get("sky_horizon")),
            sky_zenith=arr(d.get("sky_zenith")),
        )

    def _arrays(self):
        zero3 = np.zeros(3)
        return (
            np.ascontiguousarray(self.point_positions),
            np.ascontiguousarray(self.point_intensity),
            self.sun_direction if self.has_sun else zero3,
            self.sun_irradiance if self.has_sun else zero3,
            self.has_sun,
            self.sky_horizon if self.has_sky else zero3,
            self.sky_zenith if self.has_sky else zero3,
            self.has_sky,
        )


# -- BVH ------------------------------------------------------------------------


@dataclass
class BVH:
    """Median-split bounding volume hierarchy over a mesh's triangles.

    Leaves reference a contiguous range of ``permutation``; the triangle
    geometry is stored pre-permuted for traversal locality.
    """

    node_min: np.ndarray      # (N, 3)
    node_max: np.ndarray      # (N, 3)
    node_left: np.ndarray     # (N,) child id or -1 at leaves
    node_right: np.ndarray    # (N,)
    node_start: np.ndarray    # (N,) leaf triangle range start
    node_count: np.ndarray    # (N,) leaf triangle count (0 for internal)
    permutation: np.ndarray   # (m,) original triangle ids in leaf order
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    tri_material: np.ndarray
    vn0: np.ndarray           # per-corner vertex normals for shading
    vn1: np.ndarray
    vn2: np.ndarray
    albedo: np.ndarray        # (k, 3) float64 per material
    emission: np.ndarray      # (k, 3) float64 per material

    def arrays(self):
        return (
            self.node_min, self.node_max, self.node_left, self.node_right,
            self.node_start, self.node_count, self.v0, self.v1, self.v2,
        )


def _vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted vertex normals for smooth shading."""
    a, b, c = mesh.corners()
    face = np.cross(b - a, c - a)  # length = 2 * area
    vn = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(vn, mesh.triangles[:, k], face)
    norms = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.maximum(norms, 1e-300)


def build_bvh(mesh: TriangleMesh, leaf_size: int = 4) -> BVH:
    a, b, c = mesh.corners()
    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    centroids = (lo + hi) / 2.0

    node_min, node_max = [], []
    node_left, node_right, node_start, node_count = [], [], [], []
    order: list[int] = []

    def new_node():
        node_min.append(None)
        node_max.append(None)
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(0)
        node_count.append(0)
        return len(node_min) - 1

    def build(ids: np.ndarray) -> int:
        ni = new_node()
        node_min[ni] = lo[ids].min(axis=0)
        node_max[ni] = hi[ids].max(axis=0)
        if len(ids) <= leaf_size:
            node_start[ni] = len(order)
            node_count[ni] = len(ids)
            order.extend(ids.tolist())
            return ni
        cen = centroids[ids]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        half = len(ids) // 2
        part = np.argpartition(cen[:, axis], half)
        left_ids, right_ids = ids[part[:half]], ids[part[half:]]
        node_left[ni] = build(left_ids)
        node_right[ni] = build(right_ids)
        return ni

    import sys

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10000))
    try:
        build(np.arange(len(mesh.triangles)))
    finally:
        sys.setrecursionlimit(limit)

    perm = np.asarray(order, dtype=np.int64)
    vn = _vertex_normals(mesh)
    tris = mesh.triangles[perm]
    return BVH(
        node_min=np.ascontiguousarray(node_min, dtype=np.float64),
        node_max=np.ascontiguousarray(node_max, dtype=np.float64),
        node_left=np.asarray(node_left, dtype=np.int64),
        node_right=np.asarray(node_right, dtype=np.int64),
        node_start=np.asarray(node_start, dtype=np.int64),
        node_count=np.asarray(node_count, dtype=np.int64),
        permutation=perm,
        v0=np.ascontiguousarray(mesh.vertices[tris[:, 0]]),
        v1=np.ascontiguousarray(mesh.vertices[tris[:, 1]]),
        v2=np.ascontiguousarray(mesh.vertices[tris[:, 2]]),
        tri_material=np.ascontiguousarray(mesh.material_ids[perm].astype(np.int64)),
        vn0=np.ascontiguousarray(vn[tris[:, 0]]),
        vn1=np.ascontiguousarray(vn[tris[:, 1]]),
        vn2=np.ascontiguousarray(vn[tris[:, 2]]),
        albedo=np.ascontiguousarray(mesh.albedo.astype(np.float64)),
        emission=np.ascontiguousarray(mesh.emission.astype(np.float64)),
    )


# -- numba kernels -----------------------------------------------------------


@njit(cache=True)
def _mix64(seed, idx):
    x = (np.uint64(seed) + _GOLD * (np.uint64(idx) + np.uint64(1))) & _MASK
    z = x
    z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _MASK
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _rng_next(state):
    state = (state + _GOLD) & _MASK
    z = state
    z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _MASK
    z = z ^ (z >> np.uint64(31))
    return state, (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _tri_hit(ox, oy, oz, dx, dy, dz, ax, ay, az, bx, by, bz, cx, cy, cz, tmin, tmax):
    """Möller–Trumbore; returns (t, u, v) with t < 0 on miss."""
    e1x, e1y, e1z = bx - ax, by - ay, bz - az
    e2x, e2y, e2z = cx - ax, cy - ay, cz - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if -1e-12 < det < 1e-12:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    tx, ty, tz = ox - ax, oy - ay, oz - az
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -1e-9 or u > 1.0 + 1e-9:
        return -1.0, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -1e-9 or u + v > 1.0 + 1e-9:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= tmin or t >= tmax:
        return -1.0, 0.0, 0.0
    return t, u, v


@njit(cache=True)
def _box_hit(ox, oy, oz, ix, iy, iz, bmin, bmax, tmax):
    t0 = (bmin[0] - ox) * ix
    t1 = (bmax[0] - ox) * ix
    tlo = min(t0, t1)
    thi = max(t0, t1)
    t0 = (bmin[1] - oy) * iy
    t1 = (bmax[1] - oy) * iy
    tlo = max(tlo, min(t0, t1))
    thi = min(thi, max(t0, t1))
    t0 = (bmin[2] - oz) * iz
    t1 = (bmax[2] - oz) * iz
    tlo = max(tlo, min(t0, t1))
    thi = min(thi, max(t0, t1))
    return thi >= max(tlo, 0.0) and tlo < tmax


@njit(cache=True)
def _trace_nearest(node_min, node_max, node_left, node_right, node_start, node_count,
                   v0, v1, v2, ox, oy, oz, dx, dy, dz, tmax):
    """Nearest hit: returns (t, tri_index, u, v); tri_index -1 on miss."""
    ix = 1.0 / dx if dx != 0.0 else 1e30
    iy = 1.0 / dy if dy != 0.0 else 1e30
    iz = 1.0 / dz if dz != 0.0 else 1e30
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    best_t = tmax
    best_i = -1
    best_u = 0.0
    best_v = 0.0
    while sp > 0:
        sp -= 1
        ni = stack[sp]
        if not _box_hit(ox, oy, oz, ix, iy, iz, node_min[ni], node_max[ni], best_t):
            continue
        if node_count[ni] > 0:
            start = node_start[ni]
            for k in range(start, start + node_count[ni]):
                t, u, v = _tri_hit(
                    ox, oy, oz, dx, dy, dz,
                    v0[k, 0], v0[k, 1], v0[k, 2],
                    v1[k, 0], v1[k, 1], v1[k, 2],
                    v2[k, 0], v2[k, 1], v2[k, 2],
                    T_MIN, best_t,
                )
                if t > 0.0:
                    best_t = t
                    best_i = k
                    best_u = u
                    best_v = v
        else:
            stack[sp] = node_left[ni]
            sp += 1
            stack[sp] = node_right[ni]
            sp += 1
    return best_t, best_i, best_u, best_v


@njit(cache=True)
def _trace_any(node_min, node_max, node_left, node_right, node_start, node_count,
               v0, v1, v2, ox, oy, oz, dx, dy, dz, tmax):
    ix = 1.0 / dx if dx != 0.0 else 1e30
    iy = 1.0 / dy if dy != 0.0 else 1e30
    iz = 1.0 / dz if dz != 0.0 else 1e30
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        ni = stack[sp]
        if not _box_hit(ox, oy, oz, ix, iy, iz, node_min[ni], node_max[ni], tmax):
            continue
        if node_count[ni] > 0:
            start = node_start[ni]
            for k in range(start, start + node_count[ni]):
                t, u, v = _tri_hit(
                    ox, oy, oz, dx, dy, dz,
                    v0[k, 0], v0[k, 1], v0[k, 2],
                    v1[k, 0], v1[k, 1], v1[k, 2],
                    v2[k, 0], v2[k, 1], v2[k, 2],
                    T_MIN, tmax,
                )
                if t > 0.0:
                    return True
        else:
            stack[sp] = node_left[ni]
            sp += 1
            stack[sp] = node_right[ni]
            sp += 1
    return False


@njit(cache=True)
def _cosine_dir(nx, ny, nz, u1, u2):
    """Cosine-weighted hemisphere direction around the unit normal."""
    sign = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    t0x, t0y, t0z = 1.0 + sign * nx * nx * a, sign * b, -sign * nx
    t1x, t1y, t1z = b, sign + ny * ny * a, -ny
    r = math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    x = r * math.cos(phi)
    y = r * math.sin(phi)
    z = math.sqrt(max(0.0, 1.0 - u1))
    return (
        x * t0x + y * t1x + z * nx,
        x * t0y + y * t1y + z * ny,
        x * t0z + y * t1z + z * nz,
    )


@njit(cache=True)
def _sky_radiance(dx, dy, dz, sky_h, sky_z, out):
    t = dy
    if t < 0.0:
        t = 0.0
    for c in range(3):
        out[c] = sky_h[c] * (1.0 - t) + sky_z[c] * t


@njit(cache=True)
def _nee_direct(node_min, node_max, node_left, node_right, node_start, node_count,
                v0, v1, v2, px, py, pz, nx, ny, nz,
                lp, li, sun_dir, sun_irr, has_sun, out):
    """Irradiance from delta lights (point lights + sun) with shadow rays."""
    for c in range(3):
        out[c] = 0.0
    for l in range(lp.shape[0]):
        wx, wy, wz = lp[l, 0] - px, lp[l, 1] - py, lp[l, 2] - pz
        d2 = wx * wx + wy * wy + wz * wz
        if d2 <= 0.0:
            continue
        d = math.sqrt(d2)
        wx, wy, wz = wx / d, wy / d, wz / d
        cosv = wx * nx + wy * ny + wz * nz
        if cosv <= 0.0:
            continue
        if _trace_any(node_min, node_max, node_left, node_right, node_start, node_count,
                      v0, v1, v2, px, py, pz, wx, wy, wz, d - RAY_EPSILON):
            continue
        scale = cosv / d2
        for c in range(3):
            out[c] += li[l, c] * scale
    if has_sun:
        cosv = sun_dir[0] * nx + sun_dir[1] * ny + sun_dir[2] * nz
        if cosv > 0.0:
            if not _trace_any(node_min, node_max, node_left, node_right, node_start, node_count,
                              v0, v1, v2, px, py, pz, sun_dir[0], sun_dir[1], sun_dir[2], 1e30):
                for c in range(3):
                    out[c] += sun_irr[c] * cosv


@njit(cache=True, parallel=True)
def _ao_batch(node_min, node_max, node_left, node_right, node_start, node_count,
              v0, v1, v2, pts, nrm, r_ao, n_rays, seed):
    n = pts.shape[0]
    occ = np.zeros(n)
    for i in prange(n):
        state = _mix64(seed, i)
        ox = pts[i, 0] + RAY_EPSILON * nrm[i, 0]
        oy = pts[i, 1] + RAY_EPSILON * nrm[i, 1]
        oz = pts[i, 2] + RAY_EPSILON * nrm[i, 2]
        hits = 0
        for _s in range(n_rays):
            state, u1 = _rng_next(state)
            state, u2 = _rng_next(state)
            dx, dy, dz = _cosine_dir(nrm[i, 0], nrm[i, 1], nrm[i, 2], u1, u2)
            if _trace_any(node_min, node_max, node_left, node_right, node_start, node_count,
                          v0, v1, v2, ox, oy, oz, dx, dy, dz, r_ao):
                hits += 1
        occ[i] = hits / n_rays
    return occ


@njit(cache=True, parallel=True)
def _direct_batch(node_min, node_max, node_left, node_right, node_start, node_count,
                  v0, v1, v2, tri_material, albedo, emission, pts, nrm,
                  lp, li, sun_dir, sun_irr, has_sun, sky_h, sky_z, has_sky,
                  n_rays, seed):
    """Direct irradiance: delta lights exactly; sky and first-hit emission
    by cosine-weighted rays (skipped when n_rays == 0)."""
    n = pts.shape[0]
    out = np.zeros((n, 3))
    for i in prange(n):
        nee = np.zeros(3)
        sky = np.zeros(3)
        acc = np.zeros(3)
        _nee_direct(node_min, node_max, node_left, node_right, node_start, node_count,
                    v0, v1, v2, pts[i, 0], pts[i, 1], pts[i, 2],
                    nrm[i, 0], nrm[i, 1], nrm[i, 2], lp, li, sun_dir, sun_irr, has_sun, nee)
        for c in range(3):
            acc[c] = nee[c]
        if n_rays > 0:
            state = _mix64(seed, i)
            ox = pts[i, 0] + RAY_EPSILON * nrm[i, 0]
            oy = pts[i, 1] + RAY_EPSILON * nrm[i, 1]
            oz = pts[i, 2] + RAY_EPSILON * nrm[i, 2]
            inv = math.pi / n_rays
            for _s in range(n_rays):
                state, u1 = _rng_next(state)
                state, u2 = _rng_next(state)
                dx, dy, dz = _cosine_dir(nrm[i, 0], nrm[i, 1], nrm[i, 2], u1, u2)
                t, k, _u, _v = _trace_nearest(node_min, node_max, node_left, node_right,
                                              node_start, node_count, v0, v1, v2,
                                              ox, oy, oz, dx, dy, dz, 1e30)
                if k < 0:
                    if has_sky:
                        _sky_radiance(dx, dy, dz, sky_h, sky_z, sky)
                        for c in range(3):
                            acc[c] += inv * sky[c]
                else:
                    m = tri_material[k]
                    for c in range(3):
                        acc[c] += inv * emission[m, c]
        for c in range(3):
            out[i, c] = acc[c]
    return out


@njit(cache=True, parallel=True)
def _gi_batch(node_min, node_max, node_left, node_right, node_start, node_count,
              v0, v1, v2, tri_material, albedo, emission, pts, nrm,
              lp, li, sun_dir, sun_irr, has_sun, sky_h, sky_z, has_sky,
              bounces, n_rays, seed):
    """Path-traced (direct, indirect) irradiance at each point.

    Direct: delta-light NEE plus sky/emission seen by the first ray segment.
    Indirect: everything arriving after at least one diffuse reflection.
    """
    n = pts.shape[0]
    direct = np.zeros((n, 3))
    indirect = np.zeros((n, 3))
    for i in prange(n):
        nee = np.zeros(3)
        sky = np.zeros(3)
        _nee_direct(node_min, node_max, node_left, node_right, node_start, node_count,
                    v0, v1, v2, pts[i, 0], pts[i, 1], pts[i, 2],
                    nrm[i, 0], nrm[i, 1], nrm[i, 2], lp, li, sun_dir, sun_irr, has_sun, nee)
        for c in range(3):
            direct[i, c] = nee[c]
        state = _mix64(seed, i)
        inv = 1.0 / n_rays
        dacc = np.zeros(3)
        iacc = np.zeros(3)
        for _s in range(n_rays):
            px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
            cnx, cny, cnz = nrm[i, 0], nrm[i, 1], nrm[i, 2]
            tr, tg, tb = 1.0, 1.0, 1.0
            for depth in range(1, bounces + 1):
                state, u1 = _rng_next(state)
                state, u2 = _rng_next(state)
                dx, dy, dz = _cosine_dir(cnx, cny, cnz, u1, u2)
                ox = px + RAY_EPSILON * cnx
                oy = py + RAY_EPSILON * cny
                oz = pz + RAY_EPSILON * cnz
                t, k, _u, _v = _trace_nearest(node_min, node_max, node_left, node_right,
                                              node_start, node_count, v0, v1, v2,
                                              ox, oy, oz, dx, dy, dz, 1e30)
                if k < 0:
                    if has_sky:
                        _sky_radiance(dx, dy, dz, sky_h, sky_z, sky)
                        if depth == 1:
                            dacc[0] += math.pi * sky[0]
                            dacc[1] += math.pi * sky[1]
                            dacc[2] += math.pi * sky[2]
                        else:
                            iacc[0] += math.pi * tr * sky[0]
                            iacc[1] += math.pi * tg * sky[1]
                            iacc[2] += math.pi * tb * sky[2]
                    break
                m = tri_material[k]
                if emission[m, 0] > 0.0 or emission[m, 1] > 0.0 or emission[m, 2] > 0.0:
                    if depth == 1:
                        dacc[0] += math.pi * emission[m, 0]
                        dacc[1] += math.pi * emission[m, 1]
                        dacc[2] += math.pi * emission[m, 2]
                    else:
                        iacc[0] += math.pi * tr * emission[m, 0]
                        iacc[1] += math.pi * tg * emission[m, 1]
                        iacc[2] += math.pi * tb * emission[m, 2]
                # move to the hit; orient the normal against the incoming ray
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                e1x, e1y, e1z = v1[k, 0] - v0[k, 0], v1[k, 1] - v0[k, 1], v1[k, 2] - v0[k, 2]
                e2x, e2y, e2z = v2[k, 0] - v0[k, 0], v2[k, 1] - v0[k, 1], v2[k, 2] - v0[k, 2]
                fnx = e1y * e2z - e1z * e2y
                fny = e1z * e2x - e1x * e2z
                fnz = e1x * e2y - e1y * e2x
                norm = math.sqrt(fnx * fnx + fny * fny + fnz * fnz)
                if norm == 0.0:
                    break
                fnx, fny, fnz = fnx / norm, fny / norm, fnz / norm
                if fnx * dx + fny * dy + fnz * dz > 0.0:
                    fnx, fny, fnz = -fnx, -fny, -fnz
                cnx, cny, cnz = fnx, fny, fnz
                tr *= albedo[m, 0]
                tg *= albedo[m, 1]
                tb *= albedo[m, 2]
                _nee_direct(node_min, node_max, node_left, node_right, node_start, node_count,
                            v0, v1, v2, px, py, pz, cnx, cny, cnz,
                            lp, li, sun_dir, sun_irr, has_sun, nee)
                iacc[0] += tr * nee[0]
                iacc[1] += tg * nee[1]
                iacc[2] += tb * nee[2]
                if tr <= 0.0 and tg <= 0.0 and tb <= 0.0:
                    break
        for c in range(3):
            direct[i, c] += inv * dacc[c]
            indirect[i, c] = inv * iacc[c]
    return direct, indirect


@njit(cache=True, parallel=True)
def _gbuffer_batch(node_min, node_max, node_left, node_right, node_start, node_count,
                   v0, v1, v2, tri_material, albedo, vn0, vn1, vn2,
                   cam_pos, right, up, forward, half_w, half_h, width, height):
    positions = np.zeros((height, width, 3))
    normals = np.zeros((height, width, 3))
    albedos = np.zeros((height, width, 3))
    covered = np.zeros((height, width), dtype=np.bool_)
    for py in prange(height):
        for px in range(width):
            sx = (2.0 * (px + 0.5) / width - 1.0) * half_w
            sy = (1.0 - 2.0 * (py + 0.5) / height) * half_h
            dx = forward[0] + sx * right[0] + sy * up[0]
            dy = forward[1] + sx * right[1] + sy * up[1]
            dz = forward[2] + sx * right[2] + sy * up[2]
            norm = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx, dy, dz = dx / norm, dy / norm, dz / norm
            t, k, u, v = _trace_nearest(node_min, node_max, node_left, node_right,
                                        node_start, node_count, v0, v1, v2,
                                        cam_pos[0], cam_pos[1], cam_pos[2], dx, dy, dz, 1e30)
            if k < 0:
                continue
            covered[py, px] = True
            positions[py, px, 0] = cam_pos[0] + t * dx
            positions[py, px, 1] = cam_pos[1] + t * dy
            positions[py, px, 2] = cam_pos[2] + t * dz
            w = 1.0 - u - v
            nx = w * vn0[k, 0] + u * vn1[k, 0] + v * vn2[k, 0]
            ny = w * vn0[k, 1] + u * vn1[k, 1] + v * vn2[k, 1]
            nz = w * vn0[k, 2] + u * vn1[k, 2] + v * vn2[k, 2]
            norm = math.sqrt(nx * nx + ny * ny + nz * nz)
            if norm > 0.0:
                nx, ny, nz = nx / norm, ny / norm, nz / norm
            if nx * dx + ny * dy + nz * dz > 0.0:
                nx, ny, nz = -nx, -ny, -nz
            normals[py, px, 0] = nx
            normals[py, px, 1] = ny
            normals[py, px, 2] = nz
            m = tri_material[k]
            albedos[py, px, 0] = albedo[m, 0]
            albedos[py, px, 1] = albedo[m, 1]
            albedos[py, px, 2] = albedo[m, 2]
    return positions, normals, albedos, covered


# -- public API -------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera: position, look-at target, up hint, vertical FOV in degrees."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default=None)
    vertical_fov: float = 45.0

    def __post_init__(self):
        self.position = check_array(self.position, "position", shape=(3,), dtype=np.float64)
        self.look_at = check_array(self.look_at, "look_at", shape=(3,), dtype=np.float64)
        if self.up is None:
            self.up = np.array([0.0, 1.0, 0.0])
        self.up = check_array(self.up, "up", shape=(3,), dtype=np.float64)
        if not 0 < self.vertical_fov < 180:
            raise ValueError(f"vertical_fov must be in (0, 180), got {self.vertical_fov}")

    def basis(self, width: int, height: int):
        forward = self.look_at - self.position
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise ValueError("camera position and look_at coincide")
        forward = forward / norm
        right = np.cross(forward, self.up)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-12:
            # up parallel to view direction; pick another axis
            alt = np.array([1.0, 0.0, 0.0]) if abs(forward[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
            right = np.cross(forward, alt)
            rnorm = np.linalg.norm(right)
        right = right / rnorm
        up = np.cross(right, forward)
        half_h = math.tan(math.radians(self.vertical_fov) / 2.0)
        half_w = half_h * width / height
        return right, up, forward, half_w, half_h

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "vertical_fov": self.vertical_fov,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            position=np.asarray(d["position"], dtype=np.float64),
            look_at=np.asarray(d["look_at"], dtype=np.float64),
            up=np.asarray(d["up"], dtype=np.float64),
            vertical_fov=float(d["vertical_fov"]),
        )


@dataclass
class GBuffer:
    """Per-pixel geometry and material attributes for one camera view."""

    positions: np.ndarray    # (h, w, 3)
    normals: np.ndarray      # (h, w, 3)
    albedo: np.ndarray       # (h, w, 3)
    direct: np.ndarray       # (h, w, 3)
    covered: np.ndarray      # (h, w) bool
    camera: Camera

    @property
    def width(self) -> int:
        return self.positions.shape[1]

    @property
    def height(self) -> int:
        return self.positions.shape[0]

    def covered_cloud(self):
        """Flat arrays (positions, normals, albedo, direct) of covered pixels."""
        m = self.covered
        return self.positions[m], self.normals[m], self.albedo[m], self.direct[m]


def ao_at_point(bvh: BVH, x, n, r_ao: float, n_rays: int = DEFAULT_AO_RAYS, seed: int = 0) -> float:
    """Occlusion in [0, 1]: fraction of the cosine-weighted hemisphere blocked
    within ``r_ao`` (1 = fully occluded)."""
    occ = ao_at_points(bvh, np.asarray(x, dtype=np.float64).reshape(1, 3),
                       np.asarray(n, dtype=np.float64).reshape(1, 3), r_ao, n_rays, seed)
    return float(occ[0])


def ao_at_points(bvh: BVH, points, normals, r_ao: float,
                 n_rays: int = DEFAULT_AO_RAYS, seed: int = 0) -> np.ndarray:
    points = check_array(points, "points", shape=(None, 3), dtype=np.float64)
    normals = check_array(normals, "normals", shape=(None, 3), dtype=np.float64)
    r_ao = check_scalar(r_ao, "r_ao", minimum=0.0, strict=True)
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    return _ao_batch(*bvh.arrays(), np.ascontiguousarray(points), np.ascontiguousarray(normals),
                     float(r_ao), int(n_rays), np.uint64(seed))


def gi_at_point(bvh: BVH, x, n, lighting: Lighting, bounces: int = DEFAULT_BOUNCES,
                n_rays: int = DEFAULT_GI_RAYS, seed: int = 0):
    """(direct, indirect) RGB irradiance at one surface point."""
    d, ind = gi_at_points(bvh, np.asarray(x, dtype=np.float64).reshape(1, 3),
                          np.asarray(n, dtype=np.float64).reshape(1, 3),
                          lighting, bounces, n_rays, seed)
    return d[0], ind[0]


def gi_at_points(bvh: BVH, points, normals, lighting: Lighting,
                 bounces: int = DEFAULT_BOUNCES, n_rays: int = DEFAULT_GI_RAYS, seed: int = 0):
    points = check_array(points, "points", shape=(None, 3), dtype=np.float64)
    normals = check_array(normals, "normals", shape=(None, 3), dtype=np.float64)
    if bounces < 1:
        raise ValueError("bounces must be >= 1")
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    direct, indirect = _gi_batch(
        *bvh.arrays(), bvh.tri_material, bvh.albedo, bvh.emission,
        np.ascontiguousarray(points), np.ascontiguousarray(normals),
        *lighting._arrays(), int(bounces), int(n_rays), np.uint64(seed),
    )
    return direct, indirect


def direct_at_points(bvh: BVH, points, normals, lighting: Lighting,
                     n_rays: int = 64, seed: int = 0) -> np.ndarray:
    """Direct irradiance only (delta lights exactly; sky/emitters sampled)."""
    points = check_array(points, "points", shape=(None, 3), dtype=np.float64)
    normals = check_array(normals, "normals", shape=(None, 3), dtype=np.float64)
    needs_rays = lighting.has_sky or bool(np.any(bvh.emission > 0))
    rays = int(n_rays) if needs_rays else 0
    return _direct_batch(
        *bvh.arrays(), bvh.tri_material, bvh.albedo, bvh.emission,
        np.ascontiguousarray(points), np.ascontiguousarray(normals),
        *lighting._arrays(), rays, np.uint64(seed),
    )


def raycast_gbuffer(mesh_or_bvh, camera: Camera, width: int, height: int,
                    lighting: Lighting | None = None, direct_rays: int = 64,
                    seed: int = 0) -> GBuffer:
    """Rasterize a pinhole view by ray casting.

    Covered pixels carry nearest-hit position, interpolated shading normal
    (oriented toward the camera), material albedo and, when lighting is
    given, direct irradiance.
    """
    bvh = mesh_or_bvh if isinstance(mesh_or_bvh, BVH) else build_bvh(mesh_or_bvh)
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be positive")
    right, up, forward, half_w, half_h = camera.basis(width, height)
    positions, normals, albedo, covered = _gbuffer_batch(
        *bvh.arrays(), bvh.tri_material, bvh.albedo, bvh.vn0, bvh.vn1, bvh.vn2,
        np.ascontiguousarray(camera.position), np.ascontiguousarray(right),
        np.ascontiguousarray(up), np.ascontiguousarray(forward),
        float(half_w), float(half_h), int(width), int(height),
    )
    direct = np.zeros_like(positions)
    if lighting is not None and np.any(covered):
        m = covered
        direct[m] = direct_at_points(bvh, positions[m], normals[m], lighting,
                                     n_rays=direct_rays, seed=seed)
    return GBuffer(positions=positions, normals=normals, albedo=albedo,
                   direct=direct, covered=covered, camera=camera)


def default_ao_radius(mesh: TriangleMesh) -> float:
    """The package-wide occlusion cutoff: 0.1 of the scene radius."""
    return AO_RADIUS_FACTOR * mesh.scene_radius()
