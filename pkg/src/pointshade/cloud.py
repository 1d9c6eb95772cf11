"""Surface point clouds: uniform sampling, Poisson-disk thinning, hierarchy.

Poisson-disk resampling here is subset selection (sample elimination), not
blue-noise generation: darts are thrown over the existing points in a random
order and a point survives iff no earlier survivor lies within the radius.
The result is maximal (every rejected point is within the radius of a
survivor) and carries its attributes unchanged, which is what lets hierarchy
levels share exact attribute values with their source points.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._validation import check_array, check_positions, check_scalar, check_unit_normals
from .meshes import TriangleMesh
from .seeding import derive_seed, spawn_rng


@dataclass
class PointCloud:
    """Points with per-point shading attributes.

    ``target`` holds the supervised shading value: one channel (occlusion in
    [0, 1]) or three (RGB indirect irradiance, >= 0).
    """

    positions: np.ndarray                 # (n, 3) float32
    normals: np.ndarray                   # (n, 3) float32, unit length
    albedo: np.ndarray | None = None      # (n, 3) float32 in [0, 1]
    direct: np.ndarray | None = None      # (n, 3) float32, >= 0
    target: np.ndarray | None = None      # (n, 1) or (n, 3) float32

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        check_array(self.positions, "positions", shape=(None, 3))
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float32)
        check_unit_normals(self.normals)
        if len(self.normals) != len(self.positions):
            raise ValueError("normals length does not match positions")
        for name in ("albedo", "direct", "target"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.ascontiguousarray(v, dtype=np.float32)
            if v.ndim == 1:
                v = v[:, None]
            if len(v) != len(self.positions):
                raise ValueError(f"{name} length does not match positions")
            check_array(v, name)
            setattr(self, name, v)
        if self.target is not None and self.target.shape[1] not in (1, 3):
            raise ValueError(f"target must have 1 or 3 channels, got {self.target.shape[1]}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def count(self) -> int:
        return len(self.positions)

    def subset(self, indices) -> "PointCloud":
        """New cloud containing exactly the given points (attributes copied bit-for-bit)."""
        indices = np.asarray(indices)
        return PointCloud(
            positions=self.positions[indices],
            normals=self.normals[indices],
            albedo=None if self.albedo is None else self.albedo[indices],
            direct=None if self.direct is None else self.direct[indices],
            target=None if self.target is None else self.target[indices],
        )

    def replace(self, **updates) -> "PointCloud":
        data = {
            "positions": self.positions,
            "normals": self.normals,
            "albedo": self.albedo,
            "direct": self.direct,
            "target": self.target,
        }
        data.update(updates)
        return PointCloud(**data)


@dataclass
class PointHierarchy:
    """Nested Poisson-disk subsamplings at strictly increasing radii.

    ``source_maps[k]`` (k >= 1) gives, for each point of level k, its index
    in level k-1.  Level 0 is the network input cloud itself.
    """

    levels: list = field(default_factory=list)
    radii: tuple = ()
    source_maps: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)

    def counts(self) -> list:
        return [len(level) for level in self.levels]


# -- uniform surface sampling -------------------------------------------------


def sample_surface_uniform(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """Draw n points uniformly by area: triangle by area, barycentric within.

    Normals come from the containing triangle, albedo from its material.
    Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total surface area")
    rng = spawn_rng(seed, "surface-sampling")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a, b, c = mesh.corners()
    pos = a[tri] + u[:, None] * (b[tri] - a[tri]) + v[:, None] * (c[tri] - a[tri])
    normals = mesh.face_normals()[tri]
    albedo = mesh.albedo[mesh.material_ids[tri]]
    return PointCloud(
        positions=pos.astype(np.float32),
        normals=normals.astype(np.float32),
        albedo=albedo,
    )


# -- Poisson-disk subset selection ----------------------------------------------


@njit(cache=True)
def _eliminate(order, cell_ids, cell_keys, cell_starts, cell_order, pos, radius):
    """Greedy dart thinning over a precomputed grid (cell size == radius)."""
    n = pos.shape[0]
    kept = np.zeros(n, dtype=np.bool_)
    r2 = radius * radius
    ncells = cell_keys.shape[0]
    shift = np.int64(21)
    mask = np.int64((1 << 21) - 1)
    for oi in range(n):
        i = order[oi]
        key = cell_ids[i]
        cx = key >> (2 * shift)
        cy = (key >> shift) & mask
        cz = key & mask
        ok = True
        for dx in range(-1, 2):
            if not ok:
                break
            for dy in range(-1, 2):
                if not ok:
                    break
                for dz in range(-1, 2):
                    nkey = ((cx + dx) << (2 * shift)) | ((cy + dy) << shift) | (cz + dz)
                    lo = np.searchsorted(cell_keys, nkey)
                    if lo >= ncells or cell_keys[lo] != nkey:
                        continue
                    start = cell_starts[lo]
                    end = cell_starts[lo + 1] if lo + 1 < ncells else cell_order.shape[0]
                    for s in range(start, end):
                        j = cell_order[s]
                        if not kept[j]:
                            continue
                        ddx = pos[i, 0] - pos[j, 0]
                        ddy = pos[i, 1] - pos[j, 1]
                        ddz = pos[i, 2] - pos[j, 2]
                        if ddx * ddx + ddy * ddy + ddz * ddz < r2:
                            ok = False
                            break
                    if not ok:
                        break
        if ok:
            kept[i] = True
    return kept


def poisson_disk_indices(positions, radius: float, seed: int = 0) -> np.ndarray:
    """Indices (ascending) of a maximal subset with pairwise distances >= radius."""
    positions = check_positions(positions, "positions")
    radius = check_scalar(radius, "radius", minimum=0.0, strict=True)
    n = len(positions)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    rng = spawn_rng(seed, "poisson-disk")
    order = rng.permutation(n).astype(np.int64)
    origin = positions.min(axis=0) - radius
    cells = np.floor((positions - origin) / radius).astype(np.int64)
    shift, bias = 21, 1 << 20
    c = cells + bias
    keys = (c[:, 0] << (2 * shift)) | (c[:, 1] << shift) | c[:, 2]
    cell_order = np.argsort(keys, kind="stable").astype(np.int64)
    sorted_keys = keys[cell_order]
    cell_keys, cell_starts = np.unique(sorted_keys, return_index=True)
    kept = _eliminate(
        order, keys + 0, cell_keys.astype(np.int64), cell_starts.astype(np.int64),
        cell_order, positions.astype(np.float64), float(radius),
    )
    return np.nonzero(kept)[0].astype(np.int64)


def poisson_disk_resample(pc: PointCloud, radius: float, seed: int = 0) -> PointCloud:
    """Maximal Poisson-disk subset of a cloud; attributes ride along unchanged."""
    idx = poisson_disk_indices(pc.positions.astype(np.float64), radius, seed)
    return pc.subset(idx)


DEFAULT_HIERARCHY_RADII = (0.01, 0.05, 0.15, 0.5)


def build_hierarchy(pc: PointCloud, radii=DEFAULT_HIERARCHY_RADII, seed: int = 0) -> PointHierarchy:
    """Repeated Poisson-disk thinning at strictly increasing radii.

    Level 0 is the cloud thinned at radii[0]; level k thins level k-1 at
    radii[k].  Raises if any level comes out empty.
    """
    radii = tuple(float(r) for r in radii)
    if any(b <= a for a, b in zip(radii, radii[1:])) or radii[0] <= 0:
        raise ValueError(f"radii must be positive and strictly increasing, got {radii}")
    levels = []
    maps = []
    current = pc
    for k, r in enumerate(radii):
        idx = poisson_disk_indices(current.positions.astype(np.float64), r, derive_seed(seed, "hierarchy", k))
        if len(idx) == 0:
            raise ValueError(f"hierarchy level {k} (radius {r}) eliminated every point")
        current = current.subset(idx)
        levels.append(current)
        maps.append(idx)
    return PointHierarchy(levels=levels, radii=radii, source_maps=maps)


# -- binary point-cloud format ---------------------------------------------------

_PCLS_MAGIC = b"PCLS"
_PCLS_VERSION = 1


def save_pcls(path, pc: PointCloud) -> None:
    """Write the cloud in the little-endian structure-of-arrays format.

    Layout: magic "PCLS", version u16, point count u32, channel count u16,
    then per channel (name length u16, name bytes, channel width u16);
    payload is float32 arrays in channel order.
    """
    channels = [("position", pc.positions), ("normal", pc.normals)]
    for name, arr in (("albedo", pc.albedo), ("direct", pc.direct), ("target", pc.target)):
        if arr is not None:
            channels.append((name, arr))
    with open(path, "wb") as f:
        f.write(_PCLS_MAGIC)
        f.write(struct.pack("<HIH", _PCLS_VERSION, len(pc), len(channels)))
        for name, arr in channels:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<H", arr.shape[1]))
        for _, arr in channels:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_pcls(path) -> PointCloud:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _PCLS_MAGIC:
        raise ValueError("not a PCLS file (bad magic)")
    version, count, n_channels = struct.unpack_from("<HIH", data, 4)
    if version != _PCLS_VERSION:
        raise ValueError(f"unsupported PCLS version {version}")
    offset = 4 + 8
    names, widths = [], []
    for _ in range(n_channels):
        (nlen,) = struct.unpack_from("<H", data, offset)
        offset += 2
        names.append(data[offset : offset + nlen].decode("utf-8"))
        offset += nlen
        (width,) = struct.unpack_from("<H", data, offset)
        offset += 2
        widths.append(width)
    arrays = {}
    for name, width in zip(names, widths):
        n = count * width
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(count, width)
        offset += 4 * n
    if "position" not in arrays or "normal" not in arrays:
        raise ValueError("PCLS file missing position/normal channels")
    return PointCloud(
        positions=arrays["position"],
        normals=arrays["normal"],
        albedo=arrays.get("albedo"),
        direct=arrays.get("direct"),
        target=arrays.get("target"),
    )
