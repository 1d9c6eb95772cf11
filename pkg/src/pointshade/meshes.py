"""Triangle meshes: OBJ ingestion, scene normalization, procedural scenes.

Scenes follow one convention throughout the package: the object of interest
is scaled isotropically so its bounding box fits [-1, 1]^3 and rests on a
ground plane at y = -1; the plane itself is a quad spanning [-2, 2]^2 with
the reserved ground material id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_array
from .seeding import spawn_rng

#: Material id reserved for the appended ground plane.
GROUND_MATERIAL = 1

#: Ground plane half-extent and default albedo.
GROUND_HALF_EXTENT = 2.0
GROUND_ALBEDO = 0.5


class MeshError(ValueError):
    """Malformed mesh or mesh file."""


@dataclass
class TriangleMesh:
    """Indexed triangle soup with per-triangle materials.

    ``albedo``/``emission`` are indexed by material id; emission is only
    non-zero for synthetic validation scenes.
    """

    vertices: np.ndarray          # (n, 3) float64
    triangles: np.ndarray         # (m, 3) int32
    material_ids: np.ndarray      # (m,) int32
    albedo: np.ndarray            # (k, 3) float32, k > max(material_ids)
    emission: np.ndarray = field(default=None)  # (k, 3) float32

    def __post_init__(self):
        self.vertices = check_array(self.vertices, "vertices", shape=(None, 3), dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        self.material_ids = np.asarray(self.material_ids, dtype=np.int32).reshape(-1)
        self.albedo = np.asarray(self.albedo, dtype=np.float32).reshape(-1, 3)
        if self.emission is None:
            self.emission = np.zeros_like(self.albedo)
        self.emission = np.asarray(self.emission, dtype=np.float32).reshape(-1, 3)
        if len(self.triangles) == 0:
            raise MeshError("mesh has no triangles")
        if len(self.material_ids) != len(self.triangles):
            raise MeshError("material_ids length does not match triangle count")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle vertex index out of range")
        if self.material_ids.max() >= len(self.albedo):
            raise MeshError("material id out of range of the albedo table")

    # -- derived quantities --------------------------------------------------

    def corners(self):
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def face_normals(self) -> np.ndarray:
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        lengths = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(lengths, 1e-300)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def total_area(self) -> float:
        return float(self.triangle_areas().sum())

    def bounds(self, triangle_mask=None):
        """(min, max) corners of the bounding box, optionally of a subset."""
        tris = self.triangles if triangle_mask is None else self.triangles[triangle_mask]
        used = np.unique(tris)
        v = self.vertices[used]
        return v.min(axis=0), v.max(axis=0)

    def scene_radius(self) -> float:
        """Half the bounding-sphere diameter (bounding-box circumsphere)."""
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo) / 2.0)

    def merged_with(self, other: "TriangleMesh") -> "TriangleMesh":
        """Concatenate two meshes; the other mesh's material table is appended."""
        shift = len(self.albedo)
        return TriangleMesh(
            vertices=np.vstack([self.vertices, other.vertices]),
            triangles=np.vstack([self.triangles, other.triangles + len(self.vertices)]),
            material_ids=np.concatenate([self.material_ids, other.material_ids + shift]),
            albedo=np.vstack([self.albedo, other.albedo]),
            emission=np.vstack([self.emission, other.emission]),
        )


# -- OBJ input/output ---------------------------------------------------------


def load_obj(path) -> TriangleMesh:
    """Load a Wavefront OBJ (v/f records, optional minimal .mtl for Kd/Ke).

    Polygon faces are fan-triangulated.  Unknown records are ignored.
    Raises :class:`MeshError` with the offending line number on parse errors.
    """
    path = Path(path)
    vertices: list = []
    faces: list = []
    face_materials: list = []
    mtl_names: dict[str, int] = {}
    mtl_albedo: dict[str, np.ndarray] = {}
    mtl_emission: dict[str, np.ndarray] = {}
    current_mtl = None

    def material_index(name) -> int:
        if name not in mtl_names:
            mtl_names[name] = len(mtl_names)
        return mtl_names[name]

    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except (IndexError, ValueError) as e:
                    raise MeshError(f"{path.name}:{lineno}: bad vertex record {line!r}") from e
            elif tag == "f":
                try:
                    idx = [_obj_index(p, len(vertices), lineno, path.name) for p in parts[1:]]
                except MeshError:
                    raise
                if len(idx) < 3:
                    raise MeshError(f"{path.name}:{lineno}: face with fewer than 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
                    face_materials.append(material_index(current_mtl))
            elif tag == "usemtl":
                current_mtl = parts[1] if len(parts) > 1 else None
            elif tag == "mtllib" and len(parts) > 1:
                _read_mtl(path.parent / parts[1], mtl_albedo, mtl_emission)

    if not vertices:
        raise MeshError(f"{path.name}: no vertices")
    if not faces:
        raise MeshError(f"{path.name}: no faces")

    n_materials = max(mtl_names.values()) + 1 if mtl_names else 1
    albedo = np.full((n_materials, 3), GROUND_ALBEDO, dtype=np.float32)
    emission = np.zeros((n_materials, 3), dtype=np.float32)
    for name, i in mtl_names.items():
        if name in mtl_albedo:
            albedo[i] = mtl_albedo[name]
        if name in mtl_emission:
            emission[i] = mtl_emission[name]
    return TriangleMesh(
        vertices=np.asarray(vertices, dtype=np.float64),
        triangles=np.asarray(faces, dtype=np.int32),
        material_ids=np.asarray(face_materials, dtype=np.int32),
        albedo=albedo,
        emission=emission,
    )


def _obj_index(token: str, n_vertices: int, lineno: int, fname: str) -> int:
    token = token.split("/")[0]
    try:
        i = int(token)
    except ValueError as e:
        raise MeshError(f"{fname}:{lineno}: bad face index {token!r}") from e
    idx = i - 1 if i > 0 else n_vertices + i
    if idx < 0 or idx >= n_vertices:
        raise MeshError(f"{fname}:{lineno}: face index {i} out of range (have {n_vertices} vertices)")
    return idx


def _read_mtl(path: Path, albedo: dict, emission: dict) -> None:
    if not path.exists():
        return
    current = None
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for raw in f:
            parts = raw.strip().split()
            if not parts:
                continue
            if parts[0] == "newmtl" and len(parts) > 1:
                current = parts[1]
            elif parts[0] == "Kd" and current and len(parts) >= 4:
                albedo[current] = np.array(parts[1:4], dtype=np.float32)
            elif parts[0] == "Ke" and current and len(parts) >= 4:
                emission[current] = np.array(parts[1:4], dtype=np.float32)


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write the mesh plus a sidecar .mtl carrying Kd/Ke per material."""
    path = Path(path)
    mtl_path = path.with_suffix(".mtl")
    used = np.unique(mesh.material_ids)
    with open(mtl_path, "w", encoding="utf-8") as f:
        for m in used:
            f.write(f"newmtl m{m}\n")
            f.write("Kd {:.6f} {:.6f} {:.6f}\n".format(*mesh.albedo[m]))
            if np.any(mesh.emission[m] > 0):
                f.write("Ke {:.6f} {:.6f} {:.6f}\n".format(*mesh.emission[m]))
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"mtllib {mtl_path.name}\n")
        for v in mesh.vertices:
            f.write("v {:.9g} {:.9g} {:.9g}\n".format(*v))
        order = np.argsort(mesh.material_ids, kind="stable")
        last = None
        for ti in order:
            m = mesh.material_ids[ti]
            if m != last:
                f.write(f"usemtl m{m}\n")
                last = m
            a, b, c = mesh.triangles[ti] + 1
            f.write(f"f {a} {b} {c}\n")


# -- scene normalization --------------------------------------------------------


def make_ground_plane(albedo: float | tuple = GROUND_ALBEDO) -> TriangleMesh:
    h = GROUND_HALF_EXTENT
    v = np.array([[-h, -1, -h], [h, -1, -h], [h, -1, h], [-h, -1, h]], dtype=np.float64)
    tris = np.array([[0, 2, 1], [0, 3, 2]], dtype=np.int32)
    table = np.zeros((GROUND_MATERIAL + 1, 3), dtype=np.float32)
    table[GROUND_MATERIAL] = albedo
    return TriangleMesh(v, tris, np.full(2, GROUND_MATERIAL, np.int32), table)


def normalize_scene(mesh: TriangleMesh, ground_albedo=GROUND_ALBEDO) -> TriangleMesh:
    """Fit the object into [-1, 1]^3 resting on a ground plane at y = -1.

    The object is scaled isotropically by 2/longest-extent, centered in x/z
    and translated so min-y lands on -1; a [-2, 2]^2 ground quad with the
    reserved material id is appended.  Triangles already carrying the ground
    material id are treated as an existing plane: they are excluded from the
    fit and no second plane is added, which makes the operation idempotent.
    """
    is_ground = mesh.material_ids == GROUND_MATERIAL
    if np.all(is_ground):
        raise MeshError("scene contains only ground geometry")
    obj_vert_ids = np.unique(mesh.triangles[~is_ground])
    v = mesh.vertices[obj_vert_ids]
    lo, hi = v.min(axis=0), v.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise MeshError("object bounding box has zero extent")
    s = 2.0 / extent
    center = (lo + hi) / 2.0

    vertices = mesh.vertices.copy()
    moved = np.zeros(len(vertices), dtype=bool)
    moved[obj_vert_ids] = True
    vertices[moved] = (vertices[moved] - center) * s
    # drop onto the plane
    min_y = vertices[moved, 1].min()
    vertices[moved, 1] += -1.0 - min_y

    out = TriangleMesh(vertices, mesh.triangles, mesh.material_ids, mesh.albedo, mesh.emission)
    if not np.any(is_ground):
        ground = make_ground_plane(ground_albedo)
        merged = out.merged_with(ground)
        # re-point the appended plane at the reserved id so callers can rely on it
        n_obj_tris = len(out.triangles)
        ids = merged.material_ids.copy()
        ids[n_obj_tris:] = GROUND_MATERIAL
        albedo = merged.albedo.copy()
        emission = merged.emission.copy()
        if len(albedo) <= GROUND_MATERIAL:
            pad = GROUND_MATERIAL + 1 - len(albedo)
            albedo = np.vstack([albedo, np.zeros((pad, 3), np.float32)])
            emission = np.vstack([emission, np.zeros((pad, 3), np.float32)])
        albedo[GROUND_MATERIAL] = ground_albedo
        out = TriangleMesh(merged.vertices, merged.triangles, ids, albedo, emission)
    return out


# -- primitive generators ---------------------------------------------------------


def make_sphere(radius: float = 1.0, center=(0.0, 0.0, 0.0), rings: int = 16, segments: int = 32) -> tuple:
    """UV-sphere vertices and triangles."""
    center = np.asarray(center, dtype=np.float64)
    verts = [center + (0, radius, 0)]
    for i in range(1, rings):
        theta = math.pi * i / rings
        for j in range(segments):
            phi = 2 * math.pi * j / segments
            verts.append(
                center
                + radius * np.array([math.sin(theta) * math.cos(phi), math.cos(theta), math.sin(theta) * math.sin(phi)])
            )
    verts.append(center + (0, -radius, 0))
    tris = []
    for j in range(segments):
        tris.append([0, 1 + (j + 1) % segments, 1 + j])
    for i in range(rings - 2):
        a = 1 + i * segments
        b = 1 + (i + 1) * segments
        for j in range(segments):
            j2 = (j + 1) % segments
            tris.append([a + j, a + j2, b + j])
            tris.append([a + j2, b + j2, b + j])
    bottom = len(verts) - 1
    base = 1 + (rings - 2) * segments
    for j in range(segments):
        tris.append([bottom, base + j, base + (j + 1) % segments])
    return np.asarray(verts), np.asarray(tris, dtype=np.int32)


def make_box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> tuple:
    """Axis-aligned box with per-face vertices (hard edges stay hard under
    smooth-normal interpolation)."""
    sx, sy, sz = (s / 2.0 for s in size)
    c = np.asarray(center, dtype=np.float64)
    corners = np.array(
        [[-sx, -sy, -sz], [sx, -sy, -sz], [sx, sy, -sz], [-sx, sy, -sz],
         [-sx, -sy, sz], [sx, -sy, sz], [sx, sy, sz], [-sx, sy, sz]]
    ) + c
    quads = [
        (0, 3, 2, 1), (4, 5, 6, 7),  # -z, +z
        (0, 1, 5, 4), (2, 3, 7, 6),  # -y, +y
        (0, 4, 7, 3), (1, 2, 6, 5),  # -x, +x
    ]
    verts = []
    tris = []
    for a, b, cq, d in quads:
        base = len(verts)
        verts.extend([corners[a], corners[b], corners[cq], corners[d]])
        tris.append([base, base + 1, base + 2])
        tris.append([base, base + 2, base + 3])
    return np.asarray(verts), np.asarray(tris, dtype=np.int32)


def make_torus(major: float = 1.0, minor: float = 0.35, center=(0, 0, 0), segments: int = 28, sides: int = 14) -> tuple:
    c = np.asarray(center, dtype=np.float64)
    verts = []
    for i in range(segments):
        u = 2 * math.pi * i / segments
        cu, su = math.cos(u), math.sin(u)
        for j in range(sides):
            v = 2 * math.pi * j / sides
            cv, sv = math.cos(v), math.sin(v)
            verts.append(c + np.array([(major + minor * cv) * cu, minor * sv, (major + minor * cv) * su]))
    tris = []
    for i in range(segments):
        i2 = (i + 1) % segments
        for j in range(sides):
            j2 = (j + 1) % sides
            a, b = i * sides + j, i * sides + j2
            d, e = i2 * sides + j, i2 * sides + j2
            tris.append([a, b, d])
            tris.append([b, e, d])
    return np.asarray(verts), np.asarray(tris, dtype=np.int32)


def random_scene(seed: int, min_primitives: int = 1, max_primitives: int = 8, hover_fraction: float = 0.4) -> TriangleMesh:
    """Procedural training scene: random primitives over the ground plane.

    Spheres, boxes (anisotropic, so thin slabs occur) and tori with random
    uniform albedo, scattered without mutual overlap.  A fraction of the
    primitives hovers above the plane so that training data contains
    occluders detached from the floor.  The returned mesh is normalized
    (object in [-1, 1]^3, plane appended).
    """
    rng = spawn_rng(seed, "scene")
    n = int(rng.integers(min_primitives, max_primitives + 1))
    placed: list[tuple[np.ndarray, float]] = []  # (center, bounding radius)
    pieces = []
    material_ids = []
    next_material = 0
    attempts = 0
    while len(pieces) < n and attempts < 200:
        attempts += 1
        kind = rng.choice(["sphere", "box", "torus"])
        scale = float(rng.uniform(0.25, 0.9))
        cx, cz = rng.uniform(-1.0, 1.0, size=2)
        if kind == "sphere":
            radius = scale / 2
            verts, tris = make_sphere(radius=radius, rings=14, segments=24)
            bound = radius
            lift = radius
        elif kind == "box":
            size = rng.uniform(0.15, 1.0, size=3) * scale
            verts, tris = make_box(size=size)
            bound = float(np.linalg.norm(size) / 2)
            lift = size[1] / 2
        else:
            major = scale / 2
            minor = major * float(rng.uniform(0.2, 0.45))
            verts, tris = make_torus(major=major, minor=minor, segments=20, sides=10)
            bound = major + minor
            lift = minor
        hover = float(rng.uniform(0.02, 0.25)) if rng.uniform() < hover_fraction else 0.0
        center = np.array([cx, lift + hover, cz])
        if any(np.linalg.norm(center - c) < bound + b for c, b in placed):
            continue
        yaw = rng.uniform(0, 2 * math.pi)
        rot = np.array(
            [[math.cos(yaw), 0, -math.sin(yaw)], [0, 1, 0], [math.sin(yaw), 0, math.cos(yaw)]]
        )
        verts = verts @ rot.T + center
        placed.append((center, bound))
        material = next_material
        next_material += 1
        if next_material == GROUND_MATERIAL:  # id 1 is reserved for the plane
            next_material += 1
        pieces.append((verts, tris, material, rng.uniform(0.0, 1.0, size=3)))
        material_ids.append(material)

    if not pieces:  # overlap rejection exhausted; fall back to one sphere
        verts, tris = make_sphere(radius=0.4, rings=14, segments=24)
        pieces = [(verts + np.array([0, 0.4, 0]), tris, 0, rng.uniform(0, 1, size=3))]
        material_ids = [0]

    n_materials = max(material_ids) + 1
    all_verts, all_tris, all_mats = [], [], []
    albedo = np.full((n_materials, 3), 0.5, dtype=np.float32)
    offset = 0
    for verts, tris, material, rgb in pieces:
        all_verts.append(verts)
        all_tris.append(tris + offset)
        all_mats.append(np.full(len(tris), material, np.int32))
        albedo[material] = rgb
        offset += len(verts)
    combined = TriangleMesh(
        np.vstack(all_verts), np.vstack(all_tris), np.concatenate(all_mats), albedo
    )
    return normalize_scene(combined)
