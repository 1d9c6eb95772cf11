"""Dataset generation: procedural scenes, shaded point clouds, split protocol.

A dataset directory holds the scene meshes, one point cloud per
(scene, lighting) sample with inputs and ray-traced shading targets, float
reference images for the test split, and a manifest describing the splits
and every convention needed to interpret the files.

Splits keep scene sets and lighting sets disjoint; default proportions
mirror a 20 : 1 : 2.5 train/val/test sample ratio (scenes 1000 : 200 : 500,
lightings 20 : 5 : 5, scaled down to the requested counts).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import PointCloud, load_pcls, sample_surface_uniform, save_pcls
from .images import Image, save_pfm, save_png
from .meshes import TriangleMesh, load_obj, random_scene, save_obj
from .metrics import tonemap
from .seeding import derive_seed
from .tracer import (
    DEFAULT_AO_RAYS,
    DEFAULT_BOUNCES,
    DEFAULT_GI_RAYS,
    Camera,
    Lighting,
    ao_at_points,
    build_bvh,
    default_ao_radius,
    direct_at_points,
    gi_at_points,
    raycast_gbuffer,
)

MANIFEST_NAME = "manifest.json"

#: Canonical three-quarter view used for reference images.
DEFAULT_CAMERA = {
    "position": [1.9, 0.7, 1.9],
    "look_at": [0.0, -0.5, 0.0],
    "up": [0.0, 1.0, 0.0],
    "vertical_fov": 45.0,
}


@dataclass
class DatasetConfig:
    n_scenes: int = 8
    n_lightings: int = 1
    effect: str = "ao"
    n_points: int = 20000
    seed: int = 0
    ao_rays: int = DEFAULT_AO_RAYS
    gi_rays: int = DEFAULT_GI_RAYS
    bounces: int = DEFAULT_BOUNCES
    ref_size: int = 256
    split_scenes: tuple | None = None     # explicit (train, val, test) scene counts
    split_lightings: tuple | None = None

    def __post_init__(self):
        if self.effect not in ("ao", "gi"):
            raise ValueError(f"effect not supported: {self.effect!r}")
        if self.n_scenes < 1 or self.n_lightings < 1 or self.n_points < 1:
            raise ValueError("scene, lighting and point counts must be >= 1")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        for k in ("split_scenes", "split_lightings"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


def proportional_split(n: int, weights=(1000, 200, 500)) -> tuple:
    """Split n items into three disjoint groups at the given proportions,
    every non-empty group getting at least one item when n allows."""
    if n < 3:
        # too few to keep all three splits non-empty; fill train first
        counts = [0, 0, 0]
        order = [0, 2, 1]  # train, test, val priority
        for i in range(n):
            counts[order[i]] += 1
        return tuple(counts)
    total = sum(weights)
    counts = [max(1, int(round(n * w / total))) for w in weights]
    while sum(counts) > n:
        counts[int(np.argmax(counts))] -= 1
    counts[0] += n - sum(counts)
    return tuple(counts)


def shade_cloud(mesh: TriangleMesh, bvh, effect: str, lighting: Lighting | None,
                config: DatasetConfig, seed: int) -> PointCloud:
    """Sample the surface and attach ray-traced shading targets."""
    pc = sample_surface_uniform(mesh, config.n_points, seed=derive_seed(seed, "sample"))
    pts = pc.positions.astype(np.float64)
    nrm = pc.normals.astype(np.float64)
    if effect == "ao":
        occ = ao_at_points(bvh, pts, nrm, default_ao_radius(mesh),
                           n_rays=config.ao_rays, seed=derive_seed(seed, "ao"))
        return pc.replace(target=occ[:, None].astype(np.float32))
    direct, indirect = gi_at_points(bvh, pts, nrm, lighting, bounces=config.bounces,
                                    n_rays=config.gi_rays, seed=derive_seed(seed, "gi"))
    return pc.replace(direct=direct.astype(np.float32), target=indirect.astype(np.float32))


def reference_image(mesh: TriangleMesh, bvh, effect: str, lighting: Lighting | None,
                    camera: Camera, size: int, config: DatasetConfig, seed: int) -> Image:
    """Per-pixel oracle evaluation at the G-buffer positions."""
    gbuf = raycast_gbuffer(bvh, camera, size, size, lighting=None)
    m = gbuf.covered
    if effect == "ao":
        values = np.zeros((size, size, 1), dtype=np.float32)
        if np.any(m):
            occ = ao_at_points(bvh, gbuf.positions[m], gbuf.normals[m],
                               default_ao_radius(mesh), n_rays=config.ao_rays,
                               seed=derive_seed(seed, "ref-ao"))
            values[m] = occ[:, None].astype(np.float32)
        return Image(values=values, mask=m.copy())
    values = np.zeros((size, size, 3), dtype=np.float32)
    if np.any(m):
        _direct, indirect = gi_at_points(bvh, gbuf.positions[m], gbuf.normals[m], lighting,
                                         bounces=config.bounces, n_rays=config.gi_rays,
                                         seed=derive_seed(seed, "ref-gi"))
        values[m] = indirect.astype(np.float32)
    return Image(values=values, mask=m.copy())


def generate_dataset(out_dir, config: DatasetConfig, log=None) -> dict:
    """Write scenes, shaded point clouds, test-split reference images and the
    manifest.  Byte-identical for a fixed config (seed included)."""
    say = log if log is not None else (lambda *_: None)
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "clouds").mkdir(exist_ok=True)
    (out / "ref").mkdir(exist_ok=True)

    effect = config.effect
    lighting_independent = effect == "ao"
    n_scenes, n_lightings = config.n_scenes, config.n_lightings
    scene_split = config.split_scenes or proportional_split(n_scenes, (1000, 200, 500))
    light_split = config.split_lightings or proportional_split(n_lightings, (20, 5, 5))
    if sum(scene_split) != n_scenes:
        raise ValueError(f"scene split {scene_split} does not sum to {n_scenes}")
    if sum(light_split) != n_lightings:
        raise ValueError(f"lighting split {light_split} does not sum to {n_lightings}")

    lightings = [Lighting.random(derive_seed(config.seed, "light", li)) for li in range(n_lightings)]
    camera = Camera.from_dict(DEFAULT_CAMERA)

    scene_names = []
    samples = []
    for si in range(n_scenes):
        mesh = random_scene(derive_seed(config.seed, "scene", si))
        name = f"scene{si:04d}"
        scene_names.append(name)
        save_obj(mesh, out / "scenes" / f"{name}.obj")
        bvh = build_bvh(mesh)
        say(f"scene {si + 1}/{n_scenes}: {len(mesh.triangles)} triangles")
        base_cloud = None
        for li in range(n_lightings):
            sample_name = f"{name}_l{li:02d}"
            cloud_seed = derive_seed(config.seed, "cloud", si)  # lighting-independent geometry
            if lighting_independent:
                if base_cloud is None:
                    base_cloud = shade_cloud(mesh, bvh, effect, None, config, cloud_seed)
                cloud = base_cloud
            else:
                cloud = shade_cloud(mesh, bvh, effect, lightings[li], config,
                                    derive_seed(cloud_seed, "lit", li))
            save_pcls(out / "clouds" / f"{sample_name}.pcls", cloud)
            samples.append({"name": sample_name, "scene": si, "lighting": li})

    # scene/lighting membership by contiguous ranges (scenes and lightings
    # are i.i.d. procedural, so ranges are as good as a permutation)
    def ranges(split):
        edges = np.cumsum((0,) + tuple(split))
        return [range(edges[i], edges[i + 1]) for i in range(3)]

    scene_ranges = ranges(scene_split)
    light_ranges = ranges(light_split)
    split_names = ("train", "val", "test")
    splits = {k: [] for k in split_names}
    for s in samples:
        for part, srange, lrange in zip(split_names, scene_ranges, light_ranges):
            # AO targets ignore lighting entirely, so only scenes gate the split
            light_ok = lighting_independent or (s["lighting"] in lrange)
            if s["scene"] in srange and light_ok:
                splits[part].append(s["name"])

    ref_entries = {}
    for name in splits["test"]:
        sample = next(s for s in samples if s["name"] == name)
        mesh = load_obj(out / "scenes" / f"{scene_names[sample['scene']]}.obj")
        bvh = build_bvh(mesh)
        lighting = None if lighting_independent else lightings[sample["lighting"]]
        img = reference_image(mesh, bvh, effect, lighting, camera, config.ref_size,
                              config, derive_seed(config.seed, "ref", name))
        save_pfm(out / "ref" / f"{name}.pfm", img)
        save_png(out / "ref" / f"{name}.png", tonemap(img) if effect == "gi" else _ao_preview(img))
        ref_entries[name] = f"ref/{name}.pfm"
        say(f"reference {name}")

    manifest = {
        "config": config.to_dict(),
        "effect": effect,
        "target_convention": "occlusion (1 = fully occluded)" if effect == "ao"
        else "indirect irradiance, linear RGB, receiving albedo excluded",
        "direct_convention": "point-light irradiance I*cos/d^2 with shadow rays; "
                             "sky and emitters via cosine-weighted rays",
        "lighting_independent": lighting_independent,
        "scenes": [f"scenes/{n}.obj" for n in scene_names],
        "lightings": [l.to_dict() for l in lightings],
        "camera": camera.to_dict(),
        "samples": samples,
        "splits": splits,
        "split_scenes": list(scene_split),
        "split_lightings": list(light_split),
        "references": ref_entries,
        "ao_radius_rule": "0.1 * scene radius (half the bounding-box diagonal)",
    }
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def _ao_preview(img: Image) -> Image:
    """Display accessibility (1 - occlusion) for AO previews."""
    return Image(values=(1.0 - img.values).astype(np.float32), mask=img.mask.copy())


def load_manifest(data_dir) -> dict:
    with open(Path(data_dir) / MANIFEST_NAME) as f:
        return json.load(f)


def load_split(data_dir, manifest: dict, split: str) -> list:
    """[(name, PointCloud)] for a split, in manifest order."""
    out = []
    for name in manifest["splits"][split]:
        out.append((name, load_pcls(Path(data_dir) / "clouds" / f"{name}.pcls")))
    return out
