"""End-to-end rendering: G-buffer, latent point selection, shading modes.

Modes:
  * ``ours`` / ``2d-only`` / ``3d-only`` — trained models (the render-time
    Poisson radius controls how many surface points carry latent codes; the
    trained projection radius stays fixed, so denser selections feed more
    points into each pixel's receptive field).
  * ``reference``  — per-pixel oracle evaluation (same code path as dataset
    reference images).
  * ``ssao`` / ``ssgi`` — screen-space baselines from the G-buffer alone.

For GI the stored float image is the predicted indirect irradiance (the
quantity models regress and metrics compare); the PNG preview composites
albedo * (direct + indirect) and tone-maps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, build_hierarchy, poisson_disk_indices, sample_surface_uniform
from .images import Image
from .meshes import TriangleMesh
from .network import Model, attributes_for, forward_3d, project_to_pixels, forward_2d_only, splat_to_pixels
from .screenspace import SSConfig, ssao, ssgi
from .seeding import derive_seed
from .tracer import (
    Camera,
    GBuffer,
    Lighting,
    ao_at_points,
    build_bvh,
    default_ao_radius,
    direct_at_points,
    gi_at_points,
    raycast_gbuffer,
)

MODES = ("ours", "2d-only", "3d-only", "ssao", "ssgi", "reference")

#: Oversampling factor against the Poisson-disk saturation density.
SURFACE_OVERSAMPLE = 3.0
RSA_DENSITY = 0.697  # saturated points per unit area at unit radius


def surface_sample_count(mesh: TriangleMesh, pd_radius: float,
                         lo: int = 2000, hi: int = 400_000) -> int:
    """Enough uniform samples that Poisson selection at ``pd_radius`` saturates."""
    n = SURFACE_OVERSAMPLE * RSA_DENSITY * mesh.total_area() / (pd_radius * pd_radius)
    return int(np.clip(np.ceil(n), lo, hi))


@dataclass
class RenderResult:
    image: Image
    stats: dict = field(default_factory=dict)
    gbuffer: GBuffer | None = None
    composite: Image | None = None  # albedo * (direct + indirect), GI only


def pixel_cloud(gbuffer: GBuffer):
    """Flattened covered-pixel data as network query inputs."""
    m = gbuffer.covered
    return {
        "positions": gbuffer.positions[m],
        "normals": gbuffer.normals[m],
        "albedo": gbuffer.albedo[m],
        "direct": gbuffer.direct[m],
    }


def prepare_latent_cloud(mesh: TriangleMesh, bvh, effect: str, pd_radius: float,
                         lighting: Lighting | None, seed: int,
                         n_samples: int | None = None,
                         direct_rays: int = 64) -> PointCloud:
    """Sample the surface densely, then keep a Poisson-disk subset."""
    n = n_samples if n_samples is not None else surface_sample_count(mesh, pd_radius)
    dense = sample_surface_uniform(mesh, n, seed=derive_seed(seed, "render-sample"))
    keep = poisson_disk_indices(dense.positions.astype(np.float64), pd_radius,
                                derive_seed(seed, "render-select"))
    cloud = dense.subset(keep)
    if effect == "gi":
        direct = direct_at_points(bvh, cloud.positions.astype(np.float64),
                                  cloud.normals.astype(np.float64), lighting,
                                  n_rays=direct_rays, seed=derive_seed(seed, "render-direct"))
        cloud = cloud.replace(direct=direct.astype(np.float32))
    return cloud


def render_scene(mode: str, mesh: TriangleMesh, camera: Camera, size: int,
                 pd_radius: float = 0.15, model: Model | None = None,
                 lighting: Lighting | None = None, seed: int = 0,
                 n_samples: int | None = None, ao_rays: int = 128, gi_rays: int = 512,
                 bounces: int = 4, ss_config: SSConfig | None = None) -> RenderResult:
    """Render one view; see module docstring for the mode catalogue."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    stats: dict = {"mode": mode, "size": size}
    bvh = build_bvh(mesh)
    effect = model.config.effect if model is not None else ("gi" if mode == "ssgi" else "ao")
    needs_direct = effect == "gi" or mode in ("ssgi", "reference")
    t0 = time.perf_counter()
    gbuffer = raycast_gbuffer(bvh, camera, size, size,
                              lighting=lighting if needs_direct else None,
                              seed=derive_seed(seed, "gbuffer"))
    stats["gbuffer_seconds"] = time.perf_counter() - t0
    stats["covered_pixels"] = int(gbuffer.covered.sum())

    if mode == "ssao":
        cfg = ss_config or SSConfig(ao_radius=default_ao_radius(mesh))
        img = ssao(gbuffer, cfg)
        return RenderResult(image=img, stats=stats, gbuffer=gbuffer)
    if mode == "ssgi":
        if lighting is None:
            raise ValueError("ssgi requires lighting")
        cfg = ss_config or SSConfig(ao_radius=default_ao_radius(mesh))
        img = ssgi(gbuffer, cfg)
        return RenderResult(image=img, stats=stats, gbuffer=gbuffer,
                            composite=_composite(gbuffer, img.values))
    if mode == "reference":
        img = _reference(bvh, mesh, gbuffer, effect, lighting, ao_rays, gi_rays, bounces, seed)
        comp = _composite(gbuffer, img.values) if effect == "gi" else None
        return RenderResult(image=img, stats=stats, gbuffer=gbuffer, composite=comp)

    if model is None:
        raise ValueError(f"mode {mode!r} requires a trained model")
    if effect == "gi" and lighting is None:
        raise ValueError("gi rendering requires lighting")

    t0 = time.perf_counter()
    latent_cloud = prepare_latent_cloud(mesh, bvh, effect, pd_radius, lighting, seed,
                                        n_samples=n_samples)
    stats["latent_points"] = len(latent_cloud)
    stats["selection_seconds"] = time.perf_counter() - t0

    px = pixel_cloud(gbuffer)
    if effect == "ao":
        px_attrs = px["normals"].astype(np.float64)
    else:
        px_attrs = np.concatenate([px["normals"], px["albedo"], px["direct"]], axis=1).astype(np.float64)

    t0 = time.perf_counter()
    values = _evaluate_model(model, latent_cloud, px["positions"].astype(np.float64), px_attrs, seed)
    stats["network_seconds"] = time.perf_counter() - t0

    out = np.zeros((size, size, model.config.output_channels), dtype=np.float32)
    out[gbuffer.covered] = values.astype(np.float32)
    img = Image(values=out, mask=gbuffer.covered.copy())
    comp = _composite(gbuffer, img.values) if effect == "gi" else None
    return RenderResult(image=img, stats=stats, gbuffer=gbuffer, composite=comp)


def _evaluate_model(model: Model, latent_cloud: PointCloud, px_pos, px_attrs, seed: int) -> np.ndarray:
    cfg = model.config
    src_pos = latent_cloud.positions.astype(np.float64)
    if cfg.variant == "2d-only":
        return _project_chunked(model, src_pos, attributes_for(cfg, latent_cloud).astype(model.dtype),
                                px_pos, px_attrs, raw=True)
    hierarchy = build_hierarchy(latent_cloud, cfg.hierarchy_radii,
                                seed=derive_seed(seed, "render-hier"))
    feats = forward_3d(model, hierarchy)
    level0 = hierarchy.levels[0].positions.astype(np.float64)
    if cfg.variant == "3d-only":
        out = splat_to_pixels(level0, feats, px_pos, cfg.projection_radius)
        return np.clip(out, 0.0, 1.0) if cfg.effect == "ao" else np.maximum(out, 0.0)
    return _project_chunked(model, level0, feats, px_pos, px_attrs, raw=False)


def _project_chunked(model: Model, src_pos, src_feats, px_pos, px_attrs,
                     raw: bool, chunk: int = 16384) -> np.ndarray:
    """Stream pixels through the projection to bound pair-list memory."""
    outs = []
    for start in range(0, len(px_pos), chunk):
        pos = px_pos[start : start + chunk]
        attrs = px_attrs[start : start + chunk]
        if raw:
            outs.append(forward_2d_only(model, src_pos, src_feats, pos, attrs, clamp=True))
        else:
            outs.append(project_to_pixels(model, src_pos, src_feats, pos, attrs, clamp=True))
    if not outs:
        return np.zeros((0, model.config.output_channels))
    return np.concatenate(outs, axis=0)


def _reference(bvh, mesh, gbuffer: GBuffer, effect: str, lighting, ao_rays, gi_rays, bounces, seed):
    m = gbuffer.covered
    size_y, size_x = m.shape
    if effect == "ao":
        values = np.zeros((size_y, size_x, 1), dtype=np.float32)
        if np.any(m):
            occ = ao_at_points(bvh, gbuffer.positions[m], gbuffer.normals[m],
                               default_ao_radius(mesh), n_rays=ao_rays,
                               seed=derive_seed(seed, "ref-ao"))
            values[m] = occ[:, None].astype(np.float32)
        return Image(values=values, mask=m.copy())
    if lighting is None:
        raise ValueError("reference gi requires lighting")
    values = np.zeros((size_y, size_x, 3), dtype=np.float32)
    if np.any(m):
        _d, ind = gi_at_points(bvh, gbuffer.positions[m], gbuffer.normals[m], lighting,
                               bounces=bounces, n_rays=gi_rays, seed=derive_seed(seed, "ref-gi"))
        values[m] = ind.astype(np.float32)
    return Image(values=values, mask=m.copy())


def _composite(gbuffer: GBuffer, indirect: np.ndarray) -> Image:
    """Display radiance: albedo * (direct + indirect)."""
    values = gbuffer.albedo.astype(np.float32) * (gbuffer.direct.astype(np.float32) + indirect)
    return Image(values=values, mask=gbuffer.covered.copy())
