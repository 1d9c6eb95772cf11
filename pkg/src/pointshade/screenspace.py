"""Screen-space shading baselines operating purely on the G-buffer.

These reproduce the classic deferred-shading approximations the learned
operator is compared against: horizon-marched ambient occlusion and
windowed single-bounce diffuse gather.  Both see only what the camera sees,
which is precisely their known failure mode (hidden geometry contributes
nothing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .images import Image
from .tracer import GBuffer


@dataclass
class SSConfig:
    """Sampling parameters for the screen-space estimators."""

    ao_directions: int = 16
    ao_steps: int = 32
    ao_radius: float = 0.3          # world-space cutoff (0.1 x scene radius by default upstream)
    ao_bias: float = 0.03           # horizon angle bias against self-shadowing
    gi_window: int = 54             # square gather window side, in pixels

    def __post_init__(self):
        if self.ao_directions < 1 or self.ao_steps < 1 or self.gi_window < 2:
            raise ValueError("sample counts must be positive")
        if self.ao_radius <= 0:
            raise ValueError("ao_radius must be > 0")


@njit(cache=True, parallel=True)
def _ssao_kernel(positions, normals, covered, cam_pos, forward, pix_per_unit_at_unit_depth,
                 n_dirs, n_steps, radius, bias):
    h, w = covered.shape
    out = np.zeros((h, w))
    for py in prange(h):
        for px in range(w):
            if not covered[py, px]:
                continue
            pxx = positions[py, px, 0]
            pxy = positions[py, px, 1]
            pxz = positions[py, px, 2]
            nx = normals[py, px, 0]
            ny = normals[py, px, 1]
            nz = normals[py, px, 2]
            depth = ((pxx - cam_pos[0]) * forward[0]
                     + (pxy - cam_pos[1]) * forward[1]
                     + (pxz - cam_pos[2]) * forward[2])
            if depth <= 1e-9:
                continue
            screen_radius = radius * pix_per_unit_at_unit_depth / depth
            if screen_radius > 0.75 * max(h, w):
                screen_radius = 0.75 * max(h, w)
            if screen_radius < 1.0:
                screen_radius = 1.0
            acc = 0.0
            for di in range(n_dirs):
                ang = 2.0 * math.pi * di / n_dirs
                dx = math.cos(ang)
                dy = math.sin(ang)
                best = 0.0
                for si in range(1, n_steps + 1):
                    step = screen_radius * si / n_steps
                    qx = px + int(round(dx * step))
                    qy = py + int(round(dy * step))
                    if qx < 0 or qx >= w or qy < 0 or qy >= h:
                        break
                    if not covered[qy, qx]:
                        continue
                    vx = positions[qy, qx, 0] - pxx
                    vy = positions[qy, qx, 1] - pxy
                    vz = positions[qy, qx, 2] - pxz
                    d = math.sqrt(vx * vx + vy * vy + vz * vz)
                    if d < 1e-9 or d > radius:
                        continue
                    sin_h = (vx * nx + vy * ny + vz * nz) / d
                    contrib = (sin_h - bias) * (1.0 - d / radius)
                    if contrib > best:
                        best = contrib
                acc += best if best > 0.0 else 0.0
            out[py, px] = acc / n_dirs
    return out


@njit(cache=True, parallel=True)
def _ssgi_kernel(positions, normals, albedo, direct, covered, cam_pos,
                 pixel_angle, window):
    h, w = covered.shape
    out = np.zeros((h, w, 3))
    half = window // 2
    for py in prange(h):
        for px in range(w):
            if not covered[py, px]:
                continue
            pxx = positions[py, px, 0]
            pxy = positions[py, px, 1]
            pxz = positions[py, px, 2]
            nx = normals[py, px, 0]
            ny = normals[py, px, 1]
            nz = normals[py, px, 2]
            r = 0.0
            g = 0.0
            b = 0.0
            for oy in range(-half, window - half):
                qy = py + oy
                if qy < 0 or qy >= h:
                    continue
                for ox in range(-half, window - half):
                    qx = px + ox
                    if (ox == 0 and oy == 0) or qx < 0 or qx >= w:
                        continue
                    if not covered[qy, qx]:
                        continue
                    vx = positions[qy, qx, 0] - pxx
                    vy = positions[qy, qx, 1] - pxy
                    vz = positions[qy, qx, 2] - pxz
                    d2 = vx * vx + vy * vy + vz * vz
                    if d2 < 1e-12:
                        continue
                    d = math.sqrt(d2)
                    cos_r = (vx * nx + vy * ny + vz * nz) / d
                    if cos_r <= 0.0:
                        continue
                    snx = normals[qy, qx, 0]
                    sny = normals[qy, qx, 1]
                    snz = normals[qy, qx, 2]
                    cos_s = -(vx * snx + vy * sny + vz * snz) / d
                    if cos_s <= 0.0:
                        continue
                    # sender pixel footprint in world units at its depth
                    zx = positions[qy, qx, 0] - cam_pos[0]
                    zy = positions[qy, qx, 1] - cam_pos[1]
                    zz = positions[qy, qx, 2] - cam_pos[2]
                    dist_cam = math.sqrt(zx * zx + zy * zy + zz * zz)
                    area = (dist_cam * pixel_angle) ** 2
                    ff = cos_r * cos_s * area / (math.pi * d2 + area)
                    r += albedo[qy, qx, 0] * direct[qy, qx, 0] * ff
                    g += albedo[qy, qx, 1] * direct[qy, qx, 1] * ff
                    b += albedo[qy, qx, 2] * direct[qy, qx, 2] * ff
            out[py, px, 0] = r
            out[py, px, 1] = g
            out[py, px, 2] = b
    return out


def ssao(gbuffer: GBuffer, cfg: SSConfig) -> Image:
    """Horizon-based screen-space occlusion; uncovered pixels read 0."""
    right, up, forward, half_w, half_h = gbuffer.camera.basis(gbuffer.width, gbuffer.height)
    pix_per_unit = (gbuffer.height / 2.0) / half_h
    occ = _ssao_kernel(
        gbuffer.positions, gbuffer.normals, gbuffer.covered,
        np.ascontiguousarray(gbuffer.camera.position), np.ascontiguousarray(forward),
        pix_per_unit, int(cfg.ao_directions), int(cfg.ao_steps),
        float(cfg.ao_radius), float(cfg.ao_bias),
    )
    occ = np.clip(occ, 0.0, 1.0)
    return Image(values=occ[:, :, None].astype(np.float32), mask=gbuffer.covered.copy())


def ssgi(gbuffer: GBuffer, cfg: SSConfig) -> Image:
    """Windowed single-bounce gather: every window pixel acts as a diffuse
    sender with radiosity albedo x direct."""
    right, up, forward, half_w, half_h = gbuffer.camera.basis(gbuffer.width, gbuffer.height)
    pixel_angle = 2.0 * half_h / gbuffer.height
    ind = _ssgi_kernel(
        gbuffer.positions, gbuffer.normals, gbuffer.albedo, gbuffer.direct,
        gbuffer.covered, np.ascontiguousarray(gbuffer.camera.position),
        pixel_angle, int(cfg.gi_window),
    )
    return Image(values=np.maximum(ind, 0.0).astype(np.float32), mask=gbuffer.covered.copy())
