"""The two-stage shading operator and its ablation variants.

Stage one runs an encoder-decoder over a Poisson-disk point hierarchy and
labels every input point with a latent code; stage two is a single Monte
Carlo convolution from those latent points onto arbitrary query points
(image pixels at render time, held-out surface points at training time).

Variants:
  * ``ours``     — both stages, trained end-to-end.
  * ``2d-only``  — stage two alone, convolving raw point attributes.
  * ``3d-only``  — stage one regressing shading per point, then a fixed
                   distance-weighted splat instead of a learned projection.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamBlock, dumps_weights, loads_weights
from .cloud import DEFAULT_HIERARCHY_RADII, PointCloud, PointHierarchy
from .conv import (
    DEFAULT_KERNEL_HIDDEN,
    Conv1x1,
    MCConvLayer,
    PairSet,
    matched_hidden,
    mc_convolve,
    plan_pairs,
)
from .grid import VoxelHashGrid
from .seeding import derive_seed

VARIANTS = ("ours", "2d-only", "3d-only")
EFFECTS = ("ao", "gi")

#: Per-point input attribute channels fed to the network.
ATTRIBUTE_CHANNELS = {"ao": 3, "gi": 9}   # normal | normal + albedo + direct
#: Shading output channels.
OUTPUT_CHANNELS = {"ao": 1, "gi": 3}


@dataclass
class ModelConfig:
    """Architecture and input layout of one model.

    ``selection_radius`` is the Poisson-disk radius used to pick the network
    input points out of a dense surface cloud; the projection receptive
    radius defaults to twice that and is fixed once trained (render-time
    point density may vary underneath it).
    """

    effect: str = "ao"
    variant: str = "ours"
    hierarchy_radii: tuple = DEFAULT_HIERARCHY_RADII
    level_widths: tuple = (8, 16, 32, 64)
    latent_channels: int = 8
    selection_radius: float = 0.075
    projection_radius: float | None = None
    kernel_hidden: tuple = DEFAULT_KERNEL_HIDDEN
    within_radius_scale: float = 2.0
    use_skips: bool = True

    def __post_init__(self):
        if self.effect not in EFFECTS:
            raise ValueError(f"effect must be one of {EFFECTS}, got {self.effect!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.hierarchy_radii = tuple(float(r) for r in self.hierarchy_radii)
        self.level_widths = tuple(int(w) for w in self.level_widths)
        self.kernel_hidden = tuple(int(h) for h in self.kernel_hidden)
        if len(self.level_widths) != len(self.hierarchy_radii):
            raise ValueError("level_widths and hierarchy_radii must have equal length")
        for a, b in zip(self.level_widths, self.level_widths[1:]):
            if b != 2 * a:
                raise ValueError(f"feature widths must double per level, got {self.level_widths}")
        if self.latent_channels < 0:
            raise ValueError("latent_channels must be >= 0")
        if self.projection_radius is None:
            self.projection_radius = 2.0 * self.selection_radius

    @property
    def attribute_channels(self) -> int:
        return ATTRIBUTE_CHANNELS[self.effect]

    @property
    def output_channels(self) -> int:
        return OUTPUT_CHANNELS[self.effect]

    @property
    def levels(self) -> int:
        return len(self.level_widths)

    def to_dict(self) -> dict:
        return {
            "effect": self.effect,
            "variant": self.variant,
            "hierarchy_radii": list(self.hierarchy_radii),
            "level_widths": list(self.level_widths),
            "latent_channels": self.latent_channels,
            "selection_radius": self.selection_radius,
            "projection_radius": self.projection_radius,
            "kernel_hidden": list(self.kernel_hidden),
            "within_radius_scale": self.within_radius_scale,
            "use_skips": self.use_skips,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            effect=d["effect"],
            variant=d["variant"],
            hierarchy_radii=tuple(d["hierarchy_radii"]),
            level_widths=tuple(d["level_widths"]),
            latent_channels=int(d["latent_channels"]),
            selection_radius=float(d["selection_radius"]),
            projection_radius=float(d["projection_radius"]),
            kernel_hidden=tuple(d["kernel_hidden"]),
            within_radius_scale=float(d["within_radius_scale"]),
            use_skips=bool(d["use_skips"]),
        )


@dataclass
class EncoderLevel:
    pre: Conv1x1
    conv: MCConvLayer
    post: Conv1x1
    down: MCConvLayer | None  # to the next (coarser) level; None at the deepest


@dataclass
class DecoderLevel:
    up: MCConvLayer           # from the coarser level down to this one
    mix: Conv1x1


@dataclass
class Model:
    config: ModelConfig
    encoder: list = field(default_factory=list)
    decoder: list = field(default_factory=list)
    head: Conv1x1 | None = None          # latent head (ours) or shading head (3d-only)
    projection: MCConvLayer | None = None

    def param_blocks(self) -> list:
        blocks = []
        for lv in self.encoder:
            blocks += lv.pre.param_blocks() + lv.conv.param_blocks() + lv.post.param_blocks()
            if lv.down is not None:
                blocks += lv.down.param_blocks()
        for lv in self.decoder:
            blocks += lv.up.param_blocks() + lv.mix.param_blocks()
        if self.head is not None:
            blocks += self.head.param_blocks()
        if self.projection is not None:
            blocks += self.projection.param_blocks()
        return blocks

    def parameter_count(self) -> int:
        return sum(b.size for b in self.param_blocks())

    def astype(self, dtype) -> "Model":
        for b in self.param_blocks():
            b.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.param_blocks()[0].values.dtype

    def zero_grad(self) -> None:
        for b in self.param_blocks():
            b.zero_grad()


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Instantiate all layers and parameters; deterministic per seed."""
    cfg = config
    widths = cfg.level_widths
    radii = cfg.hierarchy_radii
    levels = cfg.levels
    hidden = cfg.kernel_hidden

    def s(*keys):
        return derive_seed(seed, "model", *keys)

    model = Model(config=cfg)
    if cfg.variant != "2d-only":
        in_ch = cfg.attribute_channels
        for k in range(levels):
            w = widths[k]
            pre = Conv1x1.create(f"enc{k}.pre", in_ch, w, seed=s("enc", k, "pre"))
            conv = MCConvLayer.create(
                f"enc{k}.conv", cfg.within_radius_scale * radii[k], w, w,
                hidden=hidden, seed=s("enc", k, "conv"), scope="within",
            )
            post = Conv1x1.create(f"enc{k}.post", w, w, seed=s("enc", k, "post"))
            down = None
            if k + 1 < levels:
                down = MCConvLayer.create(
                    f"enc{k}.down", radii[k + 1], w, widths[k + 1],
                    hidden=hidden, seed=s("enc", k, "down"), scope="between",
                )
            model.encoder.append(EncoderLevel(pre, conv, post, down))
            in_ch = widths[k + 1] if k + 1 < levels else w
        for k in range(levels - 2, -1, -1):
            w = widths[k]
            up_in = widths[k + 1]
            up = MCConvLayer.create(
                f"dec{k}.up", radii[k + 1], up_in, w,
                hidden=hidden, seed=s("dec", k, "up"), scope="between",
            )
            mix_in = 2 * w if cfg.use_skips else w
            mix = Conv1x1.create(f"dec{k}.mix", mix_in, w, seed=s("dec", k, "mix"))
            model.decoder.append(DecoderLevel(up, mix))
        head_out = cfg.latent_channels if cfg.variant == "ours" else cfg.output_channels
        if head_out > 0:
            model.head = Conv1x1.create("head", widths[0], head_out, seed=s("head"), activation="linear")

    if cfg.variant in ("ours", "2d-only"):
        attr = cfg.attribute_channels
        if cfg.variant == "ours":
            in_ch = cfg.latent_channels + attr
            proj_hidden = hidden
        else:
            in_ch = attr + attr
            # same parameter budget as the full model's projection layer
            ours_in = cfg.latent_channels + attr
            sizes = [3, *hidden, ours_in * cfg.output_channels]
            target = sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))
            proj_hidden = matched_hidden(in_ch, cfg.output_channels, target)
        model.projection = MCConvLayer.create(
            "projection", cfg.projection_radius, in_ch, cfg.output_channels,
            hidden=proj_hidden, seed=s("projection"), scope="projection",
        )
    return model


# -- static geometry planning ---------------------------------------------------


@dataclass
class HierarchyPlans:
    """Precomputed pair sets for every convolution over one hierarchy."""

    within: list
    down: list
    up: list

    @staticmethod
    def build(config: ModelConfig, hierarchy: PointHierarchy, dtype=np.float32) -> "HierarchyPlans":
        if tuple(hierarchy.radii) != tuple(config.hierarchy_radii):
            raise ValueError(
                f"hierarchy radii {hierarchy.radii} do not match model config {config.hierarchy_radii}"
            )
        levels = [np.asarray(l.positions, dtype=np.float64) for l in hierarchy.levels]
        within, down, up = [], [], []
        for k, pts in enumerate(levels):
            within.append(plan_pairs(pts, pts, config.within_radius_scale * hierarchy.radii[k], dtype=dtype))
        for k in range(len(levels) - 1):
            r = hierarchy.radii[k + 1]
            down.append(plan_pairs(levels[k], levels[k + 1], r, dtype=dtype))
            up.append(plan_pairs(levels[k + 1], levels[k], r, dtype=dtype))
        return HierarchyPlans(within=within, down=down, up=up)


def attributes_for(config: ModelConfig, cloud: PointCloud) -> np.ndarray:
    """Per-point input attribute matrix for the configured effect."""
    if config.effect == "ao":
        return np.asarray(cloud.normals, dtype=np.float64)
    if cloud.albedo is None or cloud.direct is None:
        raise ValueError("gi attributes require albedo and direct irradiance channels")
    return np.concatenate([cloud.normals, cloud.albedo, cloud.direct], axis=1).astype(np.float64)


# -- forward passes ---------------------------------------------------------------


def forward_3d(model: Model, hierarchy: PointHierarchy, attributes=None,
               plans: HierarchyPlans | None = None, tape=None):
    """Encoder-decoder over the hierarchy; per level-0 point output.

    Returns latent codes (``ours``) or per-point shading (``3d-only``).
    """
    cfg = model.config
    if cfg.variant == "2d-only":
        raise ValueError("2d-only models have no 3D stage")
    if plans is None:
        plans = HierarchyPlans.build(cfg, hierarchy, dtype=model.dtype)
    if attributes is None:
        attributes = attributes_for(cfg, hierarchy.levels[0])
    if attributes.shape[1] != cfg.attribute_channels:
        raise ValueError(
            f"attribute layout mismatch: got {attributes.shape[1]} channels, "
            f"expected {cfg.attribute_channels} for effect {cfg.effect!r}"
        )
    attributes = np.asarray(attributes, dtype=model.dtype)
    h = tape.constant(attributes) if tape is not None else attributes
    levels = hierarchy.levels
    skips = []
    for k, enc in enumerate(model.encoder):
        h = enc.pre(h, tape=tape)
        h = mc_convolve(enc.conv, levels[k].positions, h, levels[k].positions,
                        pairs=plans.within[k], tape=tape)
        h = enc.post(h, tape=tape)
        skips.append(h)
        if enc.down is not None:
            h = mc_convolve(enc.down, levels[k].positions, h, levels[k + 1].positions,
                            pairs=plans.down[k], tape=tape)
    for i, dec in enumerate(model.decoder):
        k = len(model.encoder) - 2 - i
        h = mc_convolve(dec.up, levels[k + 1].positions, h, levels[k].positions,
                        pairs=plans.up[k], tape=tape)
        if cfg.use_skips:
            h = ad.concat([h, skips[k]], axis=1)
        h = dec.mix(h, tape=tape)
    if model.head is not None:
        h = model.head(h, tape=tape)
    return h


def project_to_pixels(model: Model, latent_points, latents, pixel_points, pixel_attributes,
                      grid: VoxelHashGrid | None = None, plan: PairSet | None = None,
                      tape=None, clamp: bool = False):
    """Stage two: one learned convolution from latent points onto query points.

    Each query point gathers the latent codes of nearby source points,
    concatenated with its own attributes.  The grid indexes only the latent
    points (queries are never hashed).  Empty neighborhoods yield zeros.
    ``clamp`` applies the inference range limits ([0, 1] occlusion, >= 0
    irradiance) and must stay off during training.
    """
    cfg = model.config
    if model.projection is None:
        raise ValueError(f"{cfg.variant} models have no projection layer")
    if latents is None:
        latents = np.zeros((len(np.asarray(latent_points)), 0), dtype=model.dtype)
    pixel_attributes = np.asarray(pixel_attributes)
    if pixel_attributes.shape[1] != cfg.attribute_channels:
        raise ValueError(
            f"pixel attribute mismatch: got {pixel_attributes.shape[1]}, expected {cfg.attribute_channels}"
        )
    pixel_attributes = pixel_attributes.astype(model.dtype)
    if plan is None:
        plan = plan_pairs(latent_points, pixel_points, model.projection.radius,
                          grid=grid, dtype=model.dtype)
    out = mc_convolve(model.projection, latent_points, latents, pixel_points,
                      pairs=plan, out_extra=pixel_attributes, tape=tape)
    if clamp:
        values = out.value if tape is not None else out
        values = np.clip(values, 0.0, 1.0) if cfg.effect == "ao" else np.maximum(values, 0.0)
        return values
    return out


def forward_2d_only(model: Model, source_points, source_attributes, pixel_points, pixel_attributes,
                    grid: VoxelHashGrid | None = None, plan: PairSet | None = None,
                    tape=None, clamp: bool = False):
    """Single convolution from raw point attributes to query points."""
    cfg = model.config
    if model.projection is None:
        raise ValueError("model has no projection layer")
    source_attributes = np.asarray(source_attributes).astype(model.dtype)
    pixel_attributes = np.asarray(pixel_attributes).astype(model.dtype)
    if plan is None:
        plan = plan_pairs(source_points, pixel_points, model.projection.radius,
                          grid=grid, dtype=model.dtype)
    feats = tape.constant(source_attributes) if tape is not None else source_attributes
    out = mc_convolve(model.projection, source_points, feats, pixel_points,
                      pairs=plan, out_extra=pixel_attributes, tape=tape)
    if clamp:
        values = out.value if tape is not None else out
        values = np.clip(values, 0.0, 1.0) if cfg.effect == "ao" else np.maximum(values, 0.0)
        return values
    return out


def splat_to_pixels(points, values, pixel_points, radius: float,
                    grid: VoxelHashGrid | None = None) -> np.ndarray:
    """Fixed splatting: distance-weighted average with w = (1 - d/r)^2.

    Weights are normalized per pixel; pixels with no point in range get 0.
    """
    points = np.asarray(points, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    pixel_points = np.asarray(pixel_points, dtype=np.float64)
    if grid is None or radius / grid.cell_size > 2.0:
        grid = VoxelHashGrid(points, cell_size=radius)
    qid, src, dist = grid.query_radius_batch(pixel_points, radius)
    w = (1.0 - dist / radius) ** 2
    out = np.zeros((len(pixel_points), values.shape[1]))
    norm = np.zeros(len(pixel_points))
    if len(qid):
        unique, starts = np.unique(qid, return_index=True)
        out[unique] = np.add.reduceat(w[:, None] * values[src], starts, axis=0)
        norm[unique] = np.add.reduceat(w, starts)
    covered = norm > 0
    out[covered] /= norm[covered, None]
    return out


# -- end-to-end gradient checking ---------------------------------------------------
#
# The loss of a rectifier network under L2 is piecewise quadratic in the
# parameters, so a central difference quotient equals the derivative exactly
# (up to float64 roundoff) unless the +/-eps interval crosses an activation
# region boundary.  The checker therefore (a) sweeps every parameter with a
# batched, vectorized evaluator, (b) re-measures disagreeing quotients at
# shrinking steps, and (c) proves any persistent disagreement is a kink
# crossing by comparing activation sign patterns at theta+eps and theta-eps;
# a sign-stable disagreement is a genuine gradient bug and fails the check.


class _BatchedEvaluator:
    """Evaluates the pseudo-pixel L2 loss for a stack of parameter variants.

    All arrays carry an optional leading batch axis; per-call overrides
    substitute one parameter block with a (B, ...) stack while every other
    block broadcasts.  Used only by the gradient checker.
    """

    def __init__(self, model: Model, hierarchy: PointHierarchy, plans: HierarchyPlans,
                 pixel_points, pixel_attributes, target, projection_plan):
        self.model = model
        self.levels = hierarchy.levels
        self.plans = plans
        self.attrs = attributes_for(model.config, hierarchy.levels[0])
        self.pixel_attributes = np.asarray(pixel_attributes, dtype=np.float64)
        self.target = np.asarray(target, dtype=np.float64)
        self.projection_plan = projection_plan
        self.overrides = {}
        self.capture_signs = False
        self.signs = []

    def _p(self, block):
        return self.overrides.get(block.name, block.values)

    def _leaky(self, x, slope=0.01):
        if self.capture_signs:
            self.signs.append(x > 0)
        return np.where(x > 0, x, slope * x)

    def _conv1x1(self, layer, x):
        out = np.matmul(x, self._p(layer.weights)) + self._bias(layer.bias, out_dims=2)
        if layer.activation == "leaky_relu":
            out = self._leaky(out, layer.slope)
        return out

    def _bias(self, block, out_dims):
        b = self._p(block)
        if b.ndim > 1:  # stacked (B, n): insert the row axis for broadcasting
            return b.reshape(b.shape[0], *([1] * (out_dims - 1)), b.shape[-1])
        return b

    def _mc_conv(self, layer, feats, pairs, out_extra=None):
        m = len(pairs)
        cin, cout = layer.in_channels, layer.out_channels
        f = np.take(feats, pairs.src, axis=-2) if np.ndim(feats) > 1 else feats[pairs.src]
        if out_extra is not None:
            extra = out_extra[pairs.dst]
            if f.ndim == 3:
                extra = np.broadcast_to(extra, (f.shape[0],) + extra.shape)
            f = np.concatenate([f, extra], axis=-1)
        fw = f * pairs.weight  # (..., m, cin)
        h = pairs.offsets
        mlp = layer.mlp
        for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
            h = self._leaky(np.matmul(h, self._p(w)) + self._bias(b, out_dims=2), mlp.slope)
        nh = mlp.last_hidden_dim
        pair_basis = fw[..., :, None] * h[..., None, :]          # (..., m, cin, nh)
        basis_flat = pair_basis.reshape(pair_basis.shape[:-3] + (m, cin * nh))
        basis = _seg_sum(basis_flat, pairs)
        w_last = self._p(mlp.weights[-1])
        w_r = np.swapaxes(w_last.reshape(w_last.shape[:-2] + (nh, cin, cout)), -3, -2)
        w_r = w_r.reshape(w_last.shape[:-2] + (cin * nh, cout))
        out = np.matmul(basis, w_r)
        b_last = self._p(mlp.biases[-1])
        out = out + np.matmul(_seg_sum(fw, pairs), b_last.reshape(b_last.shape[:-1] + (cin, cout)))
        return out + self._bias(layer.bias, out_dims=2) * pairs.nonempty

    def loss(self, overrides=None):
        self.overrides = overrides or {}
        model, levels, plans = self.model, self.levels, self.plans
        h = self.attrs
        skips = []
        for k, enc in enumerate(model.encoder):
            h = self._conv1x1(enc.pre, h)
            h = self._mc_conv(enc.conv, h, plans.within[k])
            h = self._conv1x1(enc.post, h)
            skips.append(h)
            if enc.down is not None:
                h = self._mc_conv(enc.down, h, plans.down[k])
        for i, dec in enumerate(model.decoder):
            k = len(model.encoder) - 2 - i
            h = self._mc_conv(dec.up, h, plans.up[k])
            if model.config.use_skips:
                skip = skips[k]
                if h.ndim == 3 and skip.ndim == 2:
                    skip = np.broadcast_to(skip, (h.shape[0],) + skip.shape)
                h = np.concatenate([h, skip], axis=-1)
            h = self._conv1x1(dec.mix, h)
        if model.head is not None:
            h = self._conv1x1(model.head, h)
        out = self._mc_conv(model.projection, h, self.projection_plan,
                            out_extra=self.pixel_attributes)
        d = out - self.target
        return np.mean(d * d, axis=(-2, -1))


def _seg_sum(x, pairs):
    plan = pairs.segments
    out_shape = x.shape[:-2] + (pairs.n_out, x.shape[-1])
    out = np.zeros(out_shape, dtype=x.dtype)
    if len(pairs):
        sums = np.add.reduceat(x, plan.starts, axis=-2)
        out[..., plan.unique, :] = sums
    return out


def full_model_gradcheck(model: Model, hierarchy: PointHierarchy, pixel_points,
                         pixel_attributes, target, eps: float = 1e-5,
                         batch: int = 192) -> dict:
    """Check every parameter's tape gradient against central differences.

    The model must be float64.  Returns the max relative error over valid
    (non-kink-crossing) quotients, plus diagnostics: how many quotients
    needed refinement and how many were proven to straddle a kink.
    """
    from . import autodiff as ad
    from .autodiff import Tape

    if model.dtype != np.float64:
        raise ValueError("gradient checks run in float64; call model.astype(np.float64)")
    plans = HierarchyPlans.build(model.config, hierarchy, dtype=np.float64)
    proj_plan = plan_pairs(hierarchy.levels[0].positions.astype(np.float64),
                           pixel_points, model.projection.radius, dtype=np.float64)
    evaluator = _BatchedEvaluator(model, hierarchy, plans, pixel_points,
                                  pixel_attributes, target, proj_plan)

    model.zero_grad()
    tape = Tape(dtype=np.float64, track_kinks=True, kink_tol=2.0 * eps)
    latents = forward_3d(model, hierarchy, plans=plans, tape=tape)
    out = project_to_pixels(model, hierarchy.levels[0].positions, latents,
                            pixel_points, pixel_attributes, plan=proj_plan, tape=tape)
    loss = ad.mean(ad.square(ad.sub(out, np.asarray(target, dtype=np.float64))))
    tape.backward(loss)
    base = float(loss.value)
    check = float(evaluator.loss())
    if not np.isclose(check, base, rtol=1e-12, atol=1e-15):
        raise AssertionError(f"batched evaluator diverged from the recorded graph: {check} vs {base}")

    def rel(g_ad, g_fd):
        return np.abs(g_ad - g_fd) / np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)

    def fd_block(block, indices, step):
        """Central differences for a set of flat indices of one block, batched."""
        quotients = np.empty(len(indices))
        for lo_i in range(0, len(indices), batch):
            chunk = indices[lo_i : lo_i + batch]
            stack = np.repeat(block.values[None], len(chunk), axis=0)
            flat = stack.reshape(len(chunk), -1)
            cols = np.arange(len(chunk))
            flat[cols, chunk] += step
            hi = evaluator.loss({block.name: stack})
            flat[cols, chunk] -= 2.0 * step
            lo = evaluator.loss({block.name: stack})
            quotients[lo_i : lo_i + batch] = (hi - lo) / (2.0 * step)
        return quotients

    blocks = model.param_blocks()
    n_params = sum(b.size for b in blocks)
    errors = []
    flagged = []  # (block, flat index, g_ad, primary error)
    for block in blocks:
        idx = np.arange(block.size)
        fd = fd_block(block, idx, eps)
        g_ad = block.grad.ravel()
        e = rel(g_ad, fd)
        bad = np.nonzero(e > 1e-4)[0]
        for i in bad:
            flagged.append((block, int(i), float(g_ad[i]), float(e[i])))
        keep = np.ones(block.size, bool)
        keep[bad] = False
        errors.append(e[keep])

    # refinement: shrink the step; a valid quotient snaps to the derivative
    refined_errors = []
    crossings = 0
    still_bad = []
    by_block: dict = {}
    for block, i, g_ad, e0 in flagged:
        by_block.setdefault(id(block), (block, []))[1].append((i, g_ad, e0))
    for block, items in by_block.values():
        idx = np.array([i for i, _, _ in items])
        g_ad = np.array([g for _, g, _ in items])
        best = np.array([e for _, _, e in items])
        for step in (eps / 10.0, eps / 100.0):
            fd = fd_block(block, idx, step)
            best = np.minimum(best, rel(g_ad, fd))
        for n in range(len(idx)):
            if best[n] <= 1e-4:
                refined_errors.append(float(best[n]))
            else:
                still_bad.append((block, int(idx[n]), float(g_ad[n]), float(best[n])))

    # prove the remaining disagreements straddle a kink: the activation sign
    # pattern must differ between theta+eps and theta-eps
    max_crossing_free = 0.0
    for block, i, g_ad, e in still_bad:
        signs = []
        for step in (eps, -eps):
            stack = block.values.copy()[None]
            stack.reshape(1, -1)[0, i] += step
            evaluator.signs = []
            evaluator.capture_signs = True
            evaluator.loss({block.name: stack})
            evaluator.capture_signs = False
            signs.append(np.concatenate([s.ravel() for s in evaluator.signs]))
        if np.array_equal(signs[0], signs[1]):
            max_crossing_free = max(max_crossing_free, e)  # genuine disagreement
        else:
            crossings += 1

    all_errors = np.concatenate(errors + [np.asarray(refined_errors)]) if refined_errors else np.concatenate(errors)
    return {
        "max_rel_error": float(max(all_errors.max(), max_crossing_free)),
        "loss": base,
        "parameters": int(n_params),
        "checked": int(n_params - crossings),
        "kink_crossings": int(crossings),
        "refined": len(flagged),
        "kink_hit": tape.kink_hit,
    }


# -- model file -------------------------------------------------------------------

_MODEL_MAGIC = b"PCMD"


def dumps_model(model: Model) -> bytes:
    config = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    weights = dumps_weights(model.param_blocks())
    return b"".join([_MODEL_MAGIC, struct.pack("<I", len(config)), config, weights])


def save_model(path, model: Model) -> None:
    with open(path, "wb") as f:
        f.write(dumps_model(model))


def loads_model(data: bytes, seed: int = 0) -> Model:
    if data[:4] != _MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    (clen,) = struct.unpack_from("<I", data, 4)
    config = ModelConfig.from_dict(json.loads(data[8 : 8 + clen].decode("utf-8")))
    blocks = loads_weights(data[8 + clen :])
    model = build_model(config, seed=seed)
    by_name = {b.name: b for b in blocks}
    own = model.param_blocks()
    missing = [b.name for b in own if b.name not in by_name]
    if missing:
        raise ValueError(f"model file missing parameter blocks: {missing[:4]}")
    for b in own:
        src = by_name[b.name]
        if src.values.shape != b.values.shape:
            raise ValueError(f"parameter block {b.name}: shape {src.values.shape} != {b.values.shape}")
        b.values = src.values.copy()
        b.grad = np.zeros_like(b.values)
    return model


def load_model(path) -> Model:
    with open(path, "rb") as f:
        return loads_model(f.read())
