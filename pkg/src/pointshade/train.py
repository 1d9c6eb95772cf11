"""L2 training of the shading models.

Training never renders an image: each cloud is split by Poisson-disk
selection into network input points and held-out "pseudo-pixel" points, and
the loss is the mean squared error of the predicted shading at whichever
points the variant predicts (pseudo-pixels for ``ours``/``2d-only``, the
input points themselves for ``3d-only``).

All geometry per scene (hierarchy, neighbor pairs, densities) is static
across epochs, so it is planned once and cached; an epoch is then pure
linear algebra.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamBlock, Tape, dumps_weights, loads_weights
from .cloud import PointCloud, build_hierarchy, poisson_disk_indices
from .conv import plan_pairs
from .network import (
    Model,
    ModelConfig,
    HierarchyPlans,
    attributes_for,
    dumps_model,
    forward_2d_only,
    forward_3d,
    loads_model,
    project_to_pixels,
)
from .seeding import derive_seed, spawn_rng


@dataclass
class TrainConfig:
    """Optimizer schedule and data split settings."""

    learning_rate: float = 0.005
    lr_decay: float = 0.7
    lr_decay_every: int = 10
    epochs: int = 200
    batch_size: int = 8
    effect: str = "ao"
    seed: int = 0
    selection_radius: float | None = None  # None: use the model config's radius

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "lr_decay": self.lr_decay,
            "lr_decay_every": self.lr_decay_every,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "effect": self.effect,
            "seed": self.seed,
            "selection_radius": self.selection_radius,
        }


# -- pointwise pieces ------------------------------------------------------------


def split_points(pc: PointCloud, radius: float, seed: int = 0):
    """Partition a cloud into network input points and pseudo-pixel points.

    The Poisson-disk subset at ``radius`` becomes the input; the complement
    becomes the prediction targets.  Raises on a degenerate split.
    """
    idx = poisson_disk_indices(pc.positions.astype(np.float64), radius, seed)
    mask = np.zeros(len(pc), dtype=bool)
    mask[idx] = True
    rest = np.nonzero(~mask)[0]
    if len(idx) == 0 or len(rest) == 0:
        raise ValueError(
            f"degenerate split: {len(idx)} source vs {len(rest)} pseudo-pixel points "
            f"(radius {radius}, n {len(pc)})"
        )
    return pc.subset(idx), pc.subset(rest)


def l2_loss(predicted, target):
    """Mean over points and channels of the squared error."""
    pshape = predicted.shape if not isinstance(predicted, ad.Var) else predicted.value.shape
    tshape = np.shape(target)
    if tuple(pshape) != tuple(tshape):
        raise ValueError(f"shape mismatch: predicted {tuple(pshape)} vs target {tuple(tshape)}")
    return ad.mean(ad.square(ad.sub(predicted, target)))


class AdamState:
    """First/second moment accumulators, one pair per parameter block."""

    def __init__(self, blocks, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {b.name: np.zeros_like(b.values) for b in blocks}
        self.v = {b.name: np.zeros_like(b.values) for b in blocks}


def adam_step(blocks, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from the blocks' accumulated gradients."""
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for blk in blocks:
        g = blk.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {blk.name!r}")
        m = state.m[blk.name]
        v = state.v[blk.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(blk.values.dtype)
        blk.values = blk.values - update


# -- per-scene cached geometry -----------------------------------------------------


@dataclass
class SceneGraph:
    """Everything static about one training scene: point sets, neighbor
    plans, input attributes and targets."""

    name: str
    variant: str
    hierarchy: object = None
    plans: HierarchyPlans | None = None
    source_positions: np.ndarray | None = None
    source_attrs: np.ndarray | None = None
    px_positions: np.ndarray | None = None
    px_attrs: np.ndarray | None = None
    px_plan: object = None
    px_targets: np.ndarray | None = None
    source_targets: np.ndarray | None = None


def prepare_scene(cloud: PointCloud, model: Model, seed: int, name: str = "") -> SceneGraph:
    """Split, build the hierarchy and precompute every neighbor plan."""
    cfg = model.config
    if cloud.target is None:
        raise ValueError(f"scene {name!r} carries no shading targets")
    if cloud.target.shape[1] != cfg.output_channels:
        raise ValueError(
            f"scene {name!r}: target channels {cloud.target.shape[1]} do not match effect {cfg.effect!r}"
        )
    dtype = model.dtype
    src, px = split_points(cloud, cfg.selection_radius, derive_seed(seed, "split", name))
    g = SceneGraph(name=name, variant=cfg.variant)
    if cfg.variant == "2d-only":
        g.source_positions = src.positions.astype(np.float64)
        g.source_attrs = attributes_for(cfg, src).astype(dtype)
        g.px_positions = px.positions.astype(np.float64)
        g.px_attrs = attributes_for(cfg, px).astype(dtype)
        g.px_plan = plan_pairs(g.source_positions, g.px_positions, cfg.projection_radius, dtype=dtype)
        g.px_targets = px.target.astype(dtype)
        return g
    hierarchy = build_hierarchy(src, cfg.hierarchy_radii, seed=derive_seed(seed, "hier", name))
    g.hierarchy = hierarchy
    g.plans = HierarchyPlans.build(cfg, hierarchy, dtype=dtype)
    level0 = hierarchy.levels[0]
    g.source_positions = level0.positions.astype(np.float64)
    g.source_attrs = attributes_for(cfg, level0).astype(dtype)
    if cfg.variant == "ours":
        g.px_positions = px.positions.astype(np.float64)
        g.px_attrs = attributes_for(cfg, px).astype(dtype)
        g.px_plan = plan_pairs(g.source_positions, g.px_positions, cfg.projection_radius, dtype=dtype)
        g.px_targets = px.target.astype(dtype)
    else:  # 3d-only regresses shading at the input points themselves
        g.source_targets = level0.target.astype(dtype)
    return g


def scene_loss(model: Model, graph: SceneGraph, tape: Tape | None = None):
    """Loss (Var when a tape is given, float otherwise) for one scene."""
    cfg = model.config
    if cfg.variant == "ours":
        latents = forward_3d(model, graph.hierarchy, attributes=graph.source_attrs,
                             plans=graph.plans, tape=tape)
        out = project_to_pixels(model, graph.source_positions, latents, graph.px_positions,
                                graph.px_attrs, plan=graph.px_plan, tape=tape)
        return l2_loss(out, graph.px_targets)
    if cfg.variant == "2d-only":
        out = forward_2d_only(model, graph.source_positions, graph.source_attrs,
                              graph.px_positions, graph.px_attrs, plan=graph.px_plan, tape=tape)
        return l2_loss(out, graph.px_targets)
    out = forward_3d(model, graph.hierarchy, attributes=graph.source_attrs,
                     plans=graph.plans, tape=tape)
    return l2_loss(out, graph.source_targets)


# -- checkpoints --------------------------------------------------------------------

_CKPT_MAGIC = b"PCCK"


def save_checkpoint(path, model: Model, state: AdamState, epoch: int, best_val: float) -> None:
    meta = json.dumps(
        {"epoch": epoch, "best_val": best_val, "adam_step": state.step_count,
         "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        sort_keys=True,
    ).encode("utf-8")
    model_blob = dumps_model(model)
    moment_blocks = [ParamBlock(f"m.{k}", v) for k, v in sorted(state.m.items())]
    moment_blocks += [ParamBlock(f"v.{k}", v) for k, v in sorted(state.v.items())]
    moments_blob = dumps_weights(moment_blocks)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<III", len(meta), len(model_blob), len(moments_blob)))
        f.write(meta)
        f.write(model_blob)
        f.write(moments_blob)


def load_checkpoint(path):
    """Returns (model, AdamState, epoch, best_val)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    mlen, blen, wlen = struct.unpack_from("<III", data, 4)
    offset = 4 + 12
    meta = json.loads(data[offset : offset + mlen].decode("utf-8"))
    offset += mlen
    model = loads_model(data[offset : offset + blen])
    offset += blen
    moments = loads_weights(data[offset : offset + wlen])
    state = AdamState(model.param_blocks(), beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"])
    state.step_count = int(meta["adam_step"])
    for blk in moments:
        kind, name = blk.name.split(".", 1)
        target = state.m if kind == "m" else state.v
        target[name] = blk.values.astype(np.float32)
    return model, state, int(meta["epoch"]), float(meta["best_val"])


# -- the loop ------------------------------------------------------------------------


def train_loop(model: Model, train_clouds, config: TrainConfig, val_clouds=(),
               out_dir=None, resume=None, log=None, graphs=None, val_graphs=None):
    """Train ``model`` in place; returns (model, trace).

    ``trace`` is a list of dicts (epoch, train_mse, val_mse, lr).  The best
    validation weights (train weights when no validation set is given) are
    restored into the model at the end and, when ``out_dir`` is given, both
    ``last.ckpt`` and ``best.ckpt`` plus ``loss_trace.csv`` are written.
    Scene order reshuffles per epoch from the run seed alone, so resuming
    from a checkpoint reproduces an uninterrupted run exactly.
    """
    if not len(train_clouds) and graphs is None:
        raise ValueError("training set is empty")
    cfg = config
    if cfg.selection_radius is not None and cfg.selection_radius != model.config.selection_radius:
        raise ValueError(
            "selection_radius mismatch between TrainConfig and ModelConfig: "
            f"{cfg.selection_radius} vs {model.config.selection_radius}"
        )
    say = log if log is not None else (lambda *_: None)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    if graphs is None:
        graphs = [
            prepare_scene(c, model, cfg.seed, name=f"train{(i):04d}")
            for i, c in enumerate(train_clouds)
        ]
    if val_graphs is None:
        val_graphs = [
            prepare_scene(c, model, cfg.seed, name=f"val{(i):04d}")
            for i, c in enumerate(val_clouds)
        ]

    start_epoch = 0
    best_val = np.inf
    best_weights = None
    if resume is not None:
        resumed, state, start_epoch, best_val = load_checkpoint(resume)
        for mine, theirs in zip(model.param_blocks(), resumed.param_blocks()):
            mine.values = theirs.values.copy()
            mine.grad = np.zeros_like(mine.values)
    else:
        state = AdamState(model.param_blocks())
    blocks = model.param_blocks()

    trace = []
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = spawn_rng(cfg.seed, "shuffle", epoch).permutation(len(graphs))
        epoch_losses = []
        for bstart in range(0, len(order), cfg.batch_size):
            batch = order[bstart : bstart + cfg.batch_size]
            model.zero_grad()
            batch_losses = []
            for gi in batch:
                tape = Tape(dtype=model.dtype)
                loss = scene_loss(model, graphs[gi], tape=tape)
                value = float(np.asarray(loss.value))
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite training loss at epoch {epoch}, scene {graphs[gi].name!r}"
                    )
                tape.backward(loss)
                batch_losses.append(value)
            scale = 1.0 / len(batch)
            for blk in blocks:
                blk.grad *= scale
            adam_step(blocks, state, lr)
            epoch_losses.extend(batch_losses)
        train_mse = float(np.mean(epoch_losses))
        if val_graphs:
            val_mse = float(np.mean([float(np.asarray(scene_loss(model, g))) for g in val_graphs]))
        else:
            val_mse = train_mse
        trace.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse, "lr": lr})
        say(f"epoch {epoch:4d}  lr {lr:.5f}  train {train_mse:.6f}  val {val_mse:.6f}")
        if val_mse <= best_val:
            best_val = val_mse
            best_weights = [b.values.copy() for b in blocks]
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / "best.ckpt", model, state, epoch + 1, best_val)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "last.ckpt", model, state, epoch + 1, best_val)
            write_trace(Path(out_dir) / "loss_trace.csv", trace)

    if best_weights is not None:
        for blk, values in zip(blocks, best_weights):
            blk.values = values
            blk.grad = np.zeros_like(values)
    if trace:
        ratio = trace[-1]["val_mse"] / max(trace[-1]["train_mse"], 1e-12)
        say(f"over-fit ratio (val/train): {ratio:.3f}")
    return model, trace


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "train_mse", "val_mse", "lr"])
        writer.writeheader()
        for row in trace:
            writer.writerow(row)
