"""Monte Carlo convolutions over unstructured point sets, plus 1x1 convs.

The layer estimates a continuous convolution as a density-compensated
average over each output point's neighborhood:

    out(x) = bias + (1/|N(x)|) * sum_j f(y_j) * g((x - y_j)/r) / p(y_j)

where g is a small MLP mapping the radius-normalized offset to one weight
per (in-channel, out-channel) pair and p is the sampling density around the
contributing point.  Input and output point sets are independent, which is
what makes the same operator serve within-level filtering, level transfer,
and the final point-to-pixel projection.  Output points with empty
neighborhoods produce zeros (no bias).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._validation import check_scalar
from .autodiff import ParamBlock, ScatterPlan, SegmentPlan
from .grid import VoxelHashGrid, point_densities
from .seeding import spawn_rng

DEFAULT_KERNEL_HIDDEN = (16, 16)
LEAKY_SLOPE = 0.01

# Target std of kernel values at init.  The neighborhood average of
# uncorrelated per-point features attenuates by ~1/sqrt(|N|), so the kernel
# compensates for a typical receptive-field occupancy of ~8 points; with
# std(g) = GAIN/sqrt(c_in) the convolution then roughly preserves feature
# scale through depth instead of collapsing toward the rectifier kinks.
KERNEL_GAIN = 2.83


def _calibration_offsets(n: int = 256) -> np.ndarray:
    rng = np.random.default_rng(12345)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(0, 1, size=(n, 1)) ** (1.0 / 3.0)


@dataclass
class KernelMLP:
    """MLP from a 3D radius-normalized offset to in_channels*out_channels weights.

    Hidden layers use leaky ReLU; the output layer is linear and initialized
    at 1/sqrt(in_channels) scale so convolution outputs start near unit
    magnitude regardless of channel count.
    """

    weights: list          # ParamBlocks W per layer, (fan_in, fan_out)
    biases: list           # ParamBlocks b per layer, (fan_out,)
    slope: float = LEAKY_SLOPE

    @staticmethod
    def create(name: str, in_channels: int, out_channels: int,
               hidden=DEFAULT_KERNEL_HIDDEN, seed: int = 0, input_dim: int = 3) -> "KernelMLP":
        rng = spawn_rng(seed, "kernel-mlp", name)
        sizes = [input_dim, *hidden, in_channels * out_channels]
        weights, biases = [], []
        for li in range(len(sizes) - 1):
            fan_in, fan_out = sizes[li], sizes[li + 1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)
            if li == len(sizes) - 2:
                b = np.zeros(fan_out, dtype=np.float32)
            else:
                # self-pairs evaluate the kernel at offset (0,0,0) exactly; a
                # nonzero bias keeps those pre-activations off the rectifier kink
                b = rng.uniform(-0.1, 0.1, size=fan_out).astype(np.float32)
            weights.append(ParamBlock(f"{name}.w{li}", w))
            biases.append(ParamBlock(f"{name}.b{li}", b))
        mlp = KernelMLP(weights=weights, biases=biases)
        if input_dim == 3:
            measured = float(np.std(mlp(_calibration_offsets())))
            target = KERNEL_GAIN / np.sqrt(in_channels)
            mlp.weights[-1].values *= np.float32(target / max(measured, 1e-12))
        return mlp

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def param_blocks(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def parameter_count(self) -> int:
        return sum(b.size for b in self.param_blocks())

    def __call__(self, offsets, tape=None):
        """Evaluate on (m, 3) offsets; recorded when a tape is given."""
        lift = (lambda blk: tape.param(blk)) if tape is not None else (lambda blk: blk.values)
        h = offsets
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, lift(w)), lift(b))
            if li != last:
                h = ad.leaky_relu(h, self.slope)
        return h

    def hidden(self, offsets, tape=None):
        """Activations after the last hidden layer (input to the final affine)."""
        lift = (lambda blk: tape.param(blk)) if tape is not None else (lambda blk: blk.values)
        h = offsets
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = ad.leaky_relu(ad.add(ad.matmul(h, lift(w)), lift(b)), self.slope)
        return h

    @property
    def last_hidden_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class MCConvLayer:
    """One Monte Carlo convolution: receptive radius, channel map, kernel MLP."""

    radius: float
    in_channels: int
    out_channels: int
    mlp: KernelMLP
    bias: ParamBlock
    scope: str = "within"  # within | between | projection

    @staticmethod
    def create(name: str, radius: float, in_channels: int, out_channels: int,
               hidden=DEFAULT_KERNEL_HIDDEN, seed: int = 0, scope: str = "within") -> "MCConvLayer":
        radius = check_scalar(radius, "radius", minimum=0.0, strict=True)
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        mlp = KernelMLP.create(name, in_channels, out_channels, hidden=hidden, seed=seed)
        bias = ParamBlock(f"{name}.bias", np.zeros(out_channels, dtype=np.float32))
        return MCConvLayer(radius=radius, in_channels=in_channels, out_channels=out_channels,
                           mlp=mlp, bias=bias, scope=scope)

    def param_blocks(self) -> list:
        return self.mlp.param_blocks() + [self.bias]

    def parameter_count(self) -> int:
        return sum(b.size for b in self.param_blocks())


@dataclass
class PairSet:
    """Static geometry of one convolution: which input point feeds which
    output point, at what normalized offset and with what compensation weight.

    Weights fold together the density division and the 1/|N| average so the
    recorded graph only sees one multiply per pair.
    """

    src: np.ndarray          # (m,) indices into the input points
    dst: np.ndarray          # (m,) indices into the output points, sorted
    offsets: np.ndarray      # (m, 3) (out - in) / radius
    weight: np.ndarray       # (m, 1) 1 / (p_src * |N(dst)|)
    n_out: int
    nonempty: np.ndarray     # (n_out, 1) 1.0 where the neighborhood is non-empty
    scatter: ScatterPlan
    segments: SegmentPlan

    def __len__(self) -> int:
        return len(self.src)

    def astype(self, dtype) -> "PairSet":
        return PairSet(self.src, self.dst, self.offsets.astype(dtype), self.weight.astype(dtype),
                       self.n_out, self.nonempty.astype(dtype), self.scatter, self.segments)


def plan_pairs(in_points, out_points, radius: float, densities=None,
               grid: VoxelHashGrid | None = None, dtype=np.float32) -> PairSet:
    """Gather all (input, output) pairs within ``radius`` and precompute the
    per-pair compensation weights and index plans."""
    in_points = np.asarray(in_points, dtype=np.float64)
    out_points = np.asarray(out_points, dtype=np.float64)
    radius = check_scalar(radius, "radius", minimum=0.0, strict=True)
    if grid is None or radius / grid.cell_size > 2.0:
        # cells much smaller than the radius would blow up the cell scan
        grid = VoxelHashGrid(in_points, cell_size=radius)
    if densities is None:
        densities = point_densities(in_points, radius)
    densities = np.asarray(densities, dtype=np.float64)
    dst, src, _dist = grid.query_radius_batch(out_points, radius)
    n_out = len(out_points)
    counts = np.bincount(dst, minlength=n_out).astype(np.float64)
    offsets = (out_points[dst] - in_points[src]) / radius
    weight = 1.0 / (densities[src] * counts[dst])
    nonempty = (counts > 0).astype(np.float64)[:, None]
    return PairSet(
        src=src.astype(np.int64),
        dst=dst.astype(np.int64),
        offsets=offsets.astype(dtype),
        weight=weight[:, None].astype(dtype),
        n_out=n_out,
        nonempty=nonempty.astype(dtype),
        scatter=ScatterPlan.for_indices(src),
        segments=SegmentPlan.for_sorted_segments(dst, n_out),
    )


def mc_convolve(layer: MCConvLayer, in_points, in_features, out_points,
                grid: VoxelHashGrid | None = None, densities=None,
                pairs: PairSet | None = None, out_extra=None, tape=None):
    """Apply the layer; returns (n_out, out_channels).

    ``in_features`` may be a tape Var or ndarray of shape (n_in, c).  When
    ``out_extra`` is given, its per-output-point rows are appended to each
    contributing pair's input features (used by the point-to-pixel
    projection, where pixels contribute their own attributes).
    Pass ``pairs`` to reuse a precomputed :func:`plan_pairs` result.
    """
    feat_cols = in_features.shape[1]
    extra_cols = 0 if out_extra is None else out_extra.shape[1]
    if feat_cols + extra_cols != layer.in_channels:
        raise ValueError(
            f"channel mismatch: features {feat_cols} + extra {extra_cols} != layer in_channels {layer.in_channels}"
        )
    dtype = layer.mlp.weights[0].values.dtype
    if pairs is None:
        pairs = plan_pairs(in_points, out_points, layer.radius, densities=densities, grid=grid, dtype=dtype)
    lift = (lambda blk: tape.param(blk)) if tape is not None else (lambda blk: blk.values)
    m = len(pairs)
    cin, cout = layer.in_channels, layer.out_channels

    if m == 0:
        zeros = np.zeros((pairs.n_out, cout), dtype=dtype)
        return tape.constant(zeros) if tape is not None else zeros

    f = ad.gather_rows(in_features, pairs.src, scatter_plan=pairs.scatter)
    if out_extra is not None:
        f = ad.concat([f, ad.gather_rows(out_extra, pairs.dst)], axis=1)
    fw = ad.mul(f, pairs.weight if tape is None else tape.constant(pairs.weight))
    # The kernel's final affine commutes with the neighborhood sum, so we
    # accumulate (feature x hidden-basis) outer products per output point
    # first and apply the output weights once per point, not once per pair.
    hid = layer.mlp.hidden(pairs.offsets if tape is None else tape.constant(pairs.offsets), tape=tape)
    nh = layer.mlp.last_hidden_dim
    pair_basis = ad.mul(ad.reshape(fw, (m, cin, 1)), ad.reshape(hid, (m, 1, nh)))
    basis = ad.segment_sum(ad.reshape(pair_basis, (m, cin * nh)), pairs.dst, pairs.n_out,
                           plan=pairs.segments)
    w_last = ad.reshape(
        ad.transpose(ad.reshape(lift(layer.mlp.weights[-1]), (nh, cin, cout)), (1, 0, 2)),
        (cin * nh, cout),
    )
    out = ad.matmul(basis, w_last)
    feat_sum = ad.segment_sum(fw, pairs.dst, pairs.n_out, plan=pairs.segments)
    out = ad.add(out, ad.matmul(feat_sum, ad.reshape(lift(layer.mlp.biases[-1]), (cin, cout))))
    mask = pairs.nonempty if tape is None else tape.constant(pairs.nonempty)
    return ad.add(out, ad.mul(lift(layer.bias), mask))


# -- 1x1 convolution -----------------------------------------------------------


@dataclass
class Conv1x1:
    """Per-point affine map with optional leaky-ReLU, no spatial mixing."""

    weights: ParamBlock     # (in, out)
    bias: ParamBlock        # (out,)
    activation: str = "leaky_relu"  # leaky_relu | linear
    slope: float = LEAKY_SLOPE

    @staticmethod
    def create(name: str, in_channels: int, out_channels: int, seed: int = 0,
               activation: str = "leaky_relu") -> "Conv1x1":
        rng = spawn_rng(seed, "conv1x1", name)
        limit = np.sqrt(6.0 / (in_channels + out_channels))
        w = rng.uniform(-limit, limit, size=(in_channels, out_channels)).astype(np.float32)
        return Conv1x1(
            weights=ParamBlock(f"{name}.w", w),
            bias=ParamBlock(f"{name}.b", np.zeros(out_channels, dtype=np.float32)),
            activation=activation,
        )

    def param_blocks(self) -> list:
        return [self.weights, self.bias]

    def parameter_count(self) -> int:
        return self.weights.size + self.bias.size

    def __call__(self, features, tape=None):
        lift = (lambda blk: tape.param(blk)) if tape is not None else (lambda blk: blk.values)
        return conv_1x1(features, lift(self.weights), lift(self.bias),
                        activation=self.activation, slope=self.slope)


def conv_1x1(features, weights, bias, activation: str = "leaky_relu", slope: float = LEAKY_SLOPE):
    """Per-point affine map + activation; equivariant under point reordering."""
    if features.shape[1] != weights.shape[0]:
        raise ValueError(f"channel mismatch: features {features.shape[1]} vs weights {weights.shape[0]}")
    out = ad.add(ad.matmul(features, weights), bias)
    if activation == "leaky_relu":
        return ad.leaky_relu(out, slope)
    if activation == "linear":
        return out
    raise ValueError(f"unknown activation {activation!r}")


def matched_hidden(in_channels: int, out_channels: int, target_params: int,
                   lo: int = 2, hi: int = 96) -> tuple:
    """Two-layer hidden sizes (h, h) whose MLP parameter count is closest to
    ``target_params`` — used to give ablation variants the same budget."""
    best, best_err = (lo, lo), None
    for h in range(lo, hi + 1):
        sizes = [3, h, h, in_channels * out_channels]
        params = sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(3))
        err = abs(params - target_params)
        if best_err is None or err < best_err:
            best, best_err = (h, h), err
    return best
