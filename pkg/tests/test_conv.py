import numpy as np
import pytest

from pointshade import autodiff as ad
from pointshade.autodiff import ParamBlock, Tape, gradcheck
from pointshade.conv import Conv1x1, KernelMLP, MCConvLayer, conv_1x1, matched_hidden, mc_convolve, plan_pairs
from pointshade.grid import point_densities

from reference import brute_densities, reference_mc_convolve


def constant_kernel_layer(radius, value=1.0):
    """Kernel MLP that outputs exactly `value` regardless of offset."""
    layer = MCConvLayer.create("const", radius, 1, 1, hidden=(4, 4), seed=0)
    for w in layer.mlp.weights:
        w.values[...] = 0.0
    for b in layer.mlp.biases:
        b.values[...] = 0.0
    layer.mlp.biases[-1].values[...] = value
    return layer


def test_constant_signal_fixed_point():
    # g == 1, p == 1, f == 5: the 1/|N| average cancels the sum
    layer = constant_kernel_layer(radius=1.0)
    pts = np.array([[0.0, 0, 0], [0.2, 0, 0], [0, 0.2, 0]])
    feats = np.full((3, 1), 5.0)
    out = mc_convolve(layer, pts, feats, np.array([[0.05, 0.05, 0.0]]), densities=np.ones(3))
    assert out.shape == (1, 1)
    assert out[0, 0] == pytest.approx(5.0, rel=1e-6)


def test_empty_neighborhood_is_zero():
    layer = constant_kernel_layer(radius=0.1)
    layer.bias.values[...] = 3.0  # bias must not leak into uncovered outputs
    pts = np.zeros((1, 3))
    out = mc_convolve(layer, pts, np.ones((1, 1)), np.array([[5.0, 5, 5]]), densities=np.ones(1))
    np.testing.assert_array_equal(out, np.zeros((1, 1)))


def random_layer(rng, radius, cin, cout, with_bias=True):
    layer = MCConvLayer.create(f"t{rng.integers(1 << 30)}", radius, cin, cout,
                               hidden=(8, 8), seed=int(rng.integers(1 << 30)))
    if with_bias:
        layer.bias.values[...] = rng.normal(size=cout).astype(np.float32)
    return layer


def test_matches_reference_formula():
    rng = np.random.default_rng(11)
    for trial in range(8):
        n_in, n_out = 8, 6
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        pts_in = rng.uniform(-0.5, 0.5, size=(n_in, 3))
        pts_out = rng.uniform(-0.5, 0.5, size=(n_out, 3))
        feats = rng.normal(size=(n_in, cin))
        layer = random_layer(rng, radius=0.6, cin=cin, cout=cout)
        layer.mlp.param_blocks()  # touch
        for blk in layer.param_blocks():
            blk.astype(np.float64)
        dens = brute_densities(pts_in, 0.6)
        ours = mc_convolve(layer, pts_in, feats, pts_out, densities=dens)
        ref = reference_mc_convolve(layer, pts_in, feats, pts_out, dens)
        np.testing.assert_allclose(ours, ref, rtol=1e-6, atol=1e-9)


def test_out_extra_matches_reference():
    rng = np.random.default_rng(12)
    pts_in = rng.uniform(-0.5, 0.5, size=(7, 3))
    pts_out = rng.uniform(-0.5, 0.5, size=(5, 3))
    feats = rng.normal(size=(7, 2))
    extra = rng.normal(size=(5, 3))
    layer = random_layer(rng, radius=0.7, cin=5, cout=2)
    for blk in layer.param_blocks():
        blk.astype(np.float64)
    dens = brute_densities(pts_in, 0.7)
    ours = mc_convolve(layer, pts_in, feats, pts_out, densities=dens, out_extra=extra)
    ref = reference_mc_convolve(layer, pts_in, feats, pts_out, dens, out_extra=extra)
    np.testing.assert_allclose(ours, ref, rtol=1e-6, atol=1e-9)


def test_channel_mismatch_raises():
    layer = constant_kernel_layer(radius=1.0)
    with pytest.raises(ValueError, match="channel mismatch"):
        mc_convolve(layer, np.zeros((2, 3)), np.ones((2, 2)), np.zeros((1, 3)))


def test_permutation_equivariance():
    rng = np.random.default_rng(13)
    pts_in = rng.uniform(-0.5, 0.5, size=(30, 3))
    feats = rng.normal(size=(30, 2)).astype(np.float32)
    pts_out = rng.uniform(-0.5, 0.5, size=(9, 3))
    layer = random_layer(rng, radius=0.4, cin=2, cout=3)
    base = mc_convolve(layer, pts_in, feats, pts_out)
    perm = rng.permutation(30)
    permuted = mc_convolve(layer, pts_in[perm], feats[perm], pts_out)
    np.testing.assert_allclose(permuted, base, rtol=1e-5, atol=1e-6)


def test_translation_invariance():
    rng = np.random.default_rng(14)
    pts_in = rng.uniform(-0.5, 0.5, size=(25, 3))
    feats = rng.normal(size=(25, 2)).astype(np.float32)
    pts_out = rng.uniform(-0.5, 0.5, size=(7, 3))
    layer = random_layer(rng, radius=0.5, cin=2, cout=2)
    base = mc_convolve(layer, pts_in, feats, pts_out)
    shift = np.array([3.7, -1.2, 0.4])
    moved = mc_convolve(layer, pts_in + shift, feats, pts_out + shift)
    np.testing.assert_allclose(moved, base, rtol=1e-5, atol=1e-6)


def test_scale_covariance():
    rng = np.random.default_rng(15)
    pts_in = rng.uniform(-0.5, 0.5, size=(25, 3))
    feats = rng.normal(size=(25, 2)).astype(np.float32)
    pts_out = rng.uniform(-0.5, 0.5, size=(7, 3))
    layer = random_layer(rng, radius=0.5, cin=2, cout=2)
    base = mc_convolve(layer, pts_in, feats, pts_out)
    s = 4.5
    scaled_layer = MCConvLayer(radius=layer.radius * s, in_channels=2, out_channels=2,
                               mlp=layer.mlp, bias=layer.bias)
    scaled = mc_convolve(scaled_layer, pts_in * s, feats, pts_out * s)
    np.testing.assert_allclose(scaled, base, rtol=1e-5, atol=1e-6)


def test_receptive_field_bound():
    rng = np.random.default_rng(16)
    pts = rng.uniform(-1, 1, size=(4000, 3))
    from pointshade.cloud import poisson_disk_indices

    r_pd = 0.15
    keep = poisson_disk_indices(pts, r_pd, seed=0)
    sub = pts[keep]
    r = 2 * r_pd
    pairs = plan_pairs(sub, sub, r)
    counts = np.bincount(pairs.dst, minlength=len(sub))
    bound = int(((r + r_pd / 2) / (r_pd / 2)) ** 3)
    assert counts.max() <= bound


def test_gradients_pass_gradcheck():
    rng = np.random.default_rng(17)
    pts_in = rng.uniform(-0.4, 0.4, size=(10, 3))
    pts_out = rng.uniform(-0.4, 0.4, size=(6, 3))
    feats64 = rng.normal(size=(10, 2))
    layer = random_layer(rng, radius=0.5, cin=2, cout=2)
    pairs = plan_pairs(pts_in, pts_out, layer.radius, dtype=np.float64)
    feat_block = ParamBlock("features", feats64)

    def loss(tape):
        f = tape.param(feat_block)
        out = mc_convolve(layer, pts_in, f, pts_out, pairs=pairs, tape=tape)
        return ad.mean(ad.square(out))

    err = gradcheck(loss, layer.param_blocks() + [feat_block])
    assert err < 1e-4


# -- 1x1 convolution --------------------------------------------------------


def test_conv1x1_identity():
    feats = np.abs(np.random.default_rng(18).normal(size=(5, 3))) + 0.1
    out = conv_1x1(feats, np.eye(3), np.zeros(3))
    np.testing.assert_allclose(out, feats, rtol=1e-7)


def test_conv1x1_permutation_equivariance():
    rng = np.random.default_rng(19)
    feats = rng.normal(size=(8, 4)).astype(np.float32)
    layer = Conv1x1.create("p", 4, 6, seed=1)
    base = layer(feats)
    perm = rng.permutation(8)
    np.testing.assert_array_equal(layer(feats[perm]), base[perm])


def test_conv1x1_matches_matmul_oracle():
    rng = np.random.default_rng(20)
    feats = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 6))
    b = rng.normal(size=6)
    ours = conv_1x1(feats, w, b, activation="leaky_relu", slope=0.01)
    ref = np.empty((5, 6))
    for i in range(5):
        for j in range(6):
            acc = b[j]
            for k in range(4):
                acc += feats[i, k] * w[k, j]
            ref[i, j] = acc if acc > 0 else 0.01 * acc
    np.testing.assert_allclose(ours, ref, rtol=1e-6)


def test_conv1x1_shape_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        conv_1x1(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))


def test_matched_hidden_budget():
    target_sizes = [3, 16, 16, 11]
    target = sum(target_sizes[i] * target_sizes[i + 1] + target_sizes[i + 1] for i in range(3))
    h = matched_hidden(6, 1, target)[0]
    sizes = [3, h, h, 6]
    params = sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(3))
    assert abs(params - target) / target < 0.15


def test_kernel_mlp_initialization_deterministic():
    a = KernelMLP.create("k", 4, 8, seed=5)
    b = KernelMLP.create("k", 4, 8, seed=5)
    for x, y in zip(a.param_blocks(), b.param_blocks()):
        np.testing.assert_array_equal(x.values, y.values)
    c = KernelMLP.create("k", 4, 8, seed=6)
    assert not np.array_equal(a.weights[0].values, c.weights[0].values)
