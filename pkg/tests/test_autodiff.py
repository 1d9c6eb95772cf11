import numpy as np
import pytest

from pointshade import autodiff as ad
from pointshade.autodiff import ParamBlock, Tape


def test_forward_trivial_values():
    assert ad.relu(-1.0) == 0.0
    assert ad.relu(2.0) == 2.0
    assert ad.matvec(np.eye(3), np.array([1.0, 2.0, 3.0])) == pytest.approx([1, 2, 3])
    assert ad.mean(np.array([1.0, 2.0, 3.0])) == pytest.approx(2.0)


def test_mul_backward():
    x = ParamBlock("x", np.array(3.0))
    y = ParamBlock("y", np.array(4.0))
    t = Tape(dtype=np.float64)
    root = t.param(x) * t.param(y)
    t.backward(root)
    assert x.grad == pytest.approx(4.0)
    assert y.grad == pytest.approx(3.0)


def test_relu_subgradient_at_negative_and_zero():
    for v, expected in [(-1.0, 0.0), (0.0, 0.0), (2.0, 1.0)]:
        x = ParamBlock("x", np.array(v))
        t = Tape(dtype=np.float64)
        root = ad.relu(t.param(x))
        t.backward(root)
        assert x.grad == pytest.approx(expected)


def test_gradients_accumulate_until_zeroed():
    x = ParamBlock("x", np.array(2.0))
    for expected in (4.0, 8.0):
        t = Tape(dtype=np.float64)
        root = ad.square(t.param(x))
        t.backward(root)
        assert x.grad == pytest.approx(expected)
    x.zero_grad()
    t = Tape(dtype=np.float64)
    t.backward(ad.square(t.param(x)))
    assert x.grad == pytest.approx(4.0)


def test_backward_requires_scalar_root():
    x = ParamBlock("x", np.ones(3))
    t = Tape(dtype=np.float64)
    v = t.param(x) * 2.0
    with pytest.raises(ValueError, match="scalar"):
        t.backward(v)


def test_shape_mismatch_raises():
    t = Tape(dtype=np.float64)
    a = t.constant(np.ones((2, 3)))
    b = t.constant(np.ones((4, 2)))
    with pytest.raises(ValueError, match="shape mismatch"):
        ad.matmul(a, b)
    with pytest.raises(ValueError, match="shape mismatch"):
        ad.add(a, t.constant(np.ones(4)))


def test_linearity_of_backward():
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    a, b = rng.normal(), rng.normal()

    def grad_of(fn):
        blk = ParamBlock("w", w)
        t = Tape(dtype=np.float64)
        t.backward(fn(t.param(blk)))
        return blk.grad.copy()

    gf = grad_of(lambda v: ad.vsum(ad.square(v)))
    gg = grad_of(lambda v: ad.vsum(v * 3.0))
    gc = grad_of(lambda v: ad.vsum(ad.square(v)) * a + ad.vsum(v * 3.0) * b)
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-12)


def test_backward_purity_after_zeroing():
    w = ParamBlock("w", np.arange(4.0))

    def run():
        w.zero_grad()
        t = Tape(dtype=np.float64)
        v = t.param(w)
        t.backward(ad.mean(ad.square(ad.leaky_relu(v - 1.5))))
        return w.grad.copy()

    g1, g2 = run(), run()
    np.testing.assert_array_equal(g1, g2)


def test_matmul_matvec_reductions_against_fd():
    rng = np.random.default_rng(3)
    W = ParamBlock("W", rng.normal(size=(4, 3)))
    v = ParamBlock("v", rng.normal(size=3))

    def loss(t):
        y = ad.matvec(t.param(W), t.param(v))
        return ad.mean(ad.square(y)) + ad.vsum(ad.relu(y)) * 0.25

    err = ad.gradcheck(loss, [W, v])
    assert err < 1e-7


def test_gather_and_segment_sum_backward():
    rng = np.random.default_rng(4)
    x = ParamBlock("x", rng.normal(size=(5, 2)))
    idx = np.array([0, 0, 3, 4, 4, 4])
    seg = np.array([0, 0, 1, 1, 3, 3])

    def loss(t):
        g = ad.gather_rows(t.param(x), idx)
        s = ad.segment_sum(g, seg, 4)
        return ad.vsum(ad.square(s))

    err = ad.gradcheck(loss, [x])
    assert err < 1e-7


def test_gather_scatter_plan_matches_add_at():
    rng = np.random.default_rng(5)
    x = ParamBlock("x", rng.normal(size=(6, 3)))
    idx = rng.integers(0, 6, size=40)
    plan = ad.ScatterPlan.for_indices(idx)

    grads = []
    for sp in (None, plan):
        x.zero_grad()
        t = Tape(dtype=np.float64)
        g = ad.gather_rows(t.param(x), idx, scatter_plan=sp)
        t.backward(ad.vsum(ad.square(g)))
        grads.append(x.grad.copy())
    np.testing.assert_allclose(grads[0], grads[1], rtol=1e-12)


def test_segment_sum_empty_segments_are_zero():
    x = np.ones((3, 2))
    out = ad.segment_sum(x, np.array([1, 1, 4]), 6)
    np.testing.assert_array_equal(out[:, 0], [0, 2, 0, 0, 1, 0])


def test_quadratic_gradcheck_is_exact():
    w = ParamBlock("w", np.array([1.0, 2.0]))

    def loss(t):
        return ad.vsum(ad.square(t.param(w)))

    assert ad.gradcheck(loss, [w]) < 1e-9


def test_gradcheck_flags_kink():
    w = ParamBlock("w", np.array([0.0, 1.0]))

    def loss(t):
        return ad.vsum(ad.relu(t.param(w)))

    with pytest.warns(ad.KinkWarning):
        ad.gradcheck(loss, [w])


def test_gradcheck_runs_in_float64_and_restores_dtype():
    w = ParamBlock("w", np.array([1.0, 2.0], dtype=np.float32))

    def loss(t):
        return ad.vsum(ad.square(t.param(w)))

    assert ad.gradcheck(loss, [w]) < 1e-9
    assert w.values.dtype == np.float32


def test_weight_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    blocks = [
        ParamBlock("enc.w", rng.normal(size=(3, 4)).astype(np.float32)),
        ParamBlock("enc.b", rng.normal(size=4).astype(np.float32)),
    ]
    path = tmp_path / "weights.pcwt"
    ad.save_weights(path, blocks)
    loaded = ad.load_weights(path)
    assert [b.name for b in loaded] == ["enc.w", "enc.b"]
    for a, b in zip(blocks, loaded):
        np.testing.assert_array_equal(a.values, b.values)
