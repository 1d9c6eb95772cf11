import numpy as np
import pytest

from pointshade.autodiff import ParamBlock
from pointshade.cloud import PointCloud
from pointshade.network import ModelConfig, build_model
from pointshade.train import (
    AdamState,
    TrainConfig,
    adam_step,
    l2_loss,
    load_checkpoint,
    prepare_scene,
    save_checkpoint,
    scene_loss,
    split_points,
    train_loop,
)


def flat_cloud(n, seed, extent=1.0, target_fn=None):
    """Points on a plane with a smooth synthetic target field."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-extent, extent, size=(n, 2))
    pos = np.column_stack([xy[:, 0], np.zeros(n), xy[:, 1]]).astype(np.float32)
    nrm = np.tile(np.array([0, 1, 0], np.float32), (n, 1))
    if target_fn is None:
        target_fn = lambda p: 0.5 + 0.4 * np.sin(2.0 * p[:, 0]) * np.cos(2.0 * p[:, 2])
    target = target_fn(pos).astype(np.float32)[:, None]
    return PointCloud(positions=pos, normals=nrm, target=target)


def tiny_model(variant="ours", seed=0, selection_radius=0.15):
    cfg = ModelConfig(
        effect="ao", variant=variant,
        hierarchy_radii=(0.05, 0.2, 0.6), level_widths=(4, 8, 16),
        latent_channels=4, selection_radius=selection_radius, kernel_hidden=(8, 8),
    )
    return build_model(cfg, seed=seed)


# -- split_points ------------------------------------------------------------


def test_split_partitions_cloud():
    pc = flat_cloud(2000, seed=0)
    src, px = split_points(pc, 0.1, seed=1)
    assert len(src) + len(px) == 2000
    assert len(src) > 0 and len(px) > 0
    assert src.target is not None and px.target is not None


def test_split_huge_radius_keeps_one_source():
    # radius beyond the cloud diameter: a single source point survives and the
    # complement is the rest, which is still a valid (if extreme) split
    pc = flat_cloud(50, seed=1)
    src, px = split_points(pc, 10.0, seed=0)
    assert len(src) == 1 and len(px) == 49


def test_split_degenerate_raises():
    one = PointCloud(positions=np.zeros((1, 3), np.float32),
                     normals=np.tile(np.array([0, 1, 0], np.float32), (1, 1)))
    with pytest.raises(ValueError, match="degenerate split"):
        split_points(one, 0.5, seed=0)


def test_split_deterministic():
    pc = flat_cloud(1000, seed=2)
    a_src, a_px = split_points(pc, 0.1, seed=3)
    b_src, b_px = split_points(pc, 0.1, seed=3)
    np.testing.assert_array_equal(a_src.positions, b_src.positions)
    np.testing.assert_array_equal(a_px.positions, b_px.positions)


# -- l2 loss -------------------------------------------------------------------


def test_l2_loss_values():
    assert float(l2_loss(np.ones((4, 1)), np.ones((4, 1)))) == 0.0
    assert float(l2_loss(np.zeros((5, 1)), np.ones((5, 1)))) == pytest.approx(1.0)
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
    direct = np.mean([(a[i, c] - b[i, c]) ** 2 for i in range(40) for c in range(3)])
    assert float(l2_loss(a, b)) == pytest.approx(direct, abs=1e-7)


def test_l2_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        l2_loss(np.ones((3, 1)), np.ones((3, 3)))


# -- Adam ------------------------------------------------------------------------


def test_adam_zero_gradient_is_identity():
    blocks = [ParamBlock("w", np.array([1.0, -2.0, 3.0]))]
    state = AdamState(blocks)
    before = blocks[0].values.copy()
    adam_step(blocks, state, lr=0.1)
    np.testing.assert_array_equal(blocks[0].values, before)


def test_adam_unit_step_property():
    blocks = [ParamBlock("w", np.zeros(3))]
    state = AdamState(blocks)
    blocks[0].grad[...] = np.array([100.0, -50.0, 1000.0])
    adam_step(blocks, state, lr=0.01)
    np.testing.assert_allclose(np.abs(blocks[0].values), 0.01, rtol=1e-6)


def test_adam_converges_on_quadratic():
    rng = np.random.default_rng(5)
    w_star = rng.normal(size=8)
    blocks = [ParamBlock("w", np.zeros(8))]
    state = AdamState(blocks)
    initial = np.linalg.norm(blocks[0].values - w_star)
    for _ in range(100):
        blocks[0].zero_grad()
        blocks[0].grad[...] = 2 * (blocks[0].values - w_star)
        adam_step(blocks, state, lr=0.05)
    final = np.linalg.norm(blocks[0].values - w_star)
    assert final < 0.1 * initial


def test_adam_aborts_on_nonfinite_gradient():
    blocks = [ParamBlock("enc.w", np.ones(2))]
    state = AdamState(blocks)
    blocks[0].grad[...] = np.array([1.0, np.nan])
    with pytest.raises(FloatingPointError, match="enc.w"):
        adam_step(blocks, state, lr=0.1)


# -- schedule / loop ---------------------------------------------------------------


def test_lr_schedule():
    cfg = TrainConfig(learning_rate=0.005, lr_decay=0.7, lr_decay_every=10)
    assert cfg.lr_at(0) == pytest.approx(0.005)
    assert cfg.lr_at(9) == pytest.approx(0.005)
    assert cfg.lr_at(10) == pytest.approx(0.005 * 0.7)
    assert cfg.lr_at(25) == pytest.approx(0.005 * 0.7**2)


def test_batch_gradient_accumulation_equals_sum():
    model = tiny_model(seed=6)
    clouds = [flat_cloud(300, seed=s) for s in (10, 11, 12)]
    graphs = [prepare_scene(c, model, seed=0, name=f"g{i}") for i, c in enumerate(clouds)]

    from pointshade.autodiff import Tape

    model.zero_grad()
    for g in graphs:
        tape = Tape(dtype=model.dtype)
        tape.backward(scene_loss(model, g, tape=tape))
    batched = {b.name: b.grad.copy() for b in model.param_blocks()}

    summed = {b.name: np.zeros_like(b.grad) for b in model.param_blocks()}
    for g in graphs:
        model.zero_grad()
        tape = Tape(dtype=model.dtype)
        tape.backward(scene_loss(model, g, tape=tape))
        for b in model.param_blocks():
            summed[b.name] += b.grad
    for name in batched:
        np.testing.assert_allclose(batched[name], summed[name], rtol=1e-5, atol=1e-7)


def test_overfit_single_scene():
    model = tiny_model(seed=7)
    cloud = flat_cloud(1200, seed=13)
    cfg = TrainConfig(learning_rate=0.005, epochs=400, batch_size=1, seed=0,
                      selection_radius=0.15, lr_decay_every=100)
    model, trace = train_loop(model, [cloud], cfg)
    assert trace[-1]["train_mse"] < 0.005
    assert all(np.isfinite(row["train_mse"]) for row in trace)


def test_train_deterministic_loss_trace():
    cfgs = []
    for _ in range(2):
        model = tiny_model(seed=8)
        cloud = flat_cloud(500, seed=14)
        cfg = TrainConfig(epochs=5, batch_size=1, seed=3, selection_radius=0.15)
        _, trace = train_loop(model, [cloud], cfg)
        cfgs.append(trace)
    assert cfgs[0] == cfgs[1]


def test_checkpoint_roundtrip_and_resume(tmp_path):
    clouds = [flat_cloud(400, seed=s) for s in (20, 21)]
    cfg_full = TrainConfig(epochs=4, batch_size=2, seed=5, selection_radius=0.15)
    model_full = tiny_model(seed=9)
    _, trace_full = train_loop(model_full, clouds, cfg_full, out_dir=tmp_path / "full")

    (tmp_path / "full").mkdir(exist_ok=True)
    cfg_short = TrainConfig(epochs=2, batch_size=2, seed=5, selection_radius=0.15)
    model_short = tiny_model(seed=9)
    _, _ = train_loop(model_short, clouds, cfg_short, out_dir=tmp_path / "short")

    model_resumed = tiny_model(seed=9)
    _, trace_resumed = train_loop(model_resumed, clouds, cfg_full,
                                  resume=tmp_path / "short" / "last.ckpt")
    assert len(trace_resumed) == 2  # epochs 2 and 3
    for resumed, full in zip(trace_resumed, trace_full[2:]):
        assert resumed["train_mse"] == pytest.approx(full["train_mse"], abs=1e-6)
        assert resumed["val_mse"] == pytest.approx(full["val_mse"], abs=1e-6)


def test_checkpoint_state_roundtrip(tmp_path):
    model = tiny_model(seed=10)
    blocks = model.param_blocks()
    state = AdamState(blocks)
    state.step_count = 17
    for k in state.m:
        state.m[k][...] = 0.25
        state.v[k][...] = 0.5
    save_checkpoint(tmp_path / "c.ckpt", model, state, epoch=7, best_val=0.123)
    back_model, back_state, epoch, best = load_checkpoint(tmp_path / "c.ckpt")
    assert epoch == 7 and best == pytest.approx(0.123)
    assert back_state.step_count == 17
    for a, b in zip(blocks, back_model.param_blocks()):
        np.testing.assert_array_equal(a.values, b.values)
    for k in state.m:
        np.testing.assert_array_equal(back_state.m[k], state.m[k])
        np.testing.assert_array_equal(back_state.v[k], state.v[k])


def test_all_variants_train_one_epoch():
    clouds = [flat_cloud(400, seed=s) for s in (30, 31)]
    for variant in ("ours", "2d-only", "3d-only"):
        model = tiny_model(variant=variant, seed=11)
        cfg = TrainConfig(epochs=1, batch_size=2, seed=0, selection_radius=0.15)
        model, trace = train_loop(model, clouds, cfg)
        assert np.isfinite(trace[-1]["train_mse"])
