import numpy as np
import pytest

from lanepe.lane_eval import MISSING, LaneLabel, clip_accuracy
from lanepe.lane_net import (
    VARIANTS,
    NetworkConfig,
    build,
    forward,
    lanes_from_mask,
    load_checkpoint,
    loss_fn,
    new_train_state,
    parameter_count,
    predict_lanes,
    save_checkpoint,
    train_epoch,
    train_step,
)
from lanepe.resa import ResaConfig
from lanepe.tensor import backward, softmax
from oracles import grad_check


def small_cfg(variant="baseline", **kw):
    base = dict(
        height=16, width=8, encoder_channels=(4, 8), resa=ResaConfig(iterations=2, conv_kernel_width=3),
        variant=variant, batch_size=2,
    )
    base.update(kw)
    return NetworkConfig(**base)


def batch(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, cfg.height, cfg.width, cfg.channels))
    masks = rng.integers(0, cfg.num_lane_classes, size=(n, cfg.height, cfg.width))
    return images, masks


def test_ape_adds_exactly_one_field():
    cfg = NetworkConfig()
    h, w, d = cfg.feature_shape
    base = parameter_count(build(cfg))
    ape = build(NetworkConfig(variant="ape"))
    assert parameter_count(ape) - base == h * w * d
    assert ape.attention is None


def test_variant_components():
    for v in VARIANTS:
        net = build(small_cfg(v))
        names = net.parameters()
        assert ("ape" in names) == (v in ("ape", "rpe_ape"))
        assert ("attention.W_Q" in names) == (v in ("sin_pe", "rpe", "rpe_ape"))
        assert ("attention.rel_row" in names) == (v in ("rpe", "rpe_ape"))
        assert (net.sin_pe is not None) == (v == "sin_pe")


def test_shared_components_identical_across_variants():
    a, b = build(small_cfg("baseline")).parameters(), build(small_cfg("rpe_ape")).parameters()
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_config_validation():
    with pytest.raises(ValueError, match="variant"):
        build(small_cfg("coord"))
    with pytest.raises(ValueError, match="divisible"):
        build(small_cfg(height=18))
    with pytest.raises(ValueError):
        build(small_cfg(resa=ResaConfig(iterations=4)))
    assert NetworkConfig.from_dict(small_cfg("rpe").to_dict()) == small_cfg("rpe")


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_shape_and_determinism(variant):
    cfg = small_cfg(variant)
    images, _ = batch(cfg)
    a = forward(build(cfg), images).data
    b = forward(build(cfg), images).data
    assert a.shape == (2, 16, 8, cfg.num_lane_classes)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(forward(build(cfg), images[0]).data, a[0])
    with pytest.raises(ValueError):
        forward(build(cfg), np.zeros((1, 8, 8, 3)))


@pytest.mark.parametrize("variant", ["baseline", "rpe"])
def test_zero_image_gives_uniform_posterior(variant):
    cfg = small_cfg(variant)
    probs = softmax(forward(build(cfg), np.zeros((1, 16, 8, 3))), axis=-1).data
    np.testing.assert_allclose(probs, 1.0 / cfg.num_lane_classes, atol=1e-15)


def test_ape_receives_gradient():
    cfg = small_cfg("ape")
    net = build(cfg)
    backward(loss_fn(net, *batch(cfg)))
    assert np.abs(net.ape.values.grad).sum() > 0


def test_zero_frozen_table_matches_plain_attention():
    cfg = small_cfg("rpe")
    net = build(cfg)
    net.attention.rel.row_emb.data[:] = 0.0
    net.attention.rel.col_emb.data[:] = 0.0
    net.freeze("attention.rel_row", "attention.rel_col")
    images, masks = batch(cfg)
    with_rel = forward(net, images).data
    net.attention.rel = None
    np.testing.assert_allclose(with_rel, forward(net, images).data, atol=1e-12)


def test_zero_frozen_ape_matches_baseline():
    cfg = small_cfg("ape")
    net = build(cfg)
    net.ape.values.data[:] = 0.0
    net.freeze("ape")
    images, masks = batch(cfg)
    np.testing.assert_array_equal(forward(net, images).data, forward(build(small_cfg()), images).data)
    state = new_train_state(net)
    train_step(state, images, masks)
    np.testing.assert_array_equal(net.ape.values.data, 0.0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_full_network_gradients(variant):
    cfg = small_cfg(variant, resa_gain=1.0)
    net = build(cfg)
    rng = np.random.default_rng(7)
    images, masks = batch(cfg, seed=1)
    for _, b in net.encoder:
        b.data[:] = rng.normal(0, 0.1, size=b.data.shape)  # move off the relu kink at zero input
    params = list(net.parameters().values())
    err = grad_check(lambda: loss_fn(net, images, masks), params, rng, coords_per_param=4)
    assert err < 1e-4


def test_train_step_deterministic_and_lr_zero_noop():
    cfg = small_cfg("rpe_ape")
    images, masks = batch(cfg)
    losses = []
    for _ in range(2):
        s = new_train_state(build(cfg))
        losses.append([train_step(s, images, masks) for _ in range(3)])
    assert losses[0] == losses[1]

    s = new_train_state(build(cfg))
    before = {k: t.data.copy() for k, t in s.net.parameters().items()}
    train_step(s, images, masks, lr=0.0)
    for k, t in s.net.parameters().items():
        np.testing.assert_array_equal(t.data, before[k])


def test_overfits_single_sample_monotonically():
    cfg = small_cfg("ape", momentum=0.0, lr=0.05)
    images, masks = batch(cfg, n=1)
    s = new_train_state(build(cfg))
    losses = [train_step(s, images, masks) for _ in range(20)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_mask_out_of_range_rejected():
    cfg = small_cfg()
    images, masks = batch(cfg)
    masks[0, 0, 0] = cfg.num_lane_classes
    with pytest.raises(ValueError, match="mask classes"):
        loss_fn(build(cfg), images, masks)


def test_lanes_from_mask_cases():
    mask = np.zeros((8, 6), dtype=int)
    mask[:, 2:4] = 1  # vertical lane two pixels wide, mean column 2.5 -> 3
    lab = lanes_from_mask(mask, [0, 4, 7], num_lanes=2)
    assert lab.lanes == [[3, 3, 3], [MISSING] * 3]

    empty = lanes_from_mask(np.zeros((8, 6), dtype=int), [0, 4], num_lanes=2)
    assert empty.lanes == [[MISSING] * 2] * 2

    diag = np.zeros((8, 8), dtype=int)
    diag[np.arange(8), np.arange(8)] = 1
    rows = list(range(8))
    gt = LaneLabel("", rows, [rows])
    pred = lanes_from_mask(diag, rows, num_lanes=1)
    assert clip_accuracy(pred, gt, threshold_px=1) == (8, 8)


def test_predict_lanes_shape():
    cfg = small_cfg()
    lab = predict_lanes(build(cfg), batch(cfg)[0][0], [8, 10, 12], "x.png")
    assert len(lab.lanes) == cfg.num_lane_classes - 1
    assert all(len(lane) == 3 for lane in lab.lanes) and lab.raw_file == "x.png"


def test_checkpoint_resume_bit_identical(tmp_path):
    cfg = small_cfg("rpe_ape")
    images, masks = batch(cfg, n=5)
    ref = new_train_state(build(cfg))
    train_epoch(ref, images, masks)
    save_checkpoint(tmp_path / "c.npz", ref)
    resumed = load_checkpoint(tmp_path / "c.npz")
    assert (resumed.epoch, resumed.step) == (ref.epoch, ref.step)
    a = train_epoch(ref, images, masks)
    b = train_epoch(resumed, images, masks)
    assert a == b
    for k, t in ref.net.parameters().items():
        np.testing.assert_array_equal(t.data, resumed.net.parameters()[k].data)


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", meta=np.array('{"format": "other"}'))
    with pytest.raises(ValueError, match="unsupported"):
        load_checkpoint(tmp_path / "x.npz")


def test_non_finite_loss_raises():
    cfg = small_cfg()
    s = new_train_state(build(cfg))
    images, masks = batch(cfg)
    images[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        train_step(s, images, masks)
