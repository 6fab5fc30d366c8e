import numpy as np
import pytest

from uchfr import autograd as ag
from uchfr.autograd import Tensor
from uchfr.backbone import (BackboneConfig, SEBlock, build_pretrain_network,
                            load_network, save_network, swap_head)


def small_cfg(**kw):
    base = dict(mode="vector", input_dim=6, hidden=(12, 8), embedding_dim=4,
                se_reduction=4, num_classes=3)
    base.update(kw)
    return BackboneConfig(**base)


def test_config_rejects_bad_reduction():
    with pytest.raises(ValueError, match="divide"):
        small_cfg(hidden=(12, 10), se_reduction=4)


def test_config_rejects_tiny_dims():
    with pytest.raises(ValueError, match="embedding_dim"):
        small_cfg(embedding_dim=1)
    with pytest.raises(ValueError, match="num_classes"):
        small_cfg(num_classes=1)


def test_se_zero_weights_halves_everything():
    c = 8
    se = SEBlock(Tensor(np.zeros((c, 2))), Tensor(np.zeros((2, c))))
    x = np.random.default_rng(0).standard_normal((3, c))
    out = se(Tensor(x))
    assert np.allclose(out.data, 0.5 * x, atol=1e-12)


def test_se_zero_channel_stays_zero():
    rng = np.random.default_rng(1)
    c = 4
    se = SEBlock(Tensor(rng.standard_normal((c, 2))), Tensor(rng.standard_normal((2, c))))
    x = rng.standard_normal((5, c))
    x[:, 2] = 0.0
    out = se(Tensor(x))
    assert np.array_equal(out.data[:, 2], np.zeros(5))
    # image-mode map: zero channel squeezes to 0 and stays zero
    xi = rng.standard_normal((2, 3, 3, c))
    xi[..., 1] = 0.0
    outi = se(Tensor(xi))
    assert np.array_equal(outi.data[..., 1], np.zeros((2, 3, 3)))


def test_se_gates_in_unit_interval():
    rng = np.random.default_rng(2)
    c = 6
    se = SEBlock(Tensor(rng.standard_normal((c, 3))), Tensor(rng.standard_normal((3, c))))
    x = rng.standard_normal((4, c))
    out = se(Tensor(x))
    ratio = out.data / x  # x has no exact zeros w.p. 1
    assert np.all(ratio > 0.0) and np.all(ratio < 1.0)


def test_se_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    c = 4
    se = SEBlock(Tensor(rng.standard_normal((c, 2)), requires_grad=True),
                 Tensor(rng.standard_normal((2, c)), requires_grad=True))
    w = Tensor(rng.standard_normal((3, c)))
    res = ag.gradcheck(lambda t: ag.sum_all(ag.mul(se(t), w)), rng.standard_normal((3, c)), tol=1e-4)
    assert res.passed, res

    def through_w1(t):
        block = SEBlock(t, se.w2)
        return ag.sum_all(ag.mul(block(Tensor(rng_fixed)), w))

    rng_fixed = rng.standard_normal((3, c))
    res = ag.gradcheck(through_w1, rng.standard_normal((c, 2)), tol=1e-4)
    assert res.passed, res


def test_embed_rows_unit_norm_and_shape():
    net = swap_head(build_pretrain_network(small_cfg(embedding_dim=32), seed=0), seed=1,
                    embedding_dim=32)
    x = np.random.default_rng(4).standard_normal((7, 6))
    emb = net.embed(x)
    assert emb.shape == (7, 32)
    assert np.all(np.abs(np.linalg.norm(emb.data, axis=1) - 1.0) < 1e-6)


def test_embed_deterministic_for_identical_inputs():
    net = swap_head(build_pretrain_network(small_cfg(), seed=0), seed=1)
    x = np.random.default_rng(5).standard_normal((4, 6))
    x[2] = x[0]
    emb = net.embed(x).data
    assert np.array_equal(emb[2], emb[0])
    emb2 = net.embed(x.copy()).data
    assert np.array_equal(emb, emb2)


def test_classify_uniform_at_zero_head():
    net = build_pretrain_network(small_cfg(num_classes=5), seed=0)
    net.params["head.classify.w"].data[:] = 0.0
    net.params["head.classify.b"].data[:] = 0.0
    logits = net.classify(np.random.default_rng(6).standard_normal((3, 6)))
    assert logits.shape == (3, 5)
    assert np.array_equal(logits.data, np.zeros((3, 5)))


def test_head_mode_mismatch_rejected():
    pre = build_pretrain_network(small_cfg(), seed=0)
    x = np.zeros((2, 6))
    with pytest.raises(ValueError, match="hfr"):
        pre.embed(x)
    hfr = swap_head(pre, seed=1)
    with pytest.raises(ValueError, match="pretrain"):
        hfr.classify(x)


def test_swap_head_preserves_trunk_bit_exact():
    pre = build_pretrain_network(small_cfg(), seed=0)
    before = {n: pre.params[n].data.copy() for n in pre.trunk_parameter_names()}
    hfr = swap_head(pre, seed=7)
    for name, arr in before.items():
        assert np.array_equal(hfr.params[name].data, arr)
    assert hfr.params["head.embed.w"].shape == (pre.cfg.trunk_width, pre.cfg.embedding_dim)
    assert "head.classify.w" not in hfr.params


def test_swap_head_seeded_determinism():
    pre = build_pretrain_network(small_cfg(), seed=0)
    a = swap_head(pre, seed=3)
    b = swap_head(pre, seed=3)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    c = swap_head(pre, seed=4)
    assert not np.array_equal(a.params["head.embed.w"].data, c.params["head.embed.w"].data)


def test_swap_head_rejects_wrong_stage():
    hfr = swap_head(build_pretrain_network(small_cfg(), seed=0), seed=1)
    with pytest.raises(ValueError, match="pretrain"):
        swap_head(hfr, seed=2)


def test_image_mode_forward_and_gradients():
    cfg = BackboneConfig(mode="image", input_shape=(14, 14), conv_channels=(4, 8),
                         embedding_dim=4, se_reduction=4, num_classes=3)
    net = build_pretrain_network(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 14, 14))
    labels = np.array([0, 2])
    assert net.classify(x).shape == (2, 3)

    def loss_via_conv0(t):
        net.params["trunk.conv0.w"] = t
        return ag.softmax_cross_entropy(net.classify(x), labels)

    original = net.params["trunk.conv0.w"]
    try:
        res = ag.gradcheck(loss_via_conv0, original.data.copy(), tol=1e-4)
    finally:
        net.params["trunk.conv0.w"] = original
    assert res.passed, res


def test_image_config_rejects_bad_geometry():
    with pytest.raises(ValueError, match="incompatible"):
        BackboneConfig(mode="image", input_shape=(9, 9), conv_channels=(4, 8),
                       embedding_dim=4, se_reduction=4, num_classes=3)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = swap_head(build_pretrain_network(small_cfg(), seed=0), seed=1)
    path = tmp_path / "net.uchfr"
    save_network(net, path, meta={"seed": 1, "config_hash": "abc"})
    loaded, meta, extra = load_network(path)
    assert meta["stage"] == "hfr"
    assert meta["seed"] == 1 and meta["config_hash"] == "abc"
    assert extra == {}
    assert set(loaded.params) == set(net.params)
    for name in net.params:
        assert np.array_equal(loaded.params[name].data, net.params[name].data)
        assert loaded.params[name].dtype == net.params[name].dtype
    x = np.random.default_rng(8).standard_normal((3, 6))
    assert np.array_equal(loaded.embed(x).data, net.embed(x).data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTME1" + b"\x00" * 32)
    from uchfr.checkpoint import CheckpointError, load_tensors
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(p)
