import numpy as np
import pytest
from scipy.special import erf

from tcmoa import autodiff as ad
from tcmoa.autodiff import Tensor, backward
from tcmoa.backbone import Backbone, BackboneConfig, FusionTrace, make_backbone
from tcmoa.model import ModelConfig, make_fusion_model
from tcmoa.moa import TaskId


def small_cfg(**kw):
    base = dict(image_size=16, patch_size=4, dim=8, encoder_depth=2,
                decoder_depth=2, heads=2, window=4, tau=2, mlp_ratio=2.0)
    base.update(kw)
    return BackboneConfig(**base)


def test_config_invariants():
    with pytest.raises(ValueError, match="divisible by patch"):
        BackboneConfig(image_size=30)
    with pytest.raises(ValueError, match="window"):
        BackboneConfig(image_size=32, patch_size=4, window=3)
    with pytest.raises(ValueError, match="tau"):
        BackboneConfig(encoder_depth=8, decoder_depth=4, tau=3)


def test_patchify_shapes_and_zero_image():
    bb = make_backbone(BackboneConfig(), np.random.default_rng(0))
    grid = bb.patchify(Tensor(np.zeros((32, 32, 3))))
    assert grid.shape == (8, 8, 64)
    assert not grid.data.any()  # zero bias init


def test_patchify_unpatchify_pseudo_inverse_round_trip():
    # with the head set to the embed's right inverse, the pre-sigmoid
    # reconstruction reproduces the patches exactly (C=64 >= 48)
    bb = make_backbone(BackboneConfig(), np.random.default_rng(1))
    w = bb.patch_w.data  # 48 x 64
    bb.head_w.data = np.linalg.pinv(w)
    bb.head_b.data[:] = 0.0
    rng = np.random.default_rng(2)
    img = rng.random((32, 32, 3))
    recon = bb.unpatchify(bb.patchify(Tensor(img))).data
    logits = np.log(recon / (1.0 - recon))  # undo the output sigmoid
    np.testing.assert_allclose(logits, img, atol=1e-8)


def _zero_block(block):
    for name, p in block.named_params():
        p.data = np.zeros_like(p.data)


def test_block_zero_weights_is_identity():
    cfg = small_cfg()
    bb = make_backbone(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(3)
    grid = Tensor(rng.normal(size=(4, 4, 8)))
    for shift in (False, True):
        block = bb.enc_blocks[1 if shift else 0]
        _zero_block(block)
        block.shift_flag = shift
        out = bb.block_forward(grid, block)
        assert np.array_equal(out.data, grid.data)


def _dense_attention_oracle(grid, block, cfg):
    """Whole-grid multi-head attention + MLP, straight numpy."""
    t = cfg.grid * cfg.grid
    c = cfg.dim
    heads, dh = cfg.heads, cfg.dim // cfg.heads

    def ln(v, scale, shift):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * scale + shift

    def gelu(v):
        return 0.5 * v * (1.0 + erf(v / np.sqrt(2.0)))

    x = grid.reshape(t, c) + block.pos.data.reshape(t, c)
    h = ln(x, block.ln1_scale.data, block.ln1_shift.data)
    qkv = h @ block.qkv_w.data + block.qkv_b.data
    q, k, v = np.split(qkv, 3, axis=1)
    ctx = np.zeros((t, c))
    for i in range(heads):
        qs = q[:, i * dh:(i + 1) * dh]
        ks = k[:, i * dh:(i + 1) * dh]
        vs = v[:, i * dh:(i + 1) * dh]
        s = qs @ ks.T / np.sqrt(dh)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        a = e / e.sum(axis=-1, keepdims=True)
        ctx[:, i * dh:(i + 1) * dh] = a @ vs
    x = x + ctx @ block.proj_w.data + block.proj_b.data
    h = ln(x, block.ln2_scale.data, block.ln2_shift.data)
    x = x + gelu(h @ block.mlp_w1.data + block.mlp_b1.data) @ block.mlp_w2.data + block.mlp_b2.data
    return x.reshape(cfg.grid, cfg.grid, c)


def test_single_window_matches_dense_attention():
    cfg = small_cfg()  # grid 4 == window 4: one window
    bb = make_backbone(cfg, np.random.default_rng(4))
    block = bb.enc_blocks[0]
    block.pos.data[:] = 0.0
    rng = np.random.default_rng(5)
    grid = rng.normal(size=(4, 4, 8))
    got = bb.block_forward(Tensor(grid), block).data
    want = _dense_attention_oracle(grid, block, cfg)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_attention_rows_sum_to_one():
    cfg = small_cfg()
    bb = make_backbone(cfg, np.random.default_rng(6))
    block = bb.enc_blocks[0]
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(1, 16, 8)))
    h = ad.layer_norm(x, block.ln1_scale, block.ln1_shift)
    qkv = ad.matmul(h, block.qkv_w) + block.qkv_b
    q, k, v = ad.split(qkv, [8, 8, 8], axis=2)
    q = q.reshape(1, 16, 2, 4).swapaxes(1, 2)
    k = k.reshape(1, 16, 2, 4).swapaxes(1, 2)
    attn = ad.softmax(ad.matmul(q, k.swapaxes(2, 3)) * 0.5)
    np.testing.assert_allclose(attn.data.sum(-1), 1.0, rtol=0, atol=1e-12)


def test_cyclic_shift_round_trip_bitwise():
    rng = np.random.default_rng(8)
    grid = Tensor(rng.normal(size=(8, 8, 4)))
    out = ad.roll2d(ad.roll2d(grid, (-2, -2)), (2, 2))
    assert np.array_equal(out.data, grid.data)


def _tiny_model(**kw):
    cfg = ModelConfig(backbone=small_cfg(**kw), n_adapters=4, top_k=2,
                      group_size=2, bottleneck=2)
    return make_fusion_model(cfg, np.random.default_rng(9))


def test_encode_pair_invokes_one_layer_per_tau_blocks():
    model = _tiny_model()  # encoder_depth 2, tau 2 -> exactly one fusion layer
    assert len(model.enc_moas) == 1
    trace = FusionTrace()
    rng = np.random.default_rng(10)
    x = rng.random((16, 16, 3))
    model.backbone.encode_pair(Tensor(x), Tensor(x), model.enc_moas, TaskId.VIF,
                               trace=trace)
    assert len(trace.prompts) == 1


def test_encode_pair_symmetric_for_identical_sources():
    model = _tiny_model()
    for layer in model.enc_moas:
        for a in layer.adapters:  # zero adapters -> prompt (0.5, 0.5)
            for p in (a.down_w, a.down_b, a.up_w, a.up_b):
                p.data = np.zeros_like(p.data)
        for task in TaskId:  # symmetric source embeddings
            sx, sy = layer.source_embed[task]
            sy.data = sx.data.copy()
    rng = np.random.default_rng(11)
    x = Tensor(rng.random((16, 16, 3)))
    fx, fy = model.backbone.encode_pair(x, x, model.enc_moas, TaskId.MEF)
    assert np.array_equal(fx.data, fy.data)


def test_lambda_one_bypasses_fusion_bitwise():
    model = _tiny_model()
    for layer in model.all_moas:
        layer.lambda_f.data = np.asarray(1.0)
    rng = np.random.default_rng(12)
    x = Tensor(rng.random((16, 16, 3)))
    y = Tensor(rng.random((16, 16, 3)))
    fx, fy = model.backbone.encode_pair(x, y, model.enc_moas, TaskId.VIF)
    alone_x = model.backbone.encode_single(x)
    alone_y = model.backbone.encode_single(y)
    assert np.array_equal(fx.data, alone_x.data)
    assert np.array_equal(fy.data, alone_y.data)


def test_decode_zero_tokens_zero_head_gives_half_gray():
    bb = make_backbone(small_cfg(), np.random.default_rng(13))
    for _, p in bb.named_params():
        p.data = np.zeros_like(p.data)
    img = bb.decode_single(Tensor(np.zeros((4, 4, 8)))).data
    np.testing.assert_array_equal(img, np.full((16, 16, 3), 0.5))


def test_decoded_images_stay_in_unit_interval():
    model = _tiny_model()
    rng = np.random.default_rng(14)
    fused = model.fuse(rng.random((16, 16, 3)), rng.random((16, 16, 3)), TaskId.MFF)
    assert fused.data.min() > 0.0 and fused.data.max() < 1.0


def test_weight_sharing_gradient_flows_from_both_branches():
    model = _tiny_model()
    rng = np.random.default_rng(15)
    x = Tensor(rng.random((16, 16, 3)))
    y = Tensor(rng.random((16, 16, 3)))
    w = model.backbone.enc_blocks[0].qkv_w
    for branch in (0, 1):
        fx, fy = model.backbone.encode_pair(x, y, model.enc_moas, TaskId.VIF)
        g = backward((fx if branch == 0 else fy).sum())
        assert np.abs(g.grad(w).data).max() > 0.0
