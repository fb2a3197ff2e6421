import numpy as np
import pytest
import torch

from livt.errors import FormatError, MaskError, NumericalError, ShapeError
from livt.losses import LossOutput, make_loss
from livt.priors import ClassPrior, keyed_rng
from livt.train import OptimizerState, adamw_step
from livt.vit import (
    MaskPlan,
    ViTConfig,
    ViTParams,
    classify_forward,
    classify_grad,
    count_parameters,
    encoder_attention,
    layer_id,
    layer_lr_scales,
    load_checkpoint,
    mae_loss_and_grad,
    patchify,
    random_mask_plan,
    save_checkpoint,
    sincos_pos_embed,
    unpatchify,
)

SMALL = ViTConfig(image_size=8, channels=1, patch_size=2, embed_dim=16, depth=2, heads=2, decoder_dim=8,
                  decoder_depth=1, decoder_heads=2, num_classes=3)


def _plans(cfg, n, seed=0):
    r = keyed_rng(seed)
    return [random_mask_plan(cfg.num_patches, cfg.mask_ratio, r) for _ in range(n)]


def test_patchify_shapes_and_constant():
    img = np.full((1, 8, 8), 3.5)
    tok = patchify(img, 4)
    assert tok.shape == (4, 16) and np.all(tok == 3.5)


def test_patchify_round_trip(rng):
    img = rng.normal(size=(2, 3, 8, 8))
    np.testing.assert_array_equal(unpatchify(patchify(img, 2), 2, 3), img)
    t = torch.from_numpy(img)
    assert torch.equal(unpatchify(patchify(t, 4), 4, 3), t)
    assert np.array_equal(patchify(t, 4).numpy(), patchify(img, 4))


def test_patchify_token_order():
    img = np.arange(16.0).reshape(1, 4, 4)
    tok = patchify(img, 2)
    assert tok[1].tolist() == [2.0, 3.0, 6.0, 7.0]
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 5, 5)), 2)


def test_mask_plan_counts_and_determinism():
    p = random_mask_plan(16, 0.75, keyed_rng(3))
    assert p.masked.size == 12 and p.visible.size == 4
    q = random_mask_plan(16, 0.75, keyed_rng(3))
    assert np.array_equal(p.masked, q.masked) and np.array_equal(p.visible, q.visible)
    assert np.all(np.diff(p.masked) > 0)


def test_mask_plan_uniform_frequency():
    r = keyed_rng(11)
    hits = np.zeros(16)
    for _ in range(10_000):
        hits[random_mask_plan(16, 0.75, r).masked] += 1
    assert np.all(np.abs(hits / 10_000 - 0.75) < 0.02)


def test_mask_plan_validation():
    with pytest.raises(MaskError):
        random_mask_plan(4, 1.0, keyed_rng(0))
    with pytest.raises(MaskError):
        random_mask_plan(4, 0.05, keyed_rng(0))
    with pytest.raises(MaskError):
        MaskPlan(np.array([2, 1]), np.array([0, 3]), 0.5)
    with pytest.raises(MaskError):
        MaskPlan(np.array([0, 1]), np.array([1, 3]), 0.5)


def test_config_validation():
    with pytest.raises(ShapeError):
        ViTConfig(image_size=10, patch_size=4)
    with pytest.raises(ShapeError):
        ViTConfig(embed_dim=30, heads=3)
    with pytest.raises(MaskError):
        ViTConfig(mask_ratio=0.0)


def test_pos_embed_table():
    t = sincos_pos_embed(8, 3)
    assert t.shape == (9, 8)
    assert len({tuple(r) for r in np.round(t, 12)}) == 9


def test_default_parameter_count_is_stable():
    a, b = ViTParams(ViTConfig(), seed=0), ViTParams(ViTConfig(), seed=5)
    assert count_parameters(a) == count_parameters(b) == 229_914
    assert count_parameters(a, "encoder") == 201_152
    assert count_parameters(a, "decoder") == 28_112
    assert count_parameters(a, "head") == 650


def test_init_is_seeded():
    a, b, c = ViTParams(SMALL, 1), ViTParams(SMALL, 1), ViTParams(SMALL, 2)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not torch.equal(sa["encoder.patch_embed.weight"], sc["encoder.patch_embed.weight"])
    assert torch.all(a.head.weight == 0) and torch.all(a.encoder.norm.weight == 1)
    assert a.encoder.patch_embed.weight.abs().max() <= 0.04


def test_mae_loss_zero_when_decoder_outputs_target():
    p = ViTParams(SMALL, 0)
    with torch.no_grad():
        p.decoder.pred.weight.zero_()
        p.decoder.pred.bias.fill_(0.25)
    loss, grads, recon = mae_loss_and_grad(p, np.full((2, 1, 8, 8), 0.25), _plans(SMALL, 2))
    assert loss == 0.0
    assert recon.shape == (2, 1, 8, 8)
    assert set(grads) == set(p.group("encoder")) | set(p.group("decoder"))


def test_mae_loss_invariant_to_visible_order(rng):
    p = ViTParams(SMALL, 0).double()
    x = rng.normal(size=(2, 1, 8, 8))
    plans = _plans(SMALL, 2)
    shuffled = [MaskPlan(q.masked, rng.permutation(q.visible), q.ratio) for q in plans]
    a = mae_loss_and_grad(p, x, plans)[0]
    b = mae_loss_and_grad(p, x, shuffled)[0]
    assert abs(a - b) < 1e-12


def test_mae_loss_variants(rng):
    x = rng.normal(size=(2, 1, 8, 8))
    plans = _plans(SMALL, 2)
    base = mae_loss_and_grad(ViTParams(SMALL, 0), x, plans)[0]
    every = mae_loss_and_grad(ViTParams(ViTConfig(**{**SMALL.__dict__, "loss_on_all_patches": True}), 0), x, plans)[0]
    normed = mae_loss_and_grad(ViTParams(ViTConfig(**{**SMALL.__dict__, "norm_pix_target": True}), 0), x, plans)[0]
    assert len({base, every, normed}) == 3


def test_mae_rejects_bad_plans(rng):
    p = ViTParams(SMALL, 0)
    with pytest.raises(MaskError):
        mae_loss_and_grad(p, rng.normal(size=(2, 1, 8, 8)), _plans(SMALL, 1))
    with pytest.raises(MaskError):
        mae_loss_and_grad(p, rng.normal(size=(1, 1, 8, 8)), [random_mask_plan(9, 0.5, keyed_rng(0))])


def test_mae_loss_decreases_on_fixed_batch(rng):
    p = ViTParams(SMALL, 0)
    x = rng.normal(size=(8, 1, 8, 8)) + np.linspace(-1, 1, 8)[None, None, :, None]
    plans = _plans(SMALL, 8, seed=4)
    trained = {**p.group("encoder"), **p.group("decoder")}
    state = OptimizerState()
    losses = []
    for _ in range(50):
        loss, grads, _ = mae_loss_and_grad(p, x, plans)
        losses.append(loss)
        adamw_step(trained, grads, state, 1e-3, (0.9, 0.95), 0.0)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_classify_zero_head_and_identical_rows(rng):
    p = ViTParams(SMALL, 0)
    logits, feats = classify_forward(p, rng.normal(size=(4, 1, 8, 8)))
    assert np.all(logits == 0) and feats.shape == (4, 16)
    with torch.no_grad():
        p.head.weight.normal_()
    same = np.repeat(rng.normal(size=(1, 1, 8, 8)), 3, axis=0)
    logits, _ = classify_forward(p, same)
    assert np.array_equal(logits[0], logits[1]) and np.array_equal(logits[0], logits[2])


def test_classify_finite_on_wide_inputs(rng):
    logits, feats = classify_forward(ViTParams(SMALL, 3), rng.uniform(-10, 10, size=(16, 1, 8, 8)))
    assert np.all(np.isfinite(logits)) and np.all(np.isfinite(feats))


def test_classify_grad_zero_loss_and_no_decoder(rng):
    p = ViTParams(SMALL, 0)
    fn, _ = make_loss("bce", ClassPrior(np.array([1, 1, 1])))
    # zero head gives z = 0 = logit(0.5): the BCE gradient vanishes at target 0.5
    grads, out = classify_grad(p, rng.normal(size=(3, 1, 8, 8)), lambda z: fn(z, np.full(z.shape, 0.5)))
    assert np.all(out.grad == 0)
    assert np.all(grads["head.weight"] == 0) and np.all(grads["head.bias"] == 0)
    assert not any(k.startswith("decoder.") for k in grads)


def test_classify_grad_rejects_non_finite_loss(rng):
    p = ViTParams(SMALL, 0)
    bad = lambda z: LossOutput(float("nan"), np.zeros_like(z))
    with pytest.raises(NumericalError):
        classify_grad(p, rng.normal(size=(1, 1, 8, 8)), bad)


def test_non_finite_input_is_named():
    p = ViTParams(SMALL, 0)
    with pytest.raises(NumericalError) as e:
        classify_forward(p, np.full((1, 1, 8, 8), np.nan))
    assert e.value.name == "encoder.patch_embed"


def test_wrong_image_shape():
    with pytest.raises(ShapeError):
        classify_forward(ViTParams(SMALL, 0), np.zeros((1, 1, 4, 4)))


def test_attention_rows_are_simplex(rng):
    p = ViTParams(SMALL, 2)
    for a in encoder_attention(p, rng.normal(size=(2, 1, 8, 8))):
        assert a.shape == (2, 2, 16, 16)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
        assert np.all(a >= 0)


def test_layer_scales():
    p = ViTParams(SMALL, 0)
    assert set(layer_lr_scales(p, 1.0).values()) == {1.0}
    s = layer_lr_scales(p, 0.5)
    assert s["encoder.patch_embed.weight"] == 0.125
    assert s["encoder.blocks.0.attn.qkv.weight"] == 0.25
    assert s["encoder.blocks.1.fc1.weight"] == 0.5
    assert s["head.weight"] == 1.0 and s["encoder.norm.weight"] == 1.0
    assert layer_id("decoder.pred.weight", 2) == 3


def test_checkpoint_round_trip(tmp_path, rng):
    p = ViTParams(SMALL, 4)
    with torch.no_grad():
        p.head.weight.normal_()
    save_checkpoint(p, tmp_path / "m.ckpt")
    q = load_checkpoint(tmp_path / "m.ckpt")
    assert q.config == SMALL
    for (n, a), (m, b) in zip(p.named_parameters(), q.named_parameters()):
        assert n == m and torch.equal(a, b)
    x = rng.normal(size=(2, 1, 8, 8))
    assert np.array_equal(classify_forward(p, x)[0], classify_forward(q, x)[0])


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(ViTParams(SMALL, 0), tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad").write_bytes(b"NOTACKPT!" + blob[9:])
    with pytest.raises(FormatError) as e:
        load_checkpoint(tmp_path / "bad")
    assert e.value.offset == 0
    (tmp_path / "short").write_bytes(blob[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "long").write_bytes(blob + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "long")
