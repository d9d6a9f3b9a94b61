import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phenobench.aggregate import mean_aggregate, tile_image
from phenobench.baselines import ImagePlanes
from phenobench.errors import ValidationError
from phenobench.toy_mae import (LionState, MaeConfig, MaeModel, MaskPlan, backward, embed,
                                forward, init_model, lion_step, load_checkpoint, masked_mse,
                                patchify, sample_mask, save_checkpoint, synthetic_images, train,
                                unpatchify, zero_model)


def small_instance(seed, patch=2, channels=2, side=4, latent=3):
    rng = np.random.default_rng(seed)
    cfg = MaeConfig(patch_side=patch, channels=channels, latent_dim=latent, init_scale=0.5)
    model = init_model(cfg, rng)
    model = model.replace({**model.params(),
                           "encoder_bias": rng.normal(0, 0.5, latent),
                           "decoder_bias": rng.normal(0, 0.5, cfg.token_dim),
                           "mask_token": rng.normal(0, 0.5, latent)})
    tokens = patchify(rng.uniform(0, 1, (channels, side, side)), patch)
    plan = sample_mask(len(tokens), 0.75, rng)
    return model, tokens, plan


# --- patches and masks ---------------------------------------------------------

def test_patchify_shapes():
    assert patchify(np.zeros((6, 32, 32)), 8).shape == (16, 384)
    assert patchify(np.zeros((6, 256, 256)), 16).shape == (256, 1536)
    with pytest.raises(ValidationError):
        patchify(np.zeros((6, 30, 32)), 8)


def test_patch_layout_row_major_channel_major():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
    t = patchify(img, 2)
    np.testing.assert_array_equal(t[1], np.concatenate([img[0, 0:2, 2:4].ravel(),
                                                        img[1, 0:2, 2:4].ravel()]))
    np.testing.assert_array_equal(t[2, :4], img[0, 2:4, 0:2].ravel())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 2**31))
def test_patchify_round_trip(c, gh, gw, p, seed):
    img = np.random.default_rng(seed).uniform(0, 10, (c, gh * p, gw * p))
    back = unpatchify(patchify(img, p), c, gh * p, gw * p, p)
    assert back.tobytes() == img.tobytes()


def test_mask_counts_and_determinism():
    assert len(sample_mask(16, 0.75, 0).masked) == 12
    assert len(sample_mask(16, 0.75, 0).visible) == 4
    assert len(sample_mask(16, 0.25, 0).masked) == 4
    a, b = sample_mask(16, 0.75, 3), sample_mask(16, 0.75, 3)
    assert a.masked.tolist() == b.masked.tolist()
    with pytest.raises(ValidationError):
        sample_mask(2, 0.1, 0)  # rounds to zero masked tokens
    with pytest.raises(ValidationError):
        MaeConfig(mask_ratio=1.0)


# --- forward and loss ------------------------------------------------------------

def test_zero_model_predicts_zero(rng):
    cfg = MaeConfig(patch_side=2, channels=1, latent_dim=4)
    toks = patchify(rng.uniform(0, 1, (1, 4, 4)), 2)
    plan = sample_mask(4, 0.75, 0)
    assert np.all(forward(zero_model(cfg), toks, plan) == 0)


def test_one_by_one_identity_model():
    cfg = MaeConfig(patch_side=1, channels=1, latent_dim=1)
    one = np.ones((1, 1))
    model = MaeModel(cfg, one, np.zeros(1), one, np.zeros(1), np.zeros(1))
    toks = np.array([[0.7], [3.0]])
    plan = MaskPlan(2, visible=[0], masked=[1])
    assert forward(model, toks, plan).tolist() == [[0.7]]


def test_forward_ignores_masked_inputs():
    model, toks, plan = small_instance(1)
    other = toks.copy()
    other[plan.masked] = np.random.default_rng(9).uniform(-5, 5, other[plan.masked].shape)
    assert forward(model, toks, plan).tobytes() == forward(model, other, plan).tobytes()


def test_masked_mse_examples():
    plan = MaskPlan(2, visible=[0], masked=[1])
    target = np.array([[9.0, 9.0], [1.0, 2.0]])
    assert masked_mse(target[1:], target, plan) == 0.0
    assert masked_mse(np.array([[2.0, 1.0]]), target, plan) == 1.0
    full = np.array([[-4.0, 100.0], [2.0, 1.0]])
    assert masked_mse(full, target, plan) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_masked_mse_ignores_visible_positions(seed):
    rng = np.random.default_rng(seed)
    n, d = 8, 3
    plan = sample_mask(n, 0.75, rng)
    pred, target = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    p2, t2 = pred.copy(), target.copy()
    p2[plan.visible] = rng.normal(size=(len(plan.visible), d)) * 1e6
    t2[plan.visible] = rng.normal(size=(len(plan.visible), d)) * 1e6
    assert masked_mse(p2, t2, plan) == masked_mse(pred, target, plan)


# --- gradients ---------------------------------------------------------------------

def test_zero_residual_gives_zero_gradients():
    model, toks, plan = small_instance(2)
    pred = forward(model, toks, plan)[0]
    toks = toks.copy()
    toks[plan.masked] = pred  # targets equal the shared prediction
    loss, grads = backward(model, toks, plan)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def numeric_grad(model, toks, plan, name, h=1e-3):
    params = model.params()
    theta = params[name]
    out = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        vals = []
        for s in (+h, -h):
            t = theta.copy()
            t[idx] += s
            m = model.replace({**params, name: t})
            vals.append(masked_mse(forward(m, toks, plan), toks, plan))
        out[idx] = (vals[0] - vals[1]) / (2 * h)
    return out


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    model, toks, plan = small_instance(seed)
    _, grads = backward(model, toks, plan)
    for name, g in grads.items():
        assert max_rel_error(g, numeric_grad(model, toks, plan, name)) < 1e-4, name


def test_decoder_gradient_doubles_with_residual():
    model, toks, plan = small_instance(5)
    pred = forward(model, toks, plan)[0]
    # Shift masked targets so the residual doubles: target' = pred - 2 (pred - target).
    toks2 = toks.copy()
    toks2[plan.masked] = pred - 2 * (pred - toks[plan.masked])
    g1 = backward(model, toks, plan)[1]["decoder_weights"]
    g2 = backward(model, toks2, plan)[1]["decoder_weights"]
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-10, atol=1e-14)


# --- Lion -------------------------------------------------------------------------

def test_lion_hand_example():
    p = {"w": np.array([1.0])}
    new, st_ = lion_step(p, {"w": np.array([1.0])}, LionState.zeros_like(p), lr=0.1,
                         beta1=0.9, beta2=0.95, weight_decay=0.05)
    assert np.isclose(new["w"][0], 0.895, rtol=0, atol=1e-15)
    assert np.isclose(st_.momentum["w"][0], 0.05, rtol=0, atol=1e-15)
    assert p["w"][0] == 1.0  # input untouched


def test_lion_zero_gradient_is_a_no_op():
    p = {"w": np.array([0.3, -2.0])}
    new, s = lion_step(p, {"w": np.zeros(2)}, LionState.zeros_like(p), lr=0.1)
    assert new["w"].tolist() == p["w"].tolist() and s.momentum["w"].tolist() == [0, 0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1e-3, 0.1, 0.5]))
def test_lion_step_bounded_by_lr(seed, lr):
    rng = np.random.default_rng(seed)
    p = {"w": rng.normal(size=20)}
    state = LionState({"w": rng.normal(size=20)})
    new, _ = lion_step(p, {"w": rng.normal(size=20)}, state, lr=lr, weight_decay=0.0)
    assert np.all(np.abs(new["w"] - p["w"]) <= lr)


# --- training, embedding, checkpoints --------------------------------------------------

def test_zero_images_have_zero_loss():
    cfg = MaeConfig(patch_side=4, channels=2, latent_dim=4)
    imgs = [np.zeros((2, 8, 8))] * 3
    _, curve = train(cfg, imgs, steps=5)
    assert curve.validation[0] == 0.0 and all(v == 0.0 for v in curve.validation)


def test_training_is_deterministic_and_learns():
    cfg = MaeConfig(patch_side=8, channels=6, latent_dim=16, eval_every=20)
    imgs = synthetic_images(8, seed=1)
    val = synthetic_images(4, seed=2)
    m1, c1 = train(cfg, imgs, 60, val)
    m2, c2 = train(cfg, imgs, 60, val)
    assert c1.to_csv() == c2.to_csv()
    assert all(m1.params()[k].tobytes() == m2.params()[k].tobytes() for k in m1.params())
    assert c1.steps == [0, 20, 40, 60]
    assert c1.validation[-1] < c1.validation[0]


def test_embed_examples(rng):
    cfg = MaeConfig(patch_side=2, channels=3, latent_dim=5)
    img = rng.uniform(0, 1, (3, 4, 4))
    assert np.all(embed(zero_model(cfg), img) == 0)
    model = init_model(cfg, rng)
    # Permute channel planes and the matching encoder columns.
    perm = np.array([2, 0, 1])
    cols = np.arange(cfg.token_dim).reshape(3, 4)[perm].ravel()
    pm = model.replace({**model.params(), "encoder_weights": model.encoder_weights[:, cols]})
    np.testing.assert_allclose(embed(pm, img[perm]), embed(model, img), rtol=0, atol=1e-15)
    with pytest.raises(ValidationError):
        embed(model, rng.uniform(0, 1, (2, 4, 4)))


def test_crop_to_well_pipeline(rng):
    cfg = MaeConfig(patch_side=2, channels=2, latent_dim=3)
    model = init_model(cfg, rng)
    well = rng.uniform(0, 1, (2, 8, 8))
    crops = tile_image(well, 4)
    well_emb = mean_aggregate(np.stack([embed(model, c) for c in crops]))
    # A linear encoder commutes with averaging: the well embedding equals the whole-image embedding.
    np.testing.assert_allclose(well_emb, embed(model, well), atol=1e-14)


def test_checkpoint_round_trip(tmp_path, rng):
    model = init_model(MaeConfig(patch_side=2, channels=1, latent_dim=2, seed=4), rng)
    p = tmp_path / "ckpt.bin"
    save_checkpoint(model, p)
    back = load_checkpoint(p)
    assert back.config == model.config
    assert all(back.params()[k].tobytes() == model.params()[k].tobytes() for k in model.params())
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(ValidationError):
        load_checkpoint(p)


def test_synthetic_images_are_valid():
    imgs = synthetic_images(3, side=16, channels=2, patch_side=4)
    assert all(isinstance(i, ImagePlanes) and i.pixels.shape == (2, 16, 16) for i in imgs)
