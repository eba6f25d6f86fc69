import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from knolab import autodiff as ad
from knolab.autodiff import ShapeError
from knolab.kno import ConfigError
from knolab.spectral import SpectralError, low_pass
from knolab.vit import (ViTKNO, ViTKNOConfig, lasso_penalty, merge_heads, split_heads, vit_count_parameters,
                        vit_loss)

TOY = dict(height=8, width=8, patch_h=2, patch_w=2, in_chans=3, out_chans=3, embed_dim=8, head_num=2, depth=2,
           modes=2, seed=1)


def toy(**kw):
    cfg = dict(TOY)
    cfg.update(kw)
    return ViTKNO(ViTKNOConfig(**cfg))


def leaky(x, slope=0.01):
    return np.where(x > 0, x, slope * x)


def test_config_validation():
    with pytest.raises(ConfigError, match="height"):
        ViTKNOConfig(height=60)
    with pytest.raises(ConfigError, match="width"):
        ViTKNOConfig(width=30)
    with pytest.raises(ConfigError):
        ViTKNOConfig(head_num=3)
    with pytest.raises(ConfigError):
        ViTKNOConfig(depth=0)
    with pytest.raises(SpectralError):
        ViTKNOConfig(modes=8, clip_modes=False)


# -- patch embedding ------------------------------------------------------

def test_token_grid_default():
    cfg = ViTKNOConfig()
    assert cfg.token_grid == (8, 4)
    out = ViTKNO(cfg).patch_embed(np.zeros((1, 64, 32, 3)))
    assert out.shape == (1, 8, 4, 64)


def test_zero_input_zero_tokens():
    assert np.all(toy().patch_embed(np.zeros((2, 8, 8, 3))).data == 0)


def test_patch_embed_matches_per_patch_oracle():
    model = toy()
    x = np.random.default_rng(0).standard_normal((2, 8, 8, 3))
    w = model.params["embed.weight"].data
    b = model.params["embed.bias"].data
    b[:] = np.random.default_rng(1).standard_normal(b.shape)
    out = model.patch_embed(x).data
    for i in range(4):
        for j in range(4):
            patch = x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2, :]
            ref = np.einsum("bpqc,pqcl->bl", patch, w) + b
            np.testing.assert_allclose(out[:, i, j], ref, atol=1e-13)


def test_indivisible_resolution_names_axis():
    with pytest.raises(ShapeError, match="width"):
        toy().patch_embed(np.zeros((1, 8, 7, 3)))
    with pytest.raises(ShapeError, match="height"):
        toy().patch_embed(np.zeros((1, 9, 8, 3)))


# -- heads ----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), k=st.sampled_from([1, 2, 3, 6]))
def test_merge_split_lossless(seed, k):
    tokens = np.random.default_rng(seed).standard_normal((2, 3, 4, 12))
    parts = split_heads(tokens, k)
    assert len(parts) == k and all(p.shape[-1] == 12 // k for p in parts)
    assert merge_heads(parts).data.tobytes() == tokens.tobytes()


def test_split_rejects_indivisible():
    with pytest.raises(ShapeError):
        split_heads(np.zeros((1, 2, 2, 6)), 4)


# -- spectral token block -------------------------------------------------

def test_identity_block_full_band():
    model = toy(modes=3, spectral_activation="identity")
    for name, p in model.params.items():
        if ".block" in name:
            p.data[:] = np.eye(p.shape[0])
    tokens = np.random.default_rng(2).standard_normal((2, 4, 4, 8))
    np.testing.assert_allclose(model.koopman_token_block(tokens).data, tokens, atol=1e-10)


def test_zero_tokens_block():
    assert np.all(toy().koopman_token_block(np.zeros((1, 4, 4, 8))).data == 0)


def test_token_block_staged_oracle():
    model = toy(depth=1)
    p = {k: v.data for k, v in model.params.items()}
    tokens = np.random.default_rng(3).standard_normal((2, 4, 4, 8))
    rows = np.array([0, 1, 3])  # |k| < 2 on the full axis
    out = []
    for h in range(2):
        z = tokens[..., 4 * h:4 * h + 4]
        c = np.fft.rfft2(z, axes=(1, 2))[:, rows][:, :, :2]
        s = c @ p[f"head{h}.block0.w"].T
        s = leaky(s.real) + 1j * leaky(s.imag)
        s = s @ p[f"head{h}.block0.koopman"].T
        full = np.zeros((2, 4, 3, 4), dtype=complex)
        full[:, rows[:, None], np.arange(2)[None, :]] = s
        out.append(np.fft.irfft2(full, s=(4, 4), axes=(1, 2)))
    np.testing.assert_allclose(model.koopman_token_block(tokens).data, np.concatenate(out, -1), atol=1e-13)


def test_token_block_out_of_band_energy():
    model = ViTKNO(ViTKNOConfig(height=32, width=32, patch_h=2, patch_w=2, in_chans=1, out_chans=1, embed_dim=4,
                                head_num=2, modes=3, spectral_activation="identity"))
    for name, p in model.params.items():
        if ".block" in name:
            p.data[:] = np.eye(p.shape[0])
    tokens = np.random.default_rng(4).standard_normal((1, 16, 16, 4))
    out = model.koopman_token_block(tokens).data
    assert np.sum((out - low_pass(out, 3, axes=(1, 2))) ** 2) < 1e-10


def test_modes_clipped_to_token_nyquist():
    cfg = ViTKNOConfig(modes=32)
    assert cfg.token_modes == (5, 3)
    ViTKNO(cfg).forward(np.zeros((1, 64, 32, 3)))


# -- high frequency, mixer and decoder -----------------------------------

def test_combine_high_freq():
    model = toy(high_freq=False)
    rng = np.random.default_rng(5)
    lo, hi = rng.standard_normal((2, 1, 4, 4, 8))
    assert np.all(model.high_freq_tokens(lo).data == 0)
    np.testing.assert_array_equal(ViTKNO.combine_high_freq(lo, model.high_freq_tokens(lo)).data, lo)
    assert np.all(ViTKNO.combine_high_freq(np.zeros_like(lo), np.zeros_like(lo)).data == 0)
    np.testing.assert_array_equal(ViTKNO.combine_high_freq(lo, hi).data, lo + hi)
    with pytest.raises(ShapeError):
        ViTKNO.combine_high_freq(lo, hi[:, :2])


def test_mixer_zero_weights():
    model = toy()
    for name in ("mix.w1", "mix.b1", "mix.w2", "mix.b2"):
        model.params[name].data[:] = 0
    out = model.channel_mixer(np.random.default_rng(6).standard_normal((1, 4, 4, 8)))
    assert out.shape == (1, 4, 4, 8) and np.all(out.data == 0)


def test_mixer_identity_layer_matches_scalar_gelu():
    model = toy()
    p = model.params
    p["mix.w1"].data[:] = np.eye(8)
    p["mix.w2"].data[:] = np.eye(8)
    p["mix.b1"].data[:] = 0
    p["mix.b2"].data[:] = 0
    t = np.random.default_rng(7).standard_normal((2, 4, 4, 8))
    ref = np.vectorize(lambda v: v * 0.5 * (1 + erf(v / np.sqrt(2))))(t)
    np.testing.assert_allclose(model.channel_mixer(t).data, ref, atol=1e-14)


def test_decoder_zero_and_shape():
    for dec in ("mlp", "conv"):
        model = toy(decoder=dec, out_chans=2)
        for name, prm in model.params.items():
            if name.startswith("decoder") and "bias" in name:
                prm.data[:] = 0
        out = model.depatch_decode(np.zeros((2, 4, 4, 8)))
        assert out.shape == (2, 8, 8, 2) and np.all(out.data == 0)


def test_mlp_decoder_rearrangement_oracle():
    model = toy()
    t = np.random.default_rng(8).standard_normal((1, 4, 4, 8))
    w, b = model.params["decoder.weight"].data, model.params["decoder.bias"].data
    out = model.depatch_decode(t).data
    for i in range(4):
        for j in range(4):
            ref = (t[0, i, j] @ w + b).reshape(2, 2, 3)
            np.testing.assert_allclose(out[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2], ref, atol=1e-14)


# -- forward --------------------------------------------------------------

def test_identity_model_reproduces_input():
    model = ViTKNO.identity(ViTKNOConfig(height=8, width=12, patch_h=2, patch_w=2, in_chans=2, out_chans=2,
                                         embed_dim=8, head_num=2))
    x = np.random.default_rng(9).standard_normal((2, 8, 12, 2))
    np.testing.assert_allclose(model.predict(x), x, atol=1e-8)


def test_forward_shapes_and_iteration():
    model = toy()
    x = np.random.default_rng(10).standard_normal((2, 8, 8, 3))
    once = model.predict(x)
    assert once.shape == x.shape
    pred, window = model.step_window(x)
    pred2, _ = model.step_window(window)
    np.testing.assert_array_equal(pred2, model.predict(model.predict(x)))


# -- loss and lasso --------------------------------------------------------

def test_vit_loss_examples():
    rng = np.random.default_rng(11)
    t = rng.standard_normal((1, 4, 4, 2))
    assert float(vit_loss(t, t, t, t, 0.9, 0.1).data) == 0.0
    e = rng.standard_normal(t.shape)
    e /= np.linalg.norm(e, axis=(1, 2), keepdims=True)
    assert float(vit_loss(t + e, t, t + e, t, 0.9, 0.1).data) == pytest.approx(2.0)
    assert float(vit_loss(t + e, t, t + 3 * e, t, 1.0, 0.0).data) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        vit_loss(t, t, t, t, -0.1, 0.1)


def test_lasso():
    assert float(lasso_penalty(np.eye(3), 0.0).data) == 0.0
    assert float(lasso_penalty(np.eye(3), 1.0).data) == 3.0
    k = np.random.default_rng(12).standard_normal((4, 4))
    assert float(lasso_penalty(k, 0.3).data) == pytest.approx(0.3 * np.sum(np.abs(k)))
    with pytest.raises(ValueError):
        lasso_penalty(k, -1.0)


# -- parameter counts and gradients ---------------------------------------

def test_parameter_count_default():
    p, q, h, l, k, j = 8, 8, 3, 64, 4, 2
    dh = l // k
    expected = (p * q * h * l + l) + k * j * 2 * dh * dh + 9 * l * l + 2 * (l * l + l) + (l * p * q * h + p * q * h)
    cfg = ViTKNOConfig()
    assert vit_count_parameters(cfg) == expected == ViTKNO(cfg).num_parameters()


def test_parameter_count_scales_with_heads_and_depth():
    a = vit_count_parameters(ViTKNOConfig(head_num=2, depth=1))
    b = vit_count_parameters(ViTKNOConfig(head_num=2, depth=3))
    assert b - a == 2 * 2 * 2 * 32 * 32


@pytest.mark.parametrize("decoder", ["mlp", "conv"])
def test_full_loss_finite_differences(decoder):
    model = toy(decoder=decoder)
    rng = np.random.default_rng(13)
    x, y = rng.standard_normal((2, 2, 8, 8, 3))

    def fn():
        return ad.add(model.loss(x, y, 0.9, 0.1), lasso_penalty(model.koopman_matrices()[0], 0.01))

    assert ad.grad_check(fn, model.parameters()) < 1e-4
