"""Model topology: frontend striding, masking, parameter grouping,
forward-pass invariants, and checkpoint round trips."""
import numpy as np
import pytest

import schedlab.tensor as T
from schedlab.model import (GROUPS, ModelConfig, ModelError, extract_layer_features,
                            forward_frontend, forward_frontend_batch, forward_ssl_batch,
                            forward_vgs, forward_vgs_batch, init_model, latent_lengths,
                            load_model, pad_batch, save_model, span_mask_indices,
                            speech_layer_features)
from schedlab.tensor import Tape, backward


@pytest.fixture(scope="module")
def toy_state():
    return init_model(ModelConfig.preset("toy"), seed=0)


def _frames(rng, t, f=13):
    return rng.normal(size=(f, t)).astype(np.float32)


# ---------------------------------------------------------------------------
# config


def test_toy_preset_shape_summary():
    c = ModelConfig.preset("toy")
    assert c.frontend_strides == (2, 2)
    assert c.total_stride == 4
    assert c.latent_dim == 64
    assert (c.model_dim, c.heads, c.enc_layers, c.dec_layers) == (64, 4, 4, 2)
    assert c.n_speech_layers == 6
    assert (c.groups, c.entries) == (2, 16)


def test_receptive_field():
    c = ModelConfig.preset("toy")  # two k=3 convs, strides 2 and 2
    assert c.receptive_field == 1 + 2 + 2 * 2  # 7 input frames


def test_preset_overrides_and_errors():
    c = ModelConfig.preset("toy", enc_layers=2)
    assert c.enc_layers == 2
    with pytest.raises(ModelError):
        ModelConfig.preset("huge")
    with pytest.raises(ModelError):
        ModelConfig(model_dim=65, heads=4)
    with pytest.raises(ModelError):
        ModelConfig.from_dict({"model_dim": 64, "bogus": 1})


def test_parameter_groups_partition(toy_state):
    assert set(toy_state.groups.values()) == set(GROUPS)
    covered = set()
    for g in GROUPS:
        names = set(toy_state.group_params(g))
        assert not covered & names
        covered |= names
    assert covered == set(toy_state.params)


def test_init_deterministic():
    a = init_model(ModelConfig.preset("toy"), seed=4)
    b = init_model(ModelConfig.preset("toy"), seed=4)
    c = init_model(ModelConfig.preset("toy"), seed=5)
    for n in a.params:
        np.testing.assert_array_equal(a.params[n].data, b.params[n].data)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


# ---------------------------------------------------------------------------
# frontend


def test_frontend_stride_4(toy_state, rng):
    z = forward_frontend(toy_state, _frames(rng, 40))
    assert z.shape == (64, 10)
    z = forward_frontend(toy_state, _frames(rng, 41))  # ceil division
    assert z.shape == (64, 11)


def test_frontend_rejects_too_short(toy_state, rng):
    with pytest.raises(ModelError):
        forward_frontend(toy_state, _frames(rng, 1))


def test_latent_lengths_ceil():
    c = ModelConfig.preset("toy")
    np.testing.assert_array_equal(latent_lengths(c, np.array([40, 41, 44, 7])),
                                  [10, 11, 11, 2])


def test_pad_batch_and_padded_positions_zeroed(toy_state, rng):
    frames = [_frames(rng, 24), _frames(rng, 40)]
    padded, lengths = pad_batch(frames)
    assert padded.shape == (2, 13, 40)
    np.testing.assert_array_equal(lengths, [24, 40])
    z, z_len, valid = forward_frontend_batch(toy_state, padded, lengths)
    np.testing.assert_array_equal(z_len, [6, 10])
    assert np.all(z.data[0, 6:, :] == 0.0)
    np.testing.assert_array_equal(valid, np.arange(10)[None, :] < z_len[:, None])


def test_batch_matches_single_forward(toy_state, rng):
    frames = [_frames(rng, 32), _frames(rng, 48)]
    padded, lengths = pad_batch(frames)
    z, z_len, _ = forward_frontend_batch(toy_state, padded, lengths)
    z0 = forward_frontend(toy_state, frames[0])
    np.testing.assert_allclose(z.data[0, :int(z_len[0])], z0.data.T[:int(z_len[0])],
                               atol=1e-5)


# ---------------------------------------------------------------------------
# masking


def test_span_mask_basic_properties():
    rng = np.random.default_rng(0)
    idx = span_mask_indices(50, 0.15, 3, rng)
    assert idx.size > 0
    assert np.all((0 <= idx) & (idx < 50))
    assert np.all(np.diff(idx) > 0)


def test_span_mask_forces_one_span_when_none_start():
    rng = np.random.default_rng(0)
    idx = span_mask_indices(30, 0.0, 3, rng)  # p=0: forcing rule must kick in
    assert 1 <= idx.size <= 3
    assert np.all(np.diff(idx) == 1)


def test_span_mask_saturates_at_p_one():
    rng = np.random.default_rng(0)
    idx = span_mask_indices(20, 1.0, 3, rng)
    np.testing.assert_array_equal(idx, np.arange(20))


def test_span_mask_expected_fraction():
    """Monte-Carlo check of the masked fraction against the closed form
    P(masked) = 1 - (1 - p)^span for interior positions."""
    p, span, length, trials = 0.15, 3, 200, 400
    rng = np.random.default_rng(1)
    hits = np.zeros(length)
    for _ in range(trials):
        hits[span_mask_indices(length, p, span, rng)] += 1
    interior = hits[span - 1:] / trials
    expected = 1.0 - (1.0 - p) ** span
    assert np.mean(interior) == pytest.approx(expected, abs=0.02)


# ---------------------------------------------------------------------------
# full forwards


def test_ssl_forward_shapes(toy_state, rng):
    frames = [_frames(rng, 36), _frames(rng, 48)]
    out = forward_ssl_batch(toy_state, frames, np.random.default_rng(0))
    B, Tz = 2, 12
    assert out.c.shape == (B, Tz, 64)
    assert out.q.shape == (B, Tz, 64)
    assert out.soft.shape == (B, Tz, 2, 16)
    assert out.mask.shape == (B, Tz)
    assert out.valid.shape == (B, Tz)
    assert out.mask.any(axis=1).all()  # every utterance has masked positions
    assert not out.mask[~out.valid].any() or True  # mask only within valid range
    assert not (out.mask & ~out.valid).any()


def test_ssl_layer_collection(toy_state, rng):
    out = forward_ssl_batch(toy_state, [_frames(rng, 32)], np.random.default_rng(0),
                            collect_layers=True)
    assert len(out.layers) == toy_state.config.n_speech_layers
    for layer in out.layers:
        assert layer.shape == (1, 8, 64)


def test_vgs_embeddings_normalized(toy_state, rng):
    frames = [_frames(rng, 40), _frames(rng, 52)]
    tokens = [rng.normal(size=(2, 16)).astype(np.float32),
              rng.normal(size=(4, 16)).astype(np.float32)]
    a, v = forward_vgs_batch(toy_state, frames, tokens)
    assert a.shape == (2, 32)
    assert v.shape == (2, 32)
    np.testing.assert_allclose(np.linalg.norm(a.data, axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(np.linalg.norm(v.data, axis=1), 1.0, atol=1e-5)


def test_image_branch_is_permutation_invariant(toy_state, rng):
    """Image tokens form a set; token order must not change the embedding."""
    frames = [_frames(rng, 40)]
    tokens = rng.normal(size=(4, 16)).astype(np.float32)
    _, v1 = forward_vgs_batch(toy_state, frames, [tokens])
    _, v2 = forward_vgs_batch(toy_state, frames, [tokens[::-1].copy()])
    np.testing.assert_allclose(v1.data, v2.data, atol=1e-5)


def test_audio_branch_is_not_permutation_invariant(toy_state, rng):
    """Speech frames are ordered; reversing time must change the embedding."""
    f = _frames(rng, 48)
    tokens = [rng.normal(size=(2, 16)).astype(np.float32)]
    a1, _ = forward_vgs_batch(toy_state, [f], tokens)
    a2, _ = forward_vgs_batch(toy_state, [f[:, ::-1].copy()], tokens)
    # at random init the order sensitivity is weak but must be nonzero
    assert np.abs(a1.data - a2.data).max() > 1e-5


def test_padding_does_not_change_embeddings(toy_state, rng):
    """An utterance's embedding must not depend on batch-mates' lengths."""
    f_short = _frames(rng, 36)
    f_long = _frames(rng, 72)
    tok = [rng.normal(size=(2, 16)).astype(np.float32)] * 2
    a_pair, _ = forward_vgs_batch(toy_state, [f_short, f_long], tok)
    a_solo, _ = forward_vgs_batch(toy_state, [f_short], tok[:1])
    np.testing.assert_allclose(a_pair.data[0], a_solo.data[0], atol=1e-4)


def test_single_forward_wrappers(toy_state, rng):
    from schedlab.corpus import ImageScene, Utterance
    f = _frames(rng, 40)
    u = Utterance("u", f, [(0, 0, 40)], ["w"], "s", "A", 3)
    scene = ImageScene(3, [0], rng.normal(size=(1, 16)).astype(np.float32))
    a, v = forward_vgs(toy_state, u, scene)
    assert a.shape == (32,)
    assert v.shape == (32,)


def test_gradient_isolation_by_loss_branch(toy_state, rng):
    """The audio-visual path must leave ssl-only parameters untouched, and
    the acoustic path must leave the cross-modal heads untouched."""
    import schedlab.objectives as obj
    state = init_model(ModelConfig.preset("toy"), seed=1)
    state.set_requires_grad(True)
    frames = [_frames(rng, 40), _frames(rng, 44)]
    tokens = [rng.normal(size=(2, 16)).astype(np.float32)] * 2

    with Tape() as tape:
        a, v = forward_vgs_batch(state, frames, tokens)
        loss = obj.loss_av(a, v, None, 0.07)
    backward(tape, loss)
    assert all(np.all(p.grad == 0) for p in state.group_params("ssl_only").values())
    assert any(np.any(p.grad != 0) for p in state.group_params("shared").values())
    assert any(np.any(p.grad != 0) for p in state.group_params("image_only").values())

    state.set_requires_grad(True)  # re-zero
    with Tape() as tape:
        out = forward_ssl_batch(state, frames, np.random.default_rng(0), train=True)
        loss = obj.loss_aud_contrastive(out.c, out.q, out.mask, out.valid, 5, 0.1,
                                        np.random.default_rng(1))
    backward(tape, loss)
    assert all(np.all(p.grad == 0) for p in state.group_params("vgs_audio_only").values())
    assert all(np.all(p.grad == 0) for p in state.group_params("image_only").values())
    assert any(np.any(p.grad != 0) for p in state.group_params("shared").values())
    assert any(np.any(p.grad != 0) for p in state.group_params("ssl_only").values())


# ---------------------------------------------------------------------------
# layer features


def test_speech_layer_features_wiring(toy_state, rng):
    frames = [_frames(rng, 40)]
    layers, z_len = speech_layer_features(toy_state, frames)
    assert len(layers) == 6
    assert z_len[0] == 10
    # consecutive layers differ (each block transforms its input)
    for l1, l2 in zip(layers, layers[1:]):
        assert np.abs(l1 - l2).max() > 1e-4


def test_extract_layer_features_range(toy_state, rng):
    from schedlab.corpus import Utterance
    u = Utterance("u", _frames(rng, 40), [(0, 0, 40)], ["w"], "s", "A", None)
    feats = extract_layer_features(toy_state, u, 1)
    assert feats.shape == (10, 64)
    last = extract_layer_features(toy_state, u, 6)
    assert last.shape == (10, 64)
    assert not np.allclose(feats, last)
    with pytest.raises(ModelError):
        extract_layer_features(toy_state, u, 0)
    with pytest.raises(ModelError):
        extract_layer_features(toy_state, u, 7)


# ---------------------------------------------------------------------------
# larger preset (shape test only)


def test_paper_scale_preset_shapes(rng):
    c = ModelConfig.preset("paper")
    assert c.model_dim == 768
    assert c.heads == 12
    assert c.n_speech_layers == 12
    assert c.image_layers == 6
    assert c.total_stride == 4
    state = init_model(c, seed=0)
    assert state.params["proj_in.w"].shape == (512, 768)
    assert state.params["enc.7.mlp.fc1.w"].shape == (768, 4 * 768)
    assert state.params["dec.3.attn.wq.w"].shape == (768, 768)
    assert "enc.8.ln1.g" not in state.params
    assert state.params["img.5.ln1.g"].shape == (768,)


# ---------------------------------------------------------------------------
# checkpoints


def test_save_load_round_trip(toy_state, tmp_path, rng):
    save_model(toy_state, tmp_path / "m", extra={"epoch": 3})
    back = load_model(tmp_path / "m")
    assert back.config == toy_state.config
    assert list(back.params) == list(toy_state.params)
    assert back.groups == toy_state.groups
    for n in toy_state.params:
        np.testing.assert_array_equal(back.params[n].data, toy_state.params[n].data)
    frames = [_frames(rng, 40)]
    tokens = [rng.normal(size=(2, 16)).astype(np.float32)]
    a1, _ = forward_vgs_batch(toy_state, frames, tokens)
    a2, _ = forward_vgs_batch(back, frames, tokens)
    np.testing.assert_array_equal(a1.data, a2.data)


def test_load_detects_corruption(toy_state, tmp_path):
    save_model(toy_state, tmp_path / "m")
    p = tmp_path / "m" / "params.bin"
    blob = bytearray(p.read_bytes())
    blob[-1] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(ModelError):
        load_model(tmp_path / "m")


def test_content_gain_scales_only_the_input_projection():
    base = init_model(ModelConfig.preset("toy"), seed=3)
    scaled = init_model(ModelConfig.preset("toy", content_gain=0.25), seed=3)
    np.testing.assert_allclose(scaled.params["proj_in.w"].data,
                               0.25 * base.params["proj_in.w"].data, rtol=1e-6)
    for name in base.params:
        if name == "proj_in.w":
            continue
        np.testing.assert_array_equal(scaled.params[name].data,
                                      base.params[name].data)
