import math

import numpy as np
import pytest

from conftest import check_gradients

from pasr import autodiff as ad
from pasr import model
from pasr.model import EOS, SOS


def tiny_config(**over):
    kw = dict(feature_dim=4, encoder_layers=2, hidden_size=6, subsample_factor=4,
              decoder_embed_size=5, attention_dim=6, attention_conv_width=3,
              grapheme_vocab_size=6, phoneme_vocab_size=4, num_pretrain_languages=3)
    kw.update(over)
    return model.ModelConfig(**kw)


def make(config, seed=0):
    return model.init_params(config, seed)


def encode_once(params, config, feats, upto=None):
    g = ad.Graph()
    bound = params.bind(g)
    return model.encode(bound, config, feats, g, upto_layer=upto), bound, g


def test_config_requires_two_layers():
    with pytest.raises(ValueError):
        tiny_config(encoder_layers=1)


def test_subsample_length_law():
    cfg = tiny_config(feature_dim=2, hidden_size=2, decoder_embed_size=2,
                      attention_dim=2)
    params = make(cfg)
    rng = np.random.default_rng(0)
    for t in range(1, 101):
        feats = rng.normal(size=(t, 2))
        enc, _, _ = encode_once(params, cfg, feats)
        assert enc.length == -(-t // cfg.subsample_factor)
    # the worked cases
    assert model.stack_frames(np.zeros((103, 2)), 4).shape[0] == 26
    assert model.stack_frames(np.zeros((4, 2)), 4).shape[0] == 1


def test_empty_features_rejected():
    cfg = tiny_config()
    params = make(cfg)
    with pytest.raises(ValueError):
        encode_once(params, cfg, np.zeros((0, 4)))


def test_zero_params_zero_input_give_zero_states():
    cfg = tiny_config()
    params = make(cfg)
    for name in params.names():
        params[name][:] = 0.0
    enc, _, _ = encode_once(params, cfg, np.zeros((8, 4)))
    for layer in enc.layers:
        assert np.all(layer.value == 0.0)


def test_attend_uniform_when_scores_equal():
    g = ad.Graph()
    h = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    bound = {
        "att.conv": g.constant(np.zeros((2, 3))),
        "att.w_enc": g.constant(np.zeros((2, 4))),
        "att.w_dec": g.constant(np.zeros((2, 4))),
        "att.w_feat": g.constant(np.zeros((2, 4))),
        "att.v": g.constant(np.zeros(4)),
    }
    ctx, align = model.attend(bound, g.constant(np.zeros(2)),
                              g.constant(h), g.constant(np.full(3, 1 / 3)))
    assert np.allclose(align.value, 1 / 3)
    assert np.allclose(ctx.value, h.mean(axis=0))


def test_attend_saturated_score_is_one_hot():
    g = ad.Graph()
    h = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    bound = {
        "att.conv": g.constant(np.zeros((1, 3))),
        "att.w_enc": g.constant(np.array([[1.0], [0.0]])),
        "att.w_dec": g.constant(np.zeros((2, 1))),
        "att.w_feat": g.constant(np.zeros((1, 1))),
        "att.v": g.constant(np.array([1e4])),
    }
    ctx, align = model.attend(bound, g.constant(np.zeros(2)),
                              g.constant(h), g.constant(np.full(3, 1 / 3)))
    assert np.allclose(align.value, [0.0, 1.0, 0.0], atol=1e-12)
    assert np.allclose(ctx.value, [1.0, 0.0], atol=1e-12)


def test_attend_alignment_sums_to_one_on_random_inputs():
    cfg = tiny_config()
    params = make(cfg, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(100):
        g = ad.Graph()
        bound = params.bind(g)
        t = int(rng.integers(1, 9))
        h = g.constant(rng.normal(size=(t, cfg.hidden_size)))
        prev = rng.random(t)
        prev /= prev.sum()
        _, align = model.attend(bound, g.constant(rng.normal(size=cfg.hidden_size)),
                                h, g.constant(prev))
        assert abs(align.value.sum() - 1.0) <= 1e-12


def test_decoder_uniform_loss_is_log_vocab():
    cfg = tiny_config()
    params = make(cfg)
    for name in params.names():
        params[name][:] = 0.0
    g = ad.Graph()
    bound = params.bind(g)
    enc, _, _2 = encode_once(params, cfg, np.zeros((8, 4)))
    # rebuild on one graph
    g = ad.Graph()
    bound = params.bind(g)
    enc = model.encode(bound, cfg, np.zeros((8, 4)), g)
    loss = model.decoder_nll(bound, cfg, enc, [3, 4], g)
    assert float(loss.value) == pytest.approx(math.log(cfg.grapheme_vocab_size), abs=1e-12)


def _craft_echo_params(cfg):
    """Zero params except a decoder that deterministically emits grapheme 3
    after SOS and EOS after grapheme 3."""
    params = make(cfg)
    for name in params.names():
        params[name][:] = 0.0
    k = 50.0
    params["dec.embed"][SOS] = [k, 0.0, 0.0, 0.0, 0.0]
    params["dec.embed"][3] = [0.0, k, 0.0, 0.0, 0.0]
    params["dec.bz"][:] = -k  # gate ~ 0: state follows the candidate
    params["dec.wh"][0, 0] = 1.0
    params["dec.wh"][1, 1] = 1.0
    params["out.w"][0, 3] = 100.0
    params["out.w"][1, EOS] = 100.0
    return params


def test_decoder_probability_one_gives_zero_loss():
    cfg = tiny_config()
    params = _craft_echo_params(cfg)
    g = ad.Graph()
    bound = params.bind(g)
    enc = model.encode(bound, cfg, np.zeros((8, 4)), g)
    loss = model.decoder_nll(bound, cfg, enc, [3], g)
    assert float(loss.value) == pytest.approx(0.0, abs=1e-8)


def test_decoder_empty_target_scores_eos_only():
    cfg = tiny_config()
    params = make(cfg, seed=1)
    g = ad.Graph()
    bound = params.bind(g)
    enc = model.encode(bound, cfg, np.ones((5, 4)), g)
    loss = model.decoder_nll(bound, cfg, enc, [], g)
    assert loss.value.shape == ()
    assert float(loss.value) > 0.0


def test_ctc_heads_uniform_rows_match_oracle():
    from pasr import ctc
    cfg = tiny_config()
    params = make(cfg)
    for name in params.names():
        params[name][:] = 0.0
    feats = np.zeros((8, 4))  # T' = 2
    g = ad.Graph()
    bound = params.bind(g)
    enc = model.encode(bound, cfg, feats, g)
    loss = model.grapheme_ctc_loss(bound, enc, [3])
    v1 = cfg.grapheme_vocab_size + 1
    expect = -ctc.ctc_brute_force(np.full((2, v1), math.log(1 / v1)), [3])
    assert float(loss.value) == pytest.approx(expect, abs=1e-9)

    ploss = model.phoneme_ctc_loss(bound, cfg, enc, [0, 1])
    p1 = cfg.phoneme_vocab_size + 1
    expectp = -ctc.ctc_brute_force(np.full((2, p1), math.log(1 / p1)), [0, 1])
    assert float(ploss.value) == pytest.approx(expectp, abs=1e-9)


def test_phoneme_head_ignores_final_layer_params():
    cfg = tiny_config()
    params = make(cfg, seed=2)
    feats = np.random.default_rng(0).normal(size=(9, 4))

    def phoneme_loss():
        g = ad.Graph()
        bound = params.bind(g)
        enc = model.encode(bound, cfg, feats, g)
        return float(model.phoneme_ctc_loss(bound, cfg, enc, [0, 2]).value)

    before = phoneme_loss()
    last = cfg.encoder_layers - 1
    params[f"enc.l{last}.f.wz"] += 0.37
    params["ctc_g.w"] += 0.11
    assert phoneme_loss() == before


def test_language_logits_uniform_and_degenerate():
    cfg = tiny_config()
    params = make(cfg, seed=0)  # classifier is zero-initialized
    g = ad.Graph()
    bound = params.bind(g)
    enc = model.encode(bound, cfg, np.random.default_rng(1).normal(size=(6, 4)), g)
    logits = model.language_logits(bound, enc)
    post = ad.softmax_rows(logits)
    assert np.allclose(post.value, 1 / cfg.num_pretrain_languages)

    cfg1 = tiny_config(num_pretrain_languages=1)
    params1 = make(cfg1)
    g = ad.Graph()
    bound = params1.bind(g)
    enc = model.encode(bound, cfg1, np.ones((4, 4)), g)
    post = ad.softmax_rows(model.language_logits(bound, enc))
    assert np.array_equal(post.value, [1.0])


def test_language_logits_frame_permutation_invariant():
    cfg = tiny_config()
    params = make(cfg, seed=5)
    params["lang.w"][:] = np.random.default_rng(2).normal(size=params["lang.w"].shape)
    states = np.random.default_rng(3).normal(size=(7, cfg.hidden_size))

    def logits_of(order):
        g = ad.Graph()
        bound = params.bind(g)
        layers = [g.constant(states[order]), g.constant(states[order])]
        enc = model.EncoderStates(layers, 7, cfg.encoder_layers)
        return model.language_logits(bound, enc).value

    base = logits_of(np.arange(7))
    perm = logits_of(np.random.default_rng(4).permutation(7))
    assert np.allclose(base, perm, atol=1e-12)


def test_language_logits_time_mean_input():
    g = ad.Graph()
    bound = {"lang.w": g.constant(np.eye(2)), "lang.b": g.constant(np.zeros(2))}
    layers = [g.constant(np.array([[1.0, 3.0], [3.0, 5.0]])),
              g.constant(np.zeros((2, 2)))]
    enc = model.EncoderStates(layers, 2, 2)
    logits = model.language_logits(bound, enc)
    assert np.allclose(logits.value, [2.0, 4.0])


def test_beam_size_one_matches_crafted_argmax():
    cfg = tiny_config()
    params = _craft_echo_params(cfg)
    res = model.beam_decode(params, cfg, np.zeros((8, 4)), beam_size=1)
    assert res.ids == [3]
    assert not res.hit_cap


def test_beam_at_least_greedy_score():
    cfg = tiny_config()
    params = make(cfg, seed=7)
    feats = np.random.default_rng(8).normal(size=(10, 4))
    greedy = model.beam_decode(params, cfg, feats, beam_size=1)
    beam = model.beam_decode(params, cfg, feats, beam_size=4)
    assert beam.score >= greedy.score - 1e-12


def test_beam_decode_deterministic():
    cfg = tiny_config()
    params = make(cfg, seed=9)
    feats = np.random.default_rng(10).normal(size=(12, 4))
    a = model.beam_decode(params, cfg, feats, beam_size=3)
    b = model.beam_decode(params, cfg, feats, beam_size=3)
    assert a.ids == b.ids and a.score == b.score


def interpolated_loss(params, cfg, feats, target, phonemes):
    g = ad.Graph()
    bound = params.bind(g)
    enc = model.encode(bound, cfg, feats, g)
    att = model.decoder_nll(bound, cfg, enc, target, g)
    gr = model.grapheme_ctc_loss(bound, enc, target)
    ph = model.phoneme_ctc_loss(bound, cfg, enc, phonemes)
    return ad.scale(ad.add(ad.add(att, gr), ph), 1.0 / 3.0)


def test_interpolated_loss_gradients_match_fd():
    cfg = tiny_config()
    params = make(cfg, seed=11)
    rng = np.random.default_rng(12)
    feats = rng.normal(size=(9, 4))
    target, phonemes = [3, 4], [0, 1]

    mismatches = check_gradients(
        lambda p: interpolated_loss(p, cfg, feats, target, phonemes),
        params, coords_per_tensor=3, seed=13)
    assert not mismatches, mismatches[:5]


def test_adversarial_loss_gradients_match_fd():
    cfg = tiny_config()
    params = make(cfg, seed=14)
    params["lang.w"][:] = np.random.default_rng(15).normal(size=params["lang.w"].shape) * 0.1
    feats = np.random.default_rng(16).normal(size=(9, 4))

    def build(p):
        g = ad.Graph()
        bound = p.bind(g)
        enc = model.encode(bound, cfg, feats, g, upto_layer=cfg.encoder_layers - 2)
        logits = model.language_logits(bound, enc)
        return ad.neg(ad.pick(ad.log_softmax_rows(logits), 1))

    names = [n for n in params.names() if n.startswith(("enc.l0", "lang."))]
    mismatches = check_gradients(build, params, names=names, coords_per_tensor=3, seed=17)
    assert not mismatches, mismatches[:5]


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    params = make(cfg, seed=21)
    path = tmp_path / "ck.pasr"
    model.save_checkpoint(path, params, cfg)
    loaded, cfg2 = model.load_checkpoint(path)
    assert cfg2 == cfg
    assert loaded.names() == params.names()
    for name in params.names():
        assert np.array_equal(loaded[name], params[name])
    with open(path, "rb") as fh:
        assert fh.read(6) == b"PASR1\n"


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.pasr"
    path.write_bytes(b"NOPE!\nxxxx")
    with pytest.raises(ValueError):
        model.load_checkpoint(path)
