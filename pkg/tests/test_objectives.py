import csv
import math
from pathlib import Path

import numpy as np
import pytest

from pasr import autodiff as ad
from pasr import model, objectives, synthdata
from pasr.corpus import Corpus
from pasr.objectives import LossBreakdown, TrainConfig


def test_lambda_schedule_endpoints():
    assert objectives.lambda_schedule(0.0) == pytest.approx(0.0, abs=1e-12)
    assert objectives.lambda_schedule(0.5) == pytest.approx(0.9866143, abs=1e-7)
    assert objectives.lambda_schedule(1.0) == pytest.approx(0.9999092, abs=1e-7)


def test_lambda_schedule_monotone_on_grid():
    vals = [objectives.lambda_schedule(p) for p in np.linspace(0, 1, 101)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v < 1.0 for v in vals)


def test_lambda_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        objectives.lambda_schedule(-0.01)
    with pytest.raises(ValueError):
        objectives.lambda_schedule(1.01)


def test_interpolation_examples():
    bd = LossBreakdown(att_ce=0.9, grapheme_ctc=0.6, phoneme_ctc=0.3)
    assert objectives.interpolate_recognition_loss(bd, "pretrain") == pytest.approx(0.6)
    bd2 = LossBreakdown(att_ce=0.9, grapheme_ctc=0.6)
    assert objectives.interpolate_recognition_loss(bd2, "adapt") == pytest.approx(0.75)
    bd3 = LossBreakdown(att_ce=0.0, grapheme_ctc=0.0, phoneme_ctc=0.0)
    assert objectives.interpolate_recognition_loss(bd3, "pretrain") == 0.0


def test_adapt_mode_forces_objectives_off():
    cfg = TrainConfig(mode="adapt", use_phoneme=True, use_adversarial=True)
    assert not cfg.use_phoneme and not cfg.use_adversarial


def test_make_splits_counts():
    ids = {"r": [f"u{i}" for i in range(10)]}
    parts = objectives.make_splits(ids, 3)["r"]
    assert (len(parts["train"]), len(parts["dev"]), len(parts["test"])) == (8, 1, 1)
    ids = {"r": [f"u{i}" for i in range(12)]}
    parts = objectives.make_splits(ids, 3)["r"]
    assert (len(parts["train"]), len(parts["dev"]), len(parts["test"])) == (10, 1, 1)


def test_make_splits_disjoint_exhaustive_deterministic():
    ids = {"a": [f"u{i}" for i in range(23)], "b": [f"v{i}" for i in range(10)]}
    one = objectives.make_splits(ids, 7)
    two = objectives.make_splits(ids, 7)
    assert one == two
    for reading, parts in one.items():
        union = set(parts["train"]) | set(parts["dev"]) | set(parts["test"])
        assert union == set(ids[reading])
        assert len(parts["train"]) + len(parts["dev"]) + len(parts["test"]) == len(ids[reading])
    assert objectives.make_splits(ids, 8) != one


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toycorpus")
    scenario = {
        "name": "toy",
        "phones": {"count": 16, "duration_min": 8, "duration_max": 11},
        "groups": [
            {"name": "A", "languages": 2, "script": "A", "inventory_size": 6,
             "overlap": 0.9, "geo_center": [0.0, 0.0]},
        ],
        "readings_per_language": 2,
        "utterances_per_reading": 12,
        "noise_sigma": 0.15,
        "seq_len_min": 2, "seq_len_max": 4,
    }
    synthdata.generate_corpus(scenario, 13, root)
    return Corpus(root)


def desk(corp, langs=2):
    cfg = model.desk_config(len(corp.grapheme_vocab), corp.phoneme_count, langs)
    cfg.hidden_size = 12
    cfg.attention_dim = 12
    cfg.decoder_embed_size = 8
    return cfg


def batch_of(corp, n=4):
    metas = corp.utterances(split="train")[:n]
    return objectives._examples(corp, metas)


def test_pretrain_step_lambda_zero_keeps_encoder(toy_corpus):
    corp = toy_corpus
    mcfg = desk(corp)
    tcfg = TrainConfig(seed=0, mode="pretrain")
    params = model.init_params(mcfg, 0)
    lang_index = {lang: i for i, lang in enumerate(corp.language_ids())}
    before = {n: params[n].copy() for n in params.names()}
    bd = objectives.pretrain_step(params, mcfg, tcfg, batch_of(corp), lang_index,
                                  ad.Adam(), ad.Adam(), p=0.0)
    assert bd.lambda_ == 0.0
    # recognition step moved encoder tensors; the adversarial step contributed
    # nothing to them (lambda=0) but did train the classifier
    assert any(not np.array_equal(params[n], before[n])
               for n in params.encoder_names())
    assert any(not np.array_equal(params[n], before[n])
               for n in params.classifier_names())


def test_pretrain_step_classifier_only_changed_by_phase2(toy_corpus):
    """Replay phase 1 alone with the same seeds: classifier must be untouched
    by it, and decoder/CTC-heads must be bitwise equal to the full two-phase
    run (phase 2 never touches them)."""
    corp = toy_corpus
    mcfg = desk(corp)
    lang_index = {lang: i for i, lang in enumerate(corp.language_ids())}
    batch = batch_of(corp)

    full = model.init_params(mcfg, 3)
    opt_rec, opt_adv = ad.Adam(), ad.Adam()
    # two steps: the first trains the classifier away from zero, after which
    # the reversed gradient reaches the encoder
    objectives.pretrain_step(full, mcfg, TrainConfig(seed=0, mode="pretrain"),
                             batch, lang_index, opt_rec, opt_adv, p=0.3)
    objectives.pretrain_step(full, mcfg, TrainConfig(seed=0, mode="pretrain"),
                             batch, lang_index, opt_rec, opt_adv, p=0.3)

    rec_only = model.init_params(mcfg, 3)
    opt_rec2, opt_adv2 = ad.Adam(), ad.Adam()
    cfg_no_adv = TrainConfig(seed=0, mode="pretrain", use_adversarial=False)
    objectives.pretrain_step(rec_only, mcfg, cfg_no_adv, batch, lang_index,
                             opt_rec2, opt_adv2, p=0.3)
    objectives.pretrain_step(rec_only, mcfg, cfg_no_adv, batch, lang_index,
                             opt_rec2, opt_adv2, p=0.3)

    init = model.init_params(mcfg, 3)
    for name in full.classifier_names():
        assert np.array_equal(rec_only[name], init[name])
    for name in full.names():
        if name.startswith(("dec.", "att.", "out.", "ctc_g.", "ctc_p.")):
            assert np.array_equal(full[name], rec_only[name]), name
    # the second adversarial step (nonzero classifier, p>0) moves the encoder
    assert any(not np.array_equal(full[n], rec_only[n]) for n in full.encoder_names())


def test_single_language_batch_adv_ce_is_log_l(toy_corpus):
    corp = toy_corpus
    mcfg = desk(corp)
    params = model.init_params(mcfg, 1)  # classifier zero-initialized
    lang_index = {lang: i for i, lang in enumerate(corp.language_ids())}
    metas = [m for m in corp.utterances(split="train")
             if m.language_id == "A0"][:3]
    batch = objectives._examples(corp, metas)
    bd = objectives.pretrain_step(params, mcfg, TrainConfig(seed=0, mode="pretrain"),
                                  batch, lang_index, ad.Adam(), ad.Adam(), p=0.0)
    assert bd.adversarial_ce == pytest.approx(math.log(mcfg.num_pretrain_languages),
                                              abs=1e-9)


def test_adapt_grads_zero_for_frozen_tensors(toy_corpus):
    corp = toy_corpus
    mcfg = desk(corp)
    params = model.init_params(mcfg, 5)
    batch = batch_of(corp, 3)
    graph = ad.Graph()
    bound = params.bind(graph)
    losses = []
    for ex in batch:
        terms = objectives._recognition_losses(bound, mcfg, ex, False, graph)
        losses.append(ad.scale(objectives._sum_nodes(terms), 1.0 / len(terms)))
    grads = graph.backward(ad.mean_of(losses))
    for name in params.phoneme_head_names() + params.classifier_names():
        assert np.all(grads[name] == 0.0)


def run_pretrain(corp, out, epochs=2, seed=4, **kw):
    mcfg = desk(corp)
    tcfg = TrainConfig(epochs=epochs, seed=seed, mode="pretrain", lr=5e-3, **kw)
    return objectives.pretrain(corp, corp.language_ids(), tcfg, mcfg, out), mcfg


def test_pretrain_zero_epochs_returns_initial_params(toy_corpus, tmp_path):
    corp = toy_corpus
    info, mcfg = run_pretrain(corp, tmp_path / "zero", epochs=0, seed=9)
    loaded, _ = model.load_checkpoint(info["best_checkpoint"])
    init = model.init_params(mcfg, 9)
    for name in init.names():
        assert np.array_equal(loaded[name], init[name])
    assert info["rows"] == []


def test_pretrain_deterministic_logs_and_checkpoints(toy_corpus, tmp_path):
    corp = toy_corpus
    a, _ = run_pretrain(corp, tmp_path / "a")
    b, _ = run_pretrain(corp, tmp_path / "b")
    assert Path(a["log_path"]).read_bytes() == Path(b["log_path"]).read_bytes()
    assert (model.checkpoint_digest(a["best_checkpoint"])
            == model.checkpoint_digest(b["best_checkpoint"]))


def test_pretrain_empty_language_list_rejected(toy_corpus, tmp_path):
    with pytest.raises(ValueError):
        objectives.pretrain(toy_corpus, [], TrainConfig(), desk(toy_corpus), tmp_path)


def test_training_loss_decreases_on_toy(tmp_path):
    scenario = {
        "name": "learn",
        "phones": {"count": 12, "duration_min": 8, "duration_max": 11},
        "groups": [{"name": "A", "languages": 1, "script": "A", "inventory_size": 5,
                    "overlap": 1.0, "geo_center": [0.0, 0.0]}],
        "readings_per_language": 1,
        "utterances_per_reading": 50,
        "noise_sigma": 0.1,
        "seq_len_min": 2, "seq_len_max": 4,
    }
    synthdata.generate_corpus(scenario, 19, tmp_path / "learncorp")
    corp = Corpus(tmp_path / "learncorp")
    mcfg = model.desk_config(len(corp.grapheme_vocab), corp.phoneme_count, 1)
    deltas = []
    for seed in (1, 2, 3):
        tcfg = TrainConfig(epochs=15, seed=seed, mode="pretrain", lr=1e-2,
                           use_phoneme=False, use_adversarial=False)
        info = objectives.pretrain(corp, ["A0"], tcfg, mcfg, tmp_path / f"run{seed}")
        first = (info["rows"][0]["train_att"] + info["rows"][0]["train_ctc_g"]) / 2
        last = (info["rows"][-1]["train_att"] + info["rows"][-1]["train_ctc_g"]) / 2
        deltas.append(last - first)
    assert np.median(deltas) < 0


def test_adapt_zero_epochs_keeps_seed_params(toy_corpus, tmp_path):
    corp = toy_corpus
    info, mcfg = run_pretrain(corp, tmp_path / "seedrun")
    tcfg = TrainConfig(epochs=0, seed=1, mode="adapt")
    ad_info = objectives.adapt(info["best_checkpoint"], corp, "A0",
                               corp.readings_of("A0"), tcfg, tmp_path / "ad0")
    seed_params, _ = model.load_checkpoint(info["best_checkpoint"])
    out_params, _ = model.load_checkpoint(ad_info["best_checkpoint"])
    for name in seed_params.names():
        assert np.array_equal(seed_params[name], out_params[name])


def test_adapt_freezes_phoneme_head_and_classifier(toy_corpus, tmp_path):
    corp = toy_corpus
    info, mcfg = run_pretrain(corp, tmp_path / "seedrun2", epochs=1, seed=8)
    seed_params, _ = model.load_checkpoint(info["best_checkpoint"])
    tcfg = TrainConfig(epochs=2, seed=2, mode="adapt", lr=5e-3)
    ad_info = objectives.adapt(info["best_checkpoint"], corp, "A1",
                               corp.readings_of("A1"), tcfg, tmp_path / "ad1")
    out_params, _ = model.load_checkpoint(ad_info["best_checkpoint"])
    for name in seed_params.phoneme_head_names() + seed_params.classifier_names():
        assert np.array_equal(seed_params[name], out_params[name]), name
    assert any(not np.array_equal(seed_params[n], out_params[n])
               for n in seed_params.encoder_names())


def test_adapt_rejects_vocab_mismatch(toy_corpus, tmp_path):
    corp = toy_corpus
    mcfg = desk(corp)
    mcfg.grapheme_vocab_size += 2
    params = model.init_params(mcfg, 0)
    path = tmp_path / "bad.pasr"
    model.save_checkpoint(path, params, mcfg)
    with pytest.raises(ValueError) as e:
        objectives.adapt(path, corp, "A0", corp.readings_of("A0"),
                         TrainConfig(epochs=1, mode="adapt"), tmp_path / "bad")
    assert "dec.embed" in str(e.value)


def test_log_csv_has_expected_columns(toy_corpus, tmp_path):
    corp = toy_corpus
    info, _ = run_pretrain(corp, tmp_path / "logrun", epochs=1)
    with open(info["log_path"]) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == objectives.LOG_COLUMNS
    assert len(rows) == 2
    epoch_row = dict(zip(rows[0], rows[1]))
    assert epoch_row["epoch"] == "1"
    assert float(epoch_row["train_att"]) > 0
    assert float(epoch_row["dev_cer"]) >= 0
