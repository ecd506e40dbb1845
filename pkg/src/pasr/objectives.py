"""Training objectives and loops: loss interpolation, the adversarial weight
schedule, the two-phase per-batch update (recognition step, then a separate
adversarial step), 80/10/10 splits, and the pretrain/adapt drivers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation
from . import model
from .corpus import stable_seed

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "p", "lambda", "train_att", "train_ctc_g", "train_ctc_p",
               "train_adv", "dev_att", "dev_ctc_g", "dev_cer")


def lambda_schedule(p):
    """Adversarial weight 2/(1+exp(-10p)) - 1 over training progress p."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"training progress must be in [0, 1], got {p}")
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


@dataclass
class LossBreakdown:
    att_ce: float = math.nan
    grapheme_ctc: float = math.nan
    phoneme_ctc: float = math.nan
    adversarial_ce: float = math.nan
    lambda_: float = math.nan
    p: float = math.nan


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    seed: int = 0
    mode: str = "pretrain"
    use_phoneme: bool = True
    use_adversarial: bool = True
    lr: float = 3e-3
    clip_norm: float = 5.0
    beam_size: int = 1  # dev-set decoding during training
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in ("pretrain", "adapt"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "adapt":
            # the phoneme and adversarial objectives are dropped at adaptation
            self.use_phoneme = False
            self.use_adversarial = False


def interpolate_recognition_loss(breakdown, mode):
    """Equal-weight mean of the active recognition terms."""
    if mode == "pretrain" and not math.isnan(breakdown.phoneme_ctc):
        return (breakdown.att_ce + breakdown.grapheme_ctc + breakdown.phoneme_ctc) / 3.0
    return (breakdown.att_ce + breakdown.grapheme_ctc) / 2.0


def make_splits(ids_by_reading, seed):
    """Seeded 80/10/10 split per reading by count; remainders go to train."""
    out = {}
    for reading_id in sorted(ids_by_reading):
        ids = sorted(ids_by_reading[reading_id])
        rng = np.random.default_rng(stable_seed(seed, "split", reading_id))
        perm = [ids[i] for i in rng.permutation(len(ids))]
        n = len(ids)
        n_dev, n_test = n // 10, n // 10
        out[reading_id] = {
            "dev": sorted(perm[:n_dev]),
            "test": sorted(perm[n_dev:n_dev + n_test]),
            "train": sorted(perm[n_dev + n_test:]),
        }
    return out


@dataclass
class Example:
    utterance_id: str
    language_id: str
    num_frames: int
    features: np.ndarray
    graphemes: list
    phonemes: list
    ref_tokens: list


def _examples(corpus, metas):
    out = []
    for m in metas:
        out.append(Example(
            utterance_id=m.utterance_id, language_id=m.language_id,
            num_frames=m.num_frames, features=corpus.features(m.utterance_id),
            graphemes=corpus.grapheme_ids(m), phonemes=list(m.phonemes),
            ref_tokens=list(m.transcript)))
    return out


def _epoch_batches(examples, batch_size, seed, epoch):
    """Seeded shuffle, stable length bucketing, then shuffled batch order."""
    rng = np.random.default_rng(stable_seed(seed, "epoch", epoch))
    perm = rng.permutation(len(examples))
    shuffled = [examples[i] for i in perm]
    order = np.argsort([e.num_frames for e in shuffled], kind="stable")
    ordered = [shuffled[i] for i in order]
    batches = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _recognition_losses(bound, mcfg, example, use_phoneme, graph):
    """Per-utterance loss nodes, or None if a CTC term is infeasible."""
    enc = model.encode(bound, mcfg, example.features, graph)
    att = model.decoder_nll(bound, mcfg, enc, example.graphemes, graph)
    ctc_g = model.grapheme_ctc_loss(bound, enc, example.graphemes)
    if ctc_g is None:
        return None
    terms = [att, ctc_g]
    if use_phoneme:
        ctc_p = model.phoneme_ctc_loss(bound, mcfg, enc, example.phonemes)
        if ctc_p is None:
            return None
        terms.append(ctc_p)
    return terms


def recognition_step(params, mcfg, tcfg, batch, opt_rec):
    """Optimizer update on the interpolated recognition loss.

    Updates every tensor except the language classifier (and the phoneme head
    when its objective is off).  Returns (LossBreakdown, used examples).
    """
    graph = ad.Graph()
    bound = params.bind(graph)
    att_vals, ctc_g_vals, ctc_p_vals, utt_losses = [], [], [], []
    used = []
    for ex in batch:
        terms = _recognition_losses(bound, mcfg, ex, tcfg.use_phoneme, graph)
        if terms is None:
            logger.warning("skipping utterance %s (infeasible CTC)", ex.utterance_id)
            continue
        att_vals.append(float(terms[0].value))
        ctc_g_vals.append(float(terms[1].value))
        if tcfg.use_phoneme:
            ctc_p_vals.append(float(terms[2].value))
        utt_losses.append(ad.scale(_sum_nodes(terms), 1.0 / len(terms)))
        used.append(ex)
    breakdown = LossBreakdown(
        att_ce=_mean(att_vals), grapheme_ctc=_mean(ctc_g_vals),
        phoneme_ctc=_mean(ctc_p_vals) if tcfg.use_phoneme else math.nan)
    if used:
        grads = graph.backward(ad.mean_of(utt_losses))
        rec_names = params.recognition_names(tcfg.use_phoneme)
        opt_rec.step(params.tensors, {n: grads[n] for n in rec_names})
    return breakdown, used


def adversarial_step(params, mcfg, batch, lang_index, opt_adv, lam):
    """Separate update on the language-adversarial objective.

    A fresh forward pass feeds the classifier the reversed (lambda-scaled)
    utterance means; only encoder and classifier tensors are updated.
    """
    graph = ad.Graph()
    bound = params.bind(graph)
    ces = []
    for ex in batch:
        enc = model.encode(bound, mcfg, ex.features, graph,
                           upto_layer=mcfg.encoder_layers - 2)
        logits = model.language_logits(bound, enc, reverse_lambda=lam)
        ces.append(ad.neg(ad.pick(ad.log_softmax_rows(logits),
                                  lang_index[ex.language_id])))
    adv_loss = ad.mean_of(ces)
    grads = graph.backward(adv_loss)
    adv_names = params.adversarial_names()
    opt_adv.step(params.tensors, {n: grads[n] for n in adv_names})
    return float(adv_loss.value)


def pretrain_step(params, mcfg, tcfg, batch, lang_index, opt_rec, opt_adv, p):
    """One two-phase update; returns the batch LossBreakdown."""
    breakdown, used = recognition_step(params, mcfg, tcfg, batch, opt_rec)
    breakdown.p = p
    if tcfg.use_adversarial:
        breakdown.lambda_ = lambda_schedule(p)
        if used:
            breakdown.adversarial_ce = adversarial_step(
                params, mcfg, used, lang_index, opt_adv, breakdown.lambda_)
    return breakdown


def _sum_nodes(nodes):
    total = nodes[0]
    for n in nodes[1:]:
        total = ad.add(total, n)
    return total


def _mean(values):
    return sum(values) / len(values) if values else math.nan


def _fmt(x):
    return "" if (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _dev_metrics(params, mcfg, tcfg, dev_examples, separator_ids):
    """Forward-only dev losses and greedy-decode CER."""
    if not dev_examples:
        return math.nan, math.nan, math.nan
    att_vals, ctc_vals = [], []
    errs, ref_len = 0, 0
    for ex in dev_examples:
        graph = ad.Graph()
        bound = params.bind(graph)
        enc = model.encode(bound, mcfg, ex.features, graph)
        att_vals.append(float(model.decoder_nll(bound, mcfg, enc, ex.graphemes, graph).value))
        node = model.grapheme_ctc_loss(bound, enc, ex.graphemes)
        if node is not None:
            ctc_vals.append(float(node.value))
        hyp = model.beam_decode(params, mcfg, ex.features, tcfg.beam_size).ids
        s, i, d = evaluation.edit_distance(
            [t for t in ex.graphemes if t not in separator_ids],
            [t for t in hyp if t not in separator_ids])
        errs += s + i + d
        ref_len += len([t for t in ex.graphemes if t not in separator_ids])
    cer = 100.0 * errs / ref_len if ref_len else math.nan
    return _mean(att_vals), _mean(ctc_vals), cer


def _train_loop(params, mcfg, tcfg, train_examples, dev_examples, separator_ids,
                out_dir, lang_index=None, frozen_prefixes=()):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    opt_rec = ad.Adam(lr=tcfg.lr, clip_norm=tcfg.clip_norm)
    opt_adv = ad.Adam(lr=tcfg.lr, clip_norm=tcfg.clip_norm)
    lang_index = lang_index or {}

    n_batches = -(-len(train_examples) // tcfg.batch_size)
    total_planned = max(1, tcfg.epochs * n_batches)
    update_index = 0
    rows = []
    best = (math.inf, -1, params.copy())
    for epoch in range(1, tcfg.epochs + 1):
        epoch_bd = []
        for batch in _epoch_batches(train_examples, tcfg.batch_size, tcfg.seed, epoch):
            p = update_index / total_planned
            bd = pretrain_step(params, mcfg, tcfg, batch, lang_index,
                               opt_rec, opt_adv, p)
            update_index += 1
            epoch_bd.append(bd)
        dev_att, dev_ctc, dev_cer = _dev_metrics(params, mcfg, tcfg, dev_examples,
                                                 separator_ids)
        p_now = update_index / total_planned
        row = {
            "epoch": epoch, "p": p_now,
            "lambda": lambda_schedule(p_now) if tcfg.use_adversarial else math.nan,
            "train_att": _mean([b.att_ce for b in epoch_bd if not math.isnan(b.att_ce)]),
            "train_ctc_g": _mean([b.grapheme_ctc for b in epoch_bd
                                  if not math.isnan(b.grapheme_ctc)]),
            "train_ctc_p": _mean([b.phoneme_ctc for b in epoch_bd
                                  if not math.isnan(b.phoneme_ctc)]),
            "train_adv": _mean([b.adversarial_ce for b in epoch_bd
                                if not math.isnan(b.adversarial_ce)]),
            "dev_att": dev_att, "dev_ctc_g": dev_ctc, "dev_cer": dev_cer,
        }
        rows.append(row)
        dev_score = (dev_att + dev_ctc) / 2.0 if not math.isnan(dev_att) else math.inf
        if dev_score < best[0]:
            best = (dev_score, epoch, params.copy())
        if tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            model.save_checkpoint(out_dir / f"checkpoint.epoch{epoch}.pasr", params, mcfg)
        logger.info("epoch %d: train_att=%.4f dev_cer=%s", epoch,
                    row["train_att"] if not math.isnan(row["train_att"]) else -1,
                    f"{dev_cer:.2f}" if not math.isnan(dev_cer) else "n/a")

    best_path = out_dir / "checkpoint.best.pasr"
    final_path = out_dir / "checkpoint.final.pasr"
    model.save_checkpoint(best_path, best[2], mcfg)
    model.save_checkpoint(final_path, params, mcfg)
    log_path = out_dir / "training_log.csv"
    with open(log_path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join([str(row["epoch"])] +
                              [_fmt(row[c]) for c in LOG_COLUMNS[1:]]) + "\n")
    return {"best_checkpoint": str(best_path), "final_checkpoint": str(final_path),
            "log_path": str(log_path), "rows": rows, "best_epoch": best[1]}


def pretrain(corpus, languages, tcfg, mcfg, out_dir, readings=None, limit=None):
    """Train a seed model on the train splits of `languages`.

    `readings` optionally restricts to specific readings and `limit` caps the
    number of training utterances (by sorted id), for data-scaling runs.
    """
    if not languages:
        raise ValueError("pretraining needs at least one language")
    if tcfg.mode != "pretrain":
        raise ValueError("pretrain() requires mode='pretrain'")
    languages = sorted(languages)
    readings = set(readings) if readings is not None else None
    metas = corpus.utterances(languages=set(languages), readings=readings,
                              split="train")
    if limit is not None:
        metas = sorted(metas, key=lambda m: m.utterance_id)[:limit]
    if not metas:
        raise ValueError("no training utterances for the requested languages")
    train_ex = _examples(corpus, metas)
    dev_ex = _examples(corpus, corpus.utterances(languages=set(languages),
                                                 readings=readings, split="dev"))
    params = model.init_params(mcfg, tcfg.seed)
    lang_index = {lang: i for i, lang in enumerate(languages)}
    info = _train_loop(params, mcfg, tcfg, train_ex, dev_ex,
                       corpus.separator_ids(), out_dir, lang_index)
    info["languages"] = languages
    summary = {"languages": languages, "epochs": tcfg.epochs, "seed": tcfg.seed,
               "use_phoneme": tcfg.use_phoneme, "use_adversarial": tcfg.use_adversarial,
               "best_epoch": info["best_epoch"]}
    (Path(out_dir) / "training_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return info


def _check_compatible(params, mcfg, corpus):
    if mcfg.grapheme_vocab_size != len(corpus.grapheme_vocab):
        raise ValueError(
            f"checkpoint tensor dec.embed has {mcfg.grapheme_vocab_size} rows but the "
            f"corpus grapheme vocabulary has {len(corpus.grapheme_vocab)} entries")
    if mcfg.phoneme_vocab_size != corpus.phoneme_count:
        raise ValueError(
            f"checkpoint tensor ctc_p.w expects {mcfg.phoneme_vocab_size} phonemes but "
            f"the corpus has {corpus.phoneme_count}")
    if mcfg.feature_dim != corpus.feature_dim:
        raise ValueError(
            f"checkpoint tensor enc.l0.f.wz expects feature dim {mcfg.feature_dim} but "
            f"the corpus has {corpus.feature_dim}")


def adapt(checkpoint_path, corpus, target_language, readings, tcfg, out_dir,
          limit=None):
    """Fine-tune a pretrained checkpoint on the target language.

    The whole encoder/decoder/attention/grapheme-head stack is loaded; the
    phoneme head and the language classifier are frozen and unused.
    """
    params, mcfg = model.load_checkpoint(checkpoint_path)
    _check_compatible(params, mcfg, corpus)
    if tcfg.mode != "adapt":
        raise ValueError("adapt() requires mode='adapt'")
    readings = sorted(readings)
    metas = corpus.utterances(languages={target_language}, readings=set(readings),
                              split="train")
    if limit is not None:
        metas = sorted(metas, key=lambda m: m.utterance_id)[:limit]
    if not metas and tcfg.epochs > 0:
        raise ValueError("no adaptation utterances selected")
    train_ex = _examples(corpus, metas)
    dev_ex = _examples(corpus, corpus.utterances(languages={target_language},
                                                 readings=set(readings), split="dev"))
    info = _train_loop(params, mcfg, tcfg, train_ex, dev_ex,
                       corpus.separator_ids(), out_dir)
    info["target_language"] = target_language
    info["readings"] = readings
    (Path(out_dir) / "adaptation_summary.json").write_text(json.dumps(
        {"target_language": target_language, "readings": readings,
         "seed_checkpoint": str(checkpoint_path), "epochs": tcfg.epochs,
         "seed": tcfg.seed}, indent=2, sort_keys=True) + "\n")
    return info
