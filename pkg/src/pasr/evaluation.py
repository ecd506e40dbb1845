"""Scoring and analysis: Levenshtein WER/CER, the two evaluation protocols,
relative-delta report tables, the post-hoc language probe, and phoneme
embedding export with a PCA projection.

CER is computed over grapheme tokens with word separators removed; WER over
separator-delimited words.  Both can exceed 100%.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model

logger = logging.getLogger(__name__)


class ProtocolViolation(ValueError):
    """The evaluation protocol contradicts how adaptation was run."""


def edit_distance(ref, hyp):
    """Minimal unit-cost alignment counts (S, I, D).

    Ties resolve toward substitutions: among minimal-cost alignments the one
    with the fewest insert+delete moves is chosen, which makes the counts
    unique and symmetric (swapping ref/hyp exchanges I and D exactly).
    """
    n, m = len(ref), len(hyp)
    scale = n + m + 1  # lexicographic (cost, indel) packed into one int
    key = np.zeros((n + 1, m + 1), dtype=np.int64)
    key[:, 0] = np.arange(n + 1) * (scale + 1)
    key[0, :] = np.arange(m + 1) * (scale + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = key[i - 1, j - 1] + (scale if ref[i - 1] != hyp[j - 1] else 0)
            key[i, j] = min(sub, key[i - 1, j] + scale + 1, key[i, j - 1] + scale + 1)
    cost, indel = divmod(int(key[n, m]), scale)
    delta = m - n
    ins = (indel + delta) // 2
    dele = (indel - delta) // 2
    return cost - indel, ins, dele


def _words(tokens, separators):
    if not tokens:
        return []
    words, cur = [], []
    for t in tokens:
        if t in separators:
            words.append(tuple(cur))
            cur = []
        else:
            cur.append(t)
    words.append(tuple(cur))
    return words


@dataclass
class Metrics:
    word_s: int = 0
    word_i: int = 0
    word_d: int = 0
    word_n: int = 0
    char_s: int = 0
    char_i: int = 0
    char_d: int = 0
    char_n: int = 0
    rows: list = field(default_factory=list)

    def add(self, utterance_id, ref_tokens, hyp_tokens, separators):
        ref_w = _words(ref_tokens, separators)
        hyp_w = _words(hyp_tokens, separators)
        s, i, d = edit_distance(ref_w, hyp_w)
        self.word_s += s
        self.word_i += i
        self.word_d += d
        self.word_n += len(ref_w)
        ref_c = [t for t in ref_tokens if t not in separators]
        hyp_c = [t for t in hyp_tokens if t not in separators]
        cs, ci, cd = edit_distance(ref_c, hyp_c)
        self.char_s += cs
        self.char_i += ci
        self.char_d += cd
        self.char_n += len(ref_c)
        self.rows.append((utterance_id, " ".join(ref_tokens), " ".join(hyp_tokens),
                          s, i, d))

    @property
    def wer(self):
        return 100.0 * (self.word_s + self.word_i + self.word_d) / max(1, self.word_n)

    @property
    def cer(self):
        return 100.0 * (self.char_s + self.char_i + self.char_d) / max(1, self.char_n)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["utterance_id", "reference", "hypothesis", "S", "I", "D"])
            for row in self.rows:
                w.writerow(row)


def evaluate(checkpoint_path, corpus, protocol, target_language, adapted_readings,
             held_out_reading=None, split="test", beam=4, out_csv=None,
             decode_fn=None):
    """Score a checkpoint under one of the two adaptation protocols.

    reading_adaptation scores the requested split of the adapted readings;
    language_adaptation scores the entire held-out reading, which must not
    appear in the adaptation readings.
    """
    params, mcfg = model.load_checkpoint(checkpoint_path)
    adapted_readings = sorted(adapted_readings)
    if protocol == "reading_adaptation":
        metas = corpus.utterances(languages={target_language},
                                  readings=set(adapted_readings), split=split)
    elif protocol == "language_adaptation":
        if held_out_reading is None:
            raise ProtocolViolation("language_adaptation needs a held-out reading id")
        if held_out_reading in adapted_readings:
            raise ProtocolViolation(
                f"held-out reading {held_out_reading} appears in the adaptation data")
        metas = corpus.utterances(languages={target_language},
                                  readings={held_out_reading})
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    if not metas:
        raise ValueError("no utterances to evaluate")

    separators = corpus.separator_ids()
    tok = corpus.grapheme_vocab
    metrics = Metrics()
    for m in metas:
        ref_ids = corpus.grapheme_ids(m)
        if decode_fn is not None:
            hyp_ids = decode_fn(m)
        else:
            hyp_ids = model.beam_decode(params, mcfg, corpus.features(m.utterance_id),
                                        beam).ids
        metrics.add(m.utterance_id, [tok[t] for t in ref_ids],
                    [tok[t] for t in hyp_ids], {tok[t] for t in separators})
    if out_csv:
        metrics.write_csv(out_csv)
    return metrics


@dataclass
class RelativeDelta:
    per_language: dict
    mean: float
    excluded: list


def relative_delta(wer_a, wer_b):
    """Per-language 100*(b-a)/a and the unweighted mean; a=0 rows are excluded."""
    if set(wer_a) != set(wer_b):
        raise ValueError("conditions cover different language sets")
    per, excluded = {}, []
    for lang in sorted(wer_a):
        if wer_a[lang] == 0:
            excluded.append(lang)
            continue
        per[lang] = 100.0 * (wer_b[lang] - wer_a[lang]) / wer_a[lang]
    mean = sum(per.values()) / len(per) if per else math.nan
    if excluded:
        logger.info("relative delta: excluded %s (zero baseline WER)", excluded)
    return RelativeDelta(per, mean, excluded)


def format_report(results, baseline, metric_name="WER"):
    """Tab-separated table of conditions per language with Avg. rel. delta rows."""
    conditions = list(results)
    langs = sorted(results[baseline])
    lines = ["\t".join(["language"] + conditions)]
    for lang in langs:
        lines.append("\t".join([lang] + [f"{results[c][lang]:.2f}" for c in conditions]))
    deltas = []
    for c in conditions:
        if c == baseline:
            deltas.append("-")
        else:
            deltas.append(f"{relative_delta(results[baseline], results[c]).mean:+.1f}%")
    lines.append("\t".join([f"avg rel Δ {metric_name} vs {baseline}"] + deltas))
    return "\n".join(lines) + "\n"


def probe_fit(feats, labels, num_classes, steps=200, lr=0.1):
    """Fit a zero-initialized affine softmax probe with full-batch GD."""
    x = np.asarray(feats, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, h = x.shape
    w = np.zeros((h, num_classes))
    b = np.zeros(num_classes)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        w -= lr * (x.T @ err)
        b -= lr * err.sum(axis=0)
    return w, b


def probe_accuracy(feats, labels, w, b):
    pred = (np.asarray(feats) @ w + b).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def _utterance_means(params, mcfg, corpus, metas):
    """Time-means of the penultimate encoder states, one row per utterance."""
    rows = []
    for m in metas:
        g = ad.Graph()
        bound = params.bind(g)
        enc = model.encode(bound, mcfg, corpus.features(m.utterance_id), g,
                           upto_layer=mcfg.encoder_layers - 2)
        rows.append(enc.penultimate.value.mean(axis=0))
    return np.stack(rows)


def probe_language_accuracy(checkpoint_path, corpus, languages=None, steps=200, lr=0.1):
    """Freeze the encoder, fit a fresh affine probe on train-split utterance
    means, and report dev-split accuracy."""
    params, mcfg = model.load_checkpoint(checkpoint_path)
    languages = sorted(languages if languages is not None else corpus.language_ids())
    if len(languages) < 2:
        raise ValueError("the language probe needs at least two languages")
    index = {lang: i for i, lang in enumerate(languages)}

    def data(split):
        metas = corpus.utterances(languages=set(languages), split=split)
        x = _utterance_means(params, mcfg, corpus, metas)
        y = np.array([index[m.language_id] for m in metas])
        return x, y

    x_train, y_train = data("train")
    x_dev, y_dev = data("dev")
    w, b = probe_fit(x_train, y_train, len(languages), steps, lr)
    return probe_accuracy(x_dev, y_dev, w, b)


def export_embeddings(checkpoint_path, corpus, phonemes=None, languages=None):
    """(language, phoneme, penultimate state) at each phoneme's mid frame.

    The mid input frame of each gold-aligned interval maps to encoder index
    floor(mid / subsample_factor).
    """
    params, mcfg = model.load_checkpoint(checkpoint_path)
    languages = sorted(languages if languages is not None else corpus.language_ids())
    wanted = set(phonemes) if phonemes is not None else None
    rows = []
    seen = {lang: set() for lang in languages}
    for m in corpus.utterances(languages=set(languages)):
        g = ad.Graph()
        bound = params.bind(g)
        enc = model.encode(bound, mcfg, corpus.features(m.utterance_id), g,
                           upto_layer=mcfg.encoder_layers - 2)
        states = enc.penultimate.value
        for ph, start, end in corpus.alignment(m.utterance_id):
            if wanted is not None and ph not in wanted:
                continue
            idx = min(((start + end) // 2) // mcfg.subsample_factor, enc.length - 1)
            rows.append((m.language_id, ph, states[idx].copy()))
            seen[m.language_id].add(ph)
    if wanted is not None:
        for lang in languages:
            missing = wanted - seen[lang]
            if missing:
                logger.info("language %s has no occurrences of phonemes %s; skipped",
                            lang, sorted(missing))
    return rows


def write_embeddings_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if rows:
            w.writerow(["language", "phoneme"] + [f"h{i}" for i in range(len(rows[0][2]))])
        for lang, ph, vec in rows:
            w.writerow([lang, ph] + [repr(float(v)) for v in vec])


def pca_2d(points):
    """Centered top-2 principal component projection with a fixed sign convention."""
    x = np.asarray(points, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(1, x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    comps = vecs[:, np.argsort(vals)[::-1][:2]].T
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T, comps


def cluster_separation(rows):
    """Mean inter-language same-phoneme distance over mean intra-language
    cross-phoneme distance, in the full embedding space."""
    groups = {}
    for lang, ph, vec in rows:
        groups.setdefault((lang, ph), []).append(vec)
    groups = {k: np.stack(v) for k, v in groups.items()}
    langs = sorted({k[0] for k in groups})
    phs = sorted({k[1] for k in groups})

    def mean_cross(a, b):
        d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
        return d.mean(), d.size

    inter_total, inter_n = 0.0, 0
    for ph in phs:
        present = [lang for lang in langs if (lang, ph) in groups]
        for i in range(len(present)):
            for j in range(i + 1, len(present)):
                m, n = mean_cross(groups[(present[i], ph)], groups[(present[j], ph)])
                inter_total += m * n
                inter_n += n
    intra_total, intra_n = 0.0, 0
    for lang in langs:
        present = [ph for ph in phs if (lang, ph) in groups]
        for i in range(len(present)):
            for j in range(i + 1, len(present)):
                m, n = mean_cross(groups[(lang, present[i])], groups[(lang, present[j])])
                intra_total += m * n
                intra_n += n
    if inter_n == 0 or intra_n == 0:
        raise ValueError("need at least two languages and two phonemes")
    return (inter_total / inter_n) / (intra_total / intra_n)
