"""Deterministic generator of synthetic multilingual speech corpora.

Languages are grouped; a group shares a script and samples inventories with a
configurable overlap from a group base inventory.  Each phoneme has an F-dim
prototype vector; an utterance emits, per phoneme, ``round(duration * rate)``
frames of prototype + language shift + speaker shift + Gaussian noise.

Phoneme id 0 is a universal pause present in every inventory; word
segmentation inserts it between words and every script maps it to its
dedicated word-separator grapheme, so word boundaries have acoustic evidence
and alignments tile the utterance exactly.  Every utterance derives its own
RNG from (seed, language, reading, index) so parallel and serial generation
agree.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as corpus_io
from .corpus import LanguageMeta, UtteranceMeta, stable_seed
from .model import SPECIALS
from .objectives import make_splits

logger = logging.getLogger(__name__)

DEFAULT_SCENARIO = {
    "name": "scenario",
    "feature_dim": 8,
    "phones": {"count": 24, "duration_min": 6, "duration_max": 10,
               "margin": 1.5, "scale": 1.5},
    "groups": [],
    "group_shift_scale": 1.0,
    "lang_shift_scale": 0.3,
    "speaker_shift_scale": 0.3,
    "noise_sigma": 0.25,
    "readings_per_language": 2,
    "utterances_per_reading": 30,
    "seq_len_min": 3,
    "seq_len_max": 7,
    "rate_min": 0.9,
    "rate_max": 1.1,
    "word_min": 2,
    "word_max": 5,
    "phonotactic_concentration": 0.6,
    "share_phonotactics": False,
}

DEFAULT_GROUP = {
    "languages": 4,
    "inventory_size": 10,
    "overlap": 0.85,
    "geo_center": [0.0, 0.0],
    "geo_radius": 4.0,
    "quality": "good",
    "digraph_fraction": 0.0,
    # fraction of a language's inventory spelled with a non-canonical symbol;
    # the rest follows the script's shared phoneme -> symbol convention
    "orthography_noise": 0.25,
    # draw the group base inventory from earlier groups' bases instead of the
    # full phone set (e.g. a target language straddling two pretraining groups)
    "inventory_union_of": None,
}


def scenario_with_defaults(cfg):
    merged = dict(DEFAULT_SCENARIO)
    merged.update(cfg)
    merged["phones"] = {**DEFAULT_SCENARIO["phones"], **merged.get("phones", {})}
    groups = []
    for g in merged["groups"]:
        gg = dict(DEFAULT_GROUP)
        gg.update(g)
        groups.append(gg)
    merged["groups"] = groups
    validate_scenario(merged)
    return merged


def validate_scenario(cfg):
    if not cfg["groups"]:
        raise ValueError("scenario has no language groups")
    p = cfg["phones"]["count"]
    names = set()
    for g in cfg["groups"]:
        if "name" not in g or "script" not in g:
            raise ValueError("every group needs a name and a script")
        if g["name"] in names:
            raise ValueError(f"duplicate group name {g['name']!r}")
        names.add(g["name"])
        if g["inventory_size"] > p - 1:
            raise ValueError(f"group {g['name']}: inventory size {g['inventory_size']} "
                             f"exceeds universal phone count {p} minus the pause")
        if not (0.0 <= g["overlap"] <= 1.0):
            raise ValueError("overlap must be in [0, 1]")
        for donor in g.get("inventory_union_of") or []:
            if donor not in names:
                raise ValueError(f"group {g['name']}: inventory_union_of needs the "
                                 f"earlier group {donor!r}")
    if cfg["share_phonotactics"]:
        sizes = {g["inventory_size"] for g in cfg["groups"]}
        if len(sizes) != 1:
            raise ValueError("share_phonotactics needs equal inventory sizes")
    if cfg["seq_len_min"] < 1 or cfg["seq_len_max"] < cfg["seq_len_min"]:
        raise ValueError("bad phoneme sequence length range")
    if cfg["rate_min"] <= 0:
        raise ValueError("speaking rate must be positive")
    if cfg["noise_sigma"] < 0:
        raise ValueError("noise sigma must be >= 0")
    return cfg


@dataclass
class UniversalPhoneSet:
    prototypes: np.ndarray  # (P, F)
    durations: np.ndarray   # (P,) nominal frames

    @property
    def count(self):
        return self.prototypes.shape[0]


PAUSE = 0  # universal pause phoneme, present in every inventory


@dataclass
class SyntheticLanguage:
    language_id: str
    group: str
    script: str
    inventory: np.ndarray          # sorted phoneme ids, PAUSE first
    orthography: dict              # phoneme id -> tuple of grapheme tokens
    separator: str
    shift: np.ndarray              # (F,)
    lat: float
    lon: float
    quality: str
    transition: np.ndarray         # (n, n) Markov chain over content phonemes
    initial: np.ndarray            # (n,) stationary distribution
    phonology: np.ndarray = field(default=None)  # (P,) stationary embedded

    @property
    def content(self):
        return self.inventory[1:]  # everything but the pause


@dataclass
class SyntheticReading:
    reading_id: str
    language_id: str
    speaker_id: str
    speaker_shift: np.ndarray
    rate: float
    sigma: float
    utterance_count: int


def generate_phone_set(cfg, seed):
    p = cfg["phones"]
    rng = np.random.default_rng(stable_seed(seed, "phones"))
    protos = rng.normal(0.0, p["scale"], size=(p["count"], cfg["feature_dim"]))
    for _ in range(1000):
        d = np.linalg.norm(protos[:, None] - protos[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        bad = np.unique(np.argwhere(d < p["margin"])[:, 0])
        if bad.size == 0:
            break
        protos[bad] = rng.normal(0.0, p["scale"], size=(bad.size, cfg["feature_dim"]))
    else:
        raise RuntimeError("could not satisfy the prototype margin")
    durations = rng.integers(p["duration_min"], p["duration_max"] + 1, size=p["count"])
    return UniversalPhoneSet(protos, durations)


def _stationary(transition):
    pi = np.full(transition.shape[0], 1.0 / transition.shape[0])
    for _ in range(200):
        pi = pi @ transition
    return pi / pi.sum()


def _group_quality(group, index):
    q = group["quality"]
    return q[index % len(q)] if isinstance(q, list) else q


def generate_language_set(cfg, seed):
    """Languages for every group, deterministic in (scenario, seed)."""
    cfg = scenario_with_defaults(cfg)
    p_total = cfg["phones"]["count"]
    rng = np.random.default_rng(stable_seed(seed, "languages"))
    shared_chain = None
    if cfg["share_phonotactics"]:
        n = cfg["groups"][0]["inventory_size"]
        conc = np.full(n, cfg["phonotactic_concentration"])
        shared_chain = np.stack([rng.dirichlet(conc) for _ in range(n)])
    languages = []
    scripts_seen = {}
    group_bases = {}
    for group in cfg["groups"]:
        inv_size = group["inventory_size"]
        if group["inventory_union_of"]:
            donors = [group_bases[name] for name in group["inventory_union_of"]]
            per = -(-inv_size // len(donors))
            picks = [rng.choice(d, size=min(per, len(d)), replace=False) for d in donors]
            base = np.unique(np.concatenate(picks))
            if len(base) > inv_size:
                base = np.sort(rng.choice(base, size=inv_size, replace=False))
            elif len(base) < inv_size:
                pool = np.setdiff1d(np.unique(np.concatenate(donors)), base)
                if len(pool) < inv_size - len(base):
                    pool = np.setdiff1d(np.arange(1, p_total), base)
                extra = rng.choice(pool, size=inv_size - len(base), replace=False)
                base = np.sort(np.concatenate([base, extra]))
        else:
            base = np.sort(rng.choice(np.arange(1, p_total), size=inv_size, replace=False))
        group_bases[group["name"]] = base
        group_shift = rng.normal(size=cfg["feature_dim"]) * cfg["group_shift_scale"]
        script = group["script"]
        # canonical per-script spelling: phoneme id p -> symbol "<script>p";
        # shared across groups that declare the same script
        if script not in scripts_seen:
            scripts_seen[script] = {int(p): f"{script}{p}" for p in range(p_total)}
        canonical = scripts_seen[script]
        pool = [canonical[p] for p in range(p_total)]
        separator = f"{script}#"
        for i in range(group["languages"]):
            n_keep = int(round(group["overlap"] * inv_size))
            keep = rng.choice(base, size=n_keep, replace=False)
            rest = np.setdiff1d(np.arange(1, p_total), base)
            extra = rng.choice(rest, size=inv_size - n_keep, replace=False)
            content = np.sort(np.concatenate([keep, extra]).astype(np.int64))
            inventory = np.concatenate([[PAUSE], content])

            n_odd = int(round(group["orthography_noise"] * inv_size))
            odd = set(int(p) for p in rng.choice(content, size=n_odd, replace=False))
            orthography = {PAUSE: (separator,)}
            for ph in content:
                ph = int(ph)
                sym = str(rng.choice(pool)) if ph in odd else canonical[ph]
                token = (sym,)
                if rng.random() < group["digraph_fraction"]:
                    token = (sym, str(rng.choice(pool)))
                orthography[ph] = token

            if shared_chain is not None:
                transition = shared_chain.copy()
            else:
                conc = np.full(inv_size, cfg["phonotactic_concentration"])
                transition = np.stack([rng.dirichlet(conc) for _ in range(inv_size)])
            initial = _stationary(transition)
            phonology = np.zeros(p_total)
            phonology[content] = initial

            lat = group["geo_center"][0] + rng.uniform(-group["geo_radius"], group["geo_radius"])
            lon = group["geo_center"][1] + rng.uniform(-group["geo_radius"], group["geo_radius"])
            languages.append(SyntheticLanguage(
                language_id=f"{group['name']}{i}", group=group["name"],
                script=group["script"], inventory=inventory, orthography=orthography,
                separator=separator,
                shift=group_shift + rng.normal(size=cfg["feature_dim"]) * cfg["lang_shift_scale"],
                lat=float(lat), lon=float(lon), quality=_group_quality(group, i),
                transition=transition, initial=initial, phonology=phonology))
    return languages


def generate_readings(cfg, languages, seed):
    cfg = scenario_with_defaults(cfg)
    per_group = {g["name"]: g for g in cfg["groups"]}
    readings = []
    for lang in languages:
        group = per_group[lang.group]
        n_readings = group.get("readings_per_language", cfg["readings_per_language"])
        n_utts = group.get("utterances_per_reading", cfg["utterances_per_reading"])
        for r in range(n_readings):
            rng = np.random.default_rng(stable_seed(seed, "reading", lang.language_id, r))
            rid = f"{lang.language_id}-r{r}"
            readings.append(SyntheticReading(
                reading_id=rid, language_id=lang.language_id, speaker_id=f"{rid}-spk",
                speaker_shift=rng.normal(size=cfg["feature_dim"]) * cfg["speaker_shift_scale"],
                rate=float(rng.uniform(cfg["rate_min"], cfg["rate_max"])),
                sigma=cfg["noise_sigma"], utterance_count=n_utts))
    return readings


def sample_phoneme_sequence(lang, length, rng):
    """Content phonemes from the language's Markov chain (no pauses)."""
    content = lang.content
    pos = rng.choice(len(content), p=lang.initial)
    seq = [int(content[pos])]
    for _ in range(length - 1):
        pos = rng.choice(len(content), p=lang.transition[pos])
        seq.append(int(content[pos]))
    return seq


def segment_into_words(seq, rng, word_min, word_max):
    """Insert the pause phoneme between word groups of 2..5 content phonemes."""
    out, i = [], 0
    while i < len(seq):
        if out:
            out.append(PAUSE)
        w = int(rng.integers(word_min, word_max + 1))
        out.extend(seq[i:i + w])
        i += w
    return out


def synthesize_utterance(phones, lang, reading, phoneme_seq, rng):
    """Render one utterance; returns (features, alignment, transcript tokens)."""
    if not phoneme_seq:
        raise ValueError("empty phoneme sequence")
    inv = set(int(p) for p in lang.inventory)
    if any(p not in inv for p in phoneme_seq):
        raise ValueError(f"phoneme outside the inventory of {lang.language_id}")
    frames, alignment, start = [], [], 0
    for p in phoneme_seq:
        n = max(1, int(round(float(phones.durations[p]) * reading.rate)))
        block = (phones.prototypes[p] + lang.shift + reading.speaker_shift
                 + rng.normal(0.0, reading.sigma, size=(n, phones.prototypes.shape[1])))
        frames.append(block)
        alignment.append((int(p), start, start + n))
        start += n
    transcript = []
    for p in phoneme_seq:
        transcript.extend(lang.orthography[int(p)])
    return np.vstack(frames), alignment, transcript


def generate_corpus(cfg, seed, out_dir):
    """Write a full corpus to out_dir; bit-reproducible from (scenario, seed)."""
    cfg = scenario_with_defaults(cfg)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "alignments").mkdir(exist_ok=True)

    phones = generate_phone_set(cfg, seed)
    languages = generate_language_set(cfg, seed)
    readings = generate_readings(cfg, languages, seed)
    by_lang = {lang.language_id: lang for lang in languages}

    rows = []
    all_tokens = set()
    for reading in readings:
        lang = by_lang[reading.language_id]
        ids = []
        for idx in range(reading.utterance_count):
            rng = np.random.default_rng(
                stable_seed(seed, "utt", lang.language_id, reading.reading_id, idx))
            length = int(rng.integers(cfg["seq_len_min"], cfg["seq_len_max"] + 1))
            seq = sample_phoneme_sequence(lang, length, rng)
            seq = segment_into_words(seq, rng, cfg["word_min"], cfg["word_max"])
            feats, alignment, transcript = synthesize_utterance(
                phones, lang, reading, seq, rng)
            uid = f"{reading.reading_id}-u{idx:04d}"
            corpus_io.write_features(out / "features" / f"{uid}.feat", feats)
            corpus_io.write_alignment(out / "alignments" / f"{uid}.ali", alignment)
            all_tokens.update(transcript)
            rows.append(UtteranceMeta(
                utterance_id=uid, language_id=lang.language_id,
                reading_id=reading.reading_id, speaker_id=reading.speaker_id,
                feature_file=f"features/{uid}.feat", num_frames=feats.shape[0],
                transcript=transcript, phonemes=seq,
                alignment_file=f"alignments/{uid}.ali", split=""))
            ids.append(uid)

    splits = make_splits({r.reading_id: [row.utterance_id for row in rows
                                         if row.reading_id == r.reading_id]
                          for r in readings}, seed)
    assignment = {}
    for reading_id, parts in splits.items():
        for part, uids in parts.items():
            for uid in uids:
                assignment[uid] = part
    for row in rows:
        row.split = assignment[row.utterance_id]

    corpus_io.write_manifest(out / "manifest.tsv", rows)
    corpus_io.write_languages(out / "languages.tsv", [
        LanguageMeta(language_id=lang.language_id, group=lang.group, script=lang.script,
                     quality=lang.quality, lat=lang.lat, lon=lang.lon,
                     separator=lang.separator, inventory=[int(i) for i in lang.inventory],
                     phonology=lang.phonology)
        for lang in languages])
    vocab = list(SPECIALS) + sorted(all_tokens)
    (out / "graphemes.txt").write_text("\n".join(vocab) + "\n")
    (out / "phonemes.txt").write_text(
        "\n".join(f"{i}\t{int(phones.durations[i])}" for i in range(phones.count)) + "\n")
    with open(out / "readings.tsv", "w") as fh:
        fh.write("reading_id\tlanguage_id\tspeaker_id\tutterances\ttotal_frames"
                 "\tduration_seconds\n")
        for reading in readings:
            frames = sum(r.num_frames for r in rows if r.reading_id == reading.reading_id)
            n = sum(1 for r in rows if r.reading_id == reading.reading_id)
            fh.write(f"{reading.reading_id}\t{reading.language_id}\t{reading.speaker_id}"
                     f"\t{n}\t{frames}\t{frames / corpus_io.FRAME_RATE}\n")
    (out / "scenario.json").write_text(json.dumps({"scenario": cfg, "seed": seed},
                                                  indent=2, sort_keys=True) + "\n")
    digest = corpus_io.corpus_digest(out)
    logger.info("corpus %s: %d languages, %d readings, %d utterances, digest %s",
                cfg["name"], len(languages), len(readings), len(rows), digest[:12])
    return {"digest": digest, "utterances": len(rows), "languages": len(languages),
            "readings": len(readings)}
