"""On-disk corpus layout and loading.

A corpus directory holds:
  manifest.tsv    one record per utterance (see MANIFEST_COLUMNS)
  languages.tsv   per-language metadata incl. inventory/phonology vectors
  readings.tsv    per-reading duration bookkeeping
  graphemes.txt   global grapheme vocabulary (specials first, blank implicit)
  phonemes.txt    one line per universal phoneme id
  features/*.feat FEAT1 files, alignments/*.ali gold phoneme intervals
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import SPECIALS

FEATURE_MAGIC = b"FEAT1\n"
FRAME_RATE = 100.0  # frames per second

MANIFEST_COLUMNS = ("utterance_id", "language_id", "reading_id", "speaker_id",
                    "feature_file", "num_frames", "transcript", "phonemes",
                    "alignment_file", "split")


def stable_seed(*parts):
    """Platform-independent 64-bit seed from a tuple of ints/strings."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.blake2s(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def write_features(path, feats):
    feats = np.ascontiguousarray(feats, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(f"{feats.shape[0]} {feats.shape[1]}\n".encode())
        fh.write(feats.tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(FEATURE_MAGIC))
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature file")
        t, f = (int(x) for x in fh.readline().split())
        data = np.frombuffer(fh.read(8 * t * f), dtype="<f8")
    return data.reshape(t, f).copy()


def write_alignment(path, intervals):
    with open(path, "w") as fh:
        for ph, start, end in intervals:
            fh.write(f"{ph} {start} {end}\n")


def read_alignment(path):
    out = []
    with open(path) as fh:
        for line in fh:
            ph, start, end = line.split()
            out.append((int(ph), int(start), int(end)))
    return out


@dataclass
class UtteranceMeta:
    utterance_id: str
    language_id: str
    reading_id: str
    speaker_id: str
    feature_file: str
    num_frames: int
    transcript: list
    phonemes: list
    alignment_file: str
    split: str


@dataclass
class LanguageMeta:
    language_id: str
    group: str
    script: str
    quality: str
    lat: float
    lon: float
    separator: str
    inventory: list
    phonology: np.ndarray


def _fmt_floats(vec):
    return ",".join(repr(float(x)) for x in vec)


def write_manifest(path, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in rows:
            fh.write("\t".join([
                r.utterance_id, r.language_id, r.reading_id, r.speaker_id,
                r.feature_file, str(r.num_frames), " ".join(r.transcript),
                " ".join(str(p) for p in r.phonemes), r.alignment_file, r.split,
            ]) + "\n")


def write_languages(path, metas):
    with open(path, "w") as fh:
        fh.write("language_id\tgroup\tscript\tquality\tlat\tlon\tseparator"
                 "\tinventory\tphonology\n")
        for m in metas:
            fh.write("\t".join([
                m.language_id, m.group, m.script, m.quality, repr(m.lat), repr(m.lon),
                m.separator, ",".join(str(i) for i in m.inventory),
                _fmt_floats(m.phonology),
            ]) + "\n")


class Corpus:
    """Loaded corpus with feature caching and vocabulary maps."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = []
        with open(self.root / "manifest.tsv") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if tuple(header) != MANIFEST_COLUMNS:
                raise ValueError(f"unexpected manifest columns {header}")
            for line in fh:
                f = line.rstrip("\n").split("\t")
                self.manifest.append(UtteranceMeta(
                    utterance_id=f[0], language_id=f[1], reading_id=f[2],
                    speaker_id=f[3], feature_file=f[4], num_frames=int(f[5]),
                    transcript=f[6].split(" ") if f[6] else [],
                    phonemes=[int(p) for p in f[7].split(" ")] if f[7] else [],
                    alignment_file=f[8], split=f[9]))
        self.by_id = {m.utterance_id: m for m in self.manifest}

        self.languages = {}
        with open(self.root / "languages.tsv") as fh:
            fh.readline()
            for line in fh:
                f = line.rstrip("\n").split("\t")
                self.languages[f[0]] = LanguageMeta(
                    language_id=f[0], group=f[1], script=f[2], quality=f[3],
                    lat=float(f[4]), lon=float(f[5]), separator=f[6],
                    inventory=[int(i) for i in f[7].split(",")] if f[7] else [],
                    phonology=np.array([float(x) for x in f[8].split(",")]))

        self.grapheme_vocab = (self.root / "graphemes.txt").read_text().split("\n")
        self.grapheme_vocab = [t for t in self.grapheme_vocab if t]
        if tuple(self.grapheme_vocab[:3]) != SPECIALS:
            raise ValueError("grapheme vocabulary must start with the reserved specials")
        self.tok2id = {t: i for i, t in enumerate(self.grapheme_vocab)}
        self.phoneme_count = len([ln for ln in
                                  (self.root / "phonemes.txt").read_text().split("\n") if ln])
        self._feature_cache = {}

    # -- lookups ----------------------------------------------------------
    def utterances(self, languages=None, readings=None, split=None):
        out = []
        for m in self.manifest:
            if languages is not None and m.language_id not in languages:
                continue
            if readings is not None and m.reading_id not in readings:
                continue
            if split is not None and m.split != split:
                continue
            out.append(m)
        return out

    def features(self, utterance_id):
        if utterance_id not in self._feature_cache:
            meta = self.by_id[utterance_id]
            self._feature_cache[utterance_id] = read_features(self.root / meta.feature_file)
        return self._feature_cache[utterance_id]

    def alignment(self, utterance_id):
        meta = self.by_id[utterance_id]
        return read_alignment(self.root / meta.alignment_file)

    def grapheme_ids(self, meta):
        unk = self.tok2id["<unk>"]
        return [self.tok2id.get(t, unk) for t in meta.transcript]

    def language_ids(self):
        return sorted(self.languages)

    def readings_of(self, language_id):
        return sorted({m.reading_id for m in self.manifest if m.language_id == language_id})

    def separator_ids(self):
        seps = {m.separator for m in self.languages.values()}
        return {self.tok2id[s] for s in seps if s in self.tok2id}

    def frames(self, language_id=None, reading_id=None):
        total = 0
        for m in self.manifest:
            if language_id is not None and m.language_id != language_id:
                continue
            if reading_id is not None and m.reading_id != reading_id:
                continue
            total += m.num_frames
        return total

    def duration_hours(self, language_id=None):
        return self.frames(language_id) / FRAME_RATE / 3600.0

    @property
    def feature_dim(self):
        if not self.manifest:
            raise ValueError("empty corpus")
        return self.features(self.manifest[0].utterance_id).shape[1]


def corpus_digest(root):
    """Content digest over the manifest, metadata, and every feature file."""
    root = Path(root)
    h = hashlib.sha256()
    for name in ("manifest.tsv", "languages.tsv", "graphemes.txt", "phonemes.txt"):
        h.update((root / name).read_bytes())
    with open(root / "manifest.tsv") as fh:
        fh.readline()
        for line in fh:
            feature_file = line.split("\t")[4]
            h.update((root / feature_file).read_bytes())
    return h.hexdigest()
