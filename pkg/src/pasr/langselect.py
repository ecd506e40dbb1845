"""Pretraining-language selection: cosine similarity over typological and
geographic profile vectors, quality filtering, and duration-matched greedy
set construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .corpus import FRAME_RATE

logger = logging.getLogger(__name__)

ACCEPTED_QUALITY = ("good", "very_good")
QUALITY_LEVELS = ("very_good", "good", "okay", "not_okay")


class ZeroVectorError(ValueError):
    """A profile vector is all-zero (unattested); it cannot be ranked."""


@dataclass
class LanguageProfile:
    language_id: str
    phonology_vec: np.ndarray
    inventory_vec: np.ndarray
    geo_vec: np.ndarray
    quality: str
    duration_hours: float

    def vector(self, mode):
        if mode == "phon_inv":
            return np.concatenate([self.phonology_vec, self.inventory_vec])
        if mode == "geo":
            return self.geo_vec
        raise ValueError(f"unknown similarity mode {mode!r}")


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"vector dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity of an all-zero vector")
    return float(a @ b / (na * nb))


def geo_unit_vector(lat, lon):
    """3-D unit-sphere embedding of (lat, lon) in degrees."""
    la, lo = math.radians(lat), math.radians(lon)
    return np.array([math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo),
                     math.sin(la)])


def rank_candidates(target, candidates, mode):
    """Quality-filtered candidates by descending cosine similarity to target.

    Unattested (all-zero) vectors are excluded; ties break on language id.
    """
    tvec = target.vector(mode)
    if not np.any(tvec):
        raise ZeroVectorError(f"target {target.language_id} is unattested for {mode}")
    scored = []
    for cand in candidates:
        if cand.language_id == target.language_id:
            continue
        if cand.quality not in ACCEPTED_QUALITY:
            continue
        try:
            score = cosine_similarity(tvec, cand.vector(mode))
        except ZeroVectorError:
            logger.warning("candidate %s is unattested for %s; excluded",
                           cand.language_id, mode)
            continue
        scored.append((cand.language_id, score))
    if not scored:
        logger.warning("no eligible candidates for %s/%s", target.language_id, mode)
    return sorted(scored, key=lambda t: (-t[1], t[0]))


@dataclass
class Selection:
    language_ids: list
    total_duration: float
    flag: str  # "ok" | "approximate" | "short"


def select_pretraining_set(ranked, profiles, duration_budget_hours,
                           min_count=7, max_count=14, tolerance=0.2):
    """Greedy prefix of the ranking whose count is within [min, max] and whose
    duration lands within tolerance of the budget; otherwise the closest
    prefix, flagged."""
    if not ranked:
        raise ValueError("ranked candidate list is empty")
    ids = [lang for lang, _ in ranked]
    if len(ids) < min_count:
        total = sum(profiles[lang].duration_hours for lang in ids)
        logger.warning("only %d candidates for a minimum of %d", len(ids), min_count)
        return Selection(ids, total, "short")
    lo = (1.0 - tolerance) * duration_budget_hours
    hi = (1.0 + tolerance) * duration_budget_hours
    total = 0.0
    best = None  # (abs gap, prefix length, duration)
    for k, lang in enumerate(ids[:max_count], start=1):
        total += profiles[lang].duration_hours
        if min_count <= k <= max_count and lo <= total <= hi:
            return Selection(ids[:k], total, "ok")
        gap = abs(total - duration_budget_hours)
        if best is None or gap < best[0]:
            best = (gap, k, total)
    _, k, total = best
    return Selection(ids[:k], total, "approximate")


def build_profiles_from_corpus(corpus):
    """One profile per language, derived from generator metadata and manifest
    durations: indicator inventory vector, stored phonotactic summary, and the
    unit-sphere geo embedding."""
    profiles = {}
    p_total = corpus.phoneme_count
    for lang_id in corpus.language_ids():
        meta = corpus.languages[lang_id]
        inv = np.zeros(p_total)
        inv[meta.inventory] = 1.0
        profiles[lang_id] = LanguageProfile(
            language_id=lang_id,
            phonology_vec=meta.phonology.copy(),
            inventory_vec=inv,
            geo_vec=geo_unit_vector(meta.lat, meta.lon),
            quality=meta.quality,
            duration_hours=corpus.frames(language_id=lang_id) / FRAME_RATE / 3600.0)
    return profiles


def save_profiles(path, profiles):
    profs = [profiles[k] for k in sorted(profiles)]
    with open(path, "w") as fh:
        p0 = profs[0]
        fh.write(f"dims\t{p0.phonology_vec.size}\t{p0.inventory_vec.size}"
                 f"\t{p0.geo_vec.size}\n")
        for p in profs:
            cells = [p.language_id, p.quality, repr(p.duration_hours)]
            for vec in (p.phonology_vec, p.inventory_vec, p.geo_vec):
                cells.extend(repr(float(x)) for x in vec)
            fh.write("\t".join(cells) + "\n")


def load_profiles(path):
    profiles = {}
    with open(path) as fh:
        header = fh.readline().split("\t")
        if header[0] != "dims":
            raise ValueError(f"{path}: missing dims header")
        dp, di, dg = (int(x) for x in header[1:4])
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            lang, quality, dur = cells[0], cells[1], float(cells[2])
            vals = [float(x) for x in cells[3:]]
            if len(vals) != dp + di + dg:
                raise ValueError(f"{path}: wrong vector length for {lang}")
            profiles[lang] = LanguageProfile(
                language_id=lang, phonology_vec=np.array(vals[:dp]),
                inventory_vec=np.array(vals[dp:dp + di]),
                geo_vec=np.array(vals[dp + di:]), quality=quality,
                duration_hours=dur)
    return profiles
