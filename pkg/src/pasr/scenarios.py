"""Bundled experiment scenarios, each a complete seeded configuration that
run-experiment can execute end to end at desk scale.

Shared design notes: every corpus keeps utterances short (3-6 content
phonemes, ~10 frames each) so the subsampled length comfortably covers the
transcript; targets share a script with a pretraining group (spelling
conventions transfer, like the shared Latin script in the real corpora) while
carrying their own acoustic shift and orthographic idiosyncrasies.
"""

from __future__ import annotations

import copy

_PHONES = {"count": 28, "duration_min": 8, "duration_max": 12}


def _base(name, groups, **over):
    cfg = {
        "name": name,
        "corpus": {
            "name": name,
            "phones": dict(_PHONES),
            "groups": groups,
            "group_shift_scale": 1.5,
            "lang_shift_scale": 0.5,
            "speaker_shift_scale": 0.3,
            "noise_sigma": 0.3,
            "readings_per_language": 2,
            "utterances_per_reading": 30,
            "seq_len_min": 3,
            "seq_len_max": 6,
        },
        "train": {
            "pretrain_epochs": 12,
            "adapt_epochs": 25,
            "lr": 0.01,
            "batch_size": 8,
            "beam": 4,
        },
        "seed": 11,
    }
    cfg.update(over)
    return cfg


def diverse_groups():
    """Two script-disjoint homogeneous groups plus a ninth target language
    that straddles both inventories; the auxiliary-objective contrast."""
    groups = [
        {"name": "A", "languages": 4, "script": "A", "inventory_size": 10,
         "overlap": 0.85, "geo_center": [-10.0, -70.0]},
        {"name": "B", "languages": 4, "script": "B", "inventory_size": 10,
         "overlap": 0.85, "geo_center": [45.0, 40.0]},
        {"name": "T", "languages": 1, "script": "A", "inventory_size": 10,
         "overlap": 1.0, "geo_center": [15.0, -20.0],
         "inventory_union_of": ["A", "B"], "utterances_per_reading": 100},
    ]
    cfg = _base("diverse-groups", groups)
    cfg["experiment"] = {
        "kind": "aux_contrast",
        "pretrain_groups": ["A", "B"],
        "target": "T0",
        "protocol": "reading_adaptation",
        "conditions": [
            {"name": "baseline", "use_phoneme": False, "use_adversarial": False},
            {"name": "phn_adv", "use_phoneme": True, "use_adversarial": True},
        ],
        "probe": True,
        "embedding_phonemes": "shared",
    }
    return cfg


def homogeneous_group():
    """A single tight group and a near-twin target; the control where the
    auxiliary objectives have nothing to bridge."""
    groups = [
        {"name": "H", "languages": 8, "script": "H", "inventory_size": 10,
         "overlap": 0.95, "geo_center": [0.0, 20.0]},
        {"name": "T", "languages": 1, "script": "H", "inventory_size": 10,
         "overlap": 1.0, "geo_center": [2.0, 22.0],
         "inventory_union_of": ["H"], "utterances_per_reading": 100},
    ]
    cfg = _base("homogeneous-group", groups)
    cfg["corpus"]["lang_shift_scale"] = 0.15
    cfg["experiment"] = {
        "kind": "aux_contrast",
        "pretrain_groups": ["H"],
        "target": "T0",
        "protocol": "reading_adaptation",
        "conditions": [
            {"name": "baseline", "use_phoneme": False, "use_adversarial": False},
            {"name": "phn_adv", "use_phoneme": True, "use_adversarial": True},
        ],
        "probe": False,
    }
    return cfg


def many_languages():
    """Twelve pretraining languages versus the four most target-like ones,
    under language adaptation (the evaluation reading is never adapted on)."""
    groups = [
        {"name": "G1", "languages": 4, "script": "C", "inventory_size": 10,
         "overlap": 0.9, "geo_center": [10.0, 10.0]},
        {"name": "G2", "languages": 4, "script": "D", "inventory_size": 10,
         "overlap": 0.9, "geo_center": [-35.0, 140.0]},
        {"name": "G3", "languages": 4, "script": "E", "inventory_size": 10,
         "overlap": 0.9, "geo_center": [60.0, -100.0]},
        {"name": "T", "languages": 1, "script": "C", "inventory_size": 10,
         "overlap": 1.0, "geo_center": [12.0, 12.0],
         "inventory_union_of": ["G1"], "utterances_per_reading": 100},
    ]
    cfg = _base("many-languages", groups)
    cfg["corpus"]["speaker_shift_scale"] = 0.5
    cfg["train"]["pretrain_epochs"] = 10
    cfg["experiment"] = {
        "kind": "set_size_contrast",
        "target": "T0",
        "protocol": "language_adaptation",
        "held_out_reading": "T0-r1",
        "use_phoneme": True,
        "use_adversarial": True,
        "sets": [
            {"name": "many-12", "groups": ["G1", "G2", "G3"]},
            {"name": "similar-4", "groups": ["G1"]},
        ],
    }
    return cfg


def geo_vs_phon():
    """Candidate pool where geographic and phonological similarity disagree;
    pretraining sets are chosen by ranked cosine similarity under both modes."""
    groups = [
        # geographically near the target, typologically distant
        {"name": "N", "languages": 4, "script": "N", "inventory_size": 8,
         "overlap": 0.9, "geo_center": [10.0, 10.0], "geo_radius": 6.0},
        # typologically near (shares the target's inventory base), far away
        {"name": "P", "languages": 4, "script": "P", "inventory_size": 8,
         "overlap": 0.9, "geo_center": [-40.0, 150.0], "geo_radius": 6.0},
        # distractors with mixed alignment quality
        {"name": "X", "languages": 4, "script": "X", "inventory_size": 8,
         "overlap": 0.7, "geo_center": [60.0, -60.0], "geo_radius": 20.0,
         "quality": ["good", "okay", "very_good", "not_okay"]},
        {"name": "T", "languages": 1, "script": "P", "inventory_size": 8,
         "overlap": 1.0, "geo_center": [8.0, 12.0],
         "inventory_union_of": ["P"], "utterances_per_reading": 80},
    ]
    cfg = _base("geo-vs-phon", groups, seed=13)
    cfg["corpus"]["utterances_per_reading"] = 24
    cfg["train"]["pretrain_epochs"] = 10
    cfg["experiment"] = {
        "kind": "selection_contrast",
        "target": "T0",
        "protocol": "reading_adaptation",
        "modes": ["phon_inv", "geo"],
        "min_count": 3,
        "max_count": 5,
        "tolerance": 0.25,
        "use_phoneme": True,
        "use_adversarial": True,
    }
    return cfg


def data_scaling():
    """Fix a diverse auxiliary-objective seed model, then adapt with growing
    slices of target data against monolingual models trained from scratch."""
    groups = [
        {"name": "A", "languages": 4, "script": "A", "inventory_size": 10,
         "overlap": 0.85, "geo_center": [-10.0, -70.0]},
        {"name": "B", "languages": 4, "script": "B", "inventory_size": 10,
         "overlap": 0.85, "geo_center": [45.0, 40.0]},
        {"name": "T", "languages": 1, "script": "A", "inventory_size": 10,
         "overlap": 1.0, "geo_center": [15.0, -20.0],
         "inventory_union_of": ["A", "B"], "utterances_per_reading": 120},
    ]
    cfg = _base("data-scaling", groups)
    cfg["experiment"] = {
        "kind": "data_scaling",
        "pretrain_groups": ["A", "B"],
        "target": "T0",
        "sizes": [12, 24, 48, 96],
        "use_phoneme": True,
        "use_adversarial": True,
    }
    return cfg


def monolingual_sanity():
    """One clean language; the desk model must transcribe it almost exactly."""
    groups = [
        {"name": "A", "languages": 1, "script": "A", "inventory_size": 10,
         "overlap": 1.0, "geo_center": [10.0, 20.0]},
    ]
    cfg = _base("monolingual-sanity", groups, seed=7)
    cfg["corpus"]["utterances_per_reading"] = 400
    cfg["corpus"]["noise_sigma"] = 0.1
    cfg["train"]["pretrain_epochs"] = 15
    cfg["experiment"] = {
        "kind": "monolingual",
        "target": "A0",
    }
    return cfg


_BUILDERS = {
    "diverse-groups": diverse_groups,
    "homogeneous-group": homogeneous_group,
    "geo-vs-phon": geo_vs_phon,
    "many-languages": many_languages,
    "data-scaling": data_scaling,
    "monolingual-sanity": monolingual_sanity,
}


def bundled_scenarios():
    return {name: builder() for name, builder in _BUILDERS.items()}


def get_scenario(name):
    if name not in _BUILDERS:
        raise KeyError(f"unknown scenario {name!r}; bundled: {sorted(_BUILDERS)}")
    return _BUILDERS[name]()


def validate_experiment_config(cfg):
    """Structural validation of a full experiment configuration."""
    from .synthdata import scenario_with_defaults

    for key in ("name", "corpus", "train", "experiment", "seed"):
        if key not in cfg:
            raise ValueError(f"experiment config is missing {key!r}")
    scenario_with_defaults(cfg["corpus"])
    exp = cfg["experiment"]
    kind = exp.get("kind")
    if kind == "aux_contrast":
        needed = ("pretrain_groups", "target", "protocol", "conditions")
    elif kind == "set_size_contrast":
        needed = ("target", "held_out_reading", "sets")
    elif kind == "selection_contrast":
        needed = ("target", "modes")
    elif kind == "data_scaling":
        needed = ("pretrain_groups", "target", "sizes")
    elif kind == "monolingual":
        needed = ("target",)
    else:
        raise ValueError(f"unknown experiment kind {kind!r}")
    for key in needed:
        if key not in exp:
            raise ValueError(f"{kind} experiment is missing {key!r}")
    group_names = {g["name"] for g in cfg["corpus"]["groups"]}
    for key in ("pretrain_groups",):
        for g in exp.get(key, []):
            if g not in group_names:
                raise ValueError(f"pretrain group {g!r} not in the corpus")
    if exp.get("protocol") == "language_adaptation" and "held_out_reading" not in exp:
        raise ValueError("language_adaptation needs held_out_reading")
    return copy.deepcopy(cfg)
