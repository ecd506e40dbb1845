"""Experiment pipelines: corpus generation, pretraining conditions,
adaptation, evaluation, probing, embedding export, and report tables, with a
manifest of artifact digests, a lock file, and digest-checked resumability.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from . import evaluation, langselect, model, objectives, synthdata
from .corpus import Corpus, corpus_digest, stable_seed
from .scenarios import validate_experiment_config

logger = logging.getLogger(__name__)


class OutputDirLocked(RuntimeError):
    pass


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Lock:
    """Exclusive lock on an output directory (one run at a time)."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputDirLocked(
                f"{self.path} exists; another run owns this output directory") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


class Runner:
    """Phase executor; a phase is skipped when its recorded outputs still
    match their digests in the manifest."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"phases": {}, "results": {}}

    def _flush(self):
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2,
                                                 sort_keys=True) + "\n")

    def phase(self, name, outputs, fn):
        """Run fn() unless every output file exists with its recorded digest."""
        rec = self.manifest["phases"].get(name)
        outputs = [str(p) for p in outputs]
        if rec is not None and set(rec["outputs"]) == set(outputs):
            if all(Path(p).exists() and file_digest(p) == rec["outputs"][p]
                   for p in outputs):
                logger.info("phase %s: outputs unchanged, skipping", name)
                return rec.get("result")
        result = fn()
        self.manifest["phases"][name] = {
            "outputs": {p: file_digest(p) for p in outputs},
            "result": result,
        }
        self._flush()
        return result

    def record(self, key, value):
        self.manifest["results"][key] = value
        self._flush()


def _median(values):
    return float(np.median(values))


def _train_cfg(cfg, mode, seed, condition=None, overrides=None, **flags):
    t = dict(cfg["train"])
    t.update(overrides or {})
    epochs = t["adapt_epochs"] if mode == "adapt" else t["pretrain_epochs"]
    return objectives.TrainConfig(
        epochs=epochs, batch_size=t["batch_size"], lr=t["lr"], mode=mode,
        seed=stable_seed(seed, mode, condition or "") % (2 ** 31), **flags)


def _model_cfg(cfg, corpus, num_languages):
    mcfg = model.desk_config(len(corpus.grapheme_vocab), corpus.phoneme_count,
                             max(1, num_languages),
                             feature_dim=corpus.feature_dim)
    for key, value in cfg.get("model", {}).items():
        setattr(mcfg, key, value)
    return mcfg


def _group_languages(corpus, groups):
    return sorted(lang for lang, meta in corpus.languages.items()
                  if meta.group in set(groups))


def _gen_corpus(runner, cfg, seed):
    corpus_dir = runner.out / "corpus"

    def build():
        info = synthdata.generate_corpus(cfg["corpus"], seed, corpus_dir)
        return {"digest": info["digest"], "dir": str(corpus_dir)}

    result = runner.phase("corpus", [corpus_dir / "manifest.tsv"], build)
    # guard against a stale directory whose content digest drifted
    if corpus_digest(corpus_dir) != result["digest"]:
        raise RuntimeError(f"{corpus_dir}: content does not match its manifest digest")
    return Corpus(corpus_dir)


def _pretrain_condition(runner, cfg, corpus, name, languages, seed,
                        use_phoneme, use_adversarial, overrides):
    out = runner.out / name / "pretrain"
    mcfg = _model_cfg(cfg, corpus, len(languages))
    tcfg = _train_cfg(cfg, "pretrain", seed, name, overrides,
                      use_phoneme=use_phoneme, use_adversarial=use_adversarial)

    def run():
        info = objectives.pretrain(corpus, languages, tcfg, mcfg, out)
        return {"checkpoint": info["best_checkpoint"], "log": info["log_path"],
                "languages": languages}

    return runner.phase(f"pretrain/{name}",
                        [out / "checkpoint.best.pasr", out / "training_log.csv"],
                        run)


def _adapt_condition(runner, cfg, corpus, name, seed_ckpt, target, readings,
                     seed, overrides, limit=None, from_scratch=False):
    out = runner.out / name / "adapt"
    tag = f"adapt/{name}"

    def run():
        if from_scratch:
            mcfg = _model_cfg(cfg, corpus, 1)
            tcfg = _train_cfg(cfg, "pretrain", seed, name, overrides,
                              use_phoneme=False, use_adversarial=False)
            tcfg.epochs = (overrides or {}).get("adapt_epochs", cfg["train"]["adapt_epochs"])
            info = objectives.pretrain(corpus, [target], tcfg, mcfg, out,
                                       readings=readings, limit=limit)
        else:
            tcfg = _train_cfg(cfg, "adapt", seed, name, overrides)
            info = objectives.adapt(seed_ckpt, corpus, target, readings, tcfg, out,
                                    limit=limit)
        return {"checkpoint": info["best_checkpoint"], "log": info["log_path"]}

    return runner.phase(tag, [out / "checkpoint.best.pasr", out / "training_log.csv"],
                        run)


def _evaluate_condition(runner, cfg, corpus, name, ckpt, target, readings,
                        protocol, held_out=None):
    out_csv = runner.out / name / "eval.csv"
    out_json = runner.out / name / "eval.json"

    def run():
        metrics = evaluation.evaluate(
            ckpt, corpus, protocol, target, readings, held_out_reading=held_out,
            beam=cfg["train"]["beam"], out_csv=out_csv)
        summary = {"wer": metrics.wer, "cer": metrics.cer,
                   "utterances": len(metrics.rows), "language": target,
                   "protocol": protocol}
        out_json.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return summary

    return runner.phase(f"eval/{name}", [out_csv, out_json], run)


def run_experiment(cfg, seed=None, out_dir=None, overrides=None):
    """Execute a full experiment configuration; returns the summary dict."""
    cfg = validate_experiment_config(cfg)
    seed = cfg["seed"] if seed is None else seed
    out_dir = Path(out_dir if out_dir is not None else cfg["name"])
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = cfg["experiment"]["kind"]
    with Lock(out_dir):
        runner = Runner(out_dir)
        runner.record("config", {"name": cfg["name"], "seed": seed, "kind": kind})
        corpus = _gen_corpus(runner, cfg, seed)
        handler = {
            "aux_contrast": _run_aux_contrast,
            "set_size_contrast": _run_set_size_contrast,
            "selection_contrast": _run_selection_contrast,
            "data_scaling": _run_data_scaling,
            "monolingual": _run_monolingual,
        }[kind]
        summary = handler(runner, cfg, corpus, seed, overrides or {})
        runner.record("summary", summary)
        (out_dir / "report.txt").write_text(summary["report"])
    return summary


def _run_aux_contrast(runner, cfg, corpus, seed, overrides):
    exp = cfg["experiment"]
    target = exp["target"]
    languages = _group_languages(corpus, exp["pretrain_groups"])
    readings = corpus.readings_of(target)
    held_out = exp.get("held_out_reading")
    if exp["protocol"] == "language_adaptation":
        readings = [r for r in readings if r != held_out]
    wers, cers, extras = {}, {}, {}
    for cond in exp["conditions"]:
        name = cond["name"]
        pre = _pretrain_condition(runner, cfg, corpus, name, languages, seed,
                                  cond["use_phoneme"], cond["use_adversarial"],
                                  overrides)
        adp = _adapt_condition(runner, cfg, corpus, name, pre["checkpoint"],
                               target, readings, seed, overrides)
        ev = _evaluate_condition(runner, cfg, corpus, name, adp["checkpoint"],
                                 target, readings, exp["protocol"], held_out)
        wers[name] = {target: ev["wer"]}
        cers[name] = ev["cer"]
        if exp.get("probe"):
            extras[name] = _probe_and_clusters(runner, cfg, corpus, name,
                                               pre["checkpoint"], languages, exp)
    baseline = exp["conditions"][0]["name"]
    report = evaluation.format_report(wers, baseline)
    summary = {"kind": "aux_contrast", "wer": {k: v[target] for k, v in wers.items()},
               "cer": cers, "probe": extras, "report": report}
    return summary


def _probe_and_clusters(runner, cfg, corpus, name, ckpt, languages, exp):
    out_json = runner.out / name / "probe.json"
    emb_csv = runner.out / name / "embeddings.csv"

    def run():
        acc = evaluation.probe_language_accuracy(ckpt, corpus, languages=languages)
        phonemes = exp.get("embedding_phonemes")
        if phonemes == "shared":
            shared = set.intersection(*(set(corpus.languages[lang].inventory)
                                        for lang in languages))
            shared.discard(synthdata.PAUSE)
            phonemes = sorted(shared)[:3]
        rows = evaluation.export_embeddings(ckpt, corpus, phonemes=phonemes,
                                            languages=languages)
        evaluation.write_embeddings_csv(emb_csv, rows)
        stat = evaluation.cluster_separation(rows)
        out_json.write_text(json.dumps({"probe_accuracy": acc,
                                        "cluster_separation": stat,
                                        "phonemes": list(phonemes)},
                                       indent=2, sort_keys=True) + "\n")
        return {"probe_accuracy": acc, "cluster_separation": stat}

    return runner.phase(f"probe/{name}", [out_json, emb_csv], run)


def _run_set_size_contrast(runner, cfg, corpus, seed, overrides):
    exp = cfg["experiment"]
    target = exp["target"]
    held_out = exp["held_out_reading"]
    adapt_readings = [r for r in corpus.readings_of(target) if r != held_out]
    if not adapt_readings:
        raise ValueError("language adaptation needs a second reading to adapt on")
    results = {}
    for spec in exp["sets"]:
        name = spec["name"]
        languages = (sorted(spec["languages"]) if "languages" in spec
                     else _group_languages(corpus, spec["groups"]))
        pre = _pretrain_condition(runner, cfg, corpus, name, languages, seed,
                                  exp["use_phoneme"], exp["use_adversarial"],
                                  overrides)
        adp = _adapt_condition(runner, cfg, corpus, name, pre["checkpoint"],
                               target, adapt_readings, seed, overrides)
        ev = _evaluate_condition(runner, cfg, corpus, name, adp["checkpoint"],
                                 target, adapt_readings, "language_adaptation",
                                 held_out)
        results[name] = {"wer": ev["wer"], "cer": ev["cer"],
                         "languages": len(languages)}
    wers = {name: {target: r["wer"]} for name, r in results.items()}
    report = evaluation.format_report(wers, exp["sets"][0]["name"])
    return {"kind": "set_size_contrast", "results": results, "report": report}


def _run_selection_contrast(runner, cfg, corpus, seed, overrides):
    exp = cfg["experiment"]
    target = exp["target"]
    profiles = langselect.build_profiles_from_corpus(corpus)
    prof_path = runner.out / "profiles.tsv"
    langselect.save_profiles(prof_path, profiles)
    target_group = corpus.languages[target].group
    candidates = [p for lang, p in sorted(profiles.items())
                  if corpus.languages[lang].group != target_group]
    budget = exp.get("budget_hours")
    selections = {}
    results = {}
    for mode in exp["modes"]:
        ranked = langselect.rank_candidates(profiles[target], candidates, mode)
        mode_budget = budget
        if mode_budget is None:
            # match the first mode's selected duration, like matching the
            # typologically-chosen set's total hours
            first = selections.get(exp["modes"][0])
            mode_budget = (first.total_duration if first is not None else
                           sum(profiles[lang].duration_hours
                               for lang, _ in ranked[:exp.get("max_count", 14)]))
        sel = langselect.select_pretraining_set(
            ranked, profiles, mode_budget, min_count=exp.get("min_count", 7),
            max_count=exp.get("max_count", 14),
            tolerance=exp.get("tolerance", 0.2))
        selections[mode] = sel
        readings = corpus.readings_of(target)
        pre = _pretrain_condition(runner, cfg, corpus, mode, sel.language_ids,
                                  seed, exp["use_phoneme"], exp["use_adversarial"],
                                  overrides)
        adp = _adapt_condition(runner, cfg, corpus, mode, pre["checkpoint"],
                               target, readings, seed, overrides)
        ev = _evaluate_condition(runner, cfg, corpus, mode, adp["checkpoint"],
                                 target, readings, exp.get("protocol",
                                                           "reading_adaptation"))
        results[mode] = {"wer": ev["wer"], "cer": ev["cer"],
                         "languages": sel.language_ids,
                         "duration_hours": sel.total_duration, "flag": sel.flag}
    wers = {mode: {target: r["wer"]} for mode, r in results.items()}
    report = evaluation.format_report(wers, exp["modes"][0])
    return {"kind": "selection_contrast", "results": results, "report": report}


def _run_data_scaling(runner, cfg, corpus, seed, overrides):
    exp = cfg["experiment"]
    target = exp["target"]
    languages = _group_languages(corpus, exp["pretrain_groups"])
    readings = corpus.readings_of(target)
    pre = _pretrain_condition(runner, cfg, corpus, "seedmodel", languages, seed,
                              exp["use_phoneme"], exp["use_adversarial"], overrides)
    curves = {"adapted": {}, "monolingual": {}}
    for size in exp["sizes"]:
        adp = _adapt_condition(runner, cfg, corpus, f"adapted-{size}",
                               pre["checkpoint"], target, readings, seed,
                               overrides, limit=size)
        ev = _evaluate_condition(runner, cfg, corpus, f"adapted-{size}",
                                 adp["checkpoint"], target, readings,
                                 "reading_adaptation")
        curves["adapted"][size] = {"wer": ev["wer"], "cer": ev["cer"]}
        mono = _adapt_condition(runner, cfg, corpus, f"mono-{size}", None,
                                target, readings, seed, overrides, limit=size,
                                from_scratch=True)
        ev = _evaluate_condition(runner, cfg, corpus, f"mono-{size}",
                                 mono["checkpoint"], target, readings,
                                 "reading_adaptation")
        curves["monolingual"][size] = {"wer": ev["wer"], "cer": ev["cer"]}
    lines = ["size\tmonolingual_cer\tadapted_cer\tadvantage"]
    for size in exp["sizes"]:
        mono_cer = curves["monolingual"][size]["cer"]
        ad_cer = curves["adapted"][size]["cer"]
        lines.append(f"{size}\t{mono_cer:.2f}\t{ad_cer:.2f}\t{mono_cer - ad_cer:.2f}")
    report = "\n".join(lines) + "\n"
    return {"kind": "data_scaling", "curves": curves, "sizes": exp["sizes"],
            "report": report}


def _run_monolingual(runner, cfg, corpus, seed, overrides):
    exp = cfg["experiment"]
    target = exp["target"]
    readings = corpus.readings_of(target)
    pre = _pretrain_condition(runner, cfg, corpus, "mono", [target], seed,
                              use_phoneme=False, use_adversarial=False,
                              overrides=overrides)
    ev = _evaluate_condition(runner, cfg, corpus, "mono", pre["checkpoint"],
                             target, readings, "reading_adaptation")
    report = f"language\tmono\n{target}\t{ev['wer']:.2f}\n"
    return {"kind": "monolingual", "wer": ev["wer"], "cer": ev["cer"],
            "report": report}
