"""Command-line experiment runner.

Subcommands: gen-data, select-langs, pretrain, adapt, evaluate, probe,
export-embeddings, report, run-experiment, print-config.  Configuration files
are JSON; every subcommand writes only under its --out target and exits
nonzero with a message on stderr for declared error cases.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation, experiments, langselect, model, objectives, scenarios, synthdata
from .corpus import Corpus, corpus_digest

logger = logging.getLogger(__name__)


def _load_scenario_arg(value):
    """A bundled scenario name or a path to a JSON experiment config."""
    path = Path(value)
    if path.exists():
        return json.loads(path.read_text())
    return scenarios.get_scenario(value)


def _languages_arg(corpus, args):
    if args.languages:
        return sorted(args.languages.split(","))
    if args.groups:
        groups = set(args.groups.split(","))
        return sorted(lang for lang, meta in corpus.languages.items()
                      if meta.group in groups)
    raise SystemExit("pretrain needs --languages or --groups")


def cmd_gen_data(args):
    cfg = _load_scenario_arg(args.scenario)
    corpus_cfg = cfg["corpus"] if "corpus" in cfg else cfg
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    info = synthdata.generate_corpus(corpus_cfg, seed, args.out)
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def cmd_select_langs(args):
    corpus = Corpus(args.corpus)
    profiles = langselect.build_profiles_from_corpus(corpus)
    if args.profiles_out:
        langselect.save_profiles(args.profiles_out, profiles)
    target_group = corpus.languages[args.target].group
    candidates = [p for lang, p in sorted(profiles.items())
                  if corpus.languages[lang].group != target_group]
    ranked = langselect.rank_candidates(profiles[args.target], candidates, args.mode)
    for lang, score in ranked:
        print(f"{lang}\t{score:.6f}\t{profiles[lang].duration_hours:.6f}")
    if args.budget is not None:
        sel = langselect.select_pretraining_set(
            ranked, profiles, args.budget, min_count=args.min_count,
            max_count=args.max_count, tolerance=args.tolerance)
        print(f"selected\t{','.join(sel.language_ids)}\t{sel.total_duration:.6f}"
              f"\t{sel.flag}")
    return 0


def cmd_pretrain(args):
    corpus = Corpus(args.corpus)
    languages = _languages_arg(corpus, args)
    mcfg = model.desk_config(len(corpus.grapheme_vocab), corpus.phoneme_count,
                             len(languages), feature_dim=corpus.feature_dim)
    tcfg = objectives.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        mode="pretrain", use_phoneme=not args.no_phoneme,
        use_adversarial=not args.no_adversarial, lr=args.lr)
    info = objectives.pretrain(corpus, languages, tcfg, mcfg, args.out)
    print(info["best_checkpoint"])
    return 0


def cmd_adapt(args):
    corpus = Corpus(args.corpus)
    readings = (args.readings.split(",") if args.readings
                else corpus.readings_of(args.target))
    tcfg = objectives.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                  seed=args.seed, mode="adapt", lr=args.lr)
    info = objectives.adapt(args.checkpoint, corpus, args.target, readings,
                            tcfg, args.out)
    print(info["best_checkpoint"])
    return 0


def cmd_evaluate(args):
    corpus = Corpus(args.corpus)
    readings = (args.readings.split(",") if args.readings
                else corpus.readings_of(args.target))
    metrics = evaluation.evaluate(
        args.checkpoint, corpus, args.protocol, args.target, readings,
        held_out_reading=args.held_out_reading, split=args.split,
        beam=args.beam, out_csv=args.out)
    print(json.dumps({"wer": metrics.wer, "cer": metrics.cer,
                      "utterances": len(metrics.rows)}, indent=2))
    return 0


def cmd_probe(args):
    corpus = Corpus(args.corpus)
    languages = args.languages.split(",") if args.languages else None
    acc = evaluation.probe_language_accuracy(args.checkpoint, corpus,
                                             languages=languages)
    print(json.dumps({"probe_accuracy": acc}))
    return 0


def cmd_export_embeddings(args):
    corpus = Corpus(args.corpus)
    phonemes = ([int(p) for p in args.phonemes.split(",")]
                if args.phonemes else None)
    languages = args.languages.split(",") if args.languages else None
    rows = evaluation.export_embeddings(args.checkpoint, corpus,
                                        phonemes=phonemes, languages=languages)
    evaluation.write_embeddings_csv(args.out, rows)
    stat = evaluation.cluster_separation(rows)
    print(json.dumps({"rows": len(rows), "cluster_separation": stat}))
    return 0


def cmd_report(args):
    results = {}
    for item in args.results:
        name, path = item.split("=", 1)
        results[name] = json.loads(Path(path).read_text())
    langs = {r["language"] for r in results.values()}
    table = {name: {r["language"]: r[args.metric] for r in [res]}
             for name, res in results.items()}
    del langs
    baseline = args.results[0].split("=", 1)[0]
    print(evaluation.format_report(table, baseline, metric_name=args.metric.upper()),
          end="")
    return 0


def cmd_run_experiment(args):
    cfg = _load_scenario_arg(args.scenario)
    overrides = {}
    if args.epochs is not None:
        overrides["pretrain_epochs"] = args.epochs
    if args.adapt_epochs is not None:
        overrides["adapt_epochs"] = args.adapt_epochs
    summary = experiments.run_experiment(cfg, seed=args.seed, out_dir=args.out,
                                         overrides=overrides)
    print(summary["report"], end="")
    return 0


def cmd_print_config(args):
    cfg = _load_scenario_arg(args.scenario)
    cfg = scenarios.validate_experiment_config(cfg)
    cfg["corpus"] = synthdata.scenario_with_defaults(cfg["corpus"])
    print(json.dumps(cfg, indent=2, sort_keys=True))
    return 0


def cmd_corpus_digest(args):
    print(corpus_digest(args.corpus))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="pasr",
                                     description="synthetic multilingual ASR laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("select-langs", help="rank and select pretraining languages")
    p.add_argument("--corpus", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--mode", choices=["phon_inv", "geo"], default="phon_inv")
    p.add_argument("--budget", type=float)
    p.add_argument("--min-count", type=int, default=7)
    p.add_argument("--max-count", type=int, default=14)
    p.add_argument("--tolerance", type=float, default=0.2)
    p.add_argument("--profiles-out")
    p.set_defaults(fn=cmd_select_langs)

    p = sub.add_parser("pretrain", help="train a multilingual seed model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--languages")
    p.add_argument("--groups")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--no-phoneme", action="store_true")
    p.add_argument("--no-adversarial", action="store_true")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("adapt", help="fine-tune a checkpoint on a target language")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--readings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("evaluate", help="score a checkpoint under a protocol")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True,
                   choices=["reading_adaptation", "language_adaptation"])
    p.add_argument("--target", required=True)
    p.add_argument("--readings", help="readings that were adapted on")
    p.add_argument("--held-out-reading")
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--out", help="per-utterance results CSV")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("probe", help="held-out language-probe accuracy")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--languages")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("export-embeddings", help="phoneme midpoint encoder states")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--phonemes")
    p.add_argument("--languages")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_embeddings)

    p = sub.add_parser("report", help="relative-delta table from eval JSONs")
    p.add_argument("results", nargs="+", metavar="name=eval.json")
    p.add_argument("--metric", choices=["wer", "cer"], default="wer")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("run-experiment", help="run a bundled or custom experiment")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="override pretraining epochs")
    p.add_argument("--adapt-epochs", type=int, help="override adaptation epochs")
    p.set_defaults(fn=cmd_run_experiment)

    p = sub.add_parser("print-config", help="print a fully defaulted config")
    p.add_argument("--scenario", required=True)
    p.set_defaults(fn=cmd_print_config)

    p = sub.add_parser("corpus-digest", help="content digest of a corpus directory")
    p.add_argument("--corpus", required=True)
    p.set_defaults(fn=cmd_corpus_digest)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError,
            experiments.OutputDirLocked) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
