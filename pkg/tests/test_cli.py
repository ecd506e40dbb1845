import json
import subprocess
import sys
from pathlib import Path

import pytest

from pasr import scenarios
from pasr.cli import main


def run_cli(*argv):
    proc = subprocess.run([sys.executable, "-m", "pasr"] + [str(a) for a in argv],
                          capture_output=True, text=True)
    return proc


MICRO = {
    "name": "micro",
    "seed": 3,
    "corpus": {
        "name": "micro",
        "phones": {"count": 14, "duration_min": 8, "duration_max": 10},
        "groups": [
            {"name": "A", "languages": 2, "script": "A", "inventory_size": 5,
             "overlap": 0.9, "geo_center": [0.0, 0.0]},
            {"name": "T", "languages": 1, "script": "A", "inventory_size": 5,
             "overlap": 1.0, "geo_center": [5.0, 5.0],
             "inventory_union_of": ["A"]},
        ],
        "readings_per_language": 2,
        "utterances_per_reading": 10,
        "noise_sigma": 0.2,
        "seq_len_min": 2, "seq_len_max": 4,
    },
    "train": {"pretrain_epochs": 1, "adapt_epochs": 1, "lr": 0.01,
              "batch_size": 4, "beam": 2},
    "model": {"hidden_size": 10, "attention_dim": 10, "decoder_embed_size": 6},
    "experiment": {
        "kind": "aux_contrast",
        "pretrain_groups": ["A"],
        "target": "T0",
        "protocol": "reading_adaptation",
        "conditions": [
            {"name": "baseline", "use_phoneme": False, "use_adversarial": False},
            {"name": "phn_adv", "use_phoneme": True, "use_adversarial": True},
        ],
        "probe": True,
        "embedding_phonemes": "shared",
    },
}


@pytest.fixture(scope="module")
def micro_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.json"
    path.write_text(json.dumps(MICRO))
    return path


def test_gen_data_deterministic_digests(micro_config, tmp_path):
    a = run_cli("gen-data", "--scenario", micro_config, "--seed", 5,
                "--out", tmp_path / "a")
    b = run_cli("gen-data", "--scenario", micro_config, "--seed", 5,
                "--out", tmp_path / "b")
    assert a.returncode == 0 and b.returncode == 0
    da = json.loads(a.stdout)["digest"]
    db = json.loads(b.stdout)["digest"]
    assert da == db
    dig_a = run_cli("corpus-digest", "--corpus", tmp_path / "a")
    assert dig_a.stdout.strip() == da


def test_print_config_lists_defaults(micro_config):
    proc = run_cli("print-config", "--scenario", micro_config)
    assert proc.returncode == 0
    cfg = json.loads(proc.stdout)
    assert cfg["corpus"]["word_min"] == 2
    assert cfg["experiment"]["kind"] == "aux_contrast"


def test_print_config_every_bundled_scenario():
    for name in scenarios.bundled_scenarios():
        proc = run_cli("print-config", "--scenario", name)
        assert proc.returncode == 0, proc.stderr
        json.loads(proc.stdout)


def test_unknown_scenario_fails(tmp_path):
    proc = run_cli("run-experiment", "--scenario", "no-such-thing",
                   "--out", tmp_path / "x")
    assert proc.returncode == 1
    assert "unknown scenario" in proc.stderr


def test_unknown_flag_is_usage_error(tmp_path):
    proc = run_cli("gen-data", "--scenario", "diverse-groups",
                   "--out", tmp_path / "x", "--frobnicate")
    assert proc.returncode == 2


@pytest.fixture(scope="module")
def micro_run(micro_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "exp"
    proc = run_cli("run-experiment", "--scenario", micro_config,
                   "--seed", 3, "--out", out)
    assert proc.returncode == 0, proc.stderr
    return out, proc


def test_run_experiment_produces_artifacts(micro_run):
    out, proc = micro_run
    for rel in ("corpus/manifest.tsv",
                "baseline/pretrain/checkpoint.best.pasr",
                "baseline/adapt/checkpoint.best.pasr",
                "baseline/eval.csv", "baseline/eval.json",
                "phn_adv/pretrain/checkpoint.best.pasr",
                "phn_adv/probe.json", "phn_adv/embeddings.csv",
                "report.txt", "manifest.json"):
        assert (out / rel).exists(), rel
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["results"]["summary"]["kind"] == "aux_contrast"
    assert not (out / ".lock").exists()


def test_run_experiment_resumes_without_retraining(micro_run, micro_config):
    out, _ = micro_run
    before = (out / "baseline" / "pretrain" / "checkpoint.best.pasr").stat().st_mtime_ns
    proc = run_cli("run-experiment", "--scenario", micro_config,
                   "--seed", 3, "--out", out)
    assert proc.returncode == 0, proc.stderr
    after = (out / "baseline" / "pretrain" / "checkpoint.best.pasr").stat().st_mtime_ns
    assert before == after  # phase skipped, file untouched


def test_lock_file_blocks_concurrent_use(micro_run, micro_config):
    out, _ = micro_run
    (out / ".lock").write_text("held")
    try:
        proc = run_cli("run-experiment", "--scenario", micro_config,
                       "--seed", 3, "--out", out)
        assert proc.returncode == 1
        assert "lock" in proc.stderr.lower()
    finally:
        (out / ".lock").unlink()


def test_evaluate_protocol_violation_exits_nonzero(micro_run):
    out, _ = micro_run
    corpus = out / "corpus"
    ckpt = out / "baseline" / "adapt" / "checkpoint.best.pasr"
    proc = run_cli("evaluate", "--corpus", corpus, "--checkpoint", ckpt,
                   "--protocol", "language_adaptation", "--target", "T0",
                   "--readings", "T0-r0,T0-r1", "--held-out-reading", "T0-r1")
    assert proc.returncode == 1
    assert "held-out" in proc.stderr


def test_evaluate_and_report_round_trip(micro_run, tmp_path):
    out, _ = micro_run
    corpus = out / "corpus"
    results = []
    for cond in ("baseline", "phn_adv"):
        proc = run_cli("evaluate", "--corpus", corpus,
                       "--checkpoint", out / cond / "adapt" / "checkpoint.best.pasr",
                       "--protocol", "reading_adaptation", "--target", "T0",
                       "--beam", 1)
        assert proc.returncode == 0, proc.stderr
        payload = json.loads(proc.stdout)
        payload["language"] = "T0"
        path = tmp_path / f"{cond}.json"
        path.write_text(json.dumps(payload))
        results.append(f"{cond}={path}")
    proc = run_cli("report", *results)
    assert proc.returncode == 0, proc.stderr
    assert "baseline" in proc.stdout and "avg rel" in proc.stdout


def test_select_langs_cli(micro_run):
    out, _ = micro_run
    proc = run_cli("select-langs", "--corpus", out / "corpus", "--target", "T0",
                   "--mode", "phon_inv", "--budget", "0.01",
                   "--min-count", 1, "--max-count", 2, "--tolerance", 0.9)
    assert proc.returncode == 0, proc.stderr
    lines = proc.stdout.strip().split("\n")
    assert lines[-1].startswith("selected\t")


def test_probe_and_export_cli(micro_run, tmp_path):
    out, _ = micro_run
    ckpt = out / "phn_adv" / "pretrain" / "checkpoint.best.pasr"
    proc = run_cli("probe", "--corpus", out / "corpus", "--checkpoint", ckpt,
                   "--languages", "A0,A1")
    assert proc.returncode == 0, proc.stderr
    assert 0.0 <= json.loads(proc.stdout)["probe_accuracy"] <= 1.0
    emb = tmp_path / "emb.csv"
    proc = run_cli("export-embeddings", "--corpus", out / "corpus",
                   "--checkpoint", ckpt, "--out", emb)
    assert proc.returncode == 0, proc.stderr
    assert emb.exists()


def test_bundled_scenarios_validate():
    for name, cfg in scenarios.bundled_scenarios().items():
        scenarios.validate_experiment_config(cfg)


def test_bundled_scenario_contents():
    div = scenarios.get_scenario("diverse-groups")
    groups = {g["name"]: g for g in div["corpus"]["groups"]}
    assert groups["A"]["languages"] == 4 and groups["B"]["languages"] == 4
    assert groups["A"]["script"] != groups["B"]["script"]
    many = scenarios.get_scenario("many-languages")
    sets = {s["name"]: s for s in many["experiment"]["sets"]}
    n_many = sum(groups_["languages"] for groups_ in many["corpus"]["groups"]
                 if groups_["name"] in sets["many-12"]["groups"])
    n_sim = sum(groups_["languages"] for groups_ in many["corpus"]["groups"]
                if groups_["name"] in sets["similar-4"]["groups"])
    assert n_many == 12 and n_sim == 4
    geo = scenarios.get_scenario("geo-vs-phon")
    assert set(geo["experiment"]["modes"]) == {"phon_inv", "geo"}


def test_main_entry_in_process(tmp_path, micro_config, capsys):
    rc = main(["gen-data", "--scenario", str(micro_config), "--seed", "1",
               "--out", str(tmp_path / "c")])
    assert rc == 0
    assert (tmp_path / "c" / "manifest.tsv").exists()
