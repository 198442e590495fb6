import csv
import json
import subprocess
import sys

import pytest

from opensetmia.cli import main
from opensetmia.dataset import load_dataset, save_dataset, generate_synthetic_population
from opensetmia.pipeline import ExperimentConfig, Pipeline

SMALL = {
    "seed": 3,
    "dataset": {"synthetic": {"n_individuals": 12, "samples_per_id": 12, "feature_dim": 16, "noise": 0.3}},
    "split": {"samples_per_id_per_portion": 4},
    "target": {"hidden": [32], "epochs": 30},
    "attack": {"method": "yeom", "search": {"max_iters": 4, "grad_queries": 20}},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(SMALL))
    return p


def run(*args):
    return main([str(a) for a in args])


def test_pipeline_commands_in_sequence(cfg_path, tmp_path):
    out = tmp_path / "out"
    for cmd in (["synth"], ["split"], ["train-target"], ["attack"], ["eval"]):
        assert run(*cmd, "--config", cfg_path, "--out-dir", out) == 0
    for name in ("dataset.csv", "splits.json", "target.json", "history.csv", "attack.json", "calibration.json",
                 "roc.csv", "decisions.csv", "report.json", "timings.json"):
        assert (out / name).is_file(), name
    assert load_dataset(out / "dataset.csv").feature_dim == 16
    with open(out / "roc.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["tau", "tpr", "fpr"]
    assert rows[1][1:] == ["0.0", "0.0"] and rows[-1][1:] == ["1.0", "1.0"]
    assert {rows[1][0], rows[-1][0]} == {"inf", "-inf"}
    with open(out / "decisions.csv") as fh:
        assert next(csv.reader(fh)) == ["sample_id", "score", "decision", "truth"]
    report = json.loads((out / "report.json").read_text())
    assert set(report["metrics"]) >= {"accuracy", "precision", "recall", "f1", "fpr", "tpr", "auc", "tp"}
    assert "timings" not in report and report["seed"] == 3


def test_composition_equals_monolithic(cfg_path, tmp_path):
    staged, mono = tmp_path / "staged", tmp_path / "mono"
    for cmd in ("synth", "split", "train-target", "attack", "eval"):
        assert run(cmd, "--config", cfg_path, "--out-dir", staged) == 0
    assert run("report", "--config", cfg_path, "--out-dir", mono) == 0
    assert (staged / "report.json").read_bytes() == (mono / "report.json").read_bytes()
    assert (staged / "target.json").read_bytes() == (mono / "target.json").read_bytes()


def test_synth_is_byte_identical(cfg_path, tmp_path):
    for d in ("a", "b"):
        assert run("synth", "--config", cfg_path, "--out-dir", tmp_path / d) == 0
    assert (tmp_path / "a/dataset.csv").read_bytes() == (tmp_path / "b/dataset.csv").read_bytes()


def test_seed_flag_changes_fingerprint(cfg_path, tmp_path):
    run("report", "--config", cfg_path, "--out-dir", tmp_path / "a")
    run("report", "--config", cfg_path, "--out-dir", tmp_path / "b", "--seed", "4")
    fa = json.loads((tmp_path / "a/report.json").read_text())["fingerprint"]
    fb = json.loads((tmp_path / "b/report.json").read_text())["fingerprint"]
    assert fa != fb


def test_train_target_flags(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert run("train-target", "--config", cfg_path, "--out-dir", out, "--preset", "no-overfitting", "--epochs", "0") == 0
    hist = list(csv.DictReader(open(out / "history.csv")))
    assert [r["epoch"] for r in hist] == ["0"]
    assert abs(float(hist[0]["train_acc"]) - 0.25) <= 0.25


def test_stale_artifacts_are_not_reused(cfg_path, tmp_path):
    out = tmp_path / "o"
    run("train-target", "--config", cfg_path, "--out-dir", out, "--epochs", "0")
    run("eval", "--config", cfg_path, "--out-dir", out)
    staged = json.loads((out / "report.json").read_text())
    run("report", "--config", cfg_path, "--out-dir", tmp_path / "m")
    assert staged == json.loads((tmp_path / "m/report.json").read_text())


@pytest.mark.parametrize("method", ["salem", "label-only"])
def test_attack_methods(cfg_path, tmp_path, method):
    out = tmp_path / method
    assert run("attack", "--config", cfg_path, "--out-dir", out, "--method", method) == 0
    doc = json.loads((out / "attack.json").read_text())
    assert doc["method"] == method


def test_ensemble_command(cfg_path, tmp_path):
    out = tmp_path / "e"
    assert run("ensemble", "--config", cfg_path, "--out-dir", out, "--subsets", "2") == 0
    manifest = json.loads((out / "ensemble.json").read_text())
    assert manifest["rule"] == "or" and manifest["k"] == 1 and len(manifest["members"]) == 2
    assert all((out / m["artifact"]).is_file() for m in manifest["members"])
    assert run("ensemble", "--config", cfg_path, "--out-dir", out, "--singleton", "--k", "1") == 0
    manifest = json.loads((out / "ensemble.json").read_text())
    assert len(manifest["members"]) == 4 and len(list((out / "ensemble").iterdir())) == 4
    with open(out / "votes.csv") as fh:
        header = next(csv.reader(fh))
    assert header[0] == "sample_id" and header[-2:] == ["decision", "truth"]


def test_epoch_study_command(cfg_path, tmp_path):
    out = tmp_path / "s"
    assert run("epoch-study", "--config", cfg_path, "--out-dir", out, "--checkpoints", "0,10,30") == 0
    rows = list(csv.DictReader(open(out / "epoch_study.csv")))
    assert [r["epoch"] for r in rows] == ["0", "10", "30"]
    assert set(rows[0]) == {"epoch", "overfit", "kl", "attack_acc"}
    assert run("epoch-study", "--config", cfg_path, "--out-dir", out, "--checkpoints", "0,31") == 2


def test_cross_options(cfg_path, tmp_path):
    other = generate_synthetic_population(12, 12, 16, 0.3, 99, id_offset=1000, prefix="ext")
    save_dataset(other, tmp_path / "other.csv")
    out = tmp_path / "x"
    assert run("attack", "--config", cfg_path, "--out-dir", out, "--attack-nonmembers", tmp_path / "other.csv") == 0
    assert run("eval", "--config", cfg_path, "--out-dir", out, "--attack-arch", "16,8") == 2  # flag not on eval
    assert run("attack", "--config", cfg_path, "--out-dir", out, "--attack-arch", "16,8") == 0
    clash = generate_synthetic_population(12, 12, 16, 0.3, 99, prefix="ext")
    save_dataset(clash, tmp_path / "clash.csv")
    assert run("attack", "--config", cfg_path, "--out-dir", out, "--attack-nonmembers", tmp_path / "clash.csv") == 2


def test_records_source(tmp_path):
    cfg = ExperimentConfig.from_dict(SMALL)
    pipe = Pipeline(cfg)
    from opensetmia.records import export_prediction_records

    export_prediction_records(pipe.attack_set().records(), tmp_path / "attack.jsonl")
    export_prediction_records(pipe.eval_set().records(), tmp_path / "eval.jsonl")
    doc = dict(SMALL, dataset={"records": {"attack": "attack.jsonl", "eval": "eval.jsonl"}})
    (tmp_path / "rec.json").write_text(json.dumps(doc))
    out = tmp_path / "r"
    assert run("eval", "--config", tmp_path / "rec.json", "--out-dir", out) == 0
    got = json.loads((out / "report.json").read_text())["metrics"]
    assert got == pipe.evaluation()["metrics"].to_json()
    assert run("eval", "--config", tmp_path / "rec.json", "--out-dir", out, "--method", "label-only") == 2
    assert run("synth", "--config", tmp_path / "rec.json", "--out-dir", out) == 2


def test_exit_codes_and_no_partial_artifacts(tmp_path):
    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{")
    assert run("synth", "--config", bad_json, "--out-dir", tmp_path / "a") == 2
    no_seed = tmp_path / "noseed.json"
    no_seed.write_text(json.dumps({"dataset": SMALL["dataset"]}))
    assert run("synth", "--config", no_seed, "--out-dir", tmp_path / "a") == 2
    two = tmp_path / "two.json"
    two.write_text(json.dumps(dict(SMALL, dataset={"synthetic": {}, "path": "x.csv"})))
    assert run("synth", "--config", two, "--out-dir", tmp_path / "a") == 2
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps(dict(SMALL, dataset={"path": "nope.csv"})))
    assert run("synth", "--config", missing, "--out-dir", tmp_path / "a") == 2
    (tmp_path / "bad.csv").write_text("sample_id,individual_id,f0\na,1,1.5\n")
    bad_data = tmp_path / "baddata.json"
    bad_data.write_text(json.dumps(dict(SMALL, dataset={"path": "bad.csv"})))
    out = tmp_path / "b"
    assert run("report", "--config", bad_data, "--out-dir", out) == 3
    assert list(out.iterdir()) == []
    assert run("attack", "--config", bad_json, "--out-dir", out, "--method", "nope") == 2
    assert run("frobnicate") == 2


def test_console_script_entry_point(cfg_path, tmp_path):
    res = subprocess.run([sys.executable, "-m", "opensetmia.cli", "synth", "--config", str(cfg_path),
                          "--out-dir", str(tmp_path / "c")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "c/dataset.csv").is_file()
