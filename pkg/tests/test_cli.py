import csv
import json
import time

import pytest
from test_stats import brute_cindex
from test_synthgen import digest

from celleconet.cli import evaluate_run, main
from celleconet.cohort import load_cohort
from celleconet.stats import confusion_metrics, roc_auc

SYNTH = {"synth": {"n_patients": 16, "positive_fraction": 0.5, "d_patch": 6, "d_cell": 6,
                   "patches_per_slide": [2, 4], "cells_per_patch": [0, 4]}}
TRAIN = {"train": {"epochs": 2, "patience": 2, "k_folds": 2, "d_model": 4, "hidden": 8}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps(SYNTH))
    (root / "train.json").write_text(json.dumps(TRAIN))
    assert main(["synth", "--config", str(root / "synth.json"), "--out", str(root / "cohort"),
                 "--seed", "3"]) == 0
    t0 = time.perf_counter()
    assert main(["train", "--cohort", str(root / "cohort"), "--config", str(root / "train.json"),
                 "--out", str(root / "run")]) == 0
    root.joinpath("train_seconds").write_text(str(time.perf_counter() - t0))
    return root


def test_synth_deterministic_and_loadable(workspace, tmp_path):
    assert main(["synth", "--config", str(workspace / "synth.json"), "--out", str(tmp_path / "c2"),
                 "--seed", "3"]) == 0
    assert digest(workspace / "cohort") == digest(tmp_path / "c2")
    assert len(load_cohort(tmp_path / "c2").patients) == 16
    assert (tmp_path / "c2" / "truth.json").exists()
    assert main(["synth", "--out", str(tmp_path / "minimal")]) == 0
    load_cohort(tmp_path / "minimal")


def test_train_outputs(workspace):
    run = workspace / "run"
    assert float((workspace / "train_seconds").read_text()) < 30
    for name in ("config.json", "predictions.csv", "metrics.json", "run_info.json",
                 "fold_0/predictions.csv", "fold_0/trace.csv", "fold_0/model.npz"):
        assert (run / name).exists(), name
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["k_folds"] == 2 and cfg["learning_rate"] == 1e-3
    info = json.loads((run / "run_info.json").read_text())
    assert info["cohort_sha256"] == digest_for_info(workspace / "cohort")
    with open(run / "fold_0" / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        s, p = float(r["sensitivity"]), float(r["specificity"])
        assert float(r["score"]) == pytest.approx(2 * min(s, p), abs=1e-12)


def digest_for_info(directory):
    import hashlib
    h = hashlib.sha256()
    for f in sorted(directory.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(directory)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def test_metrics_recompute_from_predictions(workspace):
    run = workspace / "run"
    metrics = json.loads((run / "metrics.json").read_text())
    with open(run / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 16
    for fold in metrics["folds"]:
        sel = [r for r in rows if int(r["fold"]) == fold["fold"]]
        p = [float(r["probability"]) for r in sel]
        y = [int(r["label"]) for r in sel]
        m = confusion_metrics(p, y, 0.5)
        assert fold["test"]["auc"] == roc_auc(p, y)
        assert fold["test"]["accuracy"] == m.accuracy
    again = evaluate_run(run)
    for a, b in zip(again["folds"], metrics["folds"]):
        assert a["auc"] == b["test"]["auc"]


def test_evaluate_command(workspace, capsys):
    assert main(["evaluate", "--run", str(workspace / "run")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["folds"]) == 2


def test_error_exit_codes(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--cohort", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["train", "--rank", "7", "--cohort", "x", "--out", "y"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_stats_command(workspace, capsys):
    run = workspace / "run"
    assert main(["stats", "--run", str(run), "--cohort", str(workspace / "cohort")]) == 0
    for name in ("km_curve.csv", "cox.json", "cindex.json", "subgroup_report.csv", "bias_report.csv"):
        assert (run / name).exists()
    with open(run / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    c = json.loads((run / "cindex.json").read_text())["c_index"]
    ref = brute_cindex([float(r["probability"]) for r in rows], [float(r["time_months"]) for r in rows],
                       [int(r["event"]) for r in rows])
    assert c == float(ref)
    with open(run / "bias_report.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5


def test_stats_all_low_risk(workspace, tmp_path):
    out = tmp_path / "low"
    assert main(["stats", "--run", str(workspace / "run"), "--cohort", str(workspace / "cohort"),
                 "--out", str(out), "--tau", "1.0"]) == 0
    with open(out / "km_curve.csv") as fh:
        assert {r["group"] for r in csv.DictReader(fh)} == {"low"}
    cox = json.loads((out / "cox.json").read_text())
    assert "undefined" in cox["logrank"] and cox["cox"]["converged"] is False


def test_export_attention(workspace, tmp_path):
    cohort = load_cohort(workspace / "cohort")
    slide = cohort.patients[0].slides[0]
    out = tmp_path / "att.csv"
    assert main(["export-attention", "--run", str(workspace / "run"), "--cohort",
                 str(workspace / "cohort"), "--slide-id", slide.slide_id, "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert abs(sum(float(r["attention_weight"]) for r in rows) - 1) < 1e-6
    assert len(rows) == sum(1 for p in slide.patches if p.n_cells)
    assert main(["export-attention", "--run", str(workspace / "run"), "--cohort",
                 str(workspace / "cohort"), "--slide-id", "NOPE"]) == 2


def test_ablate_grid(workspace, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--cohort", str(workspace / "cohort"), "--config",
                 str(workspace / "train.json"), "--out", str(out)]) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    assert len(body) == 5 and len(header) == 2 + 8
    assert [(r[0], r[1]) for r in body] == [("1", "1D"), ("1", "2D"), ("1", "3D"), ("0", "1D"), ("0", "2D")]
    doc = json.loads((out / "ablation.json").read_text())
    assert len({r["fold_hash"] for r in doc}) == 1


def test_ensemble_command(workspace, tmp_path):
    out = tmp_path / "ens"
    assert main(["ensemble", "--cohort", str(workspace / "cohort"), "--config",
                 str(workspace / "train.json"), "--out", str(out)]) == 0
    report = json.loads((out / "ensemble_report.json").read_text())
    assert len(report["models"]) == 7
    assert main(["stats", "--run", str(out), "--cohort", str(workspace / "cohort")]) == 0
