import json
import subprocess
import sys

import pytest

from pseudolabel_kit import io
from pseudolabel_kit.cli import main


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth", "--scenes", "8", "--seed", "5", "--out", str(out)]) == 0
    return out


def test_synth_outputs(synth_dir):
    gt = io.load_annotations(synth_dir / "annotations.json")
    weak = io.load_annotations(synth_dir / "weak_labels.json")
    assert len(gt.records) == 8 and all(r.is_fully_annotated for r in gt.records)
    assert all(not r.is_fully_annotated for r in weak.records)
    assert [r.weak_labels for r in gt.records] == [r.weak_labels for r in weak.records]
    dets = io.load_detections(synth_dir / "detections.json", gt.num_classes)
    assert set(dets) <= {r.image_id for r in gt.records}


@pytest.mark.parametrize("strategy", ["rps", "threshold", "top1"])
def test_generate_is_reproducible(synth_dir, tmp_path, strategy):
    args = ["generate", "--annotations", str(synth_dir / "weak_labels.json"),
            "--detections", str(synth_dir / "detections.json"), "--strategy", strategy, "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_generate_threshold_matches_library(synth_dir, tmp_path):
    from pseudolabel_kit.pseudolabel import hard_threshold

    out = tmp_path / "t.json"
    assert main(["generate", "--annotations", str(synth_dir / "weak_labels.json"),
                 "--detections", str(synth_dir / "detections.json"),
                 "--strategy", "threshold", "--tau", "0.9", "--out", str(out)]) == 0
    ds = io.load_annotations(synth_dir / "weak_labels.json")
    dets = io.load_detections(synth_dir / "detections.json", ds.num_classes)
    expected = [hard_threshold(dets.get(r.image_id, []), r.weak_labels, 0.9, 0.5, r.image_id) for r in ds.records]
    assert io.load_pseudo_labels(out) == expected


def test_generate_b_prime(synth_dir, tmp_path):
    out = tmp_path / "p.json"
    assert main(["generate", "--annotations", str(synth_dir / "weak_labels.json"),
                 "--detections", str(synth_dir / "detections.json"), "--b-prime", "3", "--out", str(out)]) == 0
    sets = io.load_pseudo_labels(out)
    assert len(sets) == 3 * 8


def test_evaluate(synth_dir, tmp_path):
    pl = tmp_path / "p.json"
    main(["generate", "--annotations", str(synth_dir / "weak_labels.json"),
          "--detections", str(synth_dir / "detections.json"), "--out", str(pl)])
    assert main(["evaluate", "--pseudo", str(pl), "--annotations", str(synth_dir / "annotations.json"),
                 "--out", str(tmp_path / "r.json")]) == 0
    doc = json.loads((tmp_path / "r.json").read_text())
    overall = doc["rows"][0]
    assert overall["scope"] == "all" and 0 <= overall["recall"] <= 1
    assert main(["evaluate", "--pseudo", str(pl), "--annotations", str(synth_dir / "annotations.json"),
                 "--out", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text().startswith("scope,tp,fp,fn,precision")


def test_evaluate_needs_ground_truth(synth_dir, tmp_path):
    pl = tmp_path / "p.json"
    io.write_pseudo_labels(pl, [])
    assert main(["evaluate", "--pseudo", str(pl), "--annotations", str(synth_dir / "weak_labels.json")]) == 2


def test_compare_file_based(synth_dir, tmp_path):
    out = tmp_path / "c.csv"
    assert main(["compare", "--annotations", str(synth_dir / "annotations.json"), "--trials", "2",
                 "--strategies", "rps,top1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("strategy,kind,trials,precision_mean")
    assert [l.split(",")[0] for l in lines[1:]] == ["rps", "top1"]


def test_em_study_table(tmp_path):
    out = tmp_path / "em.json"
    assert main(["em-study", "--n", "6", "--samples", "1000", "--instances", "2", "--seed", "1", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["rows"]
    estimators = [r["estimator"] for r in rows if r["instance"] == 0]
    assert estimators == ["exact", "mc", "mc", "max", "max_posterior", "threshold"]
    assert [r["samples"] for r in rows if r["estimator"] == "mc"][:2] == [100, 1000]


def test_em_study_explicit_probabilities(capsys):
    assert main(["em-study", "--n", "2", "--samples", "100", "--prior", "0.9,0.2", "--model", "0.5,0.5"]) == 0
    rows = json.loads(capsys.readouterr().out)["rows"]
    assert {r["estimator"]: r["assignment"] for r in rows}["max_posterior"] == "10"


@pytest.mark.parametrize(
    "argv",
    [
        ["generate", "--bogus"],
        ["em-study", "--n", "25"],
        ["em-study", "--p-t", "1.5"],
        ["compare", "--strategies", "nope"],
        ["compare", "--miss-rate", "2"],
        ["em-study", "--seed", "-1"],
        ["em-study", "--n", "2", "--prior", "0.5"],
        ["nosuchcommand"],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert capsys.readouterr().err


def test_bad_input_file_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--annotations", str(bad), "--detections", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_missing_file_is_runtime_error(tmp_path):
    assert main(["evaluate", "--pseudo", str(tmp_path / "nope.json"), "--annotations", str(tmp_path / "x.json")]) == 1


def test_inputs_not_mutated(synth_dir, tmp_path):
    before = {p.name: p.read_bytes() for p in synth_dir.iterdir()}
    main(["generate", "--annotations", str(synth_dir / "weak_labels.json"),
          "--detections", str(synth_dir / "detections.json"), "--out", str(tmp_path / "p.json")])
    main(["compare", "--annotations", str(synth_dir / "annotations.json"), "--trials", "1", "--out", str(tmp_path / "c.json")])
    assert before == {p.name: p.read_bytes() for p in synth_dir.iterdir()}


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pseudolabel_kit", "em-study", "--n", "3", "--samples", "100"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and '"rows"' in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "pseudolabel_kit", "synth", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
