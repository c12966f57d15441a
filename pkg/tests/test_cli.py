import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from unirit import cli, gmm
from unirit.cli import main, report_aggregate


def digest_dir(path, skip=("timing.json",)):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file() and p.name not in skip}


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--family", "sphere,blob", "--count", "3", "--points", "64",
                 "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture
def untrained(tmp_path, dataset):
    out = tmp_path / "model"
    assert main(["train", "--manifest", str(dataset / "manifest.json"), "--epochs", "0",
                 "--points", "64", "--out", str(out)]) == 0
    return out / "checkpoint.json"


def test_synth_writes_pairs_and_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--family", "sphere", "--count", "4", "--seed", "7",
                     "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    clouds = [f for f in files if f.endswith(".xyz")]
    assert len(clouds) == 8 and "manifest.json" in files and "resolved_config.json" in files
    assert digest_dir(tmp_path / "a") == digest_dir(tmp_path / "b")
    assert main(["synth", "--family", "sphere", "--count", "4", "--seed", "8",
                 "--out", str(tmp_path / "c")]) == 0
    assert digest_dir(tmp_path / "a") != digest_dir(tmp_path / "c")


def test_synth_cycles_families(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert [r["family"] for r in manifest] == ["sphere", "blob", "sphere"]


def test_provenance_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 2, "deform_mm": 5.0, "seed": 3}))
    out = tmp_path / "out"
    assert main(["synth", "--config", str(cfg), "--count", "1", "--points", "32", "--out", str(out)]) == 0
    fields = json.loads((out / "resolved_config.json").read_text())["fields"]
    assert fields["count"] == {"value": 1, "source": "flag"}
    assert fields["deform_mm"] == {"value": 5.0, "source": "config-file"}
    assert fields["seed"] == {"value": 3, "source": "config-file"}
    assert fields["case"] == {"value": "A", "source": "default"}
    assert len(json.loads((out / "manifest.json").read_text())) == 1


def test_resolve_config_directly(tmp_path):
    res = cli.resolve_config({"a": 1, "b": 2, "c": 3}, None, {"b": 20, "c": None})
    assert res == {"a": {"value": 1, "source": "default"}, "b": {"value": 20, "source": "flag"},
                   "c": {"value": 3, "source": "default"}}


def test_validation_errors_exit_1(tmp_path, capsys):
    assert main(["synth", "--count", "0", "--out", str(tmp_path / "x")]) == 1
    assert main(["synth", "--family", "cube", "--out", str(tmp_path / "x")]) == 1
    assert main(["synth", "--rot-deg", "1", "2", "3", "--out", str(tmp_path / "x")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert main(["train", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path / "t")]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_prints_usage_and_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus", "--out", "x"])
    assert exc.value.code == 1
    assert "usage:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_runtime_failure_exits_2(tmp_path, dataset, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli.training, "train", boom)
    assert main(["train", "--manifest", str(dataset / "manifest.json"), "--out", str(tmp_path / "t")]) == 2


def test_eval_on_untrained_checkpoint_is_identity(tmp_path, dataset, untrained):
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(untrained), "--manifest", str(dataset / "manifest.json"),
                 "--out", str(out)]) == 0
    records = json.loads((out / "records.json").read_text())
    assert len(records) == 3
    for r in records:
        assert abs(r["rmse"] - r["pre_rmse"]) <= 1e-6
    with open(out / "aggregate.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["family"] for r in rows] == ["blob", "sphere", "overall"]
    assert set(json.loads((out / "timing.json").read_text())) == {r["pair_id"] for r in records}


def test_register_outputs(tmp_path, dataset, untrained):
    out = tmp_path / "reg"
    src = dataset / "pair_00000_source.xyz"
    assert main(["register", "--checkpoint", str(untrained), "--source", str(src),
                 "--target", str(dataset / "pair_00000_target.xyz"), "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert names == {"aligned.xyz", "rigid_out.xyz", "report.json", "timing.json", "resolved_config.json"}
    assert (out / "aligned.xyz").read_bytes() == src.read_bytes()
    doc = json.loads((out / "report.json").read_text())
    assert doc["report"]["rmse"] == doc["report"]["pre_rmse"]
    assert len(doc["transforms"]) == 3 and doc["composed"]["angle_deg"] == 0.0


def test_register_rejects_bad_checkpoint(tmp_path, dataset):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["register", "--checkpoint", str(bad), "--source", str(dataset / "pair_00000_source.xyz"),
                 "--target", str(dataset / "pair_00000_target.xyz"), "--out", str(tmp_path / "r")]) == 1


def test_train_writes_history_and_config(tmp_path, dataset):
    out = tmp_path / "t"
    assert main(["train", "--manifest", str(dataset / "manifest.json"), "--epochs", "2", "--points", "32",
                 "--ablate-rigid", "--out", str(out)]) == 0
    history = json.loads((out / "loss_history.json").read_text())
    assert [h["epoch"] for h in history] == [1, 2]
    assert all(h["rd"] == 0.0 for h in history)
    fields = json.loads((out / "resolved_config.json").read_text())["fields"]
    assert fields["ablate_rigid"] == {"value": True, "source": "flag"}
    assert fields["lr"]["source"] == "default"


def test_analyze_gmm_matches_module(tmp_path):
    out = tmp_path / "g"
    args = dict(samples=3, picks=3, repetitions=2, K=4, n_points=150, samples_per_pair=150, seed=5)
    assert main(["analyze-gmm", "--family", "sphere", "--family", "ellipsoid",
                 "--samples", "3", "--picks", "3", "--reps", "2", "--k", "4", "--points", "150",
                 "--samples-per-pair", "150", "--seed", "5", "--out", str(out)]) == 0
    labels, mat = gmm.read_matrix_csv(out / "divergence.csv")
    coll = cli.synthetic_collections(["sphere", "ellipsoid"], args["samples"], args["n_points"], args["seed"])
    ref_labels, ref = gmm.divergence_matrix(coll, K=4, samples_per_pair=150, seed=5, picks=3, repetitions=2)
    assert labels == ref_labels
    np.testing.assert_array_equal(mat, ref)


def test_analyze_gmm_on_directories(tmp_path, dataset):
    out = tmp_path / "g"
    assert main(["analyze-gmm", "--collection", f"a={dataset}", "--collection", f"b={dataset}",
                 "--picks", "2", "--reps", "1", "--k", "2", "--samples-per-pair", "50", "--out", str(out)]) == 0
    labels, mat = gmm.read_matrix_csv(out / "divergence.csv")
    assert labels == ["a", "b"] and mat.shape == (2, 2)
    assert main(["analyze-gmm", "--collection", "nolabel", "--out", str(out)]) == 1


def test_report_aggregate_single_record():
    rec = {"pair_id": "x", "family": "sphere", "rmse": 1.5, "pre_rmse": 3.0, "cd": 0.25}
    rows, summary = report_aggregate([rec])
    assert [r["family"] for r in rows] == ["sphere", "overall"]
    for row in rows:
        assert row["n"] == 1
        for k in ("rmse", "pre_rmse", "cd"):
            assert row[f"mean_{k}"] == rec[k] == row[f"median_{k}"]
    assert summary == {"rows": rows}


def test_report_aggregate_two_families_csv(tmp_path):
    rng = np.random.default_rng(0)
    records = [{"pair_id": str(i), "family": "sphere" if i % 3 else "blob",
                "rmse": float(rng.uniform(0, 5)), "pre_rmse": float(rng.uniform(5, 10)),
                "cd": float(rng.uniform(0, 1))} for i in range(11)]
    rows, _ = report_aggregate(records)
    path = tmp_path / "agg.csv"
    cli.write_aggregate_csv(path, rows)
    with open(path) as fh:
        data = list(csv.DictReader(fh))
    assert len(data) == 3
    # spreadsheet-style oracle: plain Python sums over the JSON records
    for row in data:
        group = records if row["family"] == "overall" else [r for r in records if r["family"] == row["family"]]
        for k in ("rmse", "pre_rmse", "cd"):
            assert abs(float(row[f"mean_{k}"]) - sum(r[k] for r in group) / len(group)) <= 1e-9
            assert float(row[f"median_{k}"]) == pytest.approx(float(np.median([r[k] for r in group])), abs=1e-12)


def test_report_aggregate_missing_rmse_and_empty():
    rows, _ = report_aggregate([{"pair_id": "a", "family": "f", "rmse": None, "pre_rmse": None, "cd": 2.0}])
    assert rows[0]["mean_rmse"] is None and rows[0]["mean_cd"] == 2.0
    with pytest.raises(ValueError):
        report_aggregate([])


def test_threads_env(monkeypatch):
    monkeypatch.setenv("UNIRIT_THREADS", "3")
    assert cli._threads() == 3
    monkeypatch.setenv("UNIRIT_THREADS", "zero")
    with pytest.raises(cli.UsageError):
        cli._threads()
    monkeypatch.delenv("UNIRIT_THREADS")
    assert cli._threads() >= 1


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "unirit", "synth", "--count", "1", "--points", "16",
                          "--out", str(tmp_path / "s")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "wrote 1 pairs" in res.stdout
