import dataclasses
import json
import subprocess
import sys

import numpy as np
import pytest

from neurotype import cli
from neurotype import datapipe as dp


def run(*argv):
    return cli.main([str(a) for a in argv])


def synth(tmp_path, task="blobs", seed=0, **opts):
    out = tmp_path / f"synth_{task}_{seed}"
    extra = [f"--{k.replace('_', '-')}={v}" for k, v in opts.items()]
    assert run("synth", "--task", task, "--out-dir", out, "--seed", seed, *extra) == 0
    return out


@pytest.fixture
def blobs_ingested(tmp_path):
    src = synth(tmp_path, n=100)
    out = tmp_path / "ingested"
    assert run("ingest", "--input", src / "data.csv", "--out-dir", out) == 0
    return out


@pytest.fixture
def shift_ingested(tmp_path):
    src = synth(tmp_path, task="shift", n_source=60, n_target=60)
    out = tmp_path / "ingested_shift"
    assert run("ingest", "--input", src / "data.csv", "--out-dir", out,
               "--stratify", "organism") == 0
    return out


def test_ingest_default_split_counts(blobs_ingested):
    summary = json.loads((blobs_ingested / "ingest_summary.json").read_text())
    assert summary["counts"] == {"train": 80, "validation": 10, "test": 10}
    for name in ("train", "validation", "test"):
        assert len(dp.load_table(blobs_ingested / f"{name}.csv")) == summary["counts"][name]


def test_ingest_normalizes_with_train_statistics(blobs_ingested):
    train = dp.load_table(blobs_ingested / "train.csv")
    np.testing.assert_allclose(train.X.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(train.X.std(axis=0), 1.0, atol=1e-12)


def test_ingest_missing_column_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text(",".join(dp.FEATURE_NAMES[:-1]) + "\n" + ",".join(["1"] * 40) + "\n")
    assert run("ingest", "--input", path, "--out-dir", tmp_path / "o") == 2
    assert "vrest" in capsys.readouterr().err


def test_invalid_model_is_usage_error(blobs_ingested, tmp_path):
    with pytest.raises(SystemExit) as info:
        run("train", "--model", "xgboost", "--data-dir", blobs_ingested, "--out-dir", tmp_path)
    assert info.value.code == 2


def test_train_then_eval_lspin_with_gates(blobs_ingested, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--model", "lspin", "--data-dir", blobs_ingested, "--out-dir", out,
               "--epochs", 5) == 0
    for name in ("checkpoint.json", "checkpoint_best.json", "history.csv", "history.png",
                 "manifest.json"):
        assert (out / name).exists()
    ev = tmp_path / "eval"
    assert run("eval", "--checkpoint", out / "checkpoint.json", "--data",
               blobs_ingested / "test.csv", "--out-dir", ev, "--export-gates") == 0
    header = (ev / "gate_matrix.csv").read_text().splitlines()[1].split(",")
    assert header[:3] == ["sample_id", "predicted", "true"]
    assert tuple(header[3:]) == dp.FEATURE_NAMES
    assert (ev / "gate_matrix.png").exists() and (ev / "confusion.png").exists()
    assert len(json.loads((ev / "metrics.json").read_text())["class_names"]) == 5


def test_dann_eval_reports_per_organism(shift_ingested, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--model", "dann", "--data-dir", shift_ingested, "--out-dir", out,
               "--epochs", 2, "--no-plots") == 0
    ev = tmp_path / "eval"
    assert run("eval", "--checkpoint", out / "checkpoint.json", "--data",
               shift_ingested / "test.csv", "--out-dir", ev, "--no-plots") == 0
    for group in ("mouse", "human"):
        counts = np.loadtxt(ev / f"{group}_confusion.csv", delimiter=",", skiprows=2,
                            usecols=(1, 2))
        assert counts.shape == (2, 2)
    metrics = json.loads((ev / "all_metrics.json").read_text())
    assert metrics["binary"]["positive"] == "inhibitory"


def test_export_gates_on_dann_is_usage_error(shift_ingested, tmp_path, capsys):
    out = tmp_path / "run"
    run("train", "--model", "dann", "--data-dir", shift_ingested, "--out-dir", out,
        "--epochs", 1, "--no-plots")
    code = run("eval", "--checkpoint", out / "checkpoint.json", "--data",
               shift_ingested / "test.csv", "--out-dir", tmp_path / "e", "--export-gates")
    assert code == 2
    assert "lspin" in capsys.readouterr().err


@pytest.fixture
def lspin_checkpoint(blobs_ingested, tmp_path):
    out = tmp_path / "lspin_run"
    run("train", "--model", "lspin", "--data-dir", blobs_ingested, "--out-dir", out,
        "--epochs", 1, "--no-plots")
    return out / "checkpoint.json"


@pytest.mark.parametrize("content", ["", ",".join(dp.FEATURE_NAMES) + "\n"])
def test_eval_on_empty_data_exits_2(lspin_checkpoint, tmp_path, content):
    path = tmp_path / "empty.csv"
    path.write_text(content)
    assert run("eval", "--checkpoint", lspin_checkpoint, "--data", path,
               "--out-dir", tmp_path / "e") == 2


def test_eval_schema_mismatch_prints_both_hashes(lspin_checkpoint, blobs_ingested, tmp_path,
                                                 capsys):
    data = dp.load_table(blobs_ingested / "test.csv")
    names = list(dp.FEATURE_NAMES)
    names[0], names[1] = names[1], names[0]
    swapped = dataclasses.replace(data, X=data.X[:, [1, 0] + list(range(2, 41))],
                                  feature_names=tuple(names))
    path = dp.save_table(swapped, tmp_path / "swapped.csv")
    assert run("eval", "--checkpoint", lspin_checkpoint, "--data", path,
               "--out-dir", tmp_path / "e") == 2
    err = capsys.readouterr().err
    assert dp.schema_hash(dp.FEATURE_NAMES) in err and dp.schema_hash(names) in err


def test_synth_is_deterministic(tmp_path):
    a = synth(tmp_path / "a")
    b = synth(tmp_path / "b")
    assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()
    assert (a / "truth.json").read_bytes() == (b / "truth.json").read_bytes()


def test_synth_truth_sidecar(tmp_path):
    truth = json.loads((synth(tmp_path) / "truth.json").read_text())
    assert len(truth["informative_idx"]) == 5
    assert len(set(truth["informative_idx"])) == 5
    assert truth["bayes_accuracy"] > 0.95


def test_synth_zero_shift_flags_identical_domains(tmp_path):
    truth = json.loads((synth(tmp_path, task="shift", shift=0.0) / "truth.json").read_text())
    assert truth["domains_identical"] is True


def test_out_root_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path / "root"))
    assert run("synth", "--task", "blobs", "--out-dir", "rel", "--n", "20") == 0
    assert (tmp_path / "root" / "rel" / "data.csv").exists()


def test_manifest_records_input_digests(blobs_ingested):
    manifest = json.loads((blobs_ingested / "manifest.json").read_text())
    (path, digest), = manifest["inputs"].items()
    assert digest == cli.sha256_of(path)


def test_train_is_bitwise_repeatable(blobs_ingested, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--model", "lspin", "--data-dir", blobs_ingested, "--out-dir",
                   tmp_path / name, "--epochs", 3, "--seed", 7, "--no-plots") == 0
    assert (tmp_path / "a" / "history.csv").read_bytes() == \
        (tmp_path / "b" / "history.csv").read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "neurotype", "--version"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("neurotype ")
