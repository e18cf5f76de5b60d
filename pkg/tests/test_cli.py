import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

import etag.harness as harness
from etag import autodiff as ad
from etag.checks import ALL_CHECKS
from etag.cli import main

TINY = {"data": {"samples_per_class": 40}, "train": {"solver_epochs": 2, "generator_epochs": 2}}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_writes_artifacts_and_is_reproducible(tmp_path, config, capsys):
    before = config.read_bytes()
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r1")]) == 0
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r2")]) == 0
    for name in ("metrics.json", "acc_matrix.csv", "confusion.csv", "curves.csv"):
        assert (tmp_path / "r1" / name).exists()
    assert (tmp_path / "r1" / "metrics.json").read_bytes() == (tmp_path / "r2" / "metrics.json").read_bytes()
    assert config.read_bytes() == before
    assert "A=" in capsys.readouterr().out


def test_bad_key_rejected_before_work(tmp_path, config, capsys):
    out = tmp_path / "never"
    assert main(["train", "--config", str(config), "--out", str(out), "--set", "train.bogus=1"]) == 1
    assert "train.bogus" in capsys.readouterr().err
    assert not out.exists()


def test_nan_abort_exit_code_and_diagnostics(tmp_path, config, monkeypatch):
    orig = harness.solver_objective

    def poisoned(*args, **kwargs):
        loss, parts = orig(*args, **kwargs)
        parts["total"] = float("nan")
        return loss, parts

    monkeypatch.setattr(harness, "solver_objective", poisoned)
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r")]) == 2
    diag = json.loads((tmp_path / "r" / "diagnostics.json").read_text())
    assert diag["where"]["phase"] == "solver"


def test_log_level_env(tmp_path, config, monkeypatch):
    monkeypatch.setenv("ETAG_LOG_LEVEL", "loud")
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r")]) == 1


def test_ablate_counts_and_summary(tmp_path, config):
    out = tmp_path / "ab"
    assert main(["ablate", "--config", str(config), "--variants", "Fine,eTag", "--seeds", "0,1,2",
                 "--out", str(out)]) == 0
    runs = sorted(out.glob("*/seed_*/metrics.json"))
    assert len(runs) == 6
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["variant"] for r in rows] == ["Fine", "eTag"]
    for row in rows:
        per_run = [json.loads(p.read_text()) for p in runs if p.parent.parent.name == row["variant"]]
        assert int(row["runs"]) == 3
        assert abs(float(row["A_mean"]) - np.mean([m["A"] for m in per_run])) < 1e-12
        assert abs(float(row["F_mean"]) - np.mean([m["F"] for m in per_run])) < 1e-12
        assert abs(float(row["A_std"]) - np.std([m["A"] for m in per_run], ddof=1)) < 1e-12
        assert "±" in row["A"]


def test_ablate_parallel_matches_serial(tmp_path, config):
    args = ["ablate", "--config", str(config), "--variants", "B1", "--seeds", "0,1"]
    assert main(args + ["--out", str(tmp_path / "s")]) == 0
    assert main(args + ["--out", str(tmp_path / "p"), "--workers", "2"]) == 0
    assert (tmp_path / "s" / "ablation.csv").read_bytes() == (tmp_path / "p" / "ablation.csv").read_bytes()


def test_ablate_rejects_unknown_variant(tmp_path, config, capsys):
    assert main(["ablate", "--config", str(config), "--variants", "eTag,B9", "--out", str(tmp_path / "x")]) == 1
    assert "B9" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_ablate_tau_sweep_via_overrides(tmp_path, config):
    for tau in (1, 3):
        out = tmp_path / f"tau{tau}"
        assert main(["ablate", "--config", str(config), "--variants", "eTag", "--seeds", "0",
                     "--set", f"tau={tau}", "--out", str(out)]) == 0
        m = json.loads((out / "eTag" / "seed_0" / "metrics.json").read_text())
        assert m["config"]["tau"] == tau


def test_grad_check_passes_and_lists_each_op_once(tmp_path):
    assert main(["grad-check", "--out", str(tmp_path), "--points", "2"]) == 0
    rows = read_csv(tmp_path / "grad_check.csv")[1:]
    names = [r[0] for r in rows]
    assert sorted(names) == sorted(ALL_CHECKS) and len(names) == len(set(names))
    assert all(r[-1] == "pass" for r in rows)


def test_grad_check_catches_sign_error_in_kl_backward(tmp_path, monkeypatch, capsys):
    good = ad.KLDivergence.backward

    def flipped(self, g):
        dp, dq = good(self, g)
        return dp, -dq

    monkeypatch.setattr(ad.KLDivergence, "backward", flipped)
    assert main(["grad-check", "--out", str(tmp_path), "--points", "1"]) == 3
    err = capsys.readouterr().err
    assert "kl_divergence" in err
    failed = {r[0] for r in read_csv(tmp_path / "grad_check.csv")[1:] if r[-1] == "FAIL"}
    assert "kl_divergence" in failed and "matmul" not in failed


def test_report_single_and_pair(tmp_path, config):
    for name in ("a", "b"):
        assert main(["train", "--config", str(config), "--out", str(tmp_path / name)]) == 0
    assert main(["report", str(tmp_path / "a"), "--out", str(tmp_path / "rep1")]) == 0
    rows = read_csv(tmp_path / "rep1" / "curves.csv")
    assert len(rows) - 1 == sum(t + 1 for t in range(4))
    assert main(["report", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "rep2")]) == 0
    header = read_csv(tmp_path / "rep2" / "curves.csv")[0]
    assert header == ["after_task", "task", "a", "b"]
    assert (tmp_path / "rep2" / "confusion_a.csv").exists() and (tmp_path / "rep2" / "confusion_b.csv").exists()


def test_report_missing_and_malformed(tmp_path, capsys):
    assert main(["report", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 1
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "metrics.json").write_text("{not json")
    assert main(["report", str(bad), "--out", str(tmp_path / "r")]) == 1
    assert str(bad / "metrics.json") in capsys.readouterr().err


def test_outputs_stay_under_out_dir(tmp_path, config, monkeypatch):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "out")]) == 0
    assert list(work.iterdir()) == []


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "etag", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "ablate", "grad-check", "report"):
        assert cmd in proc.stdout
