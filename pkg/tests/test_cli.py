from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from attnpot.cli import dispatch

TINY = {"hidden_size": 16, "num_layers": 1, "num_heads": 2, "k": 6, "rbf_size": 8, "num_freq": 4, "lmax": 1,
        "ffn_multiplier": 1, "output_hidden_layers": 1, "r_cut": 5.0}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert dispatch(["gen-data", "--frames", "10", "--atoms", "6", "--seed", "3", "--out", str(data)]) == 0
    cfg = root / "run.json"
    cfg.write_text(json.dumps({"schema_version": 1, "model": TINY, "train": {"epochs": 2, "lr": 2e-3},
                               "dataset": str(data)}))
    run = root / "run"
    assert dispatch(["train", "--config", str(cfg), "--out", str(run)]) == 0
    return root, data, cfg, run


def rows(path):
    return list(csv.DictReader(path.open()))


def test_gen_data_outputs_and_determinism(workspace, tmp_path):
    _, data, _, _ = workspace
    assert {p.name for p in data.iterdir()} == {"train.extxyz", "val.extxyz", "test.extxyz", "manifest.txt"}
    again = tmp_path / "again"
    assert dispatch(["gen-data", "--frames", "10", "--atoms", "6", "--seed", "3", "--out", str(again)]) == 0
    for name in ("train.extxyz", "val.extxyz", "test.extxyz"):
        assert (again / name).read_bytes() == (data / name).read_bytes()
    assert dispatch(["gen-data", "--potential", "yukawa", "--frames", "4", "--atoms", "6",
                     "--out", str(tmp_path / "y")]) == 0
    assert "yukawa" in (tmp_path / "y" / "manifest.txt").read_text()


def test_train_outputs_are_reproducible(workspace, tmp_path):
    _, _, cfg, run = workspace
    assert {"best", "best.json", "metrics.csv", "config.json"} <= {p.name for p in run.iterdir()}
    assert not [p for p in run.parent.iterdir() if p.name.startswith(".run-")]
    rerun = tmp_path / "rerun"
    assert dispatch(["train", "--config", str(cfg), "--out", str(rerun)]) == 0
    assert (rerun / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()
    assert (rerun / "best").read_bytes() == (run / "best").read_bytes()


def test_eval_reproduces_best_validation_row(workspace, tmp_path):
    _, _, _, run = workspace
    out = tmp_path / "eval"
    assert dispatch(["eval", "--checkpoint", str(run / "best"), "--out", str(out)]) == 0
    best_epoch = json.loads((run / "best.json").read_text())["best_epoch"]
    want = [r for r in rows(run / "metrics.csv") if r["split"] == "val" and int(r["epoch"]) == best_epoch][0]
    (got,) = rows(out / "metrics.csv")
    for key in ("loss", "energy_mae_mev_per_atom", "force_mae_mev_per_a", "epoch", "split"):
        assert got[key] == want[key]
    checks = json.loads((out / "checks.json").read_text())
    names = {c["name"] for c in checks}
    assert {"translation_permutation", "rotation_energy", "force_consistency"} <= names
    assert {r["name"] for r in rows(out / "checks.csv")} == names


def test_md_with_and_without_model(workspace, tmp_path):
    _, data, _, run = workspace
    assert dispatch(["md", "--steps", "20", "--stride", "5", "--out", str(tmp_path / "lj")]) == 0
    assert len((tmp_path / "lj" / "energies.csv").read_text().splitlines()) == 6
    assert dispatch(["md", "--checkpoint", str(run / "best"), "--dataset", str(data), "--steps", "4",
                     "--stride", "2", "--ensemble", "nvt", "--out", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "trajectory.extxyz").exists()


def test_bench_and_ablate(workspace, tmp_path):
    _, data, _, _ = workspace
    model = json.dumps({"schema_version": 1, "model": TINY})
    (tmp_path / "m.json").write_text(model)
    assert dispatch(["bench", "--config", str(tmp_path / "m.json"), "--sizes", "8,16,32,64,128,256",
                     "--repeats", "1", "--warmups", "0", "--fwd-bwd-max-atoms", "8", "--compare-nodeatt",
                     "--out", str(tmp_path / "b")]) == 0
    scaling = rows(tmp_path / "b" / "scaling.csv")
    assert {r["config"] for r in scaling} == {"nodeatt_on", "nodeatt_off"} and len(scaling) == 12
    assert set(json.loads((tmp_path / "b" / "fit.json").read_text())) == {"nodeatt_on", "nodeatt_off"}
    assert dispatch(["ablate", "--config", str(tmp_path / "m.json"), "--dataset", str(data), "--grid", "erope",
                     "--epochs", "1", "--out", str(tmp_path / "a")]) == 0
    table = rows(tmp_path / "a" / "ablation.csv")
    assert [r["ERoPE"] for r in table] == ["on", "off"]


def test_usage_errors_exit_2(capsys):
    assert dispatch(["frobnicate"]) == 2
    assert dispatch(["eval"]) == 2
    assert dispatch(["train", "--epochs", "many"]) == 2


@pytest.mark.parametrize("argv, fragment", [
    (["train", "--dataset", "/nonexistent"], "not found"),
    (["train"], "needs --dataset"),
    (["eval", "--checkpoint", "/nonexistent"], "not found"),
    (["gen-data"], "needs --out"),
    (["bench", "--sizes", "8,x"], "integers"),
    (["bench", "--sizes", "8,16", "--toggle", "lae=maybe"], "--toggle"),
])
def test_validation_errors_exit_1_with_json(argv, fragment, capsys):
    assert dispatch(argv) == 1
    msg = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert msg["command"] == argv[0]
    assert fragment in msg["message"]


def test_bad_config_file(tmp_path, capsys):
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"schema_version": 9}))
    assert dispatch(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    bad.write_text(json.dumps({"modle": {}}))
    assert dispatch(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    bad.write_text(json.dumps({"model": {"hidden": 3}}))
    assert dispatch(["bench", "--config", str(bad), "--sizes", "8,16,32,64,128,256"]) == 1
    assert not (tmp_path / "x").exists()


def test_failed_run_leaves_no_output(workspace, tmp_path):
    _, data, _, _ = workspace
    out = tmp_path / "never"
    assert dispatch(["md", "--dataset", str(data), "--frame", "99", "--out", str(out)]) == 1
    assert not out.exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "attnpot", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "eval", "md", "bench", "ablate"):
        assert cmd in res.stdout
