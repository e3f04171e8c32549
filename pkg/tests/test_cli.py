import json

import numpy as np
import pytest

from memrobust import __version__, neural
from memrobust.cli import main

from cli_helpers import make_iv_file, result_files, run


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_ingest(tmp_path, capsys):
    iv = tmp_path / "dev.csv"
    target = make_iv_file(iv)
    assert run("ingest", iv, "--out", tmp_path / "o") == 0
    prof = json.loads((tmp_path / "o" / "profile.json").read_text())
    assert prof["usability"] == pytest.approx(target.usability, rel=1e-6)
    assert "usability   0.600" in capsys.readouterr().out
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["command"] == "ingest" and man["version"] == __version__ and man["seed"] == 0


def test_ingest_missing_file(tmp_path, capsys):
    assert run("ingest", tmp_path / "nope.csv", "--out", tmp_path / "o") == 2
    assert "not found" in capsys.readouterr().err


def test_ingest_garbage(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("voltage,current\n0.1,abc\n")
    assert run("ingest", bad, "--out", tmp_path / "o") == 2


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MEMROBUST_SEED", "17")
    iv = tmp_path / "dev.csv"
    make_iv_file(iv)
    run("ingest", iv, "--out", tmp_path / "o")
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 17
    monkeypatch.setenv("MEMROBUST_SEED", "x")
    assert run("ingest", iv, "--out", tmp_path / "p") == 2


def test_default_out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    make_iv_file(tmp_path / "dev.csv")
    run("ingest", "dev.csv")
    run("ingest", "dev.csv")
    runs = sorted((tmp_path / "runs").iterdir())
    assert len(runs) == 2 and all((r / "profile.json").exists() for r in runs)


def test_campaign_flow(tmp_path, capsys):
    state = tmp_path / "c.json"
    o = tmp_path / "o"
    assert run("campaign", "init", "--state", state, "--out", o, "--seed", 3) == 0
    assert run("campaign", "init", "--state", state, "--out", o) == 2
    for k in range(3):
        assert run("campaign", "suggest", "--state", state, "--out", o) == 0
        assert run("campaign", "tell", "--state", state, "--pending", "--value", 0.1 * k,
                   "--timestamp", "2024-01-01T00:00:00", "--out", o) == 0
    cfg = "perovskite=MAPbI3,nw_length=1.0,nw_diameter=100,pb_ed_time=10,ag_thickness=200"
    assert run("campaign", "tell", "--state", state, "--config", cfg, "--value", 0.9,
               "--timestamp", "t", "--out", o) == 0
    capsys.readouterr()
    assert run("campaign", "status", "--state", state, "--out", o) == 0
    out = capsys.readouterr().out
    assert "observations 4 of 8400" in out and "best         0.9" in out
    saved = json.loads(state.read_text())
    assert len(saved["history"]) == 4 and saved["pending"] is None


def test_campaign_errors(tmp_path, capsys):
    state = tmp_path / "c.json"
    o = tmp_path / "o"
    assert run("campaign", "suggest", "--state", state, "--out", o) == 2
    run("campaign", "init", "--state", state, "--out", o)
    assert run("campaign", "tell", "--state", state, "--pending", "--value", 1, "--out", o) == 2
    bad = "perovskite=MAPbI3,nw_length=1.1,nw_diameter=100,pb_ed_time=10,ag_thickness=200"
    assert run("campaign", "tell", "--state", state, "--config", bad, "--value", 1, "--out", o) == 2
    assert "nearest grid values" in capsys.readouterr().err


def test_campaign_custom_space(tmp_path):
    space = tmp_path / "space.json"
    space.write_text(json.dumps({"dimensions": [
        {"name": "a", "kind": "numeric", "values": [1, 2]},
        {"name": "b", "kind": "categorical", "values": ["x", "y"]}]}))
    state = tmp_path / "c.json"
    assert run("campaign", "init", "--state", state, "--space", space, "--out", tmp_path / "o") == 0
    assert json.loads(state.read_text())["space"]["size"] == 4


def test_train_and_sweep(tmp_path):
    o = tmp_path / "t"
    assert run("train", "--epochs", 30, "--out", o) == 0
    net = neural.DenseNetwork.load(o / "model.json")
    assert [l.weights.shape for l in net.layers] == [(10, 2), (2, 10)]
    hist = (o / "history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_accuracy" and len(hist) == 31
    assert 0 <= json.loads((o / "metrics.json").read_text())["test_accuracy"] <= 1
    s = tmp_path / "s"
    assert run("sweep", "--model", f"erm={o / 'model.json'}", "--usability", "1.0,0.5",
               "--trials", 3, "--out", s) == 0
    assert len((s / "sweep_trials.csv").read_text().splitlines()) == 1 + 2 * 3


def test_train_bayesmulti_csv(tmp_path):
    csv = tmp_path / "d.csv"
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 3))
    csv.write_text("a,b,c,label\n" + "".join(f"{a},{b},{c},{int(a > 0)}\n" for a, b, c in X))
    assert run("train", "--data", csv, "--method", "bayesmulti", "--hidden", "4,3",
               "--epochs", 5, "--out", tmp_path / "o") == 0
    net = neural.DenseNetwork.load(tmp_path / "o" / "model.json")
    assert net.layers[0].noise.p2 == 0.3 and net.layers[-1].noise is None


def test_train_bad_flags(tmp_path):
    assert run("train", "--p1", 0.8, "--p2", 0.5, "--method", "bayesmulti", "--out", tmp_path) == 2
    assert run("train", "--data", tmp_path / "none.csv", "--out", tmp_path) == 2


def test_sweep_bad_model(tmp_path):
    junk = tmp_path / "m.json"
    junk.write_text("{}")
    assert run("sweep", "--model", junk, "--out", tmp_path / "o") == 2


def test_certify_fixture(tmp_path, capsys):
    assert run("certify", "--out", tmp_path) == 0
    cert = json.loads((tmp_path / "certificate.json").read_text())
    assert cert["certified"] and cert["n_violations"] == 0 and cert["tested_patterns"] > 0
    assert "certified   true" in capsys.readouterr().out


def test_certify_uncertifiable(tmp_path):
    net = neural.DenseNetwork.init([2, 2, 2], seed=0, noise=(0.5, 0.0))
    for layer in net.layers:
        layer.weights[:] = 0.0
    net.save(tmp_path / "m.json")
    assert run("certify", "--model", tmp_path / "m.json", "--input", "0,0", "--out", tmp_path / "o") == 3


def test_crossbar_demo_small(tmp_path):
    assert run("crossbar-demo", "--epochs", 20, "--trials", 2, "--out", tmp_path) == 0
    lines = (tmp_path / "crossbar_demo.csv").read_text().splitlines()
    assert lines[0] == "rep,method,software_accuracy,hardware_accuracy,gap" and len(lines) == 3
    summary = json.loads((tmp_path / "crossbar_summary.json").read_text())
    assert set(summary["mean_gap"]) == {"erm", "bayesmulti"}


def test_crossbar_demo_does_not_fit(tmp_path):
    assert run("crossbar-demo", "--hidden", 11, "--epochs", 1, "--out", tmp_path) == 2


def test_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for o in (a, b):
        run("train", "--epochs", 10, "--method", "bayesmulti", "--seed", 4, "--out", o)
    assert result_files(a) == result_files(b)
