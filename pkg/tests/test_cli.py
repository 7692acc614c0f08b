import json

import pytest
import yaml

from imavae.cli import build_parser, main

TINY = {"experiment": "self-consistency", "dim": 2, "gamma_sq_grid": [10.0, 100.0, 1000.0],
        "seeds": [0], "samples": [60, 20, 20], "encoder": {"hidden": 8},
        "train": {"max_epochs": 1}, "n_mc_eval": 4, "n_mc_cima": 200}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_gen_data(cfg_path, tmp_path, capsys):
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "d")]) == 0
    files = sorted(p.name for p in (tmp_path / "d").iterdir())
    assert files == ["data_seed0.txt"]


def test_run_and_export(cfg_path, tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert main(["run", "--config", str(cfg_path), "--out", str(out), "--seed", "9"]) == 0
    assert (tmp_path / "r.csv.meta.json").exists()
    meta = json.loads((tmp_path / "r.csv.meta.json").read_text())
    assert meta["config"]["master_seed"] == 9
    summary = tmp_path / "s.csv"
    assert main(["export", "--in", str(out), "--out", str(summary)]) == 0
    lines = summary.read_text().splitlines()
    assert lines[0].startswith("gamma_sq,severity,n,") and len(lines) == 4
    assert "log-log slope" in capsys.readouterr().out


def test_errors_are_machine_readable(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment: nope\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x.csv")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigurationError" and err["command"] == "run"
    assert main(["run", "--config", str(tmp_path / "missing.yaml"), "--out", "x"]) == 2


def test_verify_only(capsys):
    assert main(["verify", "--only", "7"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and out[0].startswith("criterion 7 PASS")
    assert main(["verify", "--only", "12"]) == 2
