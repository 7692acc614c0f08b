import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from imavae import acceptance, experiments
from imavae.errors import ConfigurationError
from imavae.experiments import (CSV_FIELDS, ExperimentConfig, RunRecord, build_mixing,
                                export_results, load_config, paper_scale, records_from_csv,
                                records_to_csv, run_cell, run_experiment)
from imavae.ima import cima_local

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def tiny(**over):
    d = dict(experiment="self-consistency", dim=2, gamma_sq_grid=[10.0, 1000.0], seeds=[0, 1],
             samples=[60, 20, 20], encoder={"hidden": 8},
             train={"max_epochs": 2, "batch_size": 32}, n_mc_eval=4, n_mc_cima=200)
    d.update(over)
    return ExperimentConfig.from_dict(d)


@pytest.mark.parametrize("bad", [
    {"experiment": "nope"},
    {"samples": [10, 10]},
    {"gamma_sq_grid": [0.0]},
    {"seeds": []},
    {"train": {"gamma_sq": 3.0}},
    {"train": {"learning_rate": -1.0}},
    {"cima_severity_grid": [-1.0]},
    {"bogus": 1},
])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        tiny(**bad)


@pytest.mark.parametrize("name", sorted(acceptance.CONFIGS))
def test_yaml_configs_mirror_acceptance(name):
    assert load_config(CONFIG_DIR / f"{name}.yaml") == acceptance.config(name)


def test_load_config_rejects_non_mapping(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigurationError):
        load_config(p)


def test_paper_scale():
    big = paper_scale(acceptance.config("self_consistency"))
    assert big.samples == [42000, 12000, 6000] and len(big.seeds) == 20
    assert acceptance.config("self_consistency").samples == [7000, 2000, 1000]


def test_cells_order():
    cfg = tiny(cima_severity_grid=[0.0, 1.0], experiment="moebius-mcc")
    assert cfg.cells()[:3] == [(0, 0, 0), (0, 0, 1), (0, 1, 0)]
    assert len(cfg.cells()) == 8


def test_build_mixing_pinned_and_severity():
    cfg = tiny(mixing={"kind": "mlp", "n_layers": 2, "seed": 4})
    a, b = build_mixing(cfg, 0), build_mixing(cfg, 1)
    assert a.params.equals(b.params)
    mob = tiny(experiment="moebius-mcc", dim=3, prior="uniform")
    z = np.random.default_rng(0).uniform(0, 1, (5, 3))
    assert np.all(np.abs([cima_local(j) for j in build_mixing(mob, 0, 0.0).jacobian(z)]) < 1e-8)
    skew = build_mixing(mob, 0, 3.0).jacobian(z)
    assert min(cima_local(j) for j in skew) > 0.1
    with pytest.raises(ConfigurationError):
        build_mixing(tiny(mixing={"kind": "mlp", "depth": 2}), 0)


def test_csv_round_trip():
    recs = [RunRecord("self-consistency", 0, 10.0, elbo_star=-1.25, mcc=0.5, epochs=3),
            RunRecord("moebius-mcc", 1, 1e5, severity=2.0, gap=float("nan"), error="Boom: x")]
    text = records_to_csv(recs)
    assert text.splitlines()[0] == ",".join(CSV_FIELDS)
    assert "null" in text and "nan" not in text
    assert records_from_csv(text) == recs
    assert records_to_csv([]) == ",".join(CSV_FIELDS) + "\n"
    assert records_from_csv(records_to_csv([])) == []
    with pytest.raises(ValueError):
        records_from_csv("a,b\n")


def test_linear_experiment_fast_and_exact():
    cfg = ExperimentConfig.from_dict({"experiment": "linear-closed-form", "dim": 3,
                                      "gamma_sq_grid": [1.0, 1e10], "seeds": [0, 1, 2]})
    start = time.perf_counter()
    recs = run_experiment(cfg)
    assert time.perf_counter() - start < 1.0
    for r in recs:
        assert r.error is None and r.gap >= 0
        if r.gamma_sq == 1e10:
            assert abs(r.gap - r.cima_global) < 1e-4


def test_training_sweep_records_and_isolation():
    cfg = tiny()
    recs = run_experiment(cfg)
    assert [(r.seed, r.gamma_sq) for r in recs] == [(0, 10.0), (0, 1000.0), (1, 10.0), (1, 1000.0)]
    for r in recs:
        assert r.error is None
        assert r.best_val_elbo >= r.initial_val_elbo
        assert 0 <= r.mcc <= 1 and r.mean_sigma_sq > 0 and r.epochs == 2
    again, _ = run_cell(cfg, 1, 1, 0)
    assert records_to_csv([again]) == records_to_csv([recs[3]])


def test_workers_do_not_change_results():
    cfg = tiny(seeds=[0], gamma_sq_grid=[10.0, 100.0])
    assert records_to_csv(run_experiment(cfg, workers=2)) == records_to_csv(run_experiment(cfg))


def test_failing_cell_is_recorded(monkeypatch):
    real = experiments.train_vae

    def flaky(model, data, config):
        if config.gamma_sq == 1000.0:
            raise RuntimeError("synthetic failure")
        return real(model, data, config)

    monkeypatch.setattr(experiments, "train_vae", flaky)
    recs = run_experiment(tiny(seeds=[0]))
    assert recs[0].error is None
    assert recs[1].error == "RuntimeError: synthetic failure" and recs[1].mcc is None


def test_gap_comparison_cell():
    cfg = tiny(experiment="gap-comparison", seeds=[0], gamma_sq_grid=[100.0],
               mixing={"kind": "mlp", "n_layers": 2, "mode": "upper_triangular",
                       "activation": "sigmoid", "seed": 33, "gain": 10.0})
    (r,) = run_experiment(cfg)
    assert r.error is None
    assert r.l_ima == pytest.approx(r.log_px - r.cima_global)
    assert r.gap == pytest.approx(r.log_px - r.elbo_star)


def test_moebius_cell_uniform_prior():
    cfg = tiny(experiment="moebius-mcc", dim=3, prior="uniform", seeds=[0], gamma_sq_grid=[10.0],
               cima_severity_grid=[0.0])
    (r,) = run_experiment(cfg)
    assert r.error is None and r.severity == 0.0
    assert abs(r.cima_global) < 1e-8


def test_export_writes_sidecar(tmp_path):
    cfg = tiny(seeds=[0], gamma_sq_grid=[10.0])
    recs, times = run_experiment(cfg, with_timing=True)
    path = export_results(recs, tmp_path / "out" / "r.csv", cfg, times)
    assert records_from_csv(path.read_text()) == recs
    meta = json.loads((tmp_path / "out" / "r.csv.meta.json").read_text())
    assert meta["n_records"] == 1 and len(meta["wall_clock_seconds"]) == 1
    assert meta["config"]["experiment"] == "self-consistency"
    assert replace(cfg) == ExperimentConfig.from_dict(meta["config"])
