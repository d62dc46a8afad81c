import csv
import math
import threading

import numpy as np
import pytest
import yaml

from apcon import cli, data
from apcon.evaluate import (ABLATIONS, DIVERGED, ConfigError, ExperimentConfig, ResultRow, UndefinedMetricError,
                            append_result, read_results, relative_l2, run_ablation, run_experiment,
                            time_inference)
from apcon.refsolve import DensityField
from apcon.train import TrainConfig

T = np.array([0.0, 1.0])
X = np.array([0.0, 1.0])


def field(vals):
    return DensityField(np.asarray(vals, float), T, X)


def test_relative_l2_examples():
    ref = field([[1.0, 2.0], [3.0, 4.0]])
    assert relative_l2(ref, ref) == 0.0
    assert relative_l2(field(1.1 * ref.rho), ref) == pytest.approx(0.1, rel=1e-12)
    pred = field([[1.0, 2.0], [3.0, 5.0]])
    assert relative_l2(pred, ref) == pytest.approx(math.sqrt(1 / 30), rel=1e-14)
    # degree-0 homogeneity
    assert relative_l2(field(7 * pred.rho), field(7 * ref.rho)) == pytest.approx(relative_l2(pred, ref), rel=1e-14)
    with pytest.raises(UndefinedMetricError):
        relative_l2(ref, field(np.zeros((2, 2))))
    with pytest.raises(ValueError):
        relative_l2(ref, DensityField(ref.rho, T, X + 1))


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(eps=0.0)
    with pytest.raises(ConfigError):
        ExperimentConfig(model="PINN")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig(dataset=str(tmp_path / "missing.bin"))
    path = tmp_path / "ii.bin"
    data.save(data.make_dataset("II", m=8), path)
    with pytest.raises(ConfigError):
        ExperimentConfig(problem="I", dataset=str(path))
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(yaml.safe_dump({"problem": "II", "eps": 1e-4, "model": "APCON_V1",
                                        "net": {"kernel": [1, 2], "channels": 6},
                                        "train": {"epochs": 10, "lr0": 1e-3}}))
    cfg = ExperimentConfig.from_yaml(cfg_path)
    assert cfg.train == TrainConfig(epochs=10, lr0=1e-3)
    assert cfg.net_spec().kernel == (1, 2) and cfg.net_spec().channels == 6 and cfg.net_spec().layer_norm
    assert cfg.problem_spec().t_max == 0.1
    assert ExperimentConfig.from_dict(cfg.to_dict()).digest() == cfg.digest()


def test_result_row_and_locked_append(tmp_path):
    with pytest.raises(ValueError):
        ResultRow("x", -1.0, 1, 0.0, 0.0, 1)
    path = tmp_path / "results.csv"
    rows = [ResultRow(f"m{i}", 0.01 * i, 10, 1.0, 2.0, 1) for i in range(40)]
    threads = [threading.Thread(target=append_result, args=(path, r)) for r in rows]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = read_results(path)
    assert len(got) == 40
    assert sorted(r["method"] for r in got) == sorted(r.method for r in rows)
    append_result(path, ResultRow("d", DIVERGED, 10, 1.0, 2.0, 1))
    assert read_results(path)[-1]["rel_l2"] == DIVERGED


TINY_NET = {"width": 8, "p": 8, "channels": 2}


def tiny_cfg(tmp_path, **kw):
    base = dict(problem="II", eps=1.0, t_max=0.05, model="PICON", net=TINY_NET,
                train=TrainConfig(epochs=2, lr0=1e-3, batch_B=7, n_int=16, n_bdy=8, eval_every=1),
                m=16, nt_eval=6, nx_eval=8, ref_nx=40, n_velocities=8, out_dir=str(tmp_path / "run"),
                results_csv=str(tmp_path / "results.csv"), n_plot=1, diverge_threshold=10.0)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("exp")
    cfg = tiny_cfg(tmp, trials=2)
    outcome = run_experiment(cfg, full=True)
    return cfg, outcome, tmp


def test_run_experiment_artifacts(experiment):
    cfg, outcome, tmp = experiment
    row = outcome.row
    assert row.status == "ok", row
    assert isinstance(row.rel_l2, float) and row.rel_l2 >= 0
    assert row.rel_l2 == min(t["rel_l2"] for t in outcome.per_trial)
    assert row.param_count > 0 and row.trials == 2
    run = tmp / "run"
    for name in ("dataset.bin", "reference.bin", "best.ckpt", "density_grids.csv", "per_sample_rel_l2.csv",
                 "density_sample0.png", "loss.png", "trial0_log.csv", "trial1_log.csv", "config.yaml"):
        assert (run / name).exists(), name
    with open(run / "density_grids.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == cfg.nt_eval * cfg.nx_eval
    results = read_results(tmp / "results.csv")
    assert results[-1]["config_hash"] == cfg.digest()


def test_rerun_reproduces_row(experiment, tmp_path):
    cfg, outcome, tmp = experiment
    again = run_experiment(cfg.replace(trials=2, out_dir=str(tmp_path / "again"), results_csv=None, figures=False))
    assert again.rel_l2 == outcome.row.rel_l2


def test_diverged_sentinel(tmp_path):
    row = run_experiment(tiny_cfg(tmp_path, diverge_threshold=1e-12, figures=False))
    assert row.rel_l2 == DIVERGED and row.status == "diverged"
    assert read_results(tmp_path / "results.csv")[-1]["rel_l2"] == DIVERGED


def test_failed_stage_marks_row(tmp_path, monkeypatch):
    import apcon.evaluate as ev

    def boom(*a, **k):
        raise RuntimeError("disk full")
    monkeypatch.setattr(ev, "obtain_reference", boom)
    row = run_experiment(tiny_cfg(tmp_path))
    assert row.status == "failed"
    assert (tmp_path / "run" / "dataset.bin").exists()
    assert read_results(tmp_path / "results.csv")[-1]["status"] == "failed"


def test_time_inference_edge_cases(experiment):
    cfg, outcome, _ = experiment
    model = cfg.build_model()
    te, xe = cfg.eval_grid()
    stats = time_inference(model, outcome.params.values, np.zeros((0, 32, 64)), te, xe, reps=3)
    assert stats["n"] == 0 and stats["mean_ms"] is None
    stats = time_inference(model, outcome.params.values, np.ones((2, 32, 64)), te, xe, reps=0)
    assert stats["n"] == 0
    stats = time_inference(model, outcome.params.values, np.ones((2, 32, 64)), te, xe, reps=4)
    assert stats["n"] == 4 and stats["mean_ms"] > 0


def test_ablation_grid(tmp_path):
    assert set(ABLATIONS) == {"layernorm", "pool_order", "kernel_shape", "channels", "filter_layers"}
    base = tiny_cfg(tmp_path, figures=False, results_csv=None)
    rows = run_ablation("filter_layers", base)
    assert [r.setting for r in rows] == ["1", "2"]
    assert all(r.method.startswith("APCON_V2") for r in rows)
    with open(tmp_path / "run" / "ablation_filter_layers" / "comparison.csv") as fh:
        table = list(csv.DictReader(fh))
    assert [t["setting"] for t in table] == ["1", "2"]
    assert rows[0].param_count != rows[1].param_count
    with pytest.raises(ConfigError):
        run_ablation("dropout", base)


# ---------------------------------------------------------------- CLI

def test_cli_data_and_reference(tmp_path, capsys):
    out = tmp_path / "d.bin"
    assert cli.main(["data", "gen", "--problem", "II", "--m", "16", "--seed", "3", "--out", str(out),
                     "--csv", str(tmp_path / "d.csv")]) == 0
    ds = data.load(out)
    assert len(ds.train) == 14 and ds.meta["seed"] == 3
    assert cli.main(["reference", "--problem", "II", "--eps", "0.1", "--t-max", "0.02", "--nx", "40",
                     "--out", str(tmp_path / "ref")]) == 0
    assert (tmp_path / "ref" / "reference.csv").exists()
    assert (tmp_path / "ref" / "density_sample0.png").exists()


def test_cli_train_eval_bench(experiment, tmp_path, capsys):
    cfg, outcome, tmp = experiment
    cfg_path = tmp_path / "c.yaml"
    d = cfg.to_dict()
    d.update(out_dir=str(tmp_path / "cli_run"), results_csv=str(tmp_path / "r.csv"), trials=1)
    cfg_path.write_text(yaml.safe_dump(d))
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    printed = capsys.readouterr().out
    assert printed.splitlines()[0].startswith("method,rel_l2")
    ckpt = tmp_path / "cli_run" / "best.ckpt"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--dataset", str(tmp / "run" / "dataset.bin"),
                     "--out", str(tmp_path / "ev")]) == 0
    assert "rel_l2" in capsys.readouterr().out
    assert cli.main(["bench", "--checkpoint", str(ckpt), "--reps", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "what,n,mean_ms,std_ms" and lines[-1].startswith("speedup,")


def test_cli_requires_command():
    with pytest.raises(SystemExit):
        cli.main([])


def test_sentinel_uses_end_of_training_error(tmp_path, monkeypatch):
    import apcon.evaluate as ev
    from apcon.train import History

    def fake_fit(model, ds, problem, cfg, **kw):
        hist = History(epoch=[0, 1], loss=[1.0, 1.0], lr=[1e-3, 1e-3], terms=[{}, {}], test_error=[0.1, 0.9])
        return model.init(np.random.default_rng(cfg.seed)), hist
    monkeypatch.setattr(ev, "fit", fake_fit)
    outcome = run_experiment(tiny_cfg(tmp_path, diverge_threshold=0.5, figures=False), full=True)
    assert outcome.row.rel_l2 == DIVERGED
    assert outcome.per_trial[0]["final_rel_l2"] == 0.9 and outcome.per_trial[0]["diverged"]
    assert (tmp_path / "run" / "best.ckpt").exists()
