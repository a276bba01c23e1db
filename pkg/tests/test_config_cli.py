import json

import pytest
import yaml

from gamestock.cli import main
from gamestock.config import ConfigError, RunConfig, dump_config, load_config

SMALL = ["synthetic.n_stocks=12", "synthetic.n_industries=3", "synthetic.n_days=120", "synthetic.event_rate=0.05",
         "model.embed_dim=8", "model.graph_hidden=8", "model.action_hidden=4", "game.pos_dim=4",
         "train.max_epochs=2"]


def _sets(items):
    return [a for k in items for a in ("--set", k)]


def test_defaults_round_trip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(RunConfig()))
    assert load_config(path).to_dict() == RunConfig().to_dict()


def test_nested_yaml_and_override(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"wavelet": {"level": 2}, "train": {"seed": 3}}))
    cfg = load_config(path, ["train.seed=7", "model.use_gre=false"])
    assert cfg.wavelet.level == 2 and cfg.train.seed == 7 and cfg.model.use_gre is False


@pytest.mark.parametrize("bad, key", [("wavelet.lvel=3", "wavelet.lvel"), ("nosuch.x=1", "nosuch.x"),
                                      ("wavelet.level=two", "wavelet.level"), ("model.use_gre=3", "model.use_gre")])
def test_bad_override(bad, key):
    with pytest.raises(ConfigError) as info:
        RunConfig().with_overrides([bad])
    assert info.value.key == key


def test_unknown_key_in_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("wavelet:\n  lvel: 3\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.key == "wavelet.lvel"


def test_cli_unknown_key_exit_2(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text("wavelet:\n  lvel: 3\n")
    assert main(["train", "--config", str(path), "--run-dir", str(tmp_path / "run")]) == 2
    assert "wavelet.lvel" in capsys.readouterr().err


def test_cli_missing_config_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.yaml")]) == 2
    assert "none.yaml" in capsys.readouterr().err


def test_cli_missing_input_exit_2(tmp_path, capsys):
    assert main(["train", "--run-dir", str(tmp_path / "run"), "--set", "data.panel=" + str(tmp_path / "p.csv")]) == 2
    assert "p.csv" in capsys.readouterr().err


def test_cli_runtime_failure_exit_1(tmp_path, capsys):
    bad = tmp_path / "p.csv"
    bad.write_text("not,a,panel\n1,2,3\n")
    assert main(["train", "--run-dir", str(tmp_path / "run"), "--set", f"data.panel={bad}"]) == 1
    assert "error" in capsys.readouterr().err


def test_override_echoed_in_log(tmp_path):
    run = tmp_path / "run"
    assert main(["generate", "--run-dir", str(run), "--set", "train.seed=7", *_sets(SMALL)]) == 0
    text = (run / "run.log").read_text()
    assert "train.seed=7" in text
    assert "seed: 7" in text  # resolved config echo


def test_default_run_dir_named_by_seed(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["generate", "--set", "train.seed=4", *_sets(SMALL)]) == 0
    dirs = list((tmp_path / "runs").iterdir())
    assert len(dirs) == 1 and dirs[0].name.endswith("-seed4")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    run = tmp_path_factory.mktemp("pipeline")
    args = ["--run-dir", str(run), *_sets(SMALL)]
    codes = [main([cmd, *args]) for cmd in ("generate", "train", "evaluate")]
    return run, args, codes


def test_happy_path(pipeline):
    run, _, codes = pipeline
    assert codes == [0, 0, 0]
    for name in ("panel.csv", "events.csv", "checkpoint.pt", "train_log.csv", "metrics.txt", "predictions.csv",
                 "daily_ic.csv"):
        assert (run / name).exists(), name
    metrics = dict(line.split("=", 1) for line in (run / "metrics.txt").read_text().splitlines())
    assert {"IC", "RankIC", "ICIR", "RankICIR"} <= set(metrics)


def test_manifests(pipeline):
    run, _, _ = pipeline
    from gamestock.cli import sha256
    for cmd in ("generate", "train", "evaluate"):
        m = json.loads((run / f"manifest-{cmd}.json").read_text())
        assert m["seed"] == 0 and m["config"]["synthetic"]["n_stocks"] == 12
        for entry in list(m["inputs"].values()) + list(m["outputs"].values()):
            assert len(entry["sha256"]) == 64
    train = json.loads((run / "manifest-train.json").read_text())
    assert set(train["inputs"]) >= {"panel", "industries", "events"}
    assert train["inputs"]["panel"]["sha256"] == sha256(run / "panel.csv")


def test_rerun_reproduces_metrics(pipeline, tmp_path):
    run, args, _ = pipeline
    again = tmp_path / "again"
    args2 = ["--run-dir", str(again), *_sets(SMALL)]
    assert [main([c, *args2]) for c in ("generate", "train", "evaluate")] == [0, 0, 0]
    a = dict(line.split("=", 1) for line in (run / "metrics.txt").read_text().splitlines())
    b = dict(line.split("=", 1) for line in (again / "metrics.txt").read_text().splitlines())
    for key in ("IC", "RankIC", "ICIR", "RankICIR"):
        assert float(a[key]) == pytest.approx(float(b[key]), abs=1e-10)
    assert json.loads((run / "manifest-train.json").read_text())["inputs"]["panel"]["sha256"] == \
        json.loads((again / "manifest-train.json").read_text())["inputs"]["panel"]["sha256"]


def test_predict_and_graph_stats(pipeline, capsys):
    run, args, _ = pipeline
    assert main(["predict", *args]) == 0
    assert main(["graph-stats", *args]) == 0
    out = capsys.readouterr().out
    assert (run / "graph_stats.txt").read_text() in out
    assert "rows=" in out


def test_evaluate_from_prediction_file(pipeline, tmp_path):
    run, _, _ = pipeline
    other = tmp_path / "ev"
    code = main(["evaluate", "--run-dir", str(other), "--set", f"data.panel={run / 'panel.csv'}",
                 "--set", f"data.predictions={run / 'predictions.csv'}"])
    assert code == 0
    assert (other / "metrics.txt").read_text() == (run / "metrics.txt").read_text()


def test_shipped_default_config_matches_code():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"
    assert load_config(path).to_dict() == RunConfig().to_dict()
