import numpy as np
import pandas as pd
import pytest
import torch

from gamestock.config import RunConfig
from gamestock.synthetic import SyntheticSpec, generate
from gamestock.training import (
    LOG_COLUMNS, TrainingError, fit, load_checkpoint, predict, predict_days, prepare_data, save_checkpoint,
    train_model, write_log,
)

FAST = ["model.embed_dim=8", "model.graph_hidden=8", "model.action_hidden=4", "game.pos_dim=4",
        "train.max_epochs=3"]


@pytest.fixture(scope="module")
def bundle():
    return generate(SyntheticSpec(n_stocks=12, n_industries=3, n_days=140, event_rate=0.05, seed=1))


@pytest.fixture(scope="module")
def trained(bundle):
    cfg = RunConfig().with_overrides(FAST)
    result, data = fit(cfg, bundle.panel, bundle.graph, bundle.events)
    return cfg, result, data


def test_log_shape(trained):
    cfg, result, _ = trained
    assert tuple(result.log.columns) == LOG_COLUMNS
    assert list(result.log["epoch"]) == [1, 2, 3]
    assert np.all(np.isfinite(result.log[["train_loss", "valid_loss"]].to_numpy()))
    assert result.best_valid_loss == result.log["valid_loss"].min()
    assert result.log["valid_loss"].iloc[result.best_epoch - 1] == result.best_valid_loss
    assert result.log["lr"].iloc[0] == cfg.train.lr


def test_best_state_restored(trained):
    from gamestock.model import prediction_loss
    _, result, data = trained
    with torch.no_grad():
        valid = float(np.mean([float(prediction_loss(result.model(d).pred, d.y)) for d in data.valid]))
    assert valid == pytest.approx(result.best_valid_loss, rel=1e-12)


def test_splits_are_chronological(trained):
    _, _, data = trained
    t = [d.anchor_index for d in data.train]
    v = [d.anchor_index for d in data.valid]
    s = [d.anchor_index for d in data.test]
    assert max(t) < min(v) and max(v) < min(s)


def test_training_deterministic(bundle, trained):
    cfg, result, _ = trained
    again, _ = fit(cfg, bundle.panel, bundle.graph, bundle.events)
    pd.testing.assert_frame_equal(result.log, again.log, check_exact=True)


def test_seed_changes_run(bundle, trained):
    cfg, result, _ = trained
    other, _ = fit(cfg.with_overrides(["train.seed=5"]), bundle.panel, bundle.graph, bundle.events)
    assert not np.array_equal(result.log["train_loss"], other.log["train_loss"])


def test_checkpoint_round_trip(tmp_path, bundle, trained):
    cfg, result, data = trained
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, result, cfg, bundle.panel.stocks, bundle.graph)
    ckpt = load_checkpoint(path)
    assert ckpt.cfg.to_dict() == cfg.to_dict()
    start, end = data.split.test_range
    table = predict(ckpt, bundle.panel, bundle.graph, bundle.events, start, end)
    direct = predict_days(result.model, data.test, bundle.panel.stocks)
    # predict also scores the final (unlabeled) day
    merged = direct.merge(table, on=["date", "stock_id"], suffixes=("_a", "_b"))
    assert len(merged) == len(direct)
    np.testing.assert_array_equal(merged["score_a"], merged["score_b"])
    again = predict(ckpt, bundle.panel, bundle.graph, bundle.events, start, end)
    pd.testing.assert_frame_equal(table, again, check_exact=True)


def test_predict_row_count(tmp_path, bundle, trained):
    cfg, result, _ = trained
    save_checkpoint(tmp_path / "c.pt", result, cfg, bundle.panel.stocks, bundle.graph)
    ckpt = load_checkpoint(tmp_path / "c.pt")
    long = generate(SyntheticSpec(n_stocks=12, n_industries=3, n_days=260, event_rate=0.05, seed=1))
    dates = long.panel.dates
    table = predict(ckpt, long.panel, long.graph, long.events, dates[-194], dates[-1])
    assert table.groupby("stock_id").size().eq(194).all()
    assert table["date"].nunique() == 194


def test_predict_empty_range(tmp_path, bundle, trained):
    cfg, result, _ = trained
    save_checkpoint(tmp_path / "c.pt", result, cfg, bundle.panel.stocks, bundle.graph)
    table = predict(load_checkpoint(tmp_path / "c.pt"), bundle.panel, bundle.graph, bundle.events,
                    "2030-01-01", "2030-02-01")
    assert len(table) == 0 and list(table.columns) == ["date", "stock_id", "score"]


def test_predict_stock_mismatch(tmp_path, bundle, trained):
    cfg, result, _ = trained
    save_checkpoint(tmp_path / "c.pt", result, cfg, bundle.panel.stocks, bundle.graph)
    other = generate(SyntheticSpec(n_stocks=13, n_industries=3, n_days=140, seed=1))
    with pytest.raises(TrainingError, match="S012"):
        predict(load_checkpoint(tmp_path / "c.pt"), other.panel, other.graph, other.events)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.pt"
    torch.save({"format": "something-else"}, path)
    with pytest.raises(TrainingError):
        load_checkpoint(path)


def test_divergence_aborts(bundle, trained):
    cfg, _, data = trained
    bad = data.train[0]
    bad.detail_max[0, 0, 0] = float("inf")
    try:
        with pytest.raises(TrainingError, match="non-finite"):
            train_model(cfg, [bad], data.valid, 9, bundle.graph)
    finally:
        bad.detail_max[0, 0, 0] = 0.0


def test_empty_split_is_error(bundle):
    cfg = RunConfig().with_overrides(FAST)
    data = prepare_data(cfg, bundle.panel, bundle.events)
    with pytest.raises(TrainingError):
        train_model(cfg, data.train, [], 9, bundle.graph)


def test_ablations_train(bundle):
    for flags in (["model.use_gre=false"], ["model.use_hgcn=false", "model.use_gre=false"], ["model.use_mdwt=false"]):
        cfg = RunConfig().with_overrides([*FAST, "train.max_epochs=1", *flags])
        result, _ = fit(cfg, bundle.panel, bundle.graph if cfg.model.use_hgcn else None, bundle.events)
        assert len(result.log) == 1


def test_write_log(tmp_path, trained):
    _, result, _ = trained
    write_log(result.log, tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(LOG_COLUMNS)
