"""Per-day batch preparation, the training loop, checkpoints and inference."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .config import RunConfig
from .game import DecaySpec, GameSpec, decay_weights, equilibrium_targets, event_features
from .graph import HeteroGraph
from .market_data import CLOSE, NormStats, SplitSpec, StockPanel, apply_norm, fit_norm_stats, label_availability
from .metrics import daily_ic
from .model import DTYPE, DayBatch, GameStock, model_loss, prediction_loss
from .wavelet import pooled_features

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gamestock-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "train_loss", "valid_loss", "lr")


class TrainingError(RuntimeError):
    pass


def game_spec(cfg: RunConfig) -> GameSpec:
    return GameSpec(np.asarray(cfg.game.beta, dtype=np.float64).reshape(3, 3), cfg.game.lambda_follow)


def split_from_config(cfg: RunConfig, dates: np.ndarray) -> SplitSpec:
    s = cfg.split
    if s.train is None and s.valid is None and s.test is None:
        return SplitSpec.from_fractions(dates, tuple(s.fractions))
    if s.train is None or s.valid is None or s.test is None:
        raise TrainingError("split.train, split.valid and split.test must be given together")
    return SplitSpec(tuple(s.train), tuple(s.valid), tuple(s.test))


def _event_arrays(events: pd.DataFrame | None, panel: StockPanel):
    """Events mapped onto panel indices; rows for stocks outside the panel are dropped."""
    if events is None or len(events) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros((0, 3)), np.zeros(0)
    stock_idx = pd.Index(panel.stocks).get_indexer(events["stock_id"].astype(str))
    dates = pd.to_datetime(events["date"]).to_numpy().astype("datetime64[D]")
    day_idx = np.searchsorted(panel.dates, dates)
    on_cal = (day_idx < panel.n_days) & (panel.dates[np.minimum(day_idx, panel.n_days - 1)] == dates)
    if (~on_cal).any():
        raise TrainingError(f"event date {dates[~on_cal][0]} not in the panel calendar")
    keep = stock_idx >= 0
    if (~keep).any():
        log.warning("ignoring %d events for stocks outside the panel", int((~keep).sum()))
    order = np.lexsort((stock_idx[keep], day_idx[keep]))
    triples = events[["a_ins", "a_hot", "a_ret"]].to_numpy(np.float64)[keep][order]
    return stock_idx[keep][order], day_idx[keep][order], triples, events["return_1d"].to_numpy(np.float64)[keep][order]


def _all_windows(values: np.ndarray, lookback: int) -> np.ndarray:
    # (N, T, D) -> (T - L + 1, N, L, D) for anchors L-1 .. T-1
    view = sliding_window_view(values, lookback, axis=1)
    return np.ascontiguousarray(np.transpose(view, (1, 0, 3, 2)))


def prepare_days(panel: StockPanel, events: pd.DataFrame | None, cfg: RunConfig,
                 anchors: np.ndarray | None = None) -> list[DayBatch]:
    """Batches for the given anchor indices (default: every anchor with a label day).

    `panel` must already be standardized; labels come from its raw closes.
    """
    lookback = cfg.model.lookback
    if lookback < 2 or lookback > panel.n_days:
        raise TrainingError(f"lookback {lookback} incompatible with a {panel.n_days}-day panel")
    if anchors is None:
        anchors = np.arange(lookback - 1, panel.n_days - 1)
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.size and (anchors.min() < lookback - 1 or anchors.max() >= panel.n_days):
        raise TrainingError("anchor outside the range with a full lookback window")

    windows = _all_windows(np.asarray(panel.values), lookback)[anchors - (lookback - 1)]
    detail_max = approx_mean = None
    if cfg.model.use_mdwt:
        detail_max, approx_mean = pooled_features(windows, cfg.wavelet.name, cfg.wavelet.level, cfg.wavelet.mode)

    close = panel.raw_values[:, :, CLOSE]
    avail = label_availability(panel)
    with np.errstate(divide="ignore", invalid="ignore"):
        y_all = np.where(avail, close[:, 1:] / close[:, :-1] - 1.0, np.nan)

    ev_stock, ev_day, ev_triple, ev_ret = _event_arrays(events, panel)
    spec = game_spec(cfg)
    targets = equilibrium_targets(ev_ret, spec)
    decay = DecaySpec(cfg.game.alpha_decay, lookback)
    n = panel.n_stocks

    days = []
    for a, t in enumerate(anchors):
        sel = np.flatnonzero((ev_day <= t) & (ev_day > t - lookback))
        ages = t - ev_day[sel]
        weights = np.zeros((n, sel.size))
        evented, a_star = [], []
        for i in np.unique(ev_stock[sel]):
            cols = np.flatnonzero(ev_stock[sel] == i)
            weights[i, cols] = decay_weights(ages[cols], decay)
            evented.append(i)
            a_star.append(targets[sel[cols[-1]]])  # most recent event; sorted by day
        y = y_all[:, t] if t < panel.n_days - 1 else np.full(n, np.nan)
        days.append(DayBatch(
            anchor_index=int(t),
            date=panel.dates[t],
            detail_max=None if detail_max is None else torch.as_tensor(detail_max[a], dtype=DTYPE),
            approx_mean=None if approx_mean is None else torch.as_tensor(approx_mean[a], dtype=DTYPE),
            windows=None if cfg.model.use_mdwt else torch.as_tensor(windows[a], dtype=DTYPE),
            event_features=torch.as_tensor(event_features(ages, ev_triple[sel], cfg.game.pos_dim), dtype=DTYPE),
            event_weights=torch.as_tensor(weights, dtype=DTYPE),
            evented=torch.as_tensor(np.array(evented, dtype=np.int64)),
            a_star=torch.as_tensor(np.array(a_star).reshape(-1, 3), dtype=DTYPE),
            y=torch.as_tensor(y, dtype=DTYPE),
        ))
    return days


def anchors_in(panel: StockPanel, split: SplitSpec, which: str, lookback: int, labeled: bool = True) -> np.ndarray:
    idx = np.flatnonzero(split.mask(panel.dates, which))
    last = panel.n_days - 2 if labeled else panel.n_days - 1
    return idx[(idx >= lookback - 1) & (idx <= last)]


class EarlyStopping:
    """Tracks the best (strictly lowest) validation loss; stops after `patience` stale epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.best_state = None

    def update(self, epoch: int, loss: float, model: torch.nn.Module | None = None) -> bool:
        """Record an epoch; returns True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch = loss, epoch
            if model is not None:
                self.best_state = copy.deepcopy(model.state_dict())
            return False
        return epoch - self.best_epoch >= self.patience


@dataclass
class TrainResult:
    model: GameStock
    log: pd.DataFrame
    best_epoch: int
    best_valid_loss: float
    norm: NormStats
    valid_ic: list = field(default_factory=list)


def build_model(n_channels: int, cfg: RunConfig, graph: HeteroGraph | None) -> GameStock:
    torch.manual_seed(cfg.train.seed)
    return GameStock(n_channels, cfg, graph if cfg.model.use_hgcn else None)


def _mean_ic(model: GameStock, days: list[DayBatch]) -> float:
    ics = []
    with torch.no_grad():
        for d in days:
            ics.append(daily_ic(model(d).pred.numpy(), d.y.numpy()))
    ics = np.array(ics)
    return float(np.nanmean(ics)) if np.isfinite(ics).any() else math.nan


def train_model(cfg: RunConfig, train_days: list[DayBatch], valid_days: list[DayBatch], n_channels: int,
                graph: HeteroGraph | None, norm: NormStats | None = None) -> TrainResult:
    if not train_days or not valid_days:
        raise TrainingError("train and validation splits must both contain anchor days")
    tc = cfg.train
    model = build_model(n_channels, cfg, graph)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=tc.plateau_factor, patience=tc.plateau_patience, threshold=0.0, min_lr=tc.min_lr)
    rng = np.random.default_rng(tc.seed)
    quiet = sum(1 for d in train_days if d.evented.numel() == 0)
    if quiet and model.use_gre:
        log.info("%d of %d training days have no evented stock; their equilibrium loss is 0", quiet, len(train_days))
    stopper = EarlyStopping(tc.patience)
    rows, valid_ics = [], []
    for epoch in range(1, tc.max_epochs + 1):
        model.train()
        lr = opt.param_groups[0]["lr"]
        total = 0.0
        for k in rng.permutation(len(train_days)):
            day = train_days[k]
            opt.zero_grad()
            loss, _, _ = model_loss(model, day, cfg.model.lambda_eq)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, anchor {day.date}")
            loss.backward()
            opt.step()
            total += float(loss.detach())
        model.eval()
        with torch.no_grad():
            valid = float(np.mean([float(prediction_loss(model(d).pred, d.y)) for d in valid_days]))
        if not math.isfinite(valid):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        vic = _mean_ic(model, valid_days)
        valid_ics.append(vic)
        rows.append((epoch, total / len(train_days), valid, lr))
        log.info("epoch %d train %.6g valid %.6g valid_ic %.4f lr %.3g", epoch, rows[-1][1], valid, vic, lr)
        sched.step(valid)
        if stopper.update(epoch, valid, model):
            break
    model.load_state_dict(stopper.best_state)
    model.eval()
    return TrainResult(model, pd.DataFrame(rows, columns=list(LOG_COLUMNS)), stopper.best_epoch, stopper.best,
                       norm, valid_ics)


@dataclass
class PreparedData:
    panel: StockPanel  # standardized
    split: SplitSpec
    train: list[DayBatch]
    valid: list[DayBatch]
    test: list[DayBatch]


def prepare_data(cfg: RunConfig, panel: StockPanel, events: pd.DataFrame | None) -> PreparedData:
    split = split_from_config(cfg, panel.dates)
    stats, notes = fit_norm_stats(panel, split)
    std = apply_norm(panel, stats, notes)
    lb = cfg.model.lookback
    parts = [prepare_days(std, events, cfg, anchors_in(std, split, w, lb)) for w in ("train", "valid", "test")]
    return PreparedData(std, split, *parts)


def fit(cfg: RunConfig, panel: StockPanel, graph: HeteroGraph | None, events: pd.DataFrame | None):
    """Standardize, batch, and train; returns ``(TrainResult, PreparedData)``."""
    if graph is not None:
        graph.check_stocks(panel.stocks)
    data = prepare_data(cfg, panel, events)
    result = train_model(cfg, data.train, data.valid, panel.values.shape[-1], graph, data.panel.norm)
    return result, data


def predict_days(model: GameStock, days: list[DayBatch], stocks) -> pd.DataFrame:
    rows = {"date": [], "stock_id": [], "score": []}
    model.eval()
    with torch.no_grad():
        for d in days:
            pred = model(d).pred.numpy()
            if not np.all(np.isfinite(pred)):
                raise TrainingError(f"non-finite prediction on {d.date}")
            rows["date"] += [str(d.date)] * len(stocks)
            rows["stock_id"] += list(stocks)
            rows["score"] += pred.tolist()
    return pd.DataFrame(rows)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, result: TrainResult, cfg: RunConfig, stocks, graph: HeteroGraph | None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "state_dict": result.model.state_dict(),
        "stocks": list(stocks),
        "graph_nodes": list(graph.node_ids) if graph is not None else None,
        "n_channels": int(result.norm.mean.shape[-1]),
        "norm_mean": torch.tensor(np.array(result.norm.mean)),
        "norm_std": torch.tensor(np.array(result.norm.std)),
        "best_epoch": int(result.best_epoch),
        "best_valid_loss": float(result.best_valid_loss),
    }
    torch.save(payload, path)


@dataclass
class Checkpoint:
    cfg: RunConfig
    state_dict: dict
    stocks: tuple[str, ...]
    graph_nodes: tuple[str, ...] | None
    n_channels: int
    norm: NormStats
    best_epoch: int


def load_checkpoint(path) -> Checkpoint:
    raw = torch.load(path, map_location="cpu", weights_only=True)
    if raw.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"{path} is not a forecaster checkpoint")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {raw.get('version')}")
    return Checkpoint(
        RunConfig.from_dict(raw["config"]), raw["state_dict"], tuple(raw["stocks"]),
        None if raw["graph_nodes"] is None else tuple(raw["graph_nodes"]), int(raw["n_channels"]),
        NormStats(raw["norm_mean"].numpy(), raw["norm_std"].numpy()), int(raw["best_epoch"]))


def predict(ckpt: Checkpoint, panel: StockPanel, graph: HeteroGraph | None, events: pd.DataFrame | None,
            start=None, end=None) -> pd.DataFrame:
    """Scores for every anchor day in ``[start, end]`` using the stored train statistics."""
    if tuple(panel.stocks) != ckpt.stocks:
        extra = sorted(set(panel.stocks) - set(ckpt.stocks))
        lost = sorted(set(ckpt.stocks) - set(panel.stocks))
        if extra or lost:
            raise TrainingError(f"stock set differs from checkpoint: unexpected {extra[:10]}, missing {lost[:10]}")
        raise TrainingError("panel stock order differs from the checkpoint order")
    if panel.values.shape[-1] != ckpt.n_channels:
        raise TrainingError(f"panel has {panel.values.shape[-1]} channels, checkpoint expects {ckpt.n_channels}")
    cfg = ckpt.cfg
    if cfg.model.use_hgcn:
        if graph is None:
            raise TrainingError("checkpoint uses the graph stage; a graph is required")
        if ckpt.graph_nodes is not None and tuple(graph.node_ids) != ckpt.graph_nodes:
            raise TrainingError("graph node set differs from the checkpoint")
    std = apply_norm(panel, ckpt.norm)
    lb = cfg.model.lookback
    idx = np.arange(lb - 1, panel.n_days)
    if start is not None:
        idx = idx[panel.dates[idx] >= np.datetime64(pd.Timestamp(start).date(), "D")]
    if end is not None:
        idx = idx[panel.dates[idx] <= np.datetime64(pd.Timestamp(end).date(), "D")]
    model = GameStock(ckpt.n_channels, cfg, graph if cfg.model.use_hgcn else None)
    model.load_state_dict(ckpt.state_dict)
    if idx.size == 0:
        return pd.DataFrame({"date": [], "stock_id": [], "score": []})
    return predict_days(model, prepare_days(std, events, cfg, idx), panel.stocks)


def write_log(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g")
