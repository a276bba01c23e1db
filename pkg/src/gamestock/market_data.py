"""Stock indicator panels: CSV I/O, presence filtering, standardization, windows, labels."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

CHANNELS = ("open", "high", "low", "close", "volume", "ma5", "ma10", "ma20", "ma30")
CLOSE = CHANNELS.index("close")
PANEL_COLUMNS = ("date", "stock_id") + CHANNELS
MIN_PRESENCE = 0.95
STD_FLOOR = 1e-8


class PanelError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    # read-only view; the caller's array keeps its flags
    a = np.asarray(a).view()
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NormStats:
    """Per-stock, per-channel train-range mean and (floored) std, shape ``(N, D)``."""

    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class StockPanel:
    """``values[i, t, d]`` is channel ``d`` of stock ``i`` on trading day ``t``.

    ``missing[i, t]`` marks cells that were absent or incomplete in the source
    and have been imputed.  After :func:`standardize`, ``values`` holds z-scores
    while ``raw`` keeps the original prices so labels never see the transform.
    """

    stocks: tuple[str, ...]
    dates: np.ndarray
    values: np.ndarray
    missing: np.ndarray
    raw: np.ndarray | None = None
    norm: NormStats | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if len(set(self.stocks)) != len(self.stocks):
            raise PanelError("duplicate stock identifiers in panel")
        if len(self.dates) > 1 and not np.all(np.diff(self.dates.astype("datetime64[D]").astype(np.int64)) > 0):
            raise PanelError("panel dates must be strictly increasing")
        if self.values.shape != (len(self.stocks), len(self.dates), len(CHANNELS)):
            raise PanelError(f"values shape {self.values.shape} does not match stocks x dates x channels")
        for name in ("dates", "values", "missing", "raw"):
            arr = getattr(self, name)
            if arr is not None:
                object.__setattr__(self, name, _frozen(arr))

    @property
    def raw_values(self) -> np.ndarray:
        return self.values if self.raw is None else self.raw

    @property
    def n_stocks(self) -> int:
        return len(self.stocks)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def date_index(self, day) -> int:
        if isinstance(day, (int, np.integer)):
            idx = int(day)
            if not 0 <= idx < self.n_days:
                raise PanelError(f"day index {idx} outside calendar of {self.n_days} days")
            return idx
        d = np.datetime64(pd.Timestamp(day).date(), "D")
        pos = int(np.searchsorted(self.dates, d))
        if pos >= self.n_days or self.dates[pos] != d:
            raise PanelError(f"{d} is not a trading day in the panel calendar")
        return pos


@dataclass(frozen=True)
class SplitSpec:
    """Inclusive ``(start, end)`` date ranges, chronologically ordered and disjoint."""

    train_range: tuple[np.datetime64, np.datetime64]
    valid_range: tuple[np.datetime64, np.datetime64]
    test_range: tuple[np.datetime64, np.datetime64]

    def __post_init__(self):
        ranges = []
        for name in ("train_range", "valid_range", "test_range"):
            start, end = (np.datetime64(pd.Timestamp(x).date(), "D") for x in getattr(self, name))
            if end < start:
                raise PanelError(f"{name} ends before it starts")
            object.__setattr__(self, name, (start, end))
            ranges.append((start, end))
        for (_, end), (start, _) in zip(ranges, ranges[1:]):
            if not end < start:
                raise PanelError("split ranges must be disjoint and ordered train < valid < test")

    def mask(self, dates: np.ndarray, which: str) -> np.ndarray:
        start, end = getattr(self, f"{which}_range")
        return (dates >= start) & (dates <= end)

    @classmethod
    def from_fractions(cls, dates: np.ndarray, fractions=(0.7, 0.2, 0.1)) -> "SplitSpec":
        """Chronological split of a calendar by fractions of its length."""
        n = len(dates)
        cuts = np.round(np.cumsum(fractions) / np.sum(fractions) * n).astype(int)
        a, b = cuts[0], cuts[1]
        if a < 1 or b <= a or n <= b:
            raise PanelError(f"calendar of {n} days too short for split {fractions}")
        return cls((dates[0], dates[a - 1]), (dates[a], dates[b - 1]), (dates[b], dates[-1]))


@dataclass(frozen=True)
class WindowBatch:
    windows: np.ndarray  # (N, L, D)
    anchor_index: int
    anchor_date: np.datetime64
    label_available: np.ndarray  # (N,)


@dataclass(frozen=True)
class LabelVector:
    y: np.ndarray
    available: np.ndarray


def load_panel(path, min_presence: float = MIN_PRESENCE) -> StockPanel:
    """Read a panel CSV, drop sparsely-present stocks, impute and flag gaps."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise PanelError(f"{path}: empty file") from None
    if tuple(df.columns) != PANEL_COLUMNS:
        raise PanelError(f"{path}: header must be {','.join(PANEL_COLUMNS)}, got {','.join(df.columns)}")
    if df.empty:
        raise PanelError(f"{path}: no data rows")
    lines = np.arange(len(df)) + 2  # 1-based, after header

    dates = pd.to_datetime(df["date"], format="%Y-%m-%d", errors="coerce")
    bad = dates.isna().to_numpy() | (df["stock_id"].str.strip() == "").to_numpy()
    numeric = {}
    for col in CHANNELS:
        raw = df[col].str.strip()
        vals = pd.to_numeric(raw, errors="coerce")
        bad |= (vals.isna() & (raw != "")).to_numpy()
        # to_numeric's fast parser is not round-trip exact; numpy's str -> float is
        numeric[col] = raw.mask(vals.isna(), "nan").to_numpy().astype(np.float64)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise PanelError(f"{path}: malformed row at line {lines[i]}: {','.join(df.iloc[i])}")
    dup = df.duplicated(["date", "stock_id"]).to_numpy()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise PanelError(f"{path}: duplicate (date, stock) row at line {lines[i]}: {df['date'].iloc[i]},{df['stock_id'].iloc[i]}")

    calendar = np.unique(dates.to_numpy().astype("datetime64[D]"))
    stocks = list(dict.fromkeys(df["stock_id"]))
    s_idx = pd.Index(stocks).get_indexer(df["stock_id"])
    t_idx = np.searchsorted(calendar, dates.to_numpy().astype("datetime64[D]"))
    values = np.full((len(stocks), len(calendar), len(CHANNELS)), np.nan)
    values[s_idx, t_idx] = np.column_stack([numeric[c] for c in CHANNELS])
    present = np.zeros((len(stocks), len(calendar)), dtype=bool)
    present[s_idx, t_idx] = True

    warnings = []
    keep = present.mean(axis=1) >= min_presence
    for sid, frac in zip(stocks, present.mean(axis=1)):
        if frac < min_presence:
            msg = f"dropped stock {sid}: present on {frac:.1%} of trading days (< {min_presence:.0%})"
            log.warning(msg)
            warnings.append(msg)
    values = values[keep]
    stocks = [s for s, k in zip(stocks, keep) if k]
    if not stocks:
        raise PanelError(f"{path}: no stock passes the {min_presence:.0%} presence rule")
    missing = np.isnan(values).any(axis=2)
    values = _impute(values)
    return StockPanel(tuple(stocks), calendar, values, missing, warnings=tuple(warnings))


def _impute(values: np.ndarray) -> np.ndarray:
    # forward-fill along time, then back-fill the leading gap
    out = values.copy()
    for i in range(out.shape[0]):
        frame = pd.DataFrame(out[i])
        out[i] = frame.ffill().bfill().to_numpy()
    return out


def write_panel(panel: StockPanel, path, float_format: str = "%.17g") -> None:
    """Write the complete (non-imputed) rows in date-major order."""
    raw = panel.raw_values
    rows = []
    for t, day in enumerate(panel.dates):
        for i, sid in enumerate(panel.stocks):
            if not panel.missing[i, t]:
                rows.append((str(day), sid, *raw[i, t]))
    pd.DataFrame(rows, columns=PANEL_COLUMNS).to_csv(path, index=False, float_format=float_format)


def fit_norm_stats(panel: StockPanel, split: SplitSpec) -> tuple[NormStats, list[str]]:
    train = split.mask(panel.dates, "train")
    if not train.any():
        raise PanelError("train range contains no trading days")
    raw = panel.raw_values[:, train]
    observed = ~panel.missing[:, train]
    weights = observed[..., None].astype(np.float64)
    count = np.maximum(weights.sum(axis=1), 1.0)
    mean = (raw * weights).sum(axis=1) / count
    var = (((raw - mean[:, None]) ** 2) * weights).sum(axis=1) / count
    std = np.sqrt(var)
    notes = []
    for i, d in zip(*np.nonzero(std < STD_FLOOR)):
        notes.append(f"zero-variance channel {CHANNELS[d]} for stock {panel.stocks[i]}; floored std")
    return NormStats(_frozen(mean), _frozen(np.maximum(std, STD_FLOOR))), notes


def apply_norm(panel: StockPanel, stats: NormStats, notes: Sequence[str] = ()) -> StockPanel:
    raw = panel.raw_values
    z = (raw - stats.mean[:, None, :]) / stats.std[:, None, :]
    for msg in notes:
        log.warning(msg)
    return replace(panel, values=z, raw=raw, norm=stats, warnings=panel.warnings + tuple(notes))


def standardize(panel: StockPanel, split: SplitSpec) -> StockPanel:
    """Z-score every channel per stock with statistics from the train range only."""
    stats, notes = fit_norm_stats(panel, split)
    return apply_norm(panel, stats, notes)


def window_array(panel: StockPanel, lookback: int) -> np.ndarray:
    """All windows at once: ``(A, N, L, D)`` for anchors ``L-1 .. T-2``."""
    _check_lookback(panel, lookback)
    # (N, T-L+1, D, L) -> drop the last window (no label day)
    view = sliding_window_view(panel.values, lookback, axis=1)[:, :-1]
    return np.ascontiguousarray(np.transpose(view, (1, 0, 3, 2)))


def _check_lookback(panel: StockPanel, lookback: int) -> None:
    if lookback < 2:
        raise PanelError(f"lookback must be >= 2, got {lookback}")
    if lookback > panel.n_days - 1:
        raise PanelError(f"lookback {lookback} needs at least {lookback + 1} trading days, panel has {panel.n_days}")


def label_availability(panel: StockPanel) -> np.ndarray:
    """``(N, T-1)`` mask: label for anchor t needs observed, positive closes at t and t+1."""
    close = panel.raw_values[:, :, CLOSE]
    ok = ~panel.missing & np.isfinite(close) & (close > 0)
    return ok[:, :-1] & ok[:, 1:]


def make_windows(panel: StockPanel, lookback: int) -> list[WindowBatch]:
    windows = window_array(panel, lookback)
    avail = label_availability(panel)
    batches = []
    for a, t in enumerate(range(lookback - 1, panel.n_days - 1)):
        batches.append(WindowBatch(_frozen(windows[a]), t, panel.dates[t], _frozen(avail[:, t])))
    return batches


def compute_labels(panel: StockPanel, anchor) -> LabelVector:
    """Next-day relative price change ``close[t+1] / close[t] - 1`` on raw prices."""
    t = panel.date_index(anchor)
    if t + 1 >= panel.n_days:
        raise PanelError(f"anchor {panel.dates[t]} has no following trading day")
    close = panel.raw_values[:, :, CLOSE]
    available = label_availability(panel)[:, t]
    with np.errstate(divide="ignore", invalid="ignore"):
        y = close[:, t + 1] / close[:, t] - 1.0
    y = np.where(available, y, np.nan)
    return LabelVector(_frozen(y), _frozen(available))


def label_matrix(panel: StockPanel) -> tuple[np.ndarray, np.ndarray]:
    """Labels for every anchor at once: ``(T-1, N)`` values and availability."""
    close = panel.raw_values[:, :, CLOSE]
    avail = label_availability(panel)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = close[:, 1:] / close[:, :-1] - 1.0
    return np.where(avail, y, np.nan).T, avail.T
