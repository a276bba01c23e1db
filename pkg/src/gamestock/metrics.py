"""Daily cross-sectional IC / RankIC and their information ratios."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import rankdata

MIN_STOCKS = 3


class MetricsError(ValueError):
    pass


def _valid_pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise MetricsError(f"prediction length {pred.size} != label length {actual.size}")
    ok = np.isfinite(pred) & np.isfinite(actual)
    return pred[ok], actual[ok]


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < MIN_STOCKS or np.all(x == x[0]) or np.all(y == y[0]):
        return math.nan
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx <= 0.0 or syy <= 0.0:
        return math.nan
    return float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))


def daily_ic(pred, actual) -> float:
    """Pearson correlation over stocks with both values; NaN marks an undefined day."""
    return _pearson(*_valid_pair(pred, actual))


def daily_rank_ic(pred, actual) -> float:
    """Pearson correlation of midranks; NaN marks an undefined day."""
    x, y = _valid_pair(pred, actual)
    if x.size < MIN_STOCKS:
        return math.nan
    return _pearson(rankdata(x), rankdata(y))


def icir(series) -> float:
    """``mean / sample std`` over the defined (finite) entries."""
    s = np.asarray(series, dtype=np.float64)
    s = s[np.isfinite(s)]
    if s.size < 2:
        raise MetricsError(f"information ratio needs >= 2 valid days, got {s.size}")
    sd = float(np.std(s, ddof=1))
    if sd == 0.0 or np.all(s == s[0]):
        raise MetricsError("information ratio undefined: zero standard deviation")
    return float(np.mean(s)) / sd


@dataclass
class DailyICSeries:
    dates: list
    ic: np.ndarray
    rank_ic: np.ndarray
    counts: np.ndarray
    excluded: list = field(default_factory=list)


@dataclass
class EvalReport:
    ic: float
    rank_ic: float
    icir: float
    rank_icir: float
    n_days: int
    excluded_days: list
    series: DailyICSeries

    def as_dict(self) -> dict:
        return {"IC": self.ic, "RankIC": self.rank_ic, "ICIR": self.icir, "RankICIR": self.rank_icir,
                "n_days": self.n_days, "excluded_days": len(self.excluded_days)}

    def to_text(self) -> str:
        lines = [f"{k}={v:.12g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.as_dict().items()]
        if self.excluded_days:
            lines.append("excluded=" + ",".join(str(d) for d in self.excluded_days))
        return "\n".join(lines) + "\n"

    def daily_frame(self) -> pd.DataFrame:
        s = self.series
        return pd.DataFrame({"date": [str(d) for d in s.dates], "ic": s.ic, "rank_ic": s.rank_ic, "n_stocks": s.counts})


def daily_series(pred: pd.DataFrame, labels: pd.DataFrame) -> DailyICSeries:
    """Join on ``(date, stock_id)`` and compute per-day correlations.

    `pred` needs a ``score`` column and `labels` a ``label`` column.
    """
    joined = pred[["date", "stock_id", "score"]].merge(labels[["date", "stock_id", "label"]],
                                                      on=["date", "stock_id"], how="inner")
    dates, ics, rics, counts, excluded = [], [], [], [], []
    joined = joined.sort_values(["date", "stock_id"], kind="stable")
    for day, grp in joined.groupby("date", sort=True):
        x, y = grp["score"].to_numpy(float), grp["label"].to_numpy(float)
        ic, ric = daily_ic(x, y), daily_rank_ic(x, y)
        n = int((np.isfinite(x) & np.isfinite(y)).sum())
        dates.append(day)
        ics.append(ic)
        rics.append(ric)
        counts.append(n)
        if not (math.isfinite(ic) and math.isfinite(ric)):
            excluded.append(day)
    return DailyICSeries(dates, np.array(ics, dtype=float), np.array(rics, dtype=float),
                         np.array(counts, dtype=int), excluded)


def report_from_series(series: DailyICSeries) -> EvalReport:
    ok = np.isfinite(series.ic) & np.isfinite(series.rank_ic)
    if ok.sum() < 2:
        raise MetricsError(f"evaluation needs >= 2 valid days, got {int(ok.sum())}")
    ic, ric = series.ic[ok], series.rank_ic[ok]

    def _ratio(s):
        try:
            return icir(s)
        except MetricsError:
            return math.nan

    return EvalReport(float(ic.mean()), float(ric.mean()), _ratio(ic), _ratio(ric),
                      int(ok.sum()), list(series.excluded), series)


def evaluate(pred: pd.DataFrame, labels: pd.DataFrame) -> EvalReport:
    """Mean daily IC / RankIC and their ratios over the days present in `pred`."""
    if len(pred) == 0:
        raise MetricsError("empty prediction table")
    return report_from_series(daily_series(pred, labels))


def labels_frame(stocks, dates, y: np.ndarray) -> pd.DataFrame:
    """Long table from a ``(T, N)`` label matrix indexed by anchor date."""
    t, i = np.meshgrid(np.arange(len(dates)), np.arange(len(stocks)), indexing="ij")
    return pd.DataFrame({"date": [str(dates[a]) for a in t.ravel()],
                         "stock_id": [stocks[b] for b in i.ravel()],
                         "label": np.asarray(y, dtype=float).ravel()})
