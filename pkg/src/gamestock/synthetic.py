"""Synthetic market with a planted, exactly known next-day conditional mean.

Daily returns are

    r[t, i] = f[t, k(i)] + drift[t, i] + noise_scale * vol[k(i)] * eps[t, i]

with an industry factor ``f`` (i.i.d. by default, AR(1) when
``industry_persistence > 0``) and an event drift that jumps by
``A * s`` on an event day and decays by ``exp(-alpha)`` per day.  The event
sign ``s`` is the sign of the action-triple sum (0 counts as +1).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .game import EVENT_COLUMNS
from .graph import HeteroGraph, build_graph
from .market_data import CHANNELS, StockPanel, write_panel

MA_WINDOWS = (5, 10, 20, 30)
BURN_IN = max(MA_WINDOWS)
EXPECTED_SIGN = 7.0 / 27.0  # E[s] for uniform triples: 14 of 27 sums > 0, 7 < 0, 6 == 0 -> +1


class SyntheticError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_stocks: int = 60
    n_industries: int = 6
    n_days: int = 600
    noise_scale: float = 0.01
    event_rate: float = 0.02
    event_impact: float = 0.01
    event_decay: float = 0.1
    industry_scale: float = 0.004
    industry_persistence: float = 0.0
    seed: int = 0
    start_date: str = "2017-01-03"

    def __post_init__(self):
        if self.n_stocks < 1 or self.n_industries < 1 or self.n_days < 2:
            raise SyntheticError("n_stocks, n_industries must be >= 1 and n_days >= 2")
        if self.n_stocks < self.n_industries:
            raise SyntheticError(f"n_stocks ({self.n_stocks}) < n_industries ({self.n_industries})")
        for name in ("noise_scale", "event_impact", "event_decay", "industry_scale"):
            if getattr(self, name) < 0:
                raise SyntheticError(f"{name} must be >= 0")
        if not 0.0 <= self.event_rate <= 1.0:
            raise SyntheticError("event_rate must lie in [0, 1]")
        if not 0.0 <= self.industry_persistence < 1.0:
            raise SyntheticError("industry_persistence must lie in [0, 1)")


@dataclass(frozen=True)
class OracleBundle:
    """``mu[t, i]`` is E[r[t+1, i] | information at t]; ``realized[t, i] = r[t+1, i]``.

    The last calendar day has no next day, so its rows are NaN.
    """

    dates: np.ndarray
    stocks: tuple[str, ...]
    mu: np.ndarray
    realized: np.ndarray
    params: dict
    mean_ic: float

    def day_index(self, day) -> int:
        if isinstance(day, (int, np.integer)):
            t = int(day)
        else:
            d = np.datetime64(pd.Timestamp(day).date(), "D")
            hits = np.flatnonzero(self.dates == d)
            if not hits.size:
                raise SyntheticError(f"{d} is not in the synthetic calendar")
            t = int(hits[0])
        if not 0 <= t < len(self.dates) - 1:
            raise SyntheticError(f"day {day} outside the oracle range (needs a following day)")
        return t

    def ic_series(self, start=None, end=None) -> np.ndarray:
        """Daily oracle IC over anchors in ``[start, end]``; undefined days are NaN."""
        from .metrics import daily_ic

        lo = 0 if start is None else int(np.searchsorted(self.dates, np.datetime64(pd.Timestamp(start).date(), "D")))
        hi = len(self.dates) - 2 if end is None else min(
            int(np.searchsorted(self.dates, np.datetime64(pd.Timestamp(end).date(), "D"), side="right")) - 1,
            len(self.dates) - 2)
        return np.array([daily_ic(self.mu[t], self.realized[t]) for t in range(lo, hi + 1)])

    def mean_ic_between(self, start=None, end=None) -> float:
        s = self.ic_series(start, end)
        return float(np.nanmean(s)) if np.isfinite(s).any() else float("nan")


@dataclass(frozen=True)
class SyntheticBundle:
    spec: SyntheticSpec
    panel: StockPanel
    industries: pd.DataFrame
    holdings: pd.DataFrame
    events: pd.DataFrame
    graph: HeteroGraph
    oracle: OracleBundle
    returns: np.ndarray  # (T, N) daily returns r[t, i]
    drift: np.ndarray  # (T, N) event drift component


def _multipliers(rng: np.random.Generator, k: int, lo: float, hi: float) -> np.ndarray:
    if k == 1:
        return np.ones(1)
    return rng.permutation(np.linspace(lo, hi, k))


def event_sign(triples: np.ndarray) -> np.ndarray:
    total = np.asarray(triples).sum(axis=-1)
    return np.where(total >= 0, 1.0, -1.0)


def trailing_mean(close: np.ndarray, window: int) -> np.ndarray:
    """Mean of the last ``window`` closes along axis 0; the first ``window - 1`` rows use what exists."""
    out = np.empty_like(close)
    for t in range(min(window - 1, len(close))):
        out[t] = close[: t + 1].mean(axis=0)
    if len(close) >= window:
        out[window - 1:] = sliding_window_view(close, window, axis=0).mean(axis=-1)
    return out


def generate(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticBundle:
    rng = np.random.default_rng(spec.seed)
    n, k, t_out = spec.n_stocks, spec.n_industries, spec.n_days
    t_all = t_out + BURN_IN
    stocks = tuple(f"S{i:03d}" for i in range(n))
    industry_ids = tuple(f"IND{j:02d}" for j in range(k))
    industry_of = np.arange(n) % k  # balanced blocks
    vol = _multipliers(rng, k, 0.6, 1.4)
    rate_mult = _multipliers(rng, k, 0.5, 1.5)

    # industry factor; AR(1) started from its stationary law, i.i.d. when phi = 0
    phi, scale = spec.industry_persistence, spec.industry_scale
    eta = rng.standard_normal((t_all, k))
    f = np.zeros((t_all, k))
    f[0] = scale / np.sqrt(1.0 - phi ** 2) * eta[0]
    for t in range(1, t_all):
        f[t] = phi * f[t - 1] + scale * eta[t]

    # events only inside the published calendar
    rates = np.clip(spec.event_rate * rate_mult[industry_of], 0.0, 1.0)
    has_event = rng.random((t_all, n)) < rates
    has_event[:BURN_IN] = False
    triples = rng.integers(-1, 2, size=(t_all, n, 3))
    jumps = np.where(has_event, spec.event_impact * event_sign(triples), 0.0)
    decay = np.exp(-spec.event_decay)
    drift = np.zeros((t_all, n))
    for t in range(t_all):
        drift[t] = jumps[t] + (decay * drift[t - 1] if t else 0.0)

    noise = spec.noise_scale * vol[industry_of] * rng.standard_normal((t_all, n))
    r = f[:, industry_of] + drift + noise

    base = rng.uniform(10.0, 50.0, size=n)
    close = base * np.cumprod(1.0 + r, axis=0)
    prev = np.vstack([base[None], close[:-1]])
    sig = spec.noise_scale * vol[industry_of]
    open_ = prev * (1.0 + 0.3 * sig * rng.standard_normal((t_all, n)))
    high = np.maximum(open_, close) * (1.0 + np.abs(0.5 * sig * rng.standard_normal((t_all, n))))
    low = np.minimum(open_, close) * (1.0 - np.abs(0.5 * sig * rng.standard_normal((t_all, n))))
    volume = np.round(rng.uniform(1e5, 1e6, size=n) * np.exp(0.25 * rng.standard_normal((t_all, n)))
                      * (1.0 + 2.0 * has_event))
    mas = [trailing_mean(close, w) for w in MA_WINDOWS]
    chans = np.stack([open_, high, low, close, volume, *mas], axis=-1)[BURN_IN:]  # (T, N, D)
    assert chans.shape[-1] == len(CHANNELS)

    dates = pd.bdate_range(spec.start_date, periods=t_out).to_numpy().astype("datetime64[D]")
    panel = StockPanel(stocks, dates, np.transpose(chans, (1, 0, 2)).copy(), np.zeros((n, t_out), dtype=bool))

    r_out, f_out, d_out = r[BURN_IN:], f[BURN_IN:], drift[BURN_IN:]
    mu = np.full((t_out, n), np.nan)
    mu[:-1] = (phi * f_out[:-1][:, industry_of] + decay * d_out[:-1]
               + rates[None] * spec.event_impact * EXPECTED_SIGN)
    realized = np.full((t_out, n), np.nan)
    realized[:-1] = r_out[1:]

    ev_t, ev_i = np.nonzero(has_event[BURN_IN:])
    ev_triples = triples[BURN_IN:][ev_t, ev_i]
    events = pd.DataFrame({
        "date": [str(d) for d in dates[ev_t]],
        "stock_id": [stocks[i] for i in ev_i],
        "a_ins": ev_triples[:, 0], "a_hot": ev_triples[:, 1], "a_ret": ev_triples[:, 2],
        "return_1d": r_out[ev_t, ev_i],
    }, columns=list(EVENT_COLUMNS))

    industries = pd.DataFrame({"stock_id": stocks, "industry_id": [industry_ids[j] for j in industry_of]})
    holdings = _holdings(stocks, industry_of, vol, rate_mult)
    graph = build_graph(stocks, industries, holdings)

    params = asdict(spec)
    params.update(vol_multipliers=vol.tolist(), rate_multipliers=rate_mult.tolist(),
                  industry_of=industry_of.tolist(), expected_sign=EXPECTED_SIGN)
    oracle = OracleBundle(dates, stocks, mu, realized, params, float("nan"))
    oracle = OracleBundle(dates, stocks, mu, realized, params, oracle.mean_ic_between())
    return SyntheticBundle(spec, panel, industries, holdings, events, graph, oracle, r_out, d_out)


def _holdings(stocks, industry_of, vol, rate_mult) -> pd.DataFrame:
    k = len(vol)
    block = max(1, k // 3)
    calm = set(np.argsort(vol, kind="stable")[:block].tolist())
    busy = set(np.argsort(-rate_mult, kind="stable")[:block].tolist())
    rows = []
    for inv, members, weight in (("ins", calm, 1.0), ("hot", busy, 1.0), ("ret", busy, 0.5)):
        rows += [(inv, s, weight) for s, j in zip(stocks, industry_of) if j in members]
    return pd.DataFrame(rows, columns=["investor_type", "stock_id", "weight"])


def oracle_predict(bundle: OracleBundle, day) -> np.ndarray:
    """Exact conditional mean of the next-day return for every stock at `day`."""
    return bundle.mu[bundle.day_index(day)].copy()


FILES = {
    "panel": "panel.csv",
    "industries": "industries.csv",
    "holdings": "holdings.csv",
    "events": "events.csv",
    "oracle": "oracle.csv",
    "oracle_meta": "oracle.json",
}


def write_bundle(bundle: SyntheticBundle, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {key: out / name for key, name in FILES.items()}
    write_panel(bundle.panel, paths["panel"])
    bundle.industries.to_csv(paths["industries"], index=False)
    bundle.holdings.to_csv(paths["holdings"], index=False)
    bundle.events.to_csv(paths["events"], index=False, float_format="%.17g")
    o = bundle.oracle
    t_idx, i_idx = np.meshgrid(np.arange(len(o.dates) - 1), np.arange(len(o.stocks)), indexing="ij")
    pd.DataFrame({
        "date": [str(o.dates[t]) for t in t_idx.ravel()],
        "stock_id": [o.stocks[i] for i in i_idx.ravel()],
        "mu": o.mu[:-1].ravel(),
        "realized": o.realized[:-1].ravel(),
    }).to_csv(paths["oracle"], index=False, float_format="%.17g")
    meta = {"params": o.params, "mean_ic": o.mean_ic, "n_days": len(o.dates), "n_stocks": len(o.stocks)}
    paths["oracle_meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def load_oracle(out_dir) -> OracleBundle:
    out = Path(out_dir)
    meta = json.loads((out / FILES["oracle_meta"]).read_text())
    df = pd.read_csv(out / FILES["oracle"], dtype={"stock_id": str}, float_precision="round_trip")
    dates = np.unique(df["date"].to_numpy().astype("datetime64[D]"))
    stocks = tuple(dict.fromkeys(df["stock_id"]))
    t = np.searchsorted(dates, df["date"].to_numpy().astype("datetime64[D]"))
    i = pd.Index(stocks).get_indexer(df["stock_id"])
    n_days = meta["n_days"]
    if len(dates) == n_days - 1:
        nxt = np.datetime64(pd.bdate_range(pd.Timestamp(dates[-1]), periods=2)[-1].date(), "D")
        dates = np.append(dates, nxt)
    mu = np.full((n_days, len(stocks)), np.nan)
    realized = np.full_like(mu, np.nan)
    mu[t, i] = df["mu"].to_numpy()
    realized[t, i] = df["realized"].to_numpy()
    return OracleBundle(dates, stocks, mu, realized, meta["params"], meta["mean_ic"])
