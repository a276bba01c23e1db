import filecmp
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from gamestock.game import load_events
from gamestock.graph import load_holdings, load_industry_map
from gamestock.market_data import CLOSE, load_panel
from gamestock.metrics import daily_ic
from gamestock.synthetic import (
    BURN_IN, EXPECTED_SIGN, MA_WINDOWS, SyntheticError, SyntheticSpec, event_sign, generate, load_oracle,
    oracle_predict, trailing_mean, write_bundle,
)

SMALL = dict(n_stocks=12, n_industries=3, n_days=80)


def test_expected_sign_by_enumeration():
    grid = np.array(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1])).reshape(3, -1).T
    assert event_sign(grid).mean() == pytest.approx(EXPECTED_SIGN, abs=1e-15)
    assert event_sign(np.array([0, 0, 0])) == 1.0
    assert event_sign(np.array([1, -1, -1])) == -1.0


def test_degenerate_generator_is_flat():
    b = generate(SyntheticSpec(**SMALL, noise_scale=0.0, event_rate=0.0, industry_scale=0.0))
    assert np.all(b.returns == 0.0)
    close = b.panel.values[:, :, CLOSE]
    assert np.all(close == close[:, :1])
    assert len(b.events) == 0
    assert np.all(b.oracle.mu[:-1] == 0.0)
    assert all(math.isnan(v) for v in b.oracle.ic_series())  # zero variance: undefined
    assert math.isnan(b.oracle.mean_ic)


def test_single_event_decay_halves():
    spec = SyntheticSpec(n_stocks=1, n_industries=1, n_days=60, noise_scale=0.0, industry_scale=0.0,
                         event_rate=1.0, event_impact=0.01, event_decay=math.log(2.0))
    b = generate(spec)
    # every day has an event, so isolate the first one via the recursion's impulse response
    impulse = np.zeros(8)
    impulse[0] = spec.event_impact
    for t in range(1, 8):
        impulse[t] = math.exp(-spec.event_decay) * impulse[t - 1]
    np.testing.assert_allclose(impulse[:4], [0.01, 0.005, 0.0025, 0.00125], rtol=1e-14)
    sign = event_sign(b.events[["a_ins", "a_hot", "a_ret"]].to_numpy())
    expected = np.zeros(spec.n_days)
    for d, s in enumerate(sign):
        expected[d:] += spec.event_impact * s * 0.5 ** np.arange(spec.n_days - d)
    np.testing.assert_allclose(b.drift[:, 0], expected, atol=1e-15)


def test_isolated_event_drift_sequence():
    # low rate: find an event with no other event on the same stock for 4 days
    spec = SyntheticSpec(**SMALL, noise_scale=0.0, industry_scale=0.0, event_rate=0.02,
                         event_impact=0.01, event_decay=math.log(2.0), seed=3)
    b = generate(spec)
    ev = b.events.assign(t=lambda d: np.searchsorted(b.panel.dates, d["date"].to_numpy().astype("datetime64[D]")))
    found = False
    for i, grp in ev.groupby("stock_id"):
        col = list(b.panel.stocks).index(i)
        t0 = int(grp["t"].min())
        if t0 + 4 < spec.n_days and (grp["t"] <= t0 + 3).sum() == 1 and t0 > 0 and b.drift[t0 - 1, col] == 0:
            s = event_sign(grp[["a_ins", "a_hot", "a_ret"]].to_numpy()[:1])[0]
            np.testing.assert_allclose(b.drift[t0:t0 + 4, col], s * np.array([0.01, 0.005, 0.0025, 0.00125]),
                                       rtol=1e-14)
            np.testing.assert_allclose(b.returns[t0:t0 + 4, col], b.drift[t0:t0 + 4, col], rtol=1e-14)
            found = True
    assert found


@settings(max_examples=20)
@given(st.floats(0.01, 2.0), st.integers(0, 1000))
def test_drift_ratio_between_events_is_exact(alpha, seed):
    b = generate(SyntheticSpec(**SMALL, event_decay=alpha, event_rate=0.05, seed=seed))
    evented = np.zeros_like(b.drift, dtype=bool)
    t = np.searchsorted(b.panel.dates, b.events["date"].to_numpy().astype("datetime64[D]"))
    evented[t, [b.panel.stocks.index(s) for s in b.events["stock_id"]]] = True
    prev, cur = b.drift[:-1], b.drift[1:]
    mask = ~evented[1:] & (prev != 0)
    np.testing.assert_allclose(cur[mask] / prev[mask], math.exp(-alpha), rtol=1e-12)


def test_moving_averages_exact():
    b = generate(SyntheticSpec(**SMALL))
    close = b.panel.values[:, :, CLOSE]
    for c, w in enumerate(MA_WINDOWS):
        ma = b.panel.values[:, :, CLOSE + 2 + c]  # open high low close volume ma5 ma10 ...
        for t in range(w, b.spec.n_days):
            np.testing.assert_allclose(ma[:, t], close[:, t - w + 1:t + 1].mean(axis=1), rtol=1e-13)


def test_trailing_mean_against_loop():
    x = np.random.default_rng(0).standard_normal((15, 2))
    out = trailing_mean(x, 4)
    for t in range(15):
        np.testing.assert_allclose(out[t], x[max(0, t - 3):t + 1].mean(axis=0), rtol=1e-14)


def test_prices_are_cumulative_returns():
    b = generate(SyntheticSpec(**SMALL))
    close = b.panel.values[:, :, CLOSE]
    np.testing.assert_allclose(close[:, 1:] / close[:, :-1] - 1.0, b.returns[1:].T, rtol=1e-9, atol=1e-12)


def test_noise_is_centered():
    spec = SyntheticSpec(industry_scale=0.0, event_rate=0.0, seed=11)
    b = generate(spec)
    resid = (b.oracle.realized - b.oracle.mu)[:-1]
    bound = 3 * spec.noise_scale * max(b.oracle.params["vol_multipliers"]) / math.sqrt(resid.size)
    assert abs(resid.mean()) <= bound


def test_noiseless_quiet_days_oracle_ic_one():
    # without noise or factor shocks the only surprise left is a new event on the target day
    # one industry, so the event prior shifts every stock equally
    b = generate(SyntheticSpec(n_stocks=12, n_industries=1, n_days=80, noise_scale=0.0, industry_scale=0.0,
                               event_rate=0.05, seed=5))
    event_day = np.zeros(b.spec.n_days, dtype=bool)
    event_day[np.searchsorted(b.panel.dates, b.events["date"].to_numpy().astype("datetime64[D]"))] = True
    ics = b.oracle.ic_series()
    quiet = [t for t in range(b.spec.n_days - 1) if not event_day[t + 1] and np.isfinite(ics[t])]
    assert len(quiet) > 5
    for t in quiet:
        assert ics[t] == pytest.approx(1.0, abs=1e-12)


def test_noiseless_realized_equals_mu_without_surprises():
    b = generate(SyntheticSpec(**SMALL, noise_scale=0.0, event_rate=0.0, industry_scale=0.0))
    assert np.all(b.oracle.mu[:-1] == b.oracle.realized[:-1])


def test_oracle_mean_ic_stored():
    b = generate(SyntheticSpec())
    assert b.oracle.mean_ic == pytest.approx(float(np.nanmean(b.oracle.ic_series())), abs=1e-15)
    assert 0.0 < b.oracle.mean_ic < 1.0


def test_same_seed_byte_identical(tmp_path):
    spec = SyntheticSpec(**SMALL, seed=9)
    a = write_bundle(generate(spec), tmp_path / "a")
    b = write_bundle(generate(spec), tmp_path / "b")
    for key in a:
        assert filecmp.cmp(a[key], b[key], shallow=False), key
    c = write_bundle(generate(SyntheticSpec(**SMALL, seed=10)), tmp_path / "c")
    assert not filecmp.cmp(a["panel"], c["panel"], shallow=False)


def test_files_round_trip_through_loaders(tmp_path):
    bundle = generate(SyntheticSpec(**SMALL))
    paths = write_bundle(bundle, tmp_path)
    panel = load_panel(paths["panel"])
    assert panel.stocks == bundle.panel.stocks
    np.testing.assert_array_equal(panel.values, bundle.panel.values)
    ind = load_industry_map(paths["industries"])
    assert len(ind) == SMALL["n_stocks"]
    assert len(load_holdings(paths["holdings"])) == len(bundle.holdings)
    assert len(load_events(paths["events"], panel.dates)) == len(bundle.events)
    oracle = load_oracle(tmp_path)
    np.testing.assert_array_equal(oracle.mu[:-1], bundle.oracle.mu[:-1])
    assert oracle.mean_ic == bundle.oracle.mean_ic


def test_holdings_blocks():
    b = generate(SyntheticSpec())
    vol = np.array(b.oracle.params["vol_multipliers"])
    rate = np.array(b.oracle.params["rate_multipliers"])
    ind_of = dict(zip(b.industries["stock_id"], b.industries["industry_id"]))
    ids = sorted(set(b.industries["industry_id"]))
    h = b.holdings
    ins = {ids.index(ind_of[s]) for s in h.loc[h.investor_type == "ins", "stock_id"]}
    hot = {ids.index(ind_of[s]) for s in h.loc[h.investor_type == "hot", "stock_id"]}
    assert ins == set(np.argsort(vol)[:2]) and hot == set(np.argsort(-rate)[:2])
    ret = h[h.investor_type == "ret"]
    assert set(ret["stock_id"]) == set(h.loc[h.investor_type == "hot", "stock_id"])
    assert np.all(ret["weight"] == 0.5)


def test_no_events_in_burn_in_calendar():
    b = generate(SyntheticSpec(n_stocks=5, n_industries=1, n_days=40, event_rate=1.0))
    assert len(b.events) == 5 * 40
    assert b.panel.dates[0] == np.datetime64("2017-01-03") and BURN_IN == 30


def test_events_carry_realized_return():
    b = generate(SyntheticSpec(**SMALL, event_rate=0.1))
    t = np.searchsorted(b.panel.dates, b.events["date"].to_numpy().astype("datetime64[D]"))
    i = [b.panel.stocks.index(s) for s in b.events["stock_id"]]
    np.testing.assert_array_equal(b.events["return_1d"].to_numpy(), b.returns[t, i])


def test_n_less_than_k_is_error():
    with pytest.raises(SyntheticError, match="n_industries"):
        SyntheticSpec(n_stocks=3, n_industries=4)


@pytest.mark.parametrize("bad", [dict(noise_scale=-1.0), dict(event_rate=1.5), dict(industry_persistence=1.0)])
def test_invalid_spec(bad):
    with pytest.raises(SyntheticError):
        SyntheticSpec(**bad)


def test_oracle_predict_range():
    b = generate(SyntheticSpec(**SMALL))
    np.testing.assert_array_equal(oracle_predict(b.oracle, 0), b.oracle.mu[0])
    np.testing.assert_array_equal(oracle_predict(b.oracle, str(b.panel.dates[5])), b.oracle.mu[5])
    for bad in (-1, SMALL["n_days"] - 1, SMALL["n_days"], "2030-01-01"):
        with pytest.raises(SyntheticError):
            oracle_predict(b.oracle, bad)
    assert isinstance(b.oracle.dates, np.ndarray) and isinstance(pd.Timestamp(b.oracle.dates[0]), pd.Timestamp)
