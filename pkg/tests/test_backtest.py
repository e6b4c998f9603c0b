import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stst.backtest import (EQUITY_HEADER, DailyPredictions, PortfolioState, SimulationError, annualize_days,
                           annualized_return, compare_benchmark, equity_csv, max_drawdown, read_benchmark_csv,
                           read_predictions_csv, run_simulation, select_portfolio, step_portfolio)

from backtest_fixtures import DAYS, FIXTURES, oracle

D = dt.date(2016, 1, 4)


def _preds(*probs):
    return DailyPredictions(D, [(f"S{i}", p) for i, p in enumerate(probs)])


# -- selection ------------------------------------------------------------------

def test_select_top5_of_seven():
    preds = _preds(0.9, 0.6, 0.55, 0.8, 0.7, 0.65, 0.95)
    assert select_portfolio(preds) == ["S6", "S0", "S3", "S4", "S5"]


def test_select_fewer_than_five():
    assert select_portfolio(_preds(0.9, 0.1, 0.6, 0.2, 0.7)) == ["S0", "S4", "S2"]


def test_select_none_and_strict_threshold():
    assert select_portfolio(_preds(0.5, 0.1, 0.3)) == []


def test_select_ties_by_name():
    preds = DailyPredictions(D, [("ZZZ", 0.7), ("AAA", 0.7), ("MMM", 0.7)])
    assert select_portfolio(preds, k=2) == ["AAA", "MMM"]


def test_duplicate_ticker_rejected():
    with pytest.raises(ValueError):
        DailyPredictions(D, [("A", 0.6), ("A", 0.7)])


# -- stepping -------------------------------------------------------------------

def test_step_equal_split():
    s = step_portfolio(PortfolioState(10000.0), ["A", "B"], {"A": 100.0, "B": 200.0})
    assert s.holdings == {"A": 50.0, "B": 25.0} and s.cash == 0.0


def test_step_empty_selection_holds_cash():
    s = step_portfolio(PortfolioState(0.0, {"A": 50.0}), [], {"A": 200.0})
    assert s.cash == 10000.0 and s.holdings == {}


def test_step_fixed_point():
    prices = {"A": 100.0, "B": 200.0}
    s = step_portfolio(PortfolioState(10000.0), ["A", "B"], prices)
    again = step_portfolio(s, ["A", "B"], prices)
    for t in prices:
        assert again.holdings[t] == pytest.approx(s.holdings[t], rel=1e-9)


def test_step_missing_price_names_ticker_and_date():
    with pytest.raises(SimulationError, match=r"GONE.*2016-01-04"):
        step_portfolio(PortfolioState(0.0, {"GONE": 1.0}), [], {"A": 1.0}, D)


@settings(max_examples=100)
@given(st.floats(1.0, 1e6), st.lists(st.floats(0.01, 1e4), min_size=1, max_size=8), st.integers(0, 8))
def test_value_conservation_and_no_negatives(cash, price_list, n_pick):
    prices = {f"T{i}": p for i, p in enumerate(price_list)}
    state = PortfolioState(cash)
    before = state.value(prices)
    after_state = step_portfolio(state, list(prices)[:n_pick], prices)
    after = after_state.value(prices)
    assert abs(after - before) <= 1e-9 * before
    assert after_state.cash >= 0 and all(v >= 0 for v in after_state.holdings.values())


# -- simulation -------------------------------------------------------------------

@pytest.mark.parametrize("name", list(FIXTURES))
def test_simulation_matches_oracle(name):
    preds, prices = FIXTURES[name]()
    state, summary = run_simulation(preds, prices)
    curve, conservation = oracle(preds, prices)
    assert [v for _, v in state.equity_curve] == curve
    assert [d for d, _ in state.equity_curve] == DAYS
    for before, after in conservation:
        assert abs(after - before) <= 1e-9 * before
    assert summary.final_value == curve[-1]


def test_all_hold_fixture_final_value():
    preds, prices = FIXTURES["all_hold"]()
    _, summary = run_simulation(preds, prices)
    assert summary.final_value == 10000.0 and summary.cumulative_return == 0.0
    assert summary.trade_count == 0 and summary.max_drawdown == 0.0


def test_single_winner_doubles():
    preds, prices = FIXTURES["single_winner"]()
    _, summary = run_simulation(preds, prices)
    assert summary.cumulative_return == pytest.approx(1.0, rel=1e-12)
    assert summary.trade_count == 1


def test_two_day_doubling():
    d0, d1 = dt.date(2016, 1, 4), dt.date(2016, 1, 5)
    prices = {"A": {d0: 10.0, d1: 20.0}}
    _, summary = run_simulation([DailyPredictions(d0, [("A", 0.9)])], prices)
    assert summary.cumulative_return == 1.0 and summary.final_value == 20000.0


def test_days_without_predictions_keep_holdings():
    d = DAYS
    prices = {"A": {x: 10.0 + i for i, x in enumerate(d[:4])}}
    preds = [DailyPredictions(d[0], [("A", 0.9)]), DailyPredictions(d[2], [("A", 0.9)])]
    state, _ = run_simulation(preds, prices)
    assert [v for _, v in state.equity_curve] == [10000.0, 11000.0, 12000.0, 13000.0]


def test_missing_price_during_simulation():
    preds, prices = FIXTURES["single_winner"]()
    del prices["WIN"][DAYS[4]]
    with pytest.raises(SimulationError, match="WIN"):
        run_simulation(preds, prices)


def test_rotating_fixture_holds_cash_on_empty_day():
    preds, prices = FIXTURES["rotating_top5"]()
    state, summary = run_simulation(preds, prices)
    values = [v for _, v in state.equity_curve]
    assert values[4] == values[3]  # day 3 liquidated to cash, so day 4 opens flat
    assert summary.trade_count > 0


@pytest.mark.parametrize("scale", [0.37, 2.0, 1234.5])
def test_price_scaling_leaves_returns_unchanged(scale):
    preds, prices = FIXTURES["rotating_top5"]()
    scaled = {t: {d: p * scale for d, p in s.items()} for t, s in prices.items()}
    _, a = run_simulation(preds, prices)
    _, b = run_simulation(preds, scaled)
    assert b.cumulative_return == pytest.approx(a.cumulative_return, abs=1e-12)
    assert b.annualized_return == pytest.approx(a.annualized_return, abs=1e-12)
    bench = {d: 100.0 + i for i, d in enumerate(DAYS)}
    sa, sb = run_simulation(preds, prices)[0], run_simulation(preds, scaled)[0]
    ea = [r.excess for r in compare_benchmark(sa.equity_curve, bench)]
    eb = [r.excess for r in compare_benchmark(sb.equity_curve, bench)]
    assert np.allclose(ea, eb, rtol=0, atol=1e-12)


# -- summary statistics -------------------------------------------------------------

def test_annualized_examples():
    start = dt.date(2016, 1, 1)
    assert annualized_return(0.0, start, start + dt.timedelta(days=90)) == 0.0
    assert annualized_return(0.1, start, start + dt.timedelta(days=1461)) == pytest.approx(1.1 ** 0.25 - 1)
    assert annualize_days(0.1, 182.625) == pytest.approx(0.21, abs=1e-12)
    assert annualize_days(0.37, 365.25) == pytest.approx(0.37, abs=1e-15)
    with pytest.raises(ValueError):
        annualized_return(0.1, start, start)


def test_annualized_four_year_span():
    # four calendar years hold 1461 days, i.e. exactly four 365.25-day years
    start = dt.date(2012, 1, 1)
    r = annualized_return(0.4641, start, dt.date(2016, 1, 1))
    assert r == pytest.approx(1.4641 ** 0.25 - 1, rel=1e-12)


def test_max_drawdown():
    assert max_drawdown([100, 120, 90, 130, 65]) == pytest.approx(0.5)
    assert max_drawdown([1, 2, 3]) == 0.0


# -- benchmark comparison --------------------------------------------------------------

def test_identical_series_zero_excess():
    equity = [(d, 10000.0 * (1 + i / 10)) for i, d in enumerate(DAYS)]
    bench = {d: 5.0 * (1 + i / 10) for i, d in enumerate(DAYS)}
    rows = compare_benchmark(equity, bench)
    assert rows[0].portfolio == 1.0 and rows[0].benchmark == 1.0
    assert all(abs(r.excess) < 1e-15 for r in rows)


def test_flat_portfolio_vs_rising_benchmark():
    equity = [(d, 10000.0) for d in DAYS]
    bench = {d: 100.0 + i for i, d in enumerate(DAYS)}
    assert compare_benchmark(equity, bench)[-1].excess < 0


def test_no_overlap_is_an_error():
    with pytest.raises(ValueError):
        compare_benchmark([(DAYS[0], 1.0)], {DAYS[1]: 1.0})


def test_compare_uses_common_dates():
    equity = [(d, 100.0 + i) for i, d in enumerate(DAYS)]
    bench = {d: 50.0 for d in DAYS[3:]}
    rows = compare_benchmark(equity, bench)
    assert rows[0].date == DAYS[3] and rows[0].portfolio == 1.0


def test_equity_csv_columns():
    equity = [(d, 10000.0 + i) for i, d in enumerate(DAYS[:3])]
    text = equity_csv(equity, {d: 2.0 for d in DAYS})
    lines = text.splitlines()
    assert lines[0] == EQUITY_HEADER
    assert lines[1] == f"{DAYS[0].isoformat()},10000.0,10000.0,0.0"
    assert equity_csv(equity).splitlines()[1] == f"{DAYS[0].isoformat()},10000.0,,"


# -- CSV readers ----------------------------------------------------------------------

def test_read_predictions_groups_by_day(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("ticker,end_date,probability,prediction,label\n"
                 "A,2016-01-05,0.7,1,1\nB,2016-01-04,0.2,0,0\nA,2016-01-04,0.6,1,0\n")
    days = read_predictions_csv(p)
    assert [d.date for d in days] == [dt.date(2016, 1, 4), dt.date(2016, 1, 5)]
    assert days[0].entries == [("B", 0.2), ("A", 0.6)]


def test_read_predictions_bad_row(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("ticker,end_date,probability\nA,2016-13-05,0.7\n")
    with pytest.raises(ValueError, match=":2"):
        read_predictions_csv(p)


def test_read_benchmark(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("date,adj_close\n2016-01-04,100.5\n2016-01-05,101\n")
    assert read_benchmark_csv(p) == {dt.date(2016, 1, 4): 100.5, dt.date(2016, 1, 5): 101.0}
    p.write_text("day,close\n")
    with pytest.raises(ValueError):
        read_benchmark_csv(p)
