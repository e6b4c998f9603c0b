"""Daily top-k equal-weight rebalancing simulation and benchmark comparison."""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path

INITIAL_CASH = 10000.0
TOP_K = 5
DAYS_PER_YEAR = 365.25
_SHARE_TOL = 1e-9


class SimulationError(RuntimeError):
    pass


@dataclass
class DailyPredictions:
    date: dt.date
    entries: list[tuple[str, float]]

    def __post_init__(self):
        seen = set()
        for ticker, _ in self.entries:
            if ticker in seen:
                raise ValueError(f"duplicate prediction for {ticker} on {self.date.isoformat()}")
            seen.add(ticker)


@dataclass
class PortfolioState:
    cash: float
    holdings: dict[str, float] = field(default_factory=dict)
    equity_curve: list[tuple[dt.date, float]] = field(default_factory=list)

    def value(self, prices: dict[str, float], date: dt.date | None = None) -> float:
        """Cash plus holdings at ``prices``; fsum makes the result independent of holding order."""
        terms = [self.cash]
        for ticker, shares in self.holdings.items():
            if ticker not in prices:
                when = date.isoformat() if date else "the current day"
                raise SimulationError(f"no price for held ticker {ticker} on {when}")
            terms.append(shares * prices[ticker])
        return math.fsum(terms)


@dataclass
class SimulationSummary:
    initial_value: float
    final_value: float
    cumulative_return: float
    annualized_return: float
    max_drawdown: float
    trade_count: int
    start: dt.date
    end: dt.date

    def text(self) -> str:
        return "\n".join([
            f"start = {self.start.isoformat()}",
            f"end = {self.end.isoformat()}",
            f"initial_value = {self.initial_value!r}",
            f"final_value = {self.final_value!r}",
            f"cumulative_return = {self.cumulative_return!r}",
            f"annualized_return = {self.annualized_return!r}",
            f"max_drawdown = {self.max_drawdown!r}",
            f"trade_count = {self.trade_count}",
        ]) + "\n"


def select_portfolio(preds: DailyPredictions, threshold: float = 0.5, k: int = TOP_K) -> list[str]:
    """Up to k tickers with probability above threshold, highest first, ties by name."""
    positives = [(t, p) for t, p in preds.entries if p > threshold]
    positives.sort(key=lambda tp: (-tp[1], tp[0]))
    return [t for t, _ in positives[:k]]


def step_portfolio(state: PortfolioState, selection: list[str], prices: dict[str, float],
                   date: dt.date | None = None) -> PortfolioState:
    """Liquidate at today's prices and split the total equally across ``selection``."""
    when = date.isoformat() if date else "the current day"
    total = state.value(prices, date)
    for ticker in selection:
        if ticker not in prices:
            raise SimulationError(f"no price for selected ticker {ticker} on {when}")
        if not prices[ticker] > 0:
            raise SimulationError(f"nonpositive price for {ticker} on {when}")
    if not selection:
        return PortfolioState(total, {}, list(state.equity_curve))
    share = total / len(selection)
    holdings = {t: share / prices[t] for t in selection}
    return PortfolioState(0.0, holdings, list(state.equity_curve))


def _changed_tickers(before: dict[str, float], after: dict[str, float]) -> int:
    count = 0
    for ticker in set(before) | set(after):
        a, b = before.get(ticker, 0.0), after.get(ticker, 0.0)
        if abs(a - b) > _SHARE_TOL * max(abs(a), abs(b), 1.0):
            count += 1
    return count


def max_drawdown(values: list[float]) -> float:
    peak = -math.inf
    worst = 0.0
    for v in values:
        peak = max(peak, v)
        worst = max(worst, 1.0 - v / peak)
    return worst


def annualize_days(cumulative: float, days: float) -> float:
    """Compound ``cumulative`` earned over ``days`` calendar days to a 365.25-day year."""
    if days <= 0:
        raise ValueError(f"annualization span must be positive, got {days} days")
    return (1.0 + cumulative) ** (DAYS_PER_YEAR / days) - 1.0


def annualized_return(cumulative: float, start: dt.date, end: dt.date) -> float:
    return annualize_days(cumulative, (end - start).days)


def run_simulation(predictions, prices: dict[str, dict[dt.date, float]],
                   initial: float = INITIAL_CASH, threshold: float = 0.5, k: int = TOP_K):
    """Replay the daily policy and return (final state, summary).

    Trading days are the union of price dates from the first prediction date
    through the first trading day after the last prediction, so the final
    rebalance is marked to market once. The equity curve records each day's
    close before rebalancing; with zero costs the value after is the same.
    """
    by_date = {p.date: p for p in predictions}
    if not by_date:
        raise ValueError("no predictions to simulate")
    first, last = min(by_date), max(by_date)
    all_days = sorted({d for series in prices.values() for d in series})
    missing = [d for d in by_date if d not in set(all_days)]
    if missing:
        raise SimulationError(f"prediction date {min(missing).isoformat()} has no prices")
    later = [d for d in all_days if d > last]
    days = [d for d in all_days if first <= d <= last] + later[:1]

    state = PortfolioState(float(initial))
    trades = 0
    for day in days:
        today = {t: s[day] for t, s in prices.items() if day in s}
        value = state.value(today, day)
        state.equity_curve.append((day, value))
        if day in by_date:
            before = state.holdings
            state = step_portfolio(state, select_portfolio(by_date[day], threshold, k), today, day)
            trades += _changed_tickers(before, state.holdings)

    values = [v for _, v in state.equity_curve]
    start, end = state.equity_curve[0][0], state.equity_curve[-1][0]
    cumulative = values[-1] / float(initial) - 1.0
    annual = annualized_return(cumulative, start, end) if end > start else 0.0
    summary = SimulationSummary(float(initial), values[-1], cumulative, annual,
                                max_drawdown(values), trades, start, end)
    return state, summary


@dataclass
class ComparisonRow:
    date: dt.date
    portfolio: float  # rebased to 1.0 at the first common date
    benchmark: float  # rebased to 1.0 at the first common date

    @property
    def excess(self) -> float:
        return self.portfolio - self.benchmark


def compare_benchmark(equity: list[tuple[dt.date, float]],
                      benchmark: dict[dt.date, float]) -> list[ComparisonRow]:
    """Both series rebased to 1.0 at their first common date."""
    common = [(d, v) for d, v in equity if d in benchmark]
    if not common:
        raise ValueError("portfolio and benchmark share no dates")
    p0, b0 = common[0][1], benchmark[common[0][0]]
    return [ComparisonRow(d, v / p0, benchmark[d] / b0) for d, v in common]


EQUITY_HEADER = "date,portfolio_value,benchmark_value,excess"


def equity_csv(equity: list[tuple[dt.date, float]], benchmark: dict[dt.date, float] | None = None) -> str:
    """Portfolio value in currency; benchmark scaled to the same starting value.

    ``excess`` is the difference of the two rebased series, i.e. portfolio
    minus benchmark cumulative return since the first common date. Without a
    benchmark the last two columns are empty.
    """
    lines = [EQUITY_HEADER]
    if benchmark is None:
        lines += [f"{d.isoformat()},{float(v)!r},," for d, v in equity]
        return "\n".join(lines) + "\n"
    value = dict(equity)
    for r in compare_benchmark(equity, benchmark):
        start = value[r.date] / r.portfolio
        lines.append(f"{r.date.isoformat()},{float(value[r.date])!r},"
                     f"{float(r.benchmark * start)!r},{float(r.excess)!r}")
    return "\n".join(lines) + "\n"


def read_predictions_csv(path: str | Path) -> list[DailyPredictions]:
    """Group a ``ticker,end_date,probability,...`` file into per-day predictions."""
    grouped: dict[dt.date, list[tuple[str, float]]] = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        try:
            ti, di, pi = header.index("ticker"), header.index("end_date"), header.index("probability")
        except ValueError:
            raise ValueError(f"{path}: header must contain ticker, end_date and probability") from None
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            try:
                day = dt.date.fromisoformat(parts[di])
                grouped.setdefault(day, []).append((parts[ti], float(parts[pi])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return [DailyPredictions(d, grouped[d]) for d in sorted(grouped)]


def read_benchmark_csv(path: str | Path) -> dict[dt.date, float]:
    out = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "date,adj_close":
            raise ValueError(f"{path}: expected header 'date,adj_close', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                d, price = line.strip().split(",")
                out[dt.date.fromisoformat(d)] = float(price)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out
