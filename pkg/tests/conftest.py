import datetime as dt

import numpy as np
import pytest

from stst.indicators import Bar


def trading_days(start: dt.date, count: int):
    days, d = [], start
    while len(days) < count:
        if d.isoweekday() <= 5:
            days.append(d)
        d += dt.timedelta(days=1)
    return days


def random_walk_bars(seed: int, count: int = 300, start=dt.date(2013, 1, 2)):
    rng = np.random.default_rng(seed)
    closes = 50.0 * np.exp(np.cumsum(rng.normal(0, 0.015, count)))
    bars = []
    prev = closes[0]
    for date, close in zip(trading_days(start, count), closes):
        open_ = prev * (1 + rng.normal(0, 0.004))
        high = max(open_, close) * (1 + abs(rng.normal(0, 0.006)))
        low = min(open_, close) * (1 - abs(rng.normal(0, 0.006)))
        volume = float(rng.integers(0, 2_000_000)) if rng.random() > 0.03 else 0.0
        bars.append(Bar(date, float(open_), float(high), float(low), float(close), float(close * 0.97), volume))
        prev = close
    return bars


def constant_bars(count: int = 210, price: float = 100.0, volume: float = 1000.0):
    return [Bar(d, price, price, price, price, price, volume)
            for d in trading_days(dt.date(2014, 1, 2), count)]


def bars_from_closes(closes, volume=1000.0, start=dt.date(2014, 1, 2)):
    return [Bar(d, c, c, c, c, c, volume) for d, c in zip(trading_days(start, len(closes)), closes)]


def write_bars_csv(path, bars):
    with open(path, "w") as fh:
        fh.write("date,open,high,low,close,adj_close,volume\n")
        for b in bars:
            fh.write(f"{b.date.isoformat()},{b.open!r},{b.high!r},{b.low!r},{b.close!r},{b.adj_close!r},{b.volume!r}\n")


@pytest.fixture
def rw_bars():
    return random_walk_bars(0)


# a model small enough that every CLI subcommand finishes in about a second
TINY_RUN_CONFIG = """\
data_path = data
train_start = 2013-01-01
train_end = 2014-02-01
valid_start = 2014-02-01
valid_end = 2014-04-01
test_start = 2014-04-01
test_end = 2014-08-01
context_window = 4
d_model = 4
n_heads = 1
d_ff = 8
n_encoders = 1
n_lstm_layers = 1
d_lstm_hidden = 4
time2vec_dim = 2
learning_rate = 0.001
warmup_steps = 10
max_epochs = 2
"""


def make_workspace(root, config=TINY_RUN_CONFIG, tickers=("AAA", "BBB", "CCC", "DDD")):
    """Random-walk ticker files, a benchmark series and a run configuration under ``root``."""
    (root / "data").mkdir(parents=True)
    for i, t in enumerate(tickers):
        write_bars_csv(root / "data" / f"{t}.csv", random_walk_bars(i, 400))
    with open(root / "bench.csv", "w") as fh:
        fh.write("date,adj_close\n")
        for b in random_walk_bars(99, 400):
            fh.write(f"{b.date.isoformat()},{b.adj_close!r}\n")
    (root / "run.cfg").write_text(config)
    return root / "run.cfg"


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
