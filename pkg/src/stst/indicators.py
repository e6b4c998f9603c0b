"""Date features and binary technical-indicator signals.

Signal functions take float arrays and return float arrays holding 0.0/1.0
where the signal is defined and NaN during an indicator's warm-up.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MA_PERIODS = (10, 30, 50, 200)

PRICE_COLUMNS = ("open", "high", "low", "close", "adj_close", "volume")
SIGNAL_COLUMNS = (
    *(f"sig_sma_{n}" for n in MA_PERIODS),
    *(f"sig_ema_{n}" for n in MA_PERIODS),
    "sig_momentum", "sig_stochrsi", "sig_stoch_d", "sig_stoch_k", "sig_macd",
    "sig_cci", "sig_mfi", "sig_ad", "sig_obv", "sig_roc",
)
TIME_COLUMNS = ("year", "month", "day", "weekday")
MARKET_COLUMNS = PRICE_COLUMNS + SIGNAL_COLUMNS

# longest lookback (200-day average) plus one day for the next-day label
MIN_BARS = 210


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class Bar:
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: float

    def validate(self) -> None:
        for name in ("open", "high", "low", "close", "adj_close"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{self.date}: {name} must be positive, got {value}")
        if not np.isfinite(self.volume) or self.volume < 0:
            raise ValueError(f"{self.date}: volume must be nonnegative, got {self.volume}")
        if self.low > min(self.open, self.close) or self.high < max(self.open, self.close):
            raise ValueError(f"{self.date}: low/high do not bracket open and close")


@dataclass
class FeatureFrame:
    ticker: str
    dates: list[dt.date]
    time_features: np.ndarray    # rows x 4
    market_features: np.ndarray  # rows x 24
    adj_close: np.ndarray        # raw prices, used for labels
    valid_from: int

    def __len__(self) -> int:
        return len(self.dates)


def date_features(date: dt.date) -> np.ndarray:
    return np.array([date.year / 3000, date.month / 12, date.day / 31, date.isoweekday() / 7])


# ---------------------------------------------------------------------------
# base indicators (NaN during warm-up)


def sma(x: np.ndarray, n: int) -> np.ndarray:
    out = np.full(len(x), np.nan)
    if len(x) >= n:
        out[n - 1:] = sliding_window_view(x, n).mean(axis=1)
    return out


def ema(x: np.ndarray, n: int) -> np.ndarray:
    """EMA with smoothing 2/(n+1), seeded by the SMA of the first n defined values."""
    out = np.full(len(x), np.nan)
    defined = np.flatnonzero(~np.isnan(x))
    if len(defined) < n:
        return out
    start = defined[0]
    alpha = 2.0 / (n + 1)
    seed_at = start + n - 1
    out[seed_at] = x[start:seed_at + 1].mean()
    for i in range(seed_at + 1, len(x)):
        # incremental form keeps a constant series exactly constant
        out[i] = out[i - 1] + alpha * (x[i] - out[i - 1])
    return out


def rsi(close: np.ndarray, n: int = 14) -> np.ndarray:
    """RSI from simple n-day averages of gains and losses; zero average loss gives 100."""
    out = np.full(len(close), np.nan)
    if len(close) <= n:
        return out
    change = np.diff(close)
    gain = sliding_window_view(np.maximum(change, 0.0), n).mean(axis=1)
    loss = sliding_window_view(np.maximum(-change, 0.0), n).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = 100.0 - 100.0 / (1.0 + gain / loss)
    out[n:] = np.where(loss == 0.0, 100.0, value)
    return out


def stochastic(value: np.ndarray, low: np.ndarray, high: np.ndarray, n: int) -> np.ndarray:
    """100 * (value - lowest low) / (highest high - lowest low); zero range gives 50."""
    out = np.full(len(value), np.nan)
    defined = np.flatnonzero(~(np.isnan(low) | np.isnan(high)))
    if len(defined) < n:
        return out
    start = defined[0]
    lo = sliding_window_view(low[start:], n).min(axis=1)
    hi = sliding_window_view(high[start:], n).max(axis=1)
    v = value[start + n - 1:]
    span = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(span == 0.0, 50.0, 100.0 * (v - lo) / span)
    out[start + n - 1:] = k
    return out


def _sma_defined(x: np.ndarray, n: int) -> np.ndarray:
    # SMA over a series that starts with a NaN warm-up block
    out = np.full(len(x), np.nan)
    defined = np.flatnonzero(~np.isnan(x))
    if len(defined) >= n:
        out[defined[0]:] = sma(x[defined[0]:], n)
    return out


def cci(high: np.ndarray, low: np.ndarray, close: np.ndarray, n: int = 14) -> np.ndarray:
    """Commodity channel index with constant 0.015; zero mean deviation gives 0."""
    out = np.full(len(close), np.nan)
    if len(close) < n:
        return out
    tp = (high + low + close) / 3.0
    windows = sliding_window_view(tp, n)
    avg = windows.mean(axis=1)
    meandev = np.abs(windows - avg[:, None]).mean(axis=1)
    # relative guard: identical typical prices can leave a rounding-level deviation
    flat = meandev <= 1e-12 * np.abs(avg)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = (tp[n - 1:] - avg) / (0.015 * meandev)
    out[n - 1:] = np.where(flat, 0.0, value)
    return out


def mfi(high: np.ndarray, low: np.ndarray, close: np.ndarray, volume: np.ndarray,
        n: int = 14) -> np.ndarray:
    """Money flow index; no negative flow gives 100, no flow at all gives 50."""
    out = np.full(len(close), np.nan)
    if len(close) <= n:
        return out
    tp = (high + low + close) / 3.0
    flow = tp * volume
    up = np.where(tp[1:] > tp[:-1], flow[1:], 0.0)
    down = np.where(tp[1:] < tp[:-1], flow[1:], 0.0)
    pos = sliding_window_view(up, n).sum(axis=1)
    neg = sliding_window_view(down, n).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = 100.0 - 100.0 / (1.0 + pos / neg)
    out[n:] = np.where(neg == 0.0, np.where(pos == 0.0, 50.0, 100.0), value)
    return out


def accumulation_distribution(high, low, close, volume) -> np.ndarray:
    span = high - low
    with np.errstate(divide="ignore", invalid="ignore"):
        mult = np.where(span == 0.0, 0.0, ((close - low) - (high - close)) / span)
    return np.cumsum(volume * mult)


def on_balance_volume(close, volume) -> np.ndarray:
    step = np.zeros(len(close))
    step[1:] = np.sign(np.diff(close)) * volume[1:]
    return np.cumsum(step)


# ---------------------------------------------------------------------------
# signal rules


def _signal(defined: np.ndarray, condition: np.ndarray) -> np.ndarray:
    return np.where(defined, condition.astype(float), np.nan)


def _prev(x: np.ndarray) -> np.ndarray:
    out = np.full(len(x), np.nan)
    out[1:] = x[:-1]
    return out


def _rising(x: np.ndarray) -> np.ndarray:
    prev = _prev(x)
    return _signal(~np.isnan(x) & ~np.isnan(prev), x > prev)


def sma_ema_signals(close: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    s, e = sma(close, n), ema(close, n)
    return _signal(~np.isnan(s), close > s), _signal(~np.isnan(e), close > e)


def momentum_roc_signals(close: np.ndarray, n: int = 10) -> tuple[np.ndarray, np.ndarray]:
    mom = np.full(len(close), np.nan)
    roc = np.full(len(close), np.nan)
    mom[n:] = close[n:] - close[:-n]
    roc[n:] = 100.0 * (close[n:] / close[:-n] - 1.0)
    return _signal(~np.isnan(mom), mom > 0), _rising(roc)


def stochastic_lines(high, low, close, n=14, k=3, d=3) -> tuple[np.ndarray, np.ndarray]:
    """%K (raw stochastic smoothed over k days) and %D (d-day SMA of %K)."""
    k_line = _sma_defined(stochastic(close, low, high, n), k)
    return k_line, _sma_defined(k_line, d)


def stoch_rsi_line(close, n=14, rsi_len=14, k=3) -> np.ndarray:
    r = rsi(close, rsi_len)
    return _sma_defined(stochastic(r, r, r, n), k)


def stochastic_signals(high, low, close) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """STOCHRSI, STOCH_K and STOCH_D signals (len=14, rsi_len=14, k=3, d=3)."""
    srsi = stoch_rsi_line(close)
    prev = _prev(srsi)
    defined = ~np.isnan(srsi) & ~np.isnan(prev)
    srsi_sig = _signal(defined, (srsi <= 25) | ((srsi > prev) & (srsi < 75)))
    k_line, d_line = stochastic_lines(high, low, close)
    return srsi_sig, _rising(k_line), _rising(d_line)


def macd_signal(close: np.ndarray, fast=12, slow=26, signal=9) -> np.ndarray:
    line = ema(close, fast) - ema(close, slow)
    trigger = ema(line, signal)
    return _signal(~np.isnan(trigger), trigger < line)


def cci_mfi_signals(high, low, close, volume) -> tuple[np.ndarray, np.ndarray]:
    c = cci(high, low, close)
    c_prev = _prev(c)
    c_sig = _signal(~np.isnan(c) & ~np.isnan(c_prev), (c <= 100) | (c > c_prev))
    m = mfi(high, low, close, volume)
    m_prev = _prev(m)
    m_sig = _signal(~np.isnan(m) & ~np.isnan(m_prev), (m <= 20) | ((m > m_prev) & (m < 80)))
    return c_sig, m_sig


def volume_signals(high, low, close, volume) -> tuple[np.ndarray, np.ndarray]:
    return (_rising(accumulation_distribution(high, low, close, volume)),
            _rising(on_balance_volume(close, volume)))


def compute_signals(high, low, close, volume) -> np.ndarray:
    """All 18 signals as a rows x 18 array in ``SIGNAL_COLUMNS`` order."""
    sma_sigs, ema_sigs = zip(*(sma_ema_signals(close, n) for n in MA_PERIODS))
    mom, roc = momentum_roc_signals(close)
    srsi, stoch_k, stoch_d = stochastic_signals(high, low, close)
    cci_sig, mfi_sig = cci_mfi_signals(high, low, close, volume)
    ad, obv = volume_signals(high, low, close, volume)
    cols = [*sma_sigs, *ema_sigs, mom, srsi, stoch_d, stoch_k, macd_signal(close),
            cci_sig, mfi_sig, ad, obv, roc]
    return np.column_stack(cols)


def bars_to_arrays(bars) -> dict[str, np.ndarray]:
    return {name: np.array([getattr(b, name) for b in bars], dtype=float) for name in PRICE_COLUMNS}


def assemble_feature_frame(bars, ticker: str = "") -> FeatureFrame:
    """Date features, normalized OHLCV and the 18 signals for one ticker."""
    if len(bars) < MIN_BARS:
        raise InsufficientHistoryError(
            f"{ticker or 'series'}: {len(bars)} bars, need at least {MIN_BARS} "
            "(sig_sma_200/sig_ema_200 warm-up plus one label day)")
    a = bars_to_arrays(bars)
    signals = compute_signals(a["high"], a["low"], a["close"], a["volume"])
    defined = ~np.isnan(signals).any(axis=1)
    valid_from = int(np.argmax(defined))

    scale = a["adj_close"][-1]
    vmax = a["volume"].max()
    raw = np.column_stack([a[c] / scale for c in PRICE_COLUMNS[:5]]
                          + [a["volume"] / vmax if vmax > 0 else a["volume"]])
    market = np.hstack([raw, np.nan_to_num(signals, nan=0.0)])
    dates = [b.date for b in bars]
    time = np.array([date_features(d) for d in dates])
    return FeatureFrame(ticker, dates, time, market, a["adj_close"].copy(), valid_from)
