"""Bar loading, next-day movement labels, context windows and date splits."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .indicators import Bar, FeatureFrame

CSV_HEADER = ["date", "open", "high", "low", "close", "adj_close", "volume"]

DOWN_THRESHOLD = -0.005
UP_THRESHOLD = 0.0055
# boundaries are inclusive; absorbs rounding in the price ratio
_BOUNDARY_TOL = 1e-12


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class WindowSample:
    ticker: str
    end_date: dt.date
    x: np.ndarray  # N x (4 + F), oldest row first
    label: int


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[dt.date, dt.date]
    valid: tuple[dt.date, dt.date]
    test: tuple[dt.date, dt.date]

    def __post_init__(self):
        ranges = (self.train, self.valid, self.test)
        for start, end in ranges:
            if not start < end:
                raise ValueError(f"empty split range [{start}, {end})")
        if not (self.train[1] <= self.valid[0] and self.valid[1] <= self.test[0]):
            raise ValueError("split ranges must be disjoint and ordered train < valid < test")

    @classmethod
    def from_dates(cls, *dates) -> SplitSpec:
        d = [x if isinstance(x, dt.date) else dt.date.fromisoformat(str(x)) for x in dates]
        if len(d) != 6:
            raise ValueError(f"split needs six dates, got {len(d)}")
        return cls((d[0], d[1]), (d[2], d[3]), (d[4], d[5]))


ACL18_SPLIT = SplitSpec.from_dates("2014-01-01", "2015-08-08", "2015-08-08", "2015-10-01",
                                   "2015-10-01", "2016-01-01")
KDD17_SPLIT = SplitSpec.from_dates("2007-01-01", "2015-01-01", "2015-01-01", "2016-01-01",
                                   "2016-01-01", "2017-01-01")


def _read_csv(path: Path) -> list[Bar]:
    bars: list[Bar] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != len(CSV_HEADER):
                    raise ValueError(f"expected {len(CSV_HEADER)} fields, got {len(row)}")
                date = dt.date.fromisoformat(row[0].strip())
                bar = Bar(date, *(float(v) for v in row[1:]))
                bar.validate()
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if bars and bar.date == bars[-1].date:
                raise DataError(f"{path}:{lineno}: duplicate date {bar.date}")
            if bars and bar.date < bars[-1].date:
                raise DataError(f"{path}:{lineno}: date {bar.date} is not after {bars[-1].date}")
            bars.append(bar)
    return bars


def load_bars(path) -> dict[str, list[Bar]]:
    """Read one ticker CSV, or every ``*.csv`` in a directory, keyed by file stem."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise DataError(f"{path}: no CSV files found")
    elif path.exists():
        files = [path]
    else:
        raise DataError(f"{path}: no such file or directory")
    return {f.stem: _read_csv(f) for f in files}


def compute_label(adj_close_t: float, adj_close_t1: float) -> int | None:
    """1 for a rise of at least 0.55%, 0 for a fall of at least 0.5%, None in between."""
    if adj_close_t <= 0 or adj_close_t1 <= 0:
        raise ValueError("prices must be positive")
    change = adj_close_t1 / adj_close_t - 1.0
    if change <= DOWN_THRESHOLD + _BOUNDARY_TOL:
        return 0
    if change >= UP_THRESHOLD - _BOUNDARY_TOL:
        return 1
    return None


def build_windows(frame: FeatureFrame, n: int) -> list[WindowSample]:
    if n < 1:
        raise ValueError("window size must be at least 1")
    x_all = np.hstack([frame.time_features, frame.market_features])
    samples = []
    for end in range(frame.valid_from + n - 1, len(frame) - 1):
        label = compute_label(frame.adj_close[end], frame.adj_close[end + 1])
        if label is None:
            continue
        samples.append(WindowSample(frame.ticker, frame.dates[end], x_all[end - n + 1:end + 1].copy(), label))
    return samples


def split_by_date(samples, spec: SplitSpec):
    """Assign samples to (train, valid, test) by end date in half-open ranges."""
    out = ([], [], [])
    ranges = (spec.train, spec.valid, spec.test)
    for s in samples:
        for bucket, (start, end) in zip(out, ranges):
            if start <= s.end_date < end:
                bucket.append(s)
                break
    return out


def class_balance(samples) -> tuple[float, float]:
    """Fractions of (up, down) labels."""
    if not samples:
        raise ValueError("class balance of an empty sample list")
    up = sum(s.label for s in samples) / len(samples)
    return up, 1.0 - up


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.x for s in samples])
    y = np.array([s.label for s in samples], dtype=float)
    return x, y
