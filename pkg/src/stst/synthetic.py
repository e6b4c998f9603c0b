"""Synthetic window datasets with known ground truth, for sanity checks and ablations."""

from __future__ import annotations

import datetime as dt

import numpy as np

from .indicators import date_features


def _time_block(rng, n_samples: int, window: int) -> np.ndarray:
    # consecutive calendar days from random starting dates, encoded as date features
    starts = rng.integers(0, 3000, size=n_samples)
    base = dt.date(2010, 1, 1)
    out = np.empty((n_samples, window, 4))
    for s, offset in enumerate(starts):
        for r in range(window):
            out[s, r] = date_features(base + dt.timedelta(days=int(offset) + r))
    return out


def threshold_dataset(n_samples: int, window: int, n_features: int, column: int = 0,
                      threshold: float = 0.5, seed: int = 0):
    """Label is 1 iff feature ``column`` on the last timestep exceeds ``threshold``."""
    rng = np.random.default_rng(seed)
    feats = rng.random((n_samples, window, n_features))
    y = (feats[:, -1, column] > threshold).astype(float)
    return np.concatenate([_time_block(rng, n_samples, window), feats], axis=-1), y


def spatial_interaction_dataset(n_samples: int, window: int, n_features: int, seed: int = 0):
    """Label is 1 iff two features in the last timestep have the same sign.

    Features are uniform on [-1, 1], so each one alone is independent of the
    label and the signal lives only in the product of features 0 and 1 within
    one timestep. The remaining columns are distractors.
    """
    rng = np.random.default_rng(seed)
    feats = rng.uniform(-1.0, 1.0, size=(n_samples, window, n_features))
    y = (feats[:, -1, 0] * feats[:, -1, 1] > 0).astype(float)
    return np.concatenate([_time_block(rng, n_samples, window), feats], axis=-1), y


def split(x, y, fractions=(0.7, 0.15)):
    n = len(x)
    a = int(n * fractions[0])
    b = a + int(n * fractions[1])
    return (x[:a], y[:a]), (x[a:b], y[a:b]), (x[b:], y[b:])
