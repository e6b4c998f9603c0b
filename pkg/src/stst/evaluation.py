"""Accuracy, Matthews correlation, checkpoint evaluation and the four-variant ablation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import ModelConfig, ShapeError, StstModel


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self) -> ConfusionCounts:
        """Counts after relabeling class 0 as 1 and vice versa."""
        return ConfusionCounts(self.tn, self.tp, self.fn, self.fp)


def confusion_counts(labels, predictions) -> ConfusionCounts:
    y = np.asarray(labels).astype(bool)
    p = np.asarray(predictions).astype(bool)
    return ConfusionCounts(int(np.sum(y & p)), int(np.sum(~y & ~p)), int(np.sum(~y & p)), int(np.sum(y & ~p)))


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy of zero samples")
    return (c.tp + c.tn) / c.total


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation; 0 whenever a denominator factor is 0."""
    factors = (c.tp + c.fp, c.tp + c.fn, c.tn + c.fp, c.tn + c.fn)
    if 0 in factors:
        return 0.0
    # integer products keep large counts exact before the single division
    return (c.tp * c.tn - c.fn * c.fp) / math.sqrt(math.prod(factors))


@dataclass
class EvalResult:
    accuracy: float
    mcc: float
    counts: ConfusionCounts
    probabilities: np.ndarray
    predictions: np.ndarray


def evaluate(model: StstModel, samples, threshold: float = 0.5) -> EvalResult:
    """Eval-mode predictions (probability > threshold) and their metrics."""
    if isinstance(samples, tuple):
        x, y = samples
    else:
        x = np.stack([s.x for s in samples])
        y = np.array([s.label for s in samples])
    cfg = model.config
    if x.ndim != 3 or x.shape[1:] != (cfg.context_window, cfg.n_time + cfg.n_features):
        raise ShapeError(f"samples of shape {x.shape[1:]} do not match the checkpoint "
                         f"({cfg.context_window}, {cfg.n_time + cfg.n_features})")
    probs = model.predict_proba(x)
    preds = (probs > threshold).astype(int)
    counts = confusion_counts(y, preds)
    return EvalResult(accuracy(counts), mcc(counts), counts, probs, preds)


VARIANTS = {
    "STST-MLP-T": ("temporal", "mlp"),
    "STST-T": ("temporal", "lstm_mlp"),
    "STST-MLP": ("spatiotemporal", "mlp"),
    "STST": ("spatiotemporal", "lstm_mlp"),
}


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    embedding, head = VARIANTS[name]
    return replace(base, embedding=embedding, head=head).validate()


@dataclass
class VariantResult:
    name: str
    record: object
    result: EvalResult | None
    error: str | None = None


def ablation_suite(train, valid, test, base: ModelConfig, spec, variants=tuple(VARIANTS)) -> list[VariantResult]:
    """Train and test each variant with the same data and seed, in table order."""
    from .training import fit

    out = []
    for name in variants:
        try:
            record = fit(train, valid, variant_config(base, name), spec)
            out.append(VariantResult(name, record, evaluate(record.model, test)))
        except Exception as exc:  # per-variant failure is recorded, others proceed
            out.append(VariantResult(name, None, None, f"{type(exc).__name__}: {exc}"))
    return out


METRICS_HEADER = "variant,dataset,accuracy,mcc,tp,tn,fp,fn"


def metrics_row(variant: str, dataset: str, r: EvalResult) -> str:
    c = r.counts
    return f"{variant},{dataset},{r.accuracy!r},{r.mcc!r},{c.tp},{c.tn},{c.fp},{c.fn}"


def metrics_csv(rows: list[tuple[str, str, EvalResult]]) -> str:
    return "\n".join([METRICS_HEADER] + [metrics_row(*r) for r in rows]) + "\n"


PREDICTIONS_HEADER = "ticker,end_date,probability,prediction,label"


def predictions_csv(samples, r: EvalResult) -> str:
    lines = [PREDICTIONS_HEADER]
    for s, p, yhat in zip(samples, r.probabilities, r.predictions):
        lines.append(f"{s.ticker},{s.end_date.isoformat()},{float(p)!r},{yhat},{s.label}")
    return "\n".join(lines) + "\n"
