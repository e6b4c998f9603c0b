"""BCE training with linear warmup, adaptive-moment updates, early stopping and grid search."""

from __future__ import annotations

import logging
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .dataset import stack
from .model import ModelConfig, StstModel

log = logging.getLogger(__name__)

P_CLAMP = 1e-7


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainSpec:
    learning_rate: float = 5.35e-6
    batch_size: int = 32
    warmup_steps: int = 25000
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    grad_clip: float | None = 5.0
    grid: dict = field(default_factory=dict)

    def validate(self) -> TrainSpec:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs and early_stop_patience must be positive")
        return self


# default search space; continuous ranges are discretized
DEFAULT_GRID = {
    "learning_rate": [1e-7, 5e-7, 1e-6, 5e-6, 1e-5, 5e-5, 1e-4],
    "batch_size": [16, 32, 64, 128],
    "warmup_steps": list(range(0, 50001, 5000)),
    "context_window": [4, 8, 16, 32, 64],
    "n_encoders": [1, 2, 4, 8],
    "n_heads": [1, 2, 4, 8],
    "d_model": [32, 64, 128, 256],
    "d_ff": [256, 512, 1024, 2048],
    "ff_dropout": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
    "attn_dropout": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
    "n_lstm_layers": [1, 2, 4],
    "d_lstm_hidden": [128, 256, 512],
    "norm_type": ["batch", "layer", "power"],
    "norm_placement": ["pre", "post"],
}


def bce_loss(p: T.Tensor, y) -> T.Tensor:
    """Mean binary cross-entropy of probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(y, dtype=float)
    p = T.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return -T.mean(T.log(p) * y + T.log(1.0 - p) * (1.0 - y))


def lr_at_step(step: int, max_lr: float, warmup: int) -> float:
    if warmup > 0 and step < warmup:
        return max_lr * step / warmup
    return max_lr


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


class Adam:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EarlyStopping:
    """Tracks validation loss; ``update`` returns True once patience is exhausted."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_index = -1
        self.evaluations = 0
        self.bad = 0

    def update(self, loss: float) -> bool:
        self.evaluations += 1
        if loss < self.best:
            self.best, self.best_index, self.bad = loss, self.evaluations - 1, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    valid_loss: float
    valid_acc: float


@dataclass
class RunRecord:
    config: ModelConfig
    spec: TrainSpec
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    model: StstModel | None = None
    valid_accuracy: float = float("nan")
    valid_mcc: float = float("nan")
    wall_time: float = 0.0
    stopped_early: bool = False
    error: str | None = None

    def metrics_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,valid_loss,valid_acc"]
        for m in self.history:
            lines.append(f"{m.epoch},{m.train_loss!r},{m.train_acc!r},{m.valid_loss!r},{m.valid_acc!r}")
        return "\n".join(lines) + "\n"


def _arrays(data):
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return stack(data)


def _evaluate_loss(model: StstModel, x, y, batch_size: int = 256) -> tuple[float, float, np.ndarray]:
    probs = model.predict_proba(x, batch_size)
    p = np.clip(probs, P_CLAMP, 1.0 - P_CLAMP)
    loss = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    acc = float(np.mean((probs > 0.5) == (y > 0.5)))
    return loss, acc, probs


def fit(train, valid, config: ModelConfig, spec: TrainSpec, model: StstModel | None = None,
        on_epoch=None) -> RunRecord:
    """Mini-batch training; keeps the parameters of the epoch with lowest validation loss."""
    from .evaluation import confusion_counts, mcc

    spec.validate()
    xt, yt = _arrays(train)
    xv, yv = _arrays(valid)
    if len(xt) == 0 or len(xv) == 0:
        raise ValueError("training and validation sets must be nonempty")
    started = time.perf_counter()
    model = model or StstModel(config, seed=spec.seed)
    params = model.parameters()
    opt = Adam(params)
    shuffle_rng = np.random.default_rng(spec.seed)
    dropout_rng = np.random.default_rng([spec.seed, 1])
    stopper = EarlyStopping(spec.early_stop_patience)
    record = RunRecord(config, spec)
    best_model = model.copy()
    step = 0
    for epoch in range(1, spec.max_epochs + 1):
        order = shuffle_rng.permutation(len(xt))
        loss_sum = correct = 0.0
        for start in range(0, len(order), spec.batch_size):
            idx = order[start:start + spec.batch_size]
            opt.zero_grad()
            probs = model.forward(xt[idx], training=True, rng=dropout_rng)
            loss = bce_loss(probs, yt[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, step {step}")
            T.backward(loss)
            clip_grad_norm(params, spec.grad_clip)
            opt.step(lr_at_step(step, spec.learning_rate, spec.warmup_steps))
            step += 1
            loss_sum += loss.item() * len(idx)
            correct += float(np.sum((probs.data > 0.5) == (yt[idx] > 0.5)))
        v_loss, v_acc, _ = _evaluate_loss(model, xv, yv)
        if not np.isfinite(v_loss):
            raise TrainingDivergence(f"non-finite validation loss after epoch {epoch}, step {step}")
        metrics = EpochMetrics(epoch, loss_sum / len(xt), correct / len(xt), v_loss, v_acc)
        record.history.append(metrics)
        log.debug("epoch %d train_loss %.5f valid_loss %.5f valid_acc %.4f", epoch,
                  metrics.train_loss, v_loss, v_acc)
        if on_epoch is not None:
            on_epoch(metrics)
        stop = stopper.update(v_loss)
        if stopper.best_index == len(record.history) - 1:
            best_model = model.copy()
            record.best_epoch = epoch
        if stop:
            record.stopped_early = True
            break
    record.model = best_model
    _, record.valid_accuracy, probs = _evaluate_loss(best_model, xv, yv)
    record.valid_mcc = mcc(confusion_counts(yv, probs > 0.5))
    record.wall_time = time.perf_counter() - started
    return record


# ---------------------------------------------------------------------------
# grid search

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
SPEC_KEYS = {f.name for f in fields(TrainSpec)} - {"grid"}


def grid_size(space: dict) -> int:
    return int(np.prod([len(v) for v in space.values()])) if space else 0


def grid_point(space: dict, index: int) -> dict:
    """The ``index``-th combination in row-major order over the keys of ``space``."""
    point = {}
    for key in reversed(list(space)):
        values = space[key]
        index, r = divmod(index, len(values))
        point[key] = values[r]
    return {k: point[k] for k in space}


def grid_points(space: dict, budget: int | None = None, seed: int = 0) -> list[tuple[int, dict]]:
    if not space:
        raise ValueError("empty search space")
    unknown = set(space) - MODEL_KEYS - SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown grid parameters: {sorted(unknown)}")
    total = grid_size(space)
    if budget is None or budget >= total:
        indices = range(total)
    else:
        indices = sorted(random.Random(seed).sample(range(total), budget))
    return [(i, grid_point(space, i)) for i in indices]


def apply_point(point: dict, config: ModelConfig, spec: TrainSpec) -> tuple[ModelConfig, TrainSpec]:
    return (replace(config, **{k: v for k, v in point.items() if k in MODEL_KEYS}),
            replace(spec, **{k: v for k, v in point.items() if k in SPEC_KEYS}))


def _run_trial(args):
    index, point, train, valid, config, spec = args
    cfg, sp = apply_point(point, config, spec)
    try:
        record = fit(train, valid, cfg.validate(), sp)
    except Exception as exc:  # a failed trial is recorded, not fatal
        record = RunRecord(cfg, sp, error=f"{type(exc).__name__}: {exc}")
    return index, point, record


@dataclass
class Trial:
    index: int
    point: dict
    record: RunRecord


def rank_trials(trials: list[Trial]) -> list[Trial]:
    def key(t: Trial):
        failed = t.record.error is not None
        acc = -np.inf if failed else t.record.valid_accuracy
        m = -np.inf if failed or np.isnan(t.record.valid_mcc) else t.record.valid_mcc
        return (failed, -acc, -m, t.index)

    return sorted(trials, key=key)


def grid_search(space: dict, train, valid, config: ModelConfig, spec: TrainSpec,
                budget: int | None = None, jobs: int = 1) -> list[Trial]:
    """Train every (or a seeded subsample of) grid point; best validation accuracy first."""
    train, valid = _arrays(train), _arrays(valid)
    jobs_args = [(i, p, train, valid, config, spec) for i, p in grid_points(space, budget, spec.seed)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_trial, jobs_args))
    else:
        results = [_run_trial(a) for a in jobs_args]
    return rank_trials([Trial(i, p, r) for i, p, r in results])


def trials_csv(trials: list[Trial]) -> str:
    keys = sorted({k for t in trials for k in t.point})
    lines = [",".join(["rank", "trial", *keys, "valid_accuracy", "valid_mcc", "best_epoch", "error"])]
    for rank, t in enumerate(trials, start=1):
        r = t.record
        vals = [str(t.point.get(k, "")) for k in keys]
        err = (r.error or "").replace(",", ";").replace("\n", " ")
        lines.append(",".join([str(rank), str(t.index), *vals, repr(r.valid_accuracy), repr(r.valid_mcc),
                               str(r.best_epoch), err]))
    return "\n".join(lines) + "\n"
