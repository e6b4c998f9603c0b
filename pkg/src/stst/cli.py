"""Command-line pipeline: features, train, gridsearch, evaluate, ablate, backtest.

Every subcommand reads one plain-text run configuration of ``key = value``
lines (``#`` starts a comment) and accepts ``--set key=value`` overrides.
Search-space entries are written ``grid.<name> = v1, v2, ...``. Artifacts go
to ``output_dir``; each is first written with a ``.partial`` suffix and
renamed once complete.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import backtest as bt
from .dataset import ACL18_SPLIT, DataError, SplitSpec, build_windows, load_bars, split_by_date, stack
from .evaluation import METRICS_HEADER, ablation_suite, evaluate, metrics_csv, predictions_csv
from .indicators import MARKET_COLUMNS, TIME_COLUMNS, InsufficientHistoryError, assemble_feature_frame
from .model import ConfigError, ModelConfig, ShapeError, load_checkpoint, save_checkpoint
from .training import DEFAULT_GRID, TrainingDivergence, TrainSpec, fit, grid_search, trials_csv

log = logging.getLogger("stst")

COMMANDS = ("features", "train", "gridsearch", "evaluate", "ablate", "backtest")
PATH_KEYS = ("data_path", "benchmark_path", "predictions_path", "checkpoint_path")
DATE_KEYS = ("train_start", "train_end", "valid_start", "valid_end", "test_start", "test_end")
MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
SPEC_FIELDS = {f.name: f for f in fields(TrainSpec) if f.name not in ("seed", "grid")}


class UsageError(ValueError):
    pass


def _parse_value(raw: str, default):
    """Parse ``raw`` to the type of ``default``."""
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return None if raw.lower() == "none" else float(raw)
    return raw


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


@dataclass
class RunConfiguration:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    data_path: Path | None = None
    benchmark_path: Path | None = None
    predictions_path: Path | None = None
    checkpoint_path: Path | None = None
    split: SplitSpec = ACL18_SPLIT
    output_dir: Path = Path("out")  # resolved against the config file's directory
    seed: int = 0
    threshold: float = 0.5
    initial_cash: float = bt.INITIAL_CASH
    top_k: int = bt.TOP_K
    grid: dict = field(default_factory=dict)
    grid_budget: int | None = None
    jobs: int = 1

    # -- parsing ---------------------------------------------------------

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, str]], base_dir: Path = Path(".")) -> RunConfiguration:
        model, spec, top = {}, {}, {}
        dates = [d.isoformat() for rng in (ACL18_SPLIT.train, ACL18_SPLIT.valid, ACL18_SPLIT.test) for d in rng]
        grid = {}
        defaults = cls()
        for key, raw in pairs:
            try:
                if key.startswith("grid."):
                    name = key[5:]
                    default = _default_for(name)
                    grid[name] = [_parse_value(v.strip(), default) for v in raw.split(",") if v.strip()]
                    if not grid[name]:
                        raise ValueError("empty value list")
                elif key in MODEL_FIELDS:
                    model[key] = _parse_value(raw, MODEL_FIELDS[key].default)
                elif key in SPEC_FIELDS:
                    spec[key] = _parse_value(raw, SPEC_FIELDS[key].default)
                elif key in PATH_KEYS or key == "output_dir":
                    p = Path(raw).expanduser()
                    top[key] = p if p.is_absolute() else (base_dir / p).resolve()
                elif key in DATE_KEYS:
                    dates[DATE_KEYS.index(key)] = dt.date.fromisoformat(raw).isoformat()
                elif key in ("seed", "top_k", "jobs"):
                    top[key] = int(raw)
                elif key == "grid_budget":
                    top[key] = None if raw.lower() == "none" else int(raw)
                elif key in ("threshold", "initial_cash"):
                    top[key] = float(raw)
                else:
                    raise UsageError(f"unknown configuration key {key!r}")
            except UsageError:
                raise
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        top.setdefault("output_dir", (base_dir / "out").resolve())
        seed = top.pop("seed", defaults.seed)
        cfg = cls(model=ModelConfig(**model).validate(),
                  train=TrainSpec(seed=seed, **spec).validate(),
                  split=SplitSpec.from_dates(*dates), seed=seed, grid=grid, **top)
        if cfg.jobs < 1 or cfg.top_k < 1 or cfg.initial_cash <= 0:
            raise ConfigError("jobs and top_k must be at least 1 and initial_cash positive")
        if cfg.grid_budget is not None and cfg.grid_budget < 1:
            raise ConfigError("grid_budget must be at least 1")
        return cfg

    def to_text(self) -> str:
        """Normalized form: every key, sorted, one per line."""
        items = {}
        for name in MODEL_FIELDS:
            items[name] = getattr(self.model, name)
        for name in SPEC_FIELDS:
            items[name] = getattr(self.train, name)
        for name in PATH_KEYS:
            value = getattr(self, name)
            if value is not None:
                items[name] = value
        for name, d in zip(DATE_KEYS, (d for rng in (self.split.train, self.split.valid, self.split.test)
                                       for d in rng)):
            items[name] = d.isoformat()
        for name in ("output_dir", "seed", "threshold", "initial_cash", "top_k", "grid_budget", "jobs"):
            items[name] = getattr(self, name)
        for name, values in self.grid.items():
            items[f"grid.{name}"] = ", ".join(_format(v) for v in values)
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(items.items()))

    def require(self, *names: str) -> None:
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"{name} is not set")
            if not Path(value).exists():
                raise DataError(f"{name}: {value} does not exist")


def _default_for(name: str):
    if name in MODEL_FIELDS:
        return MODEL_FIELDS[name].default
    if name in SPEC_FIELDS:
        return SPEC_FIELDS[name].default
    raise UsageError(f"unknown grid parameter {name!r}")


def read_pairs(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key, value))
    return pairs


def load_configuration(path: str | Path, overrides: list[str] = ()) -> RunConfiguration:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"configuration file {path} not found")
    pairs = read_pairs(path.read_text(), str(path))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        pairs.append((key, value))
    return RunConfiguration.from_pairs(pairs, base_dir=path.parent.resolve())


# -- artifacts -----------------------------------------------------------

def write_artifact(path: Path, content: str | bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    if isinstance(content, str):
        partial.write_text(content)
    else:
        partial.write_bytes(content)
    os.replace(partial, path)
    return path


def _write_checkpoint(model, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    save_checkpoint(model, partial)
    os.replace(partial, path)
    return path


# -- data helpers --------------------------------------------------------

def load_frames(cfg: RunConfiguration):
    frames = []
    for ticker, bars in load_bars(cfg.data_path).items():
        try:
            frames.append(assemble_feature_frame(bars, ticker))
        except InsufficientHistoryError as exc:
            log.warning("skipping %s", exc)
    if not frames:
        raise DataError(f"{cfg.data_path}: no ticker has enough history")
    return frames


def load_splits(cfg: RunConfiguration, window: int):
    if cfg.model.n_features != len(MARKET_COLUMNS) or cfg.model.n_time != len(TIME_COLUMNS):
        raise ConfigError(f"market data provides n_time={len(TIME_COLUMNS)} and "
                          f"n_features={len(MARKET_COLUMNS)}")
    samples = [s for f in load_frames(cfg) for s in build_windows(f, window)]
    samples.sort(key=lambda s: (s.end_date, s.ticker))
    train, valid, test = split_by_date(samples, cfg.split)
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        if not part:
            raise DataError(f"the {name} date range contains no labeled windows")
    log.info("windows: train %d, valid %d, test %d", len(train), len(valid), len(test))
    return train, valid, test


def features_csv(frame) -> str:
    lines = [",".join(["date", *TIME_COLUMNS, *MARKET_COLUMNS, "valid"])]
    for i, d in enumerate(frame.dates):
        row = [repr(float(v)) for v in np.concatenate([frame.time_features[i], frame.market_features[i]])]
        lines.append(",".join([d.isoformat(), *row, str(int(i >= frame.valid_from))]))
    return "\n".join(lines) + "\n"


def price_table(cfg: RunConfiguration) -> dict[str, dict[dt.date, float]]:
    return {t: {b.date: b.adj_close for b in bars} for t, bars in load_bars(cfg.data_path).items()}


# -- subcommands ---------------------------------------------------------

def cmd_features(cfg: RunConfiguration) -> None:
    cfg.require("data_path")
    for frame in load_frames(cfg):
        write_artifact(cfg.output_dir / "features" / f"{frame.ticker}.csv", features_csv(frame))


def cmd_train(cfg: RunConfiguration) -> None:
    cfg.require("data_path")
    train, valid, _ = load_splits(cfg, cfg.model.context_window)
    record = fit(train, valid, cfg.model, cfg.train)
    write_artifact(cfg.output_dir / "metrics.csv", record.metrics_csv())
    _write_checkpoint(record.model, cfg.checkpoint_path or cfg.output_dir / "checkpoint.npz")
    log.info("best epoch %d, valid accuracy %.4f", record.best_epoch, record.valid_accuracy)


def cmd_gridsearch(cfg: RunConfiguration) -> None:
    cfg.require("data_path")
    space = cfg.grid or DEFAULT_GRID
    windows = sorted(set(space.get("context_window", [cfg.model.context_window])))
    if len(windows) > 1:
        raise ConfigError("gridsearch over context_window needs one dataset per window; "
                          "run one search per value")
    train, valid, _ = load_splits(cfg, windows[0])
    trials = grid_search(space, stack(train), stack(valid), cfg.model, cfg.train,
                         budget=cfg.grid_budget, jobs=cfg.jobs)
    write_artifact(cfg.output_dir / "trials.csv", trials_csv(trials))


def cmd_evaluate(cfg: RunConfiguration) -> None:
    cfg.checkpoint_path = cfg.checkpoint_path or cfg.output_dir / "checkpoint.npz"
    cfg.require("data_path", "checkpoint_path")
    model = load_checkpoint(cfg.checkpoint_path)
    cfg.model = model.config
    _, _, test = load_splits(cfg, model.config.context_window)
    result = evaluate(model, test, cfg.threshold)
    write_artifact(cfg.output_dir / "test_metrics.csv", metrics_csv([("STST", "test", result)]))
    write_artifact(cfg.output_dir / "predictions.csv", predictions_csv(test, result))


def cmd_ablate(cfg: RunConfiguration) -> None:
    cfg.require("data_path")
    train, valid, test = load_splits(cfg, cfg.model.context_window)
    rows, failures = [], []
    for r in ablation_suite(train, valid, test, cfg.model, cfg.train):
        if r.result is None:
            failures.append(f"{r.name}: {r.error}")
        else:
            rows.append((r.name, "test", r.result))
    text = metrics_csv(rows) if rows else METRICS_HEADER + "\n"
    write_artifact(cfg.output_dir / "ablation.csv", text)
    if failures:
        raise DataError("ablation variants failed: " + " | ".join(failures))


def cmd_backtest(cfg: RunConfiguration) -> None:
    cfg.predictions_path = cfg.predictions_path or cfg.output_dir / "predictions.csv"
    cfg.require("data_path", "predictions_path")
    if cfg.benchmark_path is not None:
        cfg.require("benchmark_path")
    predictions = bt.read_predictions_csv(cfg.predictions_path)
    state, summary = bt.run_simulation(predictions, price_table(cfg), cfg.initial_cash,
                                       cfg.threshold, cfg.top_k)
    benchmark = bt.read_benchmark_csv(cfg.benchmark_path) if cfg.benchmark_path else None
    write_artifact(cfg.output_dir / "equity.csv", bt.equity_csv(state.equity_curve, benchmark))
    write_artifact(cfg.output_dir / "summary.txt", summary.text())
    print(summary.text(), end="")


HANDLERS = {
    "features": cmd_features,
    "train": cmd_train,
    "gridsearch": cmd_gridsearch,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "backtest": cmd_backtest,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stst", description="Spatiotemporal transformer stock-movement pipeline")
    parser.add_argument("command", choices=COMMANDS, help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="run configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--jobs", type=int, default=None, help="parallel grid-search trials")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        overrides = list(args.overrides)
        if args.jobs is not None:
            overrides.append(f"jobs={args.jobs}")
        cfg = load_configuration(args.config, overrides)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        write_artifact(cfg.output_dir / "resolved-config", cfg.to_text())
        HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"stst: usage error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergence as exc:
        print(f"stst: training diverged: {exc}", file=sys.stderr)
        return 3
    except (DataError, ConfigError, ShapeError, bt.SimulationError, ValueError, OSError) as exc:
        print(f"stst: error: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
