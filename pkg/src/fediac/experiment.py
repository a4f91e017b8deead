"""Experiment configuration and the seeded (algorithm, seed) grid runner."""

import ast
import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from .fltrain import METRIC_COLUMNS, FederatedClassifier, make_task
from .fltrain.rounds import Algorithm
from .netsim import load_trace

WORKERS_ENV = "FEDIAC_MAX_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Every run setting with its default; see the README for the file grammar."""

    algorithms: list = field(default_factory=lambda: ["fediac"])
    seeds: list = field(default_factory=lambda: [1])
    n_clients: int = 20
    beta: float = 0.5
    rounds: int = 100
    time_budget: float | None = None
    target_accuracy: float | None = None
    dataset: str = "synthetic"
    n_classes: int = 10
    n_features: int = 32
    n_train: int = 6000
    n_test: int = 2000
    class_sep: float = 1.5
    data_seed: int = 0
    n_hidden: int = 256
    local_steps: int = 5
    batch_size: int = 32
    lr0: float = 0.1
    lr_decay: float = 40.0
    vote_frac: float = 0.05
    threshold: int | None = None
    bits: int | None = None
    candidates: list = field(default_factory=lambda: [1, 2, 3, 4])
    traffic_budget: float = 0.1
    max_bits: int = 32
    bootstrap: str = "client"
    switchml_bits: int = 12
    topk_frac: float = 0.05
    switch: str = "high"
    memory_budget: int = 1 << 20
    trace: str | None = None
    train_delay: float = 2.0
    download_multiplier: float = 5.0
    fixed_max_abs: bool = False

    def __post_init__(self):
        self.algorithms = [Algorithm(str(a).lower()).value for a in _as_list(self.algorithms)]
        self.seeds = [int(s) for s in _as_list(self.seeds)]
        self.candidates = [int(a) for a in _as_list(self.candidates)]
        if not self.algorithms or not self.seeds:
            raise ConfigError("algorithms and seeds must not be empty")

    def estimator_params(self, algorithm, seed):
        params = {
            name: getattr(self, name)
            for name in ("n_clients", "beta", "rounds", "time_budget", "n_hidden",
                         "local_steps", "batch_size", "lr0", "lr_decay", "vote_frac",
                         "threshold", "bits", "traffic_budget", "max_bits", "bootstrap", "switchml_bits",
                         "topk_frac", "switch", "memory_budget", "train_delay",
                         "download_multiplier", "fixed_max_abs")
        }
        params["candidates"] = tuple(self.candidates)
        params["algorithm"] = algorithm
        params["random_state"] = seed
        if self.trace is not None:
            params["upload_rates"] = load_trace(self.trace, self.n_clients)
        return params


# config keys accepted under a second spelling
_ALIASES = {"algorithm": "algorithms", "seed": "seeds"}


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _parse_value(text):
    low = text.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    if "," in text:
        return [_parse_value(part.strip()) for part in text.split(",")]
    return text


def parse_config(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Values are Python literals (numbers, ``[1, 2]``, quoted strings), the
    words ``true``/``false``/``none``, comma-separated lists or bare words.
    """
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(value)
    try:
        return ExperimentConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def load_dataset(config):
    """Return a :class:`~fediac.fltrain.Task` for ``config.dataset``.

    Only the synthetic task ships; other names are a hook for external loaders.
    """
    if config.dataset != "synthetic":
        raise NotImplementedError(f"dataset {config.dataset!r} has no loader; use 'synthetic'")
    return make_task(n_classes=config.n_classes, n_features=config.n_features,
                     n_train=config.n_train, n_test=config.n_test,
                     class_sep=config.class_sep, random_state=config.data_seed)


def csv_name(algorithm, seed):
    return f"{algorithm}_seed{seed}.csv"


def write_metrics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(row.as_tuple())


def run_cell(config, algorithm, seed, out_dir):
    """Train one (algorithm, seed) cell and write its metrics CSV."""
    task = load_dataset(config)
    clf = FederatedClassifier(**config.estimator_params(algorithm, seed))
    clf.fit(task.X_train, task.y_train, eval_set=(task.X_test, task.y_test))
    path = Path(out_dir) / csv_name(algorithm, seed)
    write_metrics(path, clf.history_)
    return path


def max_workers(n_cells):
    env = os.environ.get(WORKERS_ENV)
    if env is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if cap < 1:
            raise ConfigError(f"{WORKERS_ENV} must be at least 1")
    return max(1, min(cap, n_cells))


def run_experiment(config, out_dir):
    """Run every (algorithm, seed) cell; returns the CSV paths in grid order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [(a, s) for a in config.algorithms for s in config.seeds]
    workers = max_workers(len(cells))
    if workers == 1:
        return [run_cell(config, a, s, out_dir) for a, s in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, config, a, s, out_dir) for a, s in cells]
        return [f.result() for f in futures]
