"""Grid execution with a resumable, append-only results store.

Store layout under ``output_dir``::

    manifest.json                 schema version, config hash, config, skipped cells
    results/<dataset>.jsonl       one RunResult per line, sorted by cell key
    results/<dataset>.timings.jsonl  wall times (kept apart so results stay bit-stable)
    runs.jsonl                    one line per invocation: worker count, start time, pending cells
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import (
    DatasetSpec,
    RegressionDataset,
    draw_training_set,
    fit_standardization,
    load_dataset,
    split_test,
)
from .methods import InvalidRun, MethodConfig, train_method
from .scoring import MetricKind, mean_metric
from .seeds import derive_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SHARED = "-"


class StoreMismatch(RuntimeError):
    """An existing store was produced by a different configuration."""


@dataclass(frozen=True)
class RunResult:
    dataset: str
    method: str
    n: int
    rep: int
    metrics: dict
    valid: bool
    seeds: dict
    error: str | None = None
    error_epoch: int | None = None
    wall_time: float = field(default=0.0, compare=False)

    @property
    def key(self):
        return (self.dataset, self.method, self.n, self.rep)

    def to_record(self) -> dict:
        return {
            "dataset": self.dataset,
            "method": self.method,
            "n": self.n,
            "rep": self.rep,
            "valid": self.valid,
            "metrics": self.metrics,
            "seeds": self.seeds,
            "error": self.error,
            "error_epoch": self.error_epoch,
        }

    @classmethod
    def from_record(cls, rec: dict, wall_time: float = 0.0) -> "RunResult":
        return cls(rec["dataset"], rec["method"], rec["n"], rec["rep"], rec["metrics"], rec["valid"],
                   rec["seeds"], rec.get("error"), rec.get("error_epoch"), wall_time)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class ResultsStore:
    """One JSON-lines file per dataset, rewritten atomically on every append."""

    def __init__(self, root):
        self.root = Path(root)
        self.results_dir = self.root / "results"
        self._records: dict = {}
        self._timings: dict = {}

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def open(self, config: ExperimentConfig, skipped=()):
        self.results_dir.mkdir(parents=True, exist_ok=True)
        h = config.hash()
        if self.manifest_path.exists():
            manifest = json.loads(self.manifest_path.read_text())
            if manifest.get("config_hash") != h:
                raise StoreMismatch(
                    f"store at {self.root} was written with config hash {manifest.get('config_hash')}, "
                    f"current config hashes to {h}"
                )
        else:
            manifest = {
                "schema_version": SCHEMA_VERSION,
                "config_hash": h,
                "config": config.result_defining(),
                "skipped_cells": [list(s) for s in skipped],
                "variance": {"trajectory": "unbiased (R-1)", "rel_rmse": "population (1/R)"},
            }
            _atomic_write(self.manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.load()
        return self

    def load(self):
        self._records.clear()
        self._timings.clear()
        if not self.results_dir.exists():
            return self
        for path in sorted(self.results_dir.glob("*.timings.jsonl")):
            for line in path.read_text().splitlines():
                rec = json.loads(line)
                self._timings[tuple(rec["key"])] = rec["wall_time"]
        for path in sorted(self.results_dir.glob("*.jsonl")):
            if path.name.endswith(".timings.jsonl"):
                continue
            for line in path.read_text().splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                r = RunResult.from_record(rec)
                self._records[r.key] = RunResult.from_record(rec, self._timings.get(r.key, 0.0))
        return self

    def __contains__(self, key):
        return key in self._records

    def __len__(self):
        return len(self._records)

    def results(self):
        return [self._records[k] for k in sorted(self._records)]

    def manifest(self) -> dict:
        return json.loads(self.manifest_path.read_text())

    def log_invocation(self, workers: int, pending: int):
        entry = {"started": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                 "workers": workers, "pending_cells": pending}
        with open(self.root / "runs.jsonl", "a", encoding="utf-8") as fh:
            fh.write(_dumps(entry) + "\n")

    def invocations(self) -> list:
        path = self.root / "runs.jsonl"
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]

    def _file(self, dataset: str, suffix=".jsonl") -> Path:
        return self.results_dir / f"{dataset}{suffix}"

    def append(self, result: RunResult):
        if result.key in self._records:
            raise ValueError(f"duplicate result for cell {result.key}")
        self._records[result.key] = result
        self._timings[result.key] = result.wall_time
        rows = [r for k, r in sorted(self._records.items()) if k[0] == result.dataset]
        _atomic_write(self._file(result.dataset), "".join(_dumps(r.to_record()) + "\n" for r in rows))
        times = [{"key": list(k), "wall_time": self._timings[k]}
                 for k in sorted(self._timings) if k[0] == result.dataset]
        _atomic_write(self._file(result.dataset, ".timings.jsonl"), "".join(_dumps(t) + "\n" for t in times))


# ---------------------------------------------------------------- cells

@dataclass(frozen=True)
class Cell:
    dataset: DatasetSpec
    method: MethodConfig
    n: int
    rep: int

    @property
    def key(self):
        return (self.dataset.name, self.method.name, self.n, self.rep)


_DATA_CACHE: dict = {}


def prepared_dataset(spec: DatasetSpec, base_seed: int, test_frac: float, cache_dir):
    """Dataset plus its fixed test split (memoised per process)."""
    key = (spec, base_seed, test_frac)
    if key not in _DATA_CACHE:
        ds = load_dataset(spec, cache_dir)
        split = split_test(ds, test_frac, derive_seed(base_seed, spec.name, SHARED, 0, 0, "draw"))
        _DATA_CACHE[key] = (ds, split)
    return _DATA_CACHE[key]


def cell_seeds(base_seed: int, cell: Cell) -> dict:
    ds, m = cell.dataset.name, cell.method.name
    return {
        # training draws are shared across methods (paired design)
        "draw": derive_seed(base_seed, ds, SHARED, cell.n, cell.rep, "draw"),
        "train": derive_seed(base_seed, ds, m, cell.n, cell.rep, "train"),
        "eval": derive_seed(base_seed, ds, m, cell.n, cell.rep, "eval"),
    }


def run_cell(cell: Cell, base_seed: int, test_frac: float, metrics, cache_dir) -> RunResult:
    start = time.perf_counter()
    seeds = cell_seeds(base_seed, cell)
    ds, split = prepared_dataset(cell.dataset, base_seed, test_frac, cache_dir)
    error, epoch, values, valid = None, None, {}, True
    try:
        train_idx = draw_training_set(split.pool_indices, cell.n, seeds["draw"])
        std = fit_standardization(ds, train_idx)
        train = std.apply(ds.subset(train_idx))
        test = std.apply(ds.subset(split.test_indices))
        model = train_method(train, cell.method, seeds["train"])
        pred = model.predict(test.features, seeds["eval"])
        for kind in metrics:
            score = mean_metric(pred, test.targets, kind).mean
            if not np.isfinite(score):
                raise InvalidRun(f"non-finite {kind.key}")
            values[kind.key] = score
    except InvalidRun as exc:
        valid, error, epoch, values = False, exc.reason, exc.epoch, {}
    except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        valid, error, values = False, f"{type(exc).__name__}: {exc}", {}
    return RunResult(cell.dataset.name, cell.method.name, cell.n, cell.rep, values, valid, seeds,
                     error, epoch, time.perf_counter() - start)


def plan_cells(config: ExperimentConfig, pool_sizes: dict):
    cells, skipped = [], []
    for spec in config.datasets:
        for n in config.sizes:
            if n > pool_sizes[spec.name]:
                skipped.append((spec.name, n, f"n exceeds pool size {pool_sizes[spec.name]}"))
                continue
            for method in config.methods:
                for rep in range(config.repetitions):
                    cells.append(Cell(spec, method, n, rep))
    return cells, skipped


def _worker_init():
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


@dataclass
class RunSummary:
    store: ResultsStore
    completed: int
    skipped_existing: int
    invalid: int
    skipped_cells: list

    @property
    def exit_code(self) -> int:
        return 2 if any(not r.valid for r in self.store.results()) else 0


def run_experiment(config: ExperimentConfig, progress=None, max_cells: int | None = None) -> RunSummary:
    """Execute every pending cell of the grid and persist the results.

    Completed cells found in an existing store are skipped, so an
    interrupted run can simply be restarted.  ``max_cells`` stops after that
    many new cells (used to simulate interruption).
    """
    pool_sizes = {}
    for spec in config.datasets:
        _, split = prepared_dataset(spec, config.base_seed, config.test_frac, config.cache_path)
        pool_sizes[spec.name] = split.pool_indices.size
    cells, skipped = plan_cells(config, pool_sizes)
    for name, n, why in skipped:
        log.warning("skipping %s n=%d: %s", name, n, why)
    store = ResultsStore(config.output_dir).open(config, skipped)
    pending = [c for c in cells if c.key not in store]
    existing = len(cells) - len(pending)
    if max_cells is not None:
        pending = pending[:max_cells]
    if pending:
        store.log_invocation(config.workers, len(pending))
    args = (config.base_seed, config.test_frac, config.metrics, config.cache_path)
    invalid = 0
    done = 0

    def record(result: RunResult):
        nonlocal invalid, done
        store.append(result)
        done += 1
        if not result.valid:
            invalid += 1
            log.warning("invalid run %s: %s (epoch %s)", result.key, result.error, result.error_epoch)
        if progress:
            progress(done, len(pending), result)

    if config.workers == 1 or len(pending) <= 1:
        _worker_init()
        for cell in pending:
            record(run_cell(cell, *args))
    else:
        with ProcessPoolExecutor(max_workers=config.workers, initializer=_worker_init) as ex:
            futures = [ex.submit(run_cell, cell, *args) for cell in pending]
            for fut in as_completed(futures):
                record(fut.result())
    return RunSummary(store, done, existing, invalid, skipped)
