"""Datasets: synthetic generator, CSV loading, remote fetch, splitting, scaling."""

from __future__ import annotations

import csv
import hashlib
import logging
import os
import shutil
import tempfile
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock

log = logging.getLogger(__name__)

SOURCES = ("synthetic", "local-file", "remote-url")


class DatasetError(ValueError):
    """Fatal problem with a dataset definition or its contents."""


class FetchError(DatasetError):
    """Network failure while downloading; safe to retry."""

    retriable = True


class ChecksumMismatch(DatasetError):
    def __init__(self, path, expected, actual):
        super().__init__(f"checksum mismatch for {path}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    source: str = "synthetic"
    url: str | None = None
    path: str | None = None
    checksum: str | None = None
    target_column: str | int = -1
    feature_columns: tuple = ()
    expected_rows: int | None = None
    count: int = 5000
    d: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise DatasetError(f"{self.name}: unknown source {self.source!r}")
        if self.source == "remote-url":
            if not self.url:
                raise DatasetError(f"{self.name}: remote-url source needs a url")
            if not self.checksum:
                raise DatasetError(f"{self.name}: remote-url source needs a sha256 checksum")
        if self.source == "local-file" and not self.path:
            raise DatasetError(f"{self.name}: local-file source needs a path")
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        if self.target_column in self.feature_columns:
            raise DatasetError(f"{self.name}: target column {self.target_column!r} is also a feature")


@dataclass(frozen=True)
class RegressionDataset:
    features: np.ndarray
    targets: np.ndarray
    name: str = "dataset"
    dropped_count: int = 0

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if X.ndim != 2:
            raise DatasetError(f"{self.name}: features must be a matrix, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise DatasetError(f"{self.name}: {X.shape[0]} feature rows but {y.shape[0]} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DatasetError(f"{self.name}: NaN or Inf in data")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.targets.shape[0]

    def subset(self, indices) -> "RegressionDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return RegressionDataset(self.features[idx], self.targets[idx], self.name)


# ---------------------------------------------------------------- synthetic

def synthetic_mean(X):
    return np.sin(3.0 * X[:, 0]) + X[:, 1] ** 2 + 0.5 * X[:, 2] * X[:, 3] + 0.3 * X[:, 5]


def synthetic_noise_std(X):
    return 0.1 + 0.4 / (1.0 + np.exp(-2.0 * X[:, 4]))


def generate_synthetic(seed: int, count: int = 5000, d: int = 8) -> RegressionDataset:
    """x ~ U[-1, 1]^d, y = f(x) + sigma(x) * eps with noise rising in x5."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if d < 6:
        raise ValueError("the synthetic generator uses the first six features; d must be >= 6")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(count, d))
    eps = rng.standard_normal(count)
    y = synthetic_mean(X) + synthetic_noise_std(X) * eps
    return RegressionDataset(X, y, "synthetic")


# ---------------------------------------------------------------- files

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def cache_path(spec: DatasetSpec, cache_dir) -> Path:
    return Path(cache_dir) / spec.name / f"{spec.checksum}.csv"


def fetch_dataset(spec: DatasetSpec, cache_dir, timeout: float = 60.0) -> Path:
    """Download ``spec.url`` into the cache and verify its SHA-256.

    A cached file with the right digest is returned without touching the
    network.  A digest mismatch deletes the file and raises.
    """
    if spec.source != "remote-url":
        raise DatasetError(f"{spec.name}: fetch_dataset needs a remote-url source, got {spec.source}")
    target = cache_path(spec, cache_dir)
    target.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(target) + ".lock"):
        if target.exists():
            actual = sha256_file(target)
            if actual == spec.checksum:
                return target
            target.unlink()
            raise ChecksumMismatch(target, spec.checksum, actual)
        fd, tmp = tempfile.mkstemp(dir=target.parent, suffix=".part")
        try:
            with os.fdopen(fd, "wb") as out:
                try:
                    with urllib.request.urlopen(spec.url, timeout=timeout) as resp:
                        shutil.copyfileobj(resp, out)
                except (urllib.error.URLError, OSError) as exc:
                    raise FetchError(f"{spec.name}: download of {spec.url} failed: {exc}") from exc
            actual = sha256_file(tmp)
            if actual != spec.checksum:
                raise ChecksumMismatch(spec.url, spec.checksum, actual)
            os.replace(tmp, target)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
    log.info("fetched %s -> %s", spec.name, target)
    return target


def _resolve_column(header, col, path):
    if isinstance(col, int):
        if not -len(header) <= col < len(header):
            raise DatasetError(f"{path}: column index {col} out of range")
        return col % len(header)
    try:
        return header.index(col)
    except ValueError:
        raise DatasetError(f"{path}: missing column {col!r}") from None


def load_csv(path, spec: DatasetSpec) -> RegressionDataset:
    """Read selected numeric columns; rows with unparsable values are dropped."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        t_idx = _resolve_column(header, spec.target_column, path)
        if spec.feature_columns:
            f_idx = [_resolve_column(header, c, path) for c in spec.feature_columns]
        else:
            f_idx = [i for i in range(len(header)) if i != t_idx]
        if t_idx in f_idx:
            raise DatasetError(f"{path}: target column is also selected as a feature")
        cols = f_idx + [t_idx]
        rows = []
        dropped = 0
        for line in reader:
            if not line:
                continue
            try:
                values = [float(line[i]) for i in cols]
            except (ValueError, IndexError):
                dropped += 1
                continue
            if not all(np.isfinite(values)):
                dropped += 1
                continue
            rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: no usable rows ({dropped} dropped)")
    arr = np.array(rows, dtype=np.float64)
    if spec.expected_rows is not None and arr.shape[0] != spec.expected_rows:
        raise DatasetError(f"{path}: expected {spec.expected_rows} rows, loaded {arr.shape[0]}")
    if dropped:
        log.warning("%s: dropped %d rows with missing or non-numeric values", spec.name, dropped)
    return RegressionDataset(arr[:, :-1], arr[:, -1], spec.name, dropped)


def load_dataset(spec: DatasetSpec, cache_dir=None) -> RegressionDataset:
    if spec.source == "synthetic":
        ds = generate_synthetic(spec.seed, spec.count, spec.d)
        return RegressionDataset(ds.features, ds.targets, spec.name)
    if spec.source == "local-file":
        if spec.checksum:
            actual = sha256_file(spec.path)
            if actual != spec.checksum:
                raise ChecksumMismatch(spec.path, spec.checksum, actual)
        return load_csv(spec.path, spec)
    if cache_dir is None:
        raise DatasetError(f"{spec.name}: remote dataset needs a cache directory")
    return load_csv(fetch_dataset(spec, cache_dir), spec)


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class SplitResult:
    pool_indices: np.ndarray
    test_indices: np.ndarray


def split_test(dataset: RegressionDataset, frac: float = 0.3, seed: int = 0) -> SplitResult:
    if not 0.0 <= frac < 1.0:
        raise ValueError(f"test fraction must be in [0, 1), got {frac}")
    rows = len(dataset)
    n_test = int(round(frac * rows))
    perm = np.random.default_rng(seed).permutation(rows)
    return SplitResult(np.sort(perm[n_test:]), np.sort(perm[:n_test]))


def draw_training_set(pool, n: int, seed: int) -> np.ndarray:
    pool = np.asarray(pool, dtype=np.int64)
    if n > pool.size:
        raise ValueError(f"training size n={n} exceeds pool size {pool.size}")
    if n < 0:
        raise ValueError("training size must be non-negative")
    return np.random.default_rng(seed).choice(pool, size=n, replace=False)


@dataclass(frozen=True)
class Standardization:
    feature_means: np.ndarray
    feature_stds: np.ndarray
    target_mean: float
    target_std: float

    def apply(self, dataset: RegressionDataset) -> RegressionDataset:
        return RegressionDataset(
            (dataset.features - self.feature_means) / self.feature_stds,
            (dataset.targets - self.target_mean) / self.target_std,
            dataset.name,
        )

    def invert(self, dataset: RegressionDataset) -> RegressionDataset:
        return RegressionDataset(
            dataset.features * self.feature_stds + self.feature_means,
            dataset.targets * self.target_std + self.target_mean,
            dataset.name,
        )


def _degenerate(s, mean):
    # std of a constant column can come out as a few ulps rather than 0
    return np.asarray(s) <= 1e-12 * np.maximum(np.abs(mean), 1.0)


def fit_standardization(dataset: RegressionDataset, train_indices) -> Standardization:
    """Population (1/n) moments of the training rows.

    Constant columns get std 1 and are centred on their value, so they
    standardize to exactly zero.
    """
    idx = np.asarray(train_indices, dtype=np.int64)
    if idx.size < 2:
        raise ValueError("standardization needs at least two training rows")
    X = dataset.features[idx]
    y = dataset.targets[idx]
    x_mean, x_std = X.mean(axis=0), X.std(axis=0)
    flat = _degenerate(x_std, x_mean)
    x_mean = np.where(flat, X[0], x_mean)
    x_std = np.where(flat, 1.0, x_std)
    y_mean, y_std = float(y.mean()), float(y.std())
    if _degenerate(y_std, y_mean):
        y_mean, y_std = float(y[0]), 1.0
    return Standardization(x_mean, x_std, y_mean, y_std)


def apply_standardization(dataset: RegressionDataset, std: Standardization) -> RegressionDataset:
    return std.apply(dataset)
