"""Experiment configuration (TOML) and its canonical hash."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .data import DatasetSpec
from .methods import MethodConfig
from .scoring import MetricKind

DEFAULT_SIZES = (10, 20, 30, 50, 100, 200, 500, 1000, 2000)
CACHE_ENV = "BENCHREL_CACHE_DIR"


class ConfigError(ValueError):
    pass


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "benchrel"))


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple
    methods: tuple
    base_seed: int = 0
    sizes: tuple = DEFAULT_SIZES
    repetitions: int = 50
    metrics: tuple = (MetricKind("CRPS"),)
    test_frac: float = 0.3
    workers: int = 1
    output_dir: str = "runs"
    cache_dir: str | None = None

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.sizes)
        if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"sizes must be non-empty and strictly increasing, got {sizes}")
        if sizes[0] < 2:
            raise ConfigError("training sizes must be >= 2")
        object.__setattr__(self, "sizes", sizes)
        if self.repetitions < 2:
            raise ConfigError("repetitions must be >= 2")
        if not 0.0 <= self.test_frac < 1.0:
            raise ConfigError("test_frac must be in [0, 1)")
        if not self.datasets or not self.methods:
            raise ConfigError("config needs at least one dataset and one method")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError(f"method names must be unique, got {names}")
        dnames = [d.name for d in self.datasets]
        if len(set(dnames)) != len(dnames):
            raise ConfigError(f"dataset names must be unique, got {dnames}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else default_cache_dir()

    def result_defining(self) -> dict:
        """Everything that influences stored numbers (not workers or paths)."""
        return {
            "base_seed": self.base_seed,
            "sizes": list(self.sizes),
            "repetitions": self.repetitions,
            "metrics": [m.key for m in self.metrics],
            "test_frac": self.test_frac,
            "datasets": [_dataset_dict(d) for d in self.datasets],
            "methods": [m.to_dict() for m in self.methods],
        }

    def hash(self) -> str:
        blob = json.dumps(self.result_defining(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict:
        out = self.result_defining()
        out.update(workers=self.workers, output_dir=self.output_dir, cache_dir=self.cache_dir)
        return out


def _dataset_dict(spec: DatasetSpec) -> dict:
    d = asdict(spec)
    d["feature_columns"] = list(spec.feature_columns)
    # the local path does not change results; its checksum (if given) does
    d.pop("path", None)
    return d


def _dataset_from(d: dict, base: Path) -> DatasetSpec:
    d = dict(d)
    if "path" in d and d["path"] is not None:
        p = Path(os.path.expandvars(os.path.expanduser(d["path"])))
        d["path"] = str(p if p.is_absolute() else base / p)
    if "feature_columns" in d:
        d["feature_columns"] = tuple(d["feature_columns"])
    try:
        return DatasetSpec(**d)
    except TypeError as exc:
        raise ConfigError(f"bad dataset entry {d.get('name')!r}: {exc}") from None


def config_from_dict(raw: dict, base_dir=".") -> ExperimentConfig:
    base = Path(base_dir)
    raw = dict(raw)
    try:
        datasets = tuple(_dataset_from(d, base) for d in raw.pop("datasets", []))
        methods = tuple(MethodConfig(**m) for m in raw.pop("methods", []))
        metrics = tuple(MetricKind.parse(m) for m in raw.pop("metrics", ["CRPS"]))
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "sizes" in raw:
            raw["sizes"] = tuple(raw["sizes"])
        return ExperimentConfig(datasets=datasets, methods=methods, metrics=metrics, **raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = config_from_dict(raw, path.parent)
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        cfg = replace(cfg, output_dir=str(path.parent / out))
    return cfg

