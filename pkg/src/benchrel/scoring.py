"""Proper scoring rules and interval metrics for uniform Gaussian mixtures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

SQRT_PI = np.sqrt(np.pi)
LOG_2PI = np.log(2.0 * np.pi)
DENSITY_FLOOR = 1e-300

METRIC_NAMES = ("CRPS", "NLL", "INTERVAL_SCORE", "PICP")


@dataclass(frozen=True)
class MetricKind:
    name: str = "CRPS"
    interval_level: float = 0.90

    def __post_init__(self):
        if self.name not in METRIC_NAMES:
            raise ValueError(f"unknown metric {self.name!r}; choose from {METRIC_NAMES}")
        if not 0.0 < self.interval_level < 1.0:
            raise ValueError(f"interval_level must be in (0, 1), got {self.interval_level}")

    @property
    def key(self) -> str:
        if self.name in ("INTERVAL_SCORE", "PICP"):
            return f"{self.name}@{self.interval_level:g}"
        return self.name

    @classmethod
    def parse(cls, key: str) -> "MetricKind":
        if "@" in key:
            name, level = key.split("@")
            return cls(name, float(level))
        return cls(key)


@dataclass(frozen=True)
class PredictiveDistribution:
    """Uniform-weight Gaussian mixture.

    ``mu`` and ``var`` have shape ``(..., K)``; leading axes index test
    inputs, so one object can hold the predictive for a whole test set.
    """

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mu.ndim == 0:
            mu, var = mu[None], var[None]
        if mu.shape != var.shape:
            raise ValueError(f"mu shape {mu.shape} != var shape {var.shape}")
        if mu.shape[-1] < 1:
            raise ValueError("mixture needs at least one component")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("non-finite mixture parameters")
        if np.any(var <= 0):
            raise ValueError("mixture variances must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)

    @property
    def K(self) -> int:
        return self.mu.shape[-1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.K, 1.0 / self.K)

    def __len__(self):
        return self.mu.shape[0] if self.mu.ndim > 1 else 1

    def __getitem__(self, idx):
        return PredictiveDistribution(self.mu[idx], self.var[idx])

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        return ndtr((x[..., None] - self.mu) / np.sqrt(self.var)).mean(axis=-1)


@dataclass(frozen=True)
class ScoreSummary:
    mean: float
    per_example: np.ndarray | None = None


def _phi(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of N(mu, sigma^2) at observation y."""
    mu, sigma, y = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (mu, sigma, y)))
    if np.any(sigma <= 0):
        raise ValueError("crps_gaussian requires sigma > 0")
    z = (y - mu) / sigma
    out = sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * _phi(z) - 1.0 / SQRT_PI)
    return out[()] if out.ndim == 0 else out


def _a_term(m, s):
    z = m / s
    return m * (2.0 * ndtr(z) - 1.0) + 2.0 * s * _phi(z)


def crps_mixture(dist: PredictiveDistribution, y, chunk: int = 512):
    """Closed-form CRPS of a uniform Gaussian mixture (O(K^2) per input)."""
    y = np.asarray(y, dtype=np.float64)
    mu, var = dist.mu, dist.var
    if mu.ndim == 1:
        return float(_crps_mixture_rows(mu[None], var[None], y.reshape(1))[0])
    return _crps_mixture_rows(mu, var, np.broadcast_to(y, mu.shape[:-1]), chunk)


def _crps_mixture_rows(mu, var, y, chunk=512):
    N, K = mu.shape
    out = np.empty(N)
    for lo in range(0, N, chunk):
        m = mu[lo:lo + chunk]
        v = var[lo:lo + chunk]
        first = _a_term(y[lo:lo + chunk, None] - m, np.sqrt(v)).mean(axis=1)
        dm = m[:, :, None] - m[:, None, :]
        sv = np.sqrt(v[:, :, None] + v[:, None, :])
        second = _a_term(dm, sv).mean(axis=(1, 2))
        out[lo:lo + chunk] = first - 0.5 * second
    return out


def nll_metric(dist: PredictiveDistribution, y, return_flags: bool = False):
    """Full-density negative log-likelihood of the mixture.

    Densities below 1e-300 are floored before the log; with
    ``return_flags`` the mask of floored examples is returned as well.
    """
    y = np.asarray(y, dtype=np.float64)
    r = y[..., None] - dist.mu
    dens = (np.exp(-0.5 * r * r / dist.var) / np.sqrt(2.0 * np.pi * dist.var)).mean(axis=-1)
    flags = dens < DENSITY_FLOOR
    score = -np.log(np.maximum(dens, DENSITY_FLOOR))
    if score.ndim == 0:
        score = float(score)
        flags = bool(flags)
    if return_flags:
        return score, flags
    return score


def mixture_quantile(dist: PredictiveDistribution, q, tol: float = 1e-10, max_iter: int = 200):
    """Quantile of the mixture CDF by vectorised bisection."""
    q = float(q)
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must be in (0, 1), got {q}")
    sd = np.sqrt(dist.var)
    lo = (dist.mu - 40.0 * sd).min(axis=-1)
    hi = (dist.mu + 40.0 * sd).max(axis=-1)
    for _ in range(max_iter):
        if np.all(hi - lo <= tol):
            return 0.5 * (lo + hi)
        mid = 0.5 * (lo + hi)
        below = dist.cdf(mid) < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    raise RuntimeError(f"mixture quantile bisection did not converge in {max_iter} iterations")


def central_interval(dist: PredictiveDistribution, level: float = 0.90):
    alpha = 1.0 - level
    return mixture_quantile(dist, alpha / 2.0), mixture_quantile(dist, 1.0 - alpha / 2.0)


def interval_score(dist: PredictiveDistribution, y, level: float = 0.90):
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    y = np.asarray(y, dtype=np.float64)
    alpha = 1.0 - level
    lo, hi = central_interval(dist, level)
    score = (hi - lo) + (2.0 / alpha) * (lo - y) * (y < lo) + (2.0 / alpha) * (y - hi) * (y > hi)
    return float(score) if np.ndim(score) == 0 else score


def interval_coverage(dist: PredictiveDistribution, y, level: float = 0.90):
    """Per-example 0/1 indicator that y lies in the central interval."""
    lo, hi = central_interval(dist, level)
    y = np.asarray(y, dtype=np.float64)
    return ((lo <= y) & (y <= hi)).astype(np.float64)


def picp(dists: PredictiveDistribution, ys, level: float = 0.90) -> float:
    return float(np.mean(interval_coverage(dists, ys, level)))


def per_example_scores(dists: PredictiveDistribution, ys, kind: MetricKind) -> np.ndarray:
    ys = np.asarray(ys, dtype=np.float64)
    if kind.name == "CRPS":
        return np.atleast_1d(crps_mixture(dists, ys))
    if kind.name == "NLL":
        return np.atleast_1d(nll_metric(dists, ys))
    if kind.name == "INTERVAL_SCORE":
        return np.atleast_1d(interval_score(dists, ys, kind.interval_level))
    return np.atleast_1d(interval_coverage(dists, ys, kind.interval_level))


def mean_metric(dists, ys, kind: MetricKind = MetricKind()) -> ScoreSummary:
    """Test-set mean of a per-example metric.

    ``dists`` is either one batched :class:`PredictiveDistribution` or a
    list of per-input distributions with equal component counts.
    """
    if isinstance(dists, (list, tuple)):
        if not dists:
            raise ValueError("mean_metric needs at least one example")
        dists = PredictiveDistribution(np.stack([d.mu for d in dists]), np.stack([d.var for d in dists]))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.float64))
    if dists.mu.ndim == 1:
        dists = PredictiveDistribution(dists.mu[None], dists.var[None])
    if len(dists) != len(ys):
        raise ValueError(f"{len(dists)} predictive distributions but {len(ys)} targets")
    per = per_example_scores(dists, ys, kind)
    return ScoreSummary(float(per.mean()), per)
