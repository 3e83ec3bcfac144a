"""Variance trajectories across training sizes and their power-law summary."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajectoryPoint:
    n: int
    values: tuple
    valid_count: int

    @property
    def variance(self) -> float | None:
        return empirical_variance(self.values) if self.valid_count >= 2 else None


@dataclass(frozen=True)
class TrajectoryRecord:
    method: str
    dataset: str
    metric: str
    points: tuple = field(default_factory=tuple)

    def __post_init__(self):
        ns = [p.n for p in self.points]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError(f"training sizes must be strictly increasing, got {ns}")

    def usable(self):
        """(ns, variances) over cells with at least two valid runs."""
        ns, vs = [], []
        for p in self.points:
            if p.valid_count >= 2:
                ns.append(p.n)
                vs.append(empirical_variance(p.values))
        return np.array(ns, dtype=np.float64), np.array(vs, dtype=np.float64)

    def first_reps(self, r: int) -> "TrajectoryRecord":
        pts = tuple(TrajectoryPoint(p.n, tuple(p.values[:r]), min(r, len(p.values))) for p in self.points)
        return TrajectoryRecord(self.method, self.dataset, self.metric, pts)


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    C: float
    r2: float
    monotone: bool
    n_points: int
    excluded_ns: tuple = ()

    def predict(self, n):
        return self.C * np.asarray(n, dtype=np.float64) ** (-self.alpha)


def empirical_variance(values) -> float:
    """Unbiased sample variance (denominator R - 1)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("variance needs at least two values")
    return float(np.var(v, ddof=1))


def ols_line(x, y):
    """Slope, intercept and R^2 of y on x; R^2 is 1 when y is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = dx @ dx
    if sxx == 0:
        raise ValueError("regressor is constant")
    slope = (dx @ (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    ss_res = resid @ resid
    ss_tot = (y - ym) @ (y - ym)
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), float(r2)


def classify_monotone(ns, variances) -> bool:
    """Monotone iff the largest variance sits at the smallest training size."""
    ns = np.asarray(ns)
    v = np.asarray(variances, dtype=np.float64)
    if v.size < 2:
        raise ValueError("monotonicity needs at least two points")
    order = np.argsort(ns, kind="stable")
    # argmax returns the first maximum, i.e. ties go to the smallest n
    return int(np.argmax(v[order])) == 0


def fit_power_law(ns, variances) -> PowerLawFit:
    """OLS of log variance on log n; zero-variance cells are dropped."""
    ns = np.asarray(ns, dtype=np.float64)
    v = np.asarray(variances, dtype=np.float64)
    keep = v > 0
    excluded = tuple(int(n) for n in ns[~keep])
    if excluded:
        log.warning("excluding zero-variance cells at n=%s from the power-law fit", excluded)
    if v.size >= 2 and not keep.any():
        # every cell has zero spread: a flat law fits exactly
        return PowerLawFit(0.0, 0.0, 1.0, classify_monotone(ns, v), 0, excluded)
    if keep.sum() < 3:
        raise ValueError(f"power-law fit needs >= 3 positive variances, got {int(keep.sum())}")
    slope, intercept, r2 = ols_line(np.log(ns[keep]), np.log(v[keep]))
    return PowerLawFit(
        alpha=-slope,
        C=float(np.exp(intercept)),
        r2=r2,
        monotone=classify_monotone(ns, v),
        n_points=int(keep.sum()),
        excluded_ns=excluded,
    )


def fit_trajectory(record: TrajectoryRecord) -> PowerLawFit | None:
    ns, vs = record.usable()
    try:
        return fit_power_law(ns, vs)
    except ValueError as exc:
        log.warning("%s/%s/%s: no fit (%s)", record.dataset, record.method, record.metric, exc)
        return None
